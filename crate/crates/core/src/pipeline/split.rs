//! Seeded 5:2:3 train/val/test partition.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// `(floor(n / 2), floor(n / 5), rest)`
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 5 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

/// Shuffles `ids` with a ChaCha8 stream seeded by `seed`, then cuts at the 5:2:3 sizes.
pub fn ratio_split(ids: &[String], seed: u64) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(invalid!("cannot split an empty id list"));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_sizes(ids.len());
    let test = shuffled.split_off(a + b);
    let val = shuffled.split_off(a);
    Ok(SplitManifest {
        seed,
        train: shuffled,
        val,
        test,
    })
}

impl SplitManifest {
    /// `# seed S` header, then one `subset id` line per id.
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed {}\n", self.seed);
        for (name, ids) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for id in ids {
                let _ = writeln!(s, "{name} {id}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = SplitManifest {
            seed: 0,
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix("# seed ") {
                m.seed = rest
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad seed '{rest}'")))?;
                continue;
            }
            let (subset, id) = line
                .split_once(' ')
                .ok_or_else(|| err("expected 'subset id'".into()))?;
            match subset {
                "train" => m.train.push(id.trim().to_string()),
                "val" => m.val.push(id.trim().to_string()),
                "test" => m.test.push(id.trim().to_string()),
                other => return Err(err(format!("unknown subset '{other}'"))),
            }
        }
        Ok(m)
    }
}
