//! Line-oriented model configuration.
//!
//! One layer per line, `kind key=value ...`; `#` starts a comment. Layers run
//! in sequence, each consuming the previous output. `asfp_fuse` treats the
//! running tensor as P2 and takes P3 as an auxiliary input of half its
//! resolution.
//!
//! | kind           | required keys       | optional keys (default)                               |
//! |----------------|---------------------|-------------------------------------------------------|
//! | `conv`         | `c_in c_out`        | `k` (3) `stride` (1) `groups` (1) `bias` (true) `act` (silu) |
//! | `wtconv`       | `c`                 | `k` (3) `levels` (2)                                  |
//! | `c2f_wtc`      | `c_in c_out`        | `n` (1) `k` (3) `levels` (2) `reduction` (0.5)        |
//! | `dynamic_conv` | `c_in c_out`        | `k` (3) `experts` (4)                                 |
//! | `ghost`        | `c_in c_out`        | `k` (1) `experts` (static primary when absent)        |
//! | `c2f_gdc`      | `c`                 | `n` (1) `k` (3) `experts` (4) `second` (false) `head` (max(M, ceil(c/8))) |
//! | `okm_csp`      | `c_in c_out`        | `e` (0.25) `large` (7) `bins` (4)                     |
//! | `spd_conv`     | `c_in c_out`        | `scale` (2)                                           |
//! | `asfp_fuse`    | `c2 c3 c_out`       | `spd_out` (c2) `e` (0.25) `large` (7) `bins` (4)      |

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::dynconv::{C2fGdcConfig, DynamicConv, GhostModule, DEFAULT_EXPERTS};
use crate::error::{config_err, Error, Result};
use crate::layer::{ConvLayer, Layer};
use crate::okm::{
    AsfpConfig, OkmCspConfig, SpdConv, DEFAULT_FSAM_BINS, DEFAULT_LARGE_KERNEL, DEFAULT_SPLIT,
};
use crate::ops::Activation;
use crate::wavelet::{C2fWtcConfig, WtConv};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        act: Activation,
    },
    WtConv {
        c: usize,
        k: usize,
        levels: usize,
    },
    C2fWtc(C2fWtcConfig),
    DynamicConv {
        c_in: usize,
        c_out: usize,
        k: usize,
        experts: usize,
    },
    Ghost {
        c_in: usize,
        c_out: usize,
        k: usize,
        experts: Option<usize>,
    },
    C2fGdc(C2fGdcConfig),
    OkmCsp(OkmCspConfig),
    SpdConv {
        c_in: usize,
        c_out: usize,
        scale: usize,
    },
    AsfpFuse(AsfpConfig),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::WtConv { .. } => "wtconv",
            LayerSpec::C2fWtc(_) => "c2f_wtc",
            LayerSpec::DynamicConv { .. } => "dynamic_conv",
            LayerSpec::Ghost { .. } => "ghost",
            LayerSpec::C2fGdc(_) => "c2f_gdc",
            LayerSpec::OkmCsp(_) => "okm_csp",
            LayerSpec::SpdConv { .. } => "spd_conv",
            LayerSpec::AsfpFuse(_) => "asfp_fuse",
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            LayerSpec::Conv { c_in, .. }
            | LayerSpec::DynamicConv { c_in, .. }
            | LayerSpec::Ghost { c_in, .. }
            | LayerSpec::SpdConv { c_in, .. } => *c_in,
            LayerSpec::WtConv { c, .. } => *c,
            LayerSpec::C2fWtc(c) => c.c_in,
            LayerSpec::C2fGdc(c) => c.channels,
            LayerSpec::OkmCsp(c) => c.c_in,
            LayerSpec::AsfpFuse(c) => c.c2,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            LayerSpec::Conv { c_out, .. }
            | LayerSpec::DynamicConv { c_out, .. }
            | LayerSpec::Ghost { c_out, .. }
            | LayerSpec::SpdConv { c_out, .. } => *c_out,
            LayerSpec::WtConv { c, .. } => *c,
            LayerSpec::C2fWtc(c) => c.c_out,
            LayerSpec::C2fGdc(c) => c.channels,
            LayerSpec::OkmCsp(c) => c.c_out,
            LayerSpec::AsfpFuse(c) => c.c_out,
        }
    }

    /// Instantiates the layer with random weights.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Box<dyn Layer>> {
        Ok(match *self {
            LayerSpec::Conv {
                c_in,
                c_out,
                k,
                stride,
                groups,
                bias,
                act,
            } => {
                let mut l = ConvLayer::init(rng, c_in, c_out, (k, k), groups, bias, act)?;
                l.spec = l.spec.with_stride(stride);
                Box::new(l)
            }
            LayerSpec::WtConv { c, k, levels } => Box::new(WtConv::init(rng, c, k, levels)?),
            LayerSpec::C2fWtc(cfg) => Box::new(cfg.build(rng)?),
            LayerSpec::DynamicConv {
                c_in,
                c_out,
                k,
                experts,
            } => Box::new(DynamicConv::init(
                rng,
                c_in,
                c_out,
                k,
                experts,
                Activation::Silu,
            )?),
            LayerSpec::Ghost {
                c_in,
                c_out,
                k,
                experts,
            } => Box::new(match experts {
                Some(m) => GhostModule::init_dynamic(rng, c_in, c_out, k, m)?,
                None => GhostModule::init(rng, c_in, c_out, k)?,
            }),
            LayerSpec::C2fGdc(cfg) => Box::new(cfg.build(rng)?),
            LayerSpec::OkmCsp(cfg) => Box::new(cfg.build(rng)?),
            LayerSpec::SpdConv { c_in, c_out, scale } => {
                Box::new(SpdConv::init(rng, c_in, c_out, scale)?)
            }
            LayerSpec::AsfpFuse(cfg) => Box::new(cfg.build(rng)?),
        })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind())?;
        match self {
            LayerSpec::Conv {
                c_in,
                c_out,
                k,
                stride,
                groups,
                bias,
                act,
            } => write!(
                f,
                " c_in={c_in} c_out={c_out} k={k} stride={stride} groups={groups} bias={bias} act={}",
                act.name()
            ),
            LayerSpec::WtConv { c, k, levels } => write!(f, " c={c} k={k} levels={levels}"),
            LayerSpec::C2fWtc(c) => write!(
                f,
                " c_in={} c_out={} n={} k={} levels={} reduction={}",
                c.c_in, c.c_out, c.n, c.kernel, c.levels, c.reduction
            ),
            LayerSpec::DynamicConv { c_in, c_out, k, experts } => {
                write!(f, " c_in={c_in} c_out={c_out} k={k} experts={experts}")
            }
            LayerSpec::Ghost { c_in, c_out, k, experts } => {
                write!(f, " c_in={c_in} c_out={c_out} k={k}")?;
                match experts {
                    Some(m) => write!(f, " experts={m}"),
                    None => Ok(()),
                }
            }
            LayerSpec::C2fGdc(c) => {
                write!(
                    f,
                    " c={} n={} k={} experts={} second={}",
                    c.channels, c.n, c.kernel, c.experts, c.second_dynamic
                )?;
                match c.head_hidden {
                    Some(h) => write!(f, " head={h}"),
                    None => Ok(()),
                }
            }
            LayerSpec::OkmCsp(c) => write!(
                f,
                " c_in={} c_out={} e={} large={} bins={}",
                c.c_in, c.c_out, c.e, c.large_kernel, c.bins
            ),
            LayerSpec::SpdConv { c_in, c_out, scale } => write!(f, " c_in={c_in} c_out={c_out} scale={scale}"),
            LayerSpec::AsfpFuse(c) => write!(
                f,
                " c2={} c3={} c_out={} spd_out={} e={} large={} bins={}",
                c.c2, c.c3, c.c_out, c.spd_out, c.e, c.large_kernel, c.bins
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
}

struct Fields<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            line: self.line,
            msg,
        }
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("invalid value '{v}' for '{key}'"))),
        }
    }

    fn req<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| self.err(format!("missing required key '{key}'")))
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(self.err(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

fn parse_layer(kind: &str, f: &mut Fields<'_>) -> Result<LayerSpec> {
    Ok(match kind {
        "conv" => LayerSpec::Conv {
            c_in: f.req("c_in")?,
            c_out: f.req("c_out")?,
            k: f.opt("k", 3)?,
            stride: f.opt("stride", 1)?,
            groups: f.opt("groups", 1)?,
            bias: f.opt("bias", true)?,
            act: f.opt("act", Activation::Silu)?,
        },
        "wtconv" => LayerSpec::WtConv {
            c: f.req("c")?,
            k: f.opt("k", 3)?,
            levels: f.opt("levels", 2)?,
        },
        "c2f_wtc" => {
            let mut c = C2fWtcConfig::new(f.req("c_in")?, f.req("c_out")?);
            c.n = f.opt("n", c.n)?;
            c.kernel = f.opt("k", c.kernel)?;
            c.levels = f.opt("levels", c.levels)?;
            c.reduction = f.opt("reduction", c.reduction)?;
            LayerSpec::C2fWtc(c)
        }
        "dynamic_conv" => LayerSpec::DynamicConv {
            c_in: f.req("c_in")?,
            c_out: f.req("c_out")?,
            k: f.opt("k", 3)?,
            experts: f.opt("experts", DEFAULT_EXPERTS)?,
        },
        "ghost" => LayerSpec::Ghost {
            c_in: f.req("c_in")?,
            c_out: f.req("c_out")?,
            k: f.opt("k", 1)?,
            experts: f.take("experts")?,
        },
        "c2f_gdc" => {
            let mut c = C2fGdcConfig::new(f.req("c")?);
            c.n = f.opt("n", c.n)?;
            c.kernel = f.opt("k", c.kernel)?;
            c.experts = f.opt("experts", c.experts)?;
            c.second_dynamic = f.opt("second", c.second_dynamic)?;
            c.head_hidden = f.take("head")?;
            LayerSpec::C2fGdc(c)
        }
        "okm_csp" => LayerSpec::OkmCsp(OkmCspConfig {
            c_in: f.req("c_in")?,
            c_out: f.req("c_out")?,
            e: f.opt("e", DEFAULT_SPLIT)?,
            large_kernel: f.opt("large", DEFAULT_LARGE_KERNEL)?,
            bins: f.opt("bins", DEFAULT_FSAM_BINS)?,
        }),
        "spd_conv" => LayerSpec::SpdConv {
            c_in: f.req("c_in")?,
            c_out: f.req("c_out")?,
            scale: f.opt("scale", 2)?,
        },
        "asfp_fuse" => {
            let mut c = AsfpConfig::new(f.req("c2")?, f.req("c3")?, f.req("c_out")?);
            c.spd_out = f.opt("spd_out", c.c2)?;
            c.e = f.opt("e", c.e)?;
            c.large_kernel = f.opt("large", c.large_kernel)?;
            c.bins = f.opt("bins", c.bins)?;
            LayerSpec::AsfpFuse(c)
        }
        other => return Err(f.err(format!("unknown layer kind '{other}'"))),
    })
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let kind = tokens.next().expect("non-empty line");
            let mut fields = Fields {
                line: i + 1,
                map: BTreeMap::new(),
            };
            for t in tokens {
                let (k, v) = t
                    .split_once('=')
                    .ok_or_else(|| fields.err(format!("expected key=value, got '{t}'")))?;
                if fields.map.insert(k, v).is_some() {
                    return Err(fields.err(format!("duplicate key '{k}'")));
                }
            }
            let spec = parse_layer(kind, &mut fields)?;
            fields.finish()?;
            layers.push(spec);
        }
        Ok(Self { layers })
    }

    pub fn to_text(&self) -> String {
        self.layers.iter().map(|l| format!("{l}\n")).collect()
    }

    /// Checks that each layer's input width equals the previous output width.
    pub fn validate_chain(&self) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(config_err!(
                    "layer {} ({}) expects {} channels but layer {} ({}) produces {}",
                    i + 2,
                    pair[1].kind(),
                    pair[1].in_channels(),
                    i + 1,
                    pair[0].kind(),
                    pair[0].out_channels()
                ));
            }
        }
        Ok(())
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Box<dyn Layer>>> {
        self.validate_chain()?;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.build(rng)
                    .map_err(|e| config_err!("layer {} ({}): {e}", i + 1, l.kind()))
            })
            .collect()
    }

    /// Total number of weight elements across freshly instantiated layers.
    pub fn enumerate_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        Ok(self
            .build(rng)?
            .iter()
            .map(|l| l.params().iter().map(|t| t.len()).sum::<usize>())
            .sum())
    }
}

impl std::str::FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
