//! DOTA annotation files and the one-line-per-detection interchange format.
//!
//! Annotation line: `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`.
//! Detection line: `image_id category score x1 y1 x2 y2 x3 y3 x4 y4`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, ImageDetection};
use crate::geometry::Polygon;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub quad: [f64; 8],
    pub category: String,
    pub difficult: bool,
}

impl AnnotationRecord {
    pub fn polygon(&self) -> Result<Polygon> {
        Polygon::from_quad(self.quad)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn is_header(line: &str) -> bool {
    let l = line.trim_start().to_ascii_lowercase();
    l.starts_with("imagesource") || l.starts_with("gsd")
}

fn parse_coords(tokens: &[&str], line: usize) -> Result<[f64; 8]> {
    let mut q = [0.0; 8];
    for (k, t) in tokens.iter().enumerate() {
        q[k] = t
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                parse_err(
                    line,
                    format!("coordinate {} is not a finite number: '{t}'", k + 1),
                )
            })?;
    }
    Ok(q)
}

/// Parses annotation text; blank lines and `imagesource`/`gsd` headers are skipped.
pub fn parse_dota_annotation(text: &str) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || is_header(raw) {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 10 {
            return Err(parse_err(
                line,
                format!("expected 10 tokens, found {}", tokens.len()),
            ));
        }
        let quad = parse_coords(&tokens[..8], line)?;
        let difficult = match tokens[9] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(
                    line,
                    format!("difficult flag must be 0 or 1, got '{other}'"),
                ))
            }
        };
        out.push(AnnotationRecord {
            quad,
            category: tokens[8].to_string(),
            difficult,
        });
    }
    Ok(out)
}

fn push_quad(s: &mut String, q: &[f64; 8]) {
    for (k, v) in q.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
}

/// Inverse of [`parse_dota_annotation`]; values are written in shortest round-trip form.
pub fn serialize_dota_annotation(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        push_quad(&mut s, &r.quad);
        let _ = writeln!(s, " {} {}", r.category, u8::from(r.difficult));
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != 11 {
            return Err(parse_err(
                line,
                format!("expected 11 tokens, found {}", tokens.len()),
            ));
        }
        let score: f64 = tokens[2]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| {
                parse_err(
                    line,
                    format!("score is not a finite number: '{}'", tokens[2]),
                )
            })?;
        let quad = parse_coords(&tokens[3..], line)?;
        let polygon = Polygon::from_quad(quad).map_err(|e| parse_err(line, e.to_string()))?;
        out.push(ImageDetection {
            image_id: tokens[0].to_string(),
            category: tokens[1].to_string(),
            score,
            polygon,
        });
    }
    Ok(out)
}

pub fn serialize_detections(dets: &[ImageDetection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = write!(s, "{} {} {} ", d.image_id, d.category, d.score);
        let q = d.polygon.to_quad().unwrap_or([0.0; 8]);
        push_quad(&mut s, &q);
        s.push('\n');
    }
    s
}

pub fn records_to_ground_truth(
    image_id: &str,
    records: &[AnnotationRecord],
) -> Result<Vec<GroundTruth>> {
    records
        .iter()
        .map(|r| {
            Ok(GroundTruth {
                image_id: image_id.to_string(),
                polygon: r.polygon()?,
                category: r.category.clone(),
                difficult: r.difficult,
            })
        })
        .collect()
}

/// Every `*.txt` in `dir`, read as the annotation file of the image named by its stem.
pub fn load_ground_truth_dir(dir: &Path) -> Result<Vec<GroundTruth>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text = std::fs::read_to_string(&p)?;
        let records = parse_dota_annotation(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?;
        out.extend(records_to_ground_truth(&stem, &records)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_record_and_skips_headers() {
        let text = "imagesource:GoogleEarth\ngsd:0.146\n\n10 10 20 10 20 20 10 20 plane 0\n1 2 3 4 5 6 7 8 small-vehicle 1\n";
        let r = parse_dota_annotation(text).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].quad, [10., 10., 20., 10., 20., 20., 10., 20.]);
        assert_eq!(r[0].category, "plane");
        assert!(!r[0].difficult && r[1].difficult);
        assert_eq!(r[0].polygon().unwrap().area(), 100.0);
    }

    #[test]
    fn errors_name_the_line() {
        let e = parse_dota_annotation("gsd:1\n10 10 20 10 20 20 10 20 plane\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_dota_annotation("10 10 20 x 20 20 10 20 plane 0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        assert!(parse_dota_annotation("10 10 20 10 20 20 10 20 plane 2\n").is_err());
        assert!(parse_dota_annotation("10 10 20 10 20 20 10 inf plane 0\n").is_err());
    }

    #[test]
    fn detection_lines() {
        let d = parse_detections("P0001 plane 0.9 10 10 20 10 20 20 10 20\n").unwrap();
        assert_eq!(d[0].image_id, "P0001");
        assert_eq!(d[0].score, 0.9);
        let again = parse_detections(&serialize_detections(&d)).unwrap();
        assert_eq!(again, d);
        assert!(parse_detections("P0001 plane 0.9 10 10 20 10 20 20 10\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(quads in prop::collection::vec(prop::array::uniform8(-1e4f64..1e4), 0..8), flags in prop::collection::vec(any::<bool>(), 8)) {
            let records: Vec<AnnotationRecord> = quads.iter().zip(&flags).enumerate().map(|(k, (q, &d))| AnnotationRecord {
                quad: *q,
                category: format!("cat{k}"),
                difficult: d,
            }).collect();
            prop_assert_eq!(parse_dota_annotation(&serialize_dota_annotation(&records)).unwrap(), records);
        }
    }
}
