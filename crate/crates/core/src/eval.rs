//! VOC-style evaluation of oriented detections: greedy matching,
//! precision/recall, 11-point and all-point AP, per-category tables and mAP.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{invalid, Result};
use crate::geometry::{rotated_iou, Polygon};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub polygon: Polygon,
    pub category: String,
    pub difficult: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub polygon: Polygon,
    pub category: String,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flag {
    Tp,
    Fp,
    /// Matched a difficult ground truth; excluded from precision and recall.
    Ignored,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApMetric {
    /// Mean of the interpolated precision at recall 0.0, 0.1, ..., 1.0.
    #[default]
    Voc07,
    /// Area under the monotone precision envelope.
    AllPoint,
}

impl ApMetric {
    pub fn label(self) -> &'static str {
        match self {
            ApMetric::Voc07 => "voc07 11-point",
            ApMetric::AllPoint => "all-point area",
        }
    }
}

impl std::str::FromStr for ApMetric {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc07" | "11point" | "voc07-11point" => Ok(ApMetric::Voc07),
            "area" | "all-point" | "allpoint" => Ok(ApMetric::AllPoint),
            other => Err(invalid!(
                "unknown AP metric '{other}' (expected voc07 or area)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub metric: ApMetric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            metric: ApMetric::Voc07,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(invalid!(
                "IoU threshold must lie in (0, 1), got {}",
                self.iou_thresh
            ));
        }
        Ok(())
    }
}

/// Indices of `dets` by descending score, ties by ascending index.
pub fn score_order(dets: &[ImageDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    order
}

/// Flags for `dets`, which must already be in score order. Each detection takes
/// the unmatched ground truth of the same image and category with the highest
/// IoU at or above `iou_thresh` (ties by lower index). A difficult match gives
/// `Ignored` and leaves that ground truth available.
pub fn match_detections(
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<Flag> {
    let mut by_image: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (k, g) in gts.iter().enumerate() {
        by_image
            .entry((&g.image_id, &g.category))
            .or_default()
            .push(k);
    }
    let mut matched = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let Some(cands) = by_image.get(&(d.image_id.as_str(), d.category.as_str())) else {
                return Flag::Fp;
            };
            let mut best: Option<(usize, f64)> = None;
            for &k in cands {
                if matched[k] {
                    continue;
                }
                let iou = rotated_iou(&d.polygon, &gts[k].polygon);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            match best {
                None => Flag::Fp,
                Some((k, _)) if gts[k].difficult => Flag::Ignored,
                Some((k, _)) => {
                    matched[k] = true;
                    Flag::Tp
                }
            }
        })
        .collect()
}

/// Non-negative rational with overflow-checked arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ratio {
    n: u128,
    d: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    fn new(n: u128, d: u128) -> Self {
        let g = gcd(n, d).max(1);
        Self { n: n / g, d: d / g }
    }

    fn add(self, o: Ratio) -> Option<Ratio> {
        let n = self
            .n
            .checked_mul(o.d)?
            .checked_add(o.n.checked_mul(self.d)?)?;
        Some(Ratio::new(n, self.d.checked_mul(o.d)?))
    }

    fn gt(self, o: Ratio) -> Option<bool> {
        Some(self.n.checked_mul(o.d)? > o.n.checked_mul(self.d)?)
    }

    /// Correctly rounded when both parts are exactly representable.
    fn to_f64(self) -> Option<f64> {
        const EXACT: u128 = 1 << 53;
        (self.n <= EXACT && self.d <= EXACT).then(|| self.n as f64 / self.d as f64)
    }
}

/// Cumulative `(tp, fp)` after each non-ignored detection.
fn cumulative(flags: &[Flag]) -> Vec<(u64, u64)> {
    let (mut tp, mut fp) = (0, 0);
    flags
        .iter()
        .filter(|f| **f != Flag::Ignored)
        .map(|f| {
            match f {
                Flag::Tp => tp += 1,
                _ => fp += 1,
            }
            (tp, fp)
        })
        .collect()
}

fn ap_exact(pts: &[(u64, u64)], n_gt: u64, metric: ApMetric) -> Option<f64> {
    let prec: Vec<Ratio> = pts
        .iter()
        .map(|&(t, f)| Ratio::new(t as u128, (t + f) as u128))
        .collect();
    let zero = Ratio::new(0, 1);
    let sum = match metric {
        ApMetric::AllPoint => {
            let mut env = zero;
            let mut sum = zero;
            for i in (0..pts.len()).rev() {
                if prec[i].gt(env)? {
                    env = prec[i];
                }
                let is_tp = pts[i].0 > if i == 0 { 0 } else { pts[i - 1].0 };
                if is_tp {
                    sum = sum.add(env)?;
                }
            }
            Ratio::new(sum.n, sum.d.checked_mul(n_gt as u128)?)
        }
        ApMetric::Voc07 => {
            let mut sum = zero;
            for t in 0..=10u64 {
                let mut best = zero;
                for (p, &(tp, _)) in prec.iter().zip(pts) {
                    if 10 * tp >= t * n_gt && p.gt(best)? {
                        best = *p;
                    }
                }
                sum = sum.add(best)?;
            }
            Ratio::new(sum.n, sum.d.checked_mul(11)?)
        }
    };
    sum.to_f64()
}

fn ap_float(pts: &[(u64, u64)], n_gt: u64, metric: ApMetric) -> f64 {
    let prec: Vec<f64> = pts
        .iter()
        .map(|&(t, f)| t as f64 / (t + f) as f64)
        .collect();
    match metric {
        ApMetric::AllPoint => {
            let mut env = 0.0f64;
            let mut sum = 0.0;
            for i in (0..pts.len()).rev() {
                env = env.max(prec[i]);
                if pts[i].0 > if i == 0 { 0 } else { pts[i - 1].0 } {
                    sum += env;
                }
            }
            sum / n_gt as f64
        }
        ApMetric::Voc07 => {
            (0..=10u64)
                .map(|t| {
                    prec.iter()
                        .zip(pts)
                        .filter(|(_, &(tp, _))| 10 * tp >= t * n_gt)
                        .map(|(p, _)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of a ranked flag list against `n_gt` positives; `None` when `n_gt = 0`.
///
/// Evaluated in exact rational arithmetic whenever it fits, so hand-derived
/// fractions are reproduced to the last bit.
pub fn average_precision(flags: &[Flag], n_gt: usize, metric: ApMetric) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let pts = cumulative(flags);
    if pts.is_empty() {
        return Some(0.0);
    }
    let n = n_gt as u64;
    Some(
        ap_exact(&pts, n, metric)
            .unwrap_or_else(|| ap_float(&pts, n, metric))
            .clamp(0.0, 1.0),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryResult {
    pub category: String,
    /// `None` when the category has no non-difficult ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub metric: ApMetric,
    pub iou_thresh: f64,
    /// Sorted by category name.
    pub categories: Vec<CategoryResult>,
    /// Mean AP over categories with at least one ground truth; 0 when there are none.
    pub map: f64,
}

impl EvalResult {
    pub fn ap(&self, category: &str) -> Option<f64> {
        self.categories
            .iter()
            .find(|c| c.category == category)
            .and_then(|c| c.ap)
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .categories
            .iter()
            .map(|c| c.category.len())
            .max()
            .unwrap_or(0)
            .max(8);
        writeln!(
            f,
            "metric: {}  iou>={}",
            self.metric.label(),
            self.iou_thresh
        )?;
        writeln!(
            f,
            "{:<width$} {:>6} {:>6} {:>6} {:>6} {:>8}",
            "category", "n_gt", "n_det", "tp", "fp", "AP(%)"
        )?;
        for c in &self.categories {
            let ap =
                c.ap.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
            writeln!(
                f,
                "{:<width$} {:>6} {:>6} {:>6} {:>6} {:>8}",
                c.category, c.n_gt, c.n_det, c.tp, c.fp, ap
            )?;
        }
        write!(f, "{:<width$} {:>35.2}", "mAP(%)", 100.0 * self.map)
    }
}

pub fn evaluate_dataset(
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    evaluate_dataset_with(Exec::default(), dets, gts, cfg)
}

/// Categories are evaluated independently, in parallel under `Exec::Parallel`.
pub fn evaluate_dataset_with(
    exec: Exec,
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(invalid!("detection score {} is not finite", d.score));
    }
    let names: Vec<&str> = gts
        .iter()
        .map(|g| g.category.as_str())
        .chain(dets.iter().map(|d| d.category.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let categories = par::map_indices(exec, names.len(), |k| {
        let name = names[k];
        let cat_gts: Vec<GroundTruth> =
            gts.iter().filter(|g| g.category == name).cloned().collect();
        let cat_dets: Vec<ImageDetection> = dets
            .iter()
            .filter(|d| d.category == name)
            .cloned()
            .collect();
        let ranked: Vec<ImageDetection> = score_order(&cat_dets)
            .into_iter()
            .map(|i| cat_dets[i].clone())
            .collect();
        let flags = match_detections(&ranked, &cat_gts, cfg.iou_thresh);
        let n_gt = cat_gts.iter().filter(|g| !g.difficult).count();
        CategoryResult {
            category: name.to_string(),
            ap: average_precision(&flags, n_gt, cfg.metric),
            n_gt,
            n_det: ranked.len(),
            tp: flags.iter().filter(|f| **f == Flag::Tp).count(),
            fp: flags.iter().filter(|f| **f == Flag::Fp).count(),
        }
    });

    let aps: Vec<f64> = categories.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(EvalResult {
        metric: cfg.metric,
        iou_thresh: cfg.iou_thresh,
        categories,
        map,
    })
}
