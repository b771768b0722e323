//! Central-difference verification of vector-Jacobian products.
//!
//! The scalar probed is `L(args) = <u, f(args)>` for a seeded random `u`, so
//! one backward call yields the analytic gradient of every argument at once.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynconv::{C2fGdcConfig, DynamicConv, GhostModule};
use crate::error::{config_err, invalid, Result};
use crate::layer::{ConvLayer, Layer, LayerFn};
use crate::okm::{AsfpConfig, OkmCspConfig, SpdConv};
use crate::ops::Activation;
use crate::par::{self, Exec};
use crate::tensor::Tensor;
use crate::wavelet::{C2fWtcConfig, WtConv};

/// A function of several tensors with an exact vector-Jacobian product.
pub trait Differentiable: Sync {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Gradient of `<upstream, forward(inputs)>` with respect to each input.
    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Arguments longer than this are checked on a random subset of this many coordinates.
    pub max_coords_per_input: usize,
    /// Lower bound on the denominator of the relative error.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            max_coords_per_input: 64,
            rel_floor: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub coords: Vec<CoordCheck>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| {
            (a.analytic - a.numeric)
                .abs()
                .total_cmp(&(b.analytic - b.numeric).abs())
        })
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords  max_abs_err={:.3e}  max_rel_err={:.3e}  tol={:.1e}  {}",
            self.coords.len(),
            self.max_abs_err,
            self.max_rel_err,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn finite_diff_check(
    f: &dyn Differentiable,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    if cfg.step <= 0.0 || !cfg.step.is_finite() {
        return Err(invalid!(
            "finite-difference step must be positive, got {}",
            cfg.step
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let y = f.forward(inputs)?;
    y.ensure_finite("gradcheck forward")?;
    let upstream = Tensor::randn(y.dims(), &mut rng);
    let analytic = f.vjp(inputs, &upstream)?;
    if analytic.len() != inputs.len() {
        return Err(invalid!(
            "vjp returned {} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        ));
    }

    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        analytic[i].same_dims(t, "analytic gradient")?;
        if t.len() <= cfg.max_coords_per_input {
            coords.extend((0..t.len()).map(|j| (i, j)));
        } else {
            let mut idx = sample(&mut rng, t.len(), cfg.max_coords_per_input).into_vec();
            idx.sort_unstable();
            coords.extend(idx.into_iter().map(|j| (i, j)));
        }
    }

    let loss = |args: &[Tensor]| -> Result<f64> {
        let out = f.forward(args)?;
        out.ensure_finite("gradcheck forward")?;
        out.dot(&upstream)
    };
    let numeric: Vec<Result<f64>> = par::map_indices(Exec::Parallel, coords.len(), |k| {
        let (i, j) = coords[k];
        let mut args = inputs.to_vec();
        let x0 = args[i].data()[j];
        args[i].data_mut()[j] = x0 + cfg.step;
        let plus = loss(&args)?;
        args[i].data_mut()[j] = x0 - cfg.step;
        let minus = loss(&args)?;
        Ok((plus - minus) / (2.0 * cfg.step))
    });

    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        tol: cfg.tol,
        passed: true,
        coords: Vec::with_capacity(coords.len()),
    };
    for (&(i, j), num) in coords.iter().zip(numeric) {
        let num = num?;
        let ana = analytic[i].data()[j];
        report.max_abs_err = report.max_abs_err.max((ana - num).abs());
        report.max_rel_err = report
            .max_rel_err
            .max(relative_error(ana, num, cfg.rel_floor));
        report.coords.push(CoordCheck {
            input: i,
            index: j,
            analytic: ana,
            numeric: num,
        });
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}

/// Module names accepted by [`module_case`].
pub const MODULES: [&str; 9] = [
    "conv", "wtconv", "c2f-wtc", "dynconv", "ghost", "c2f-gdc", "okm-csp", "spd", "asfp",
];

/// A small randomly initialised instance of a named module with matching inputs.
pub fn module_case(name: &str, seed: u64) -> Result<(Box<dyn Layer>, Vec<Tensor>)> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let x = |rng: &mut ChaCha8Rng, dims: [usize; 4]| Tensor::randn(dims, rng);
    Ok(match name {
        "conv" => {
            let l = ConvLayer::init(rng, 3, 4, (3, 3), 1, true, Activation::Silu)?;
            (Box::new(l), vec![x(rng, [2, 3, 6, 6])])
        }
        "wtconv" => (
            Box::new(WtConv::init(rng, 2, 3, 2)?),
            vec![x(rng, [1, 2, 7, 8])],
        ),
        "c2f-wtc" => {
            let mut cfg = C2fWtcConfig::new(4, 4);
            cfg.levels = 1;
            (Box::new(cfg.build(rng)?), vec![x(rng, [1, 4, 6, 6])])
        }
        "dynconv" => {
            let l = DynamicConv::init(rng, 3, 4, 3, 3, Activation::Silu)?;
            (Box::new(l), vec![x(rng, [2, 3, 5, 5])])
        }
        "ghost" => (
            Box::new(GhostModule::init_dynamic(rng, 4, 4, 3, 2)?),
            vec![x(rng, [2, 4, 5, 5])],
        ),
        "c2f-gdc" => {
            let mut cfg = C2fGdcConfig::new(8).with_experts(2);
            cfg.second_dynamic = true;
            (Box::new(cfg.build(rng)?), vec![x(rng, [1, 8, 5, 5])])
        }
        "okm-csp" => (
            Box::new(OkmCspConfig::new(8, 6).build(rng)?),
            vec![x(rng, [1, 8, 6, 6])],
        ),
        "spd" => (
            Box::new(SpdConv::init(rng, 2, 4, 2)?),
            vec![x(rng, [1, 2, 6, 6])],
        ),
        "asfp" => {
            let cfg = AsfpConfig::new(4, 4, 4);
            (
                Box::new(cfg.build(rng)?),
                vec![x(rng, [1, 4, 8, 8]), x(rng, [1, 4, 4, 4])],
            )
        }
        other => {
            return Err(config_err!(
                "unknown module '{other}', expected one of {}",
                MODULES.join(", ")
            ))
        }
    })
}

/// Runs [`finite_diff_check`] on [`module_case`] over inputs and every parameter.
pub fn check_module(name: &str, seed: u64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let (layer, inputs) = module_case(name, seed)?;
    let f = LayerFn::new(layer.as_ref());
    let args = f.arguments(inputs);
    finite_diff_check(&f, &args, &GradCheckConfig { seed, ..*cfg })
}
