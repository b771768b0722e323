//! Pooling, softmax, pointwise activations and the space-to-depth rearrangement.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Mean of every `(n, c)` plane, shaped `(N, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let s: f64 = x.plane(b, ch).iter().sum();
            out.set(b, ch, 0, 0, s * inv);
        }
    }
    out
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(invalid!("softmax input contains {x}"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Backward of softmax given its output `p`: `p * (g - <g, p>)`.
pub fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Silu,
    Sigmoid,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "none",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(invalid!("unknown activation '{other}'")),
        }
    }
}

/// Output channel `c * s^2 + dy * s + dx` at `(h, w)` takes input channel `c` at `(h * s + dy, w * s + dx)`.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(shape_err!(
            "space_to_depth: spatial dims {h}x{w} not divisible by scale {s}"
        ));
    }
    let (ho, wo) = (h / s, w / s);
    Ok(Tensor::from_fn([n, c * s * s, ho, wo], |[b, oc, y, xo]| {
        let (ci, r) = (oc / (s * s), oc % (s * s));
        let (dy, dx) = (r / s, r % s);
        x.at(b, ci, y * s + dy, xo * s + dx)
    }))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, s: usize) -> Result<Tensor> {
    let [n, cs, h, w] = x.dims();
    if s == 0 || cs % (s * s) != 0 {
        return Err(shape_err!(
            "depth_to_space: {cs} channels not divisible by {}",
            s * s
        ));
    }
    Ok(Tensor::from_fn(
        [n, cs / (s * s), h * s, w * s],
        |[b, c, y, xo]| {
            let oc = c * s * s + (y % s) * s + xo % s;
            x.at(b, oc, y / s, xo / s)
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pool_means() {
        let x = Tensor::new([1, 2, 2, 2], vec![1., 2., 3., 4., 7., 7., 7., 7.]).unwrap();
        let p = global_avg_pool(&x);
        assert_eq!(p.dims(), [1, 2, 1, 1]);
        assert_eq!(p.data(), &[2.5, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn space_to_depth_sublattices() {
        let x = Tensor::new([1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 4, 2, 2]);
        assert_eq!(y.plane(0, 0), &[1., 3., 9., 11.]);
        assert_eq!(y.plane(0, 1), &[2., 4., 10., 12.]);
        assert_eq!(y.plane(0, 2), &[5., 7., 13., 15.]);
        assert_eq!(y.plane(0, 3), &[6., 8., 14., 16.]);
        assert_eq!(depth_to_space(&y, 2).unwrap(), x);
        assert!(space_to_depth(&Tensor::zeros([1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [
            Activation::Silu,
            Activation::Sigmoid,
            Activation::Relu,
            Activation::Identity,
        ] {
            for &x in &[-3.1, -0.4, 0.7, 2.9] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn space_to_depth_round_trips(c in 1usize..3, hb in 1usize..4, wb in 1usize..4, s in 1usize..4, seed in 0u64..1000) {
            let mut k = seed;
            let x = Tensor::from_fn([1, c, hb * s, wb * s], |_| { k = k.wrapping_mul(6364136223846793005).wrapping_add(1); (k >> 11) as f64 });
            let y = space_to_depth(&x, s).unwrap();
            prop_assert_eq!(depth_to_space(&y, s).unwrap(), x.clone());
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
