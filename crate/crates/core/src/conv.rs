//! Direct 2-D cross-correlation and its vector-Jacobian product.
//!
//! The loops here are the reference implementation. Output planes are
//! independent, so they are distributed over the rayon pool when the
//! `parallel` feature is on; each plane is summed in a fixed order.

use crate::error::{shape_err, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    /// Zero padding on each side, `(rows, cols)`.
    pub padding: (usize, usize),
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: (0, 0),
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    /// Unpadded, stride 1.
    pub fn valid() -> Self {
        Self::default()
    }

    /// Size-preserving padding for odd kernel sizes, `(k - 1) / 2` per side.
    pub fn same(kh: usize, kw: usize) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(shape_err!(
                "'same' padding needs odd kernel sizes, got {kh}x{kw}"
            ));
        }
        Ok(Self {
            padding: ((kh - 1) / 2, (kw - 1) / 2),
            ..Self::default()
        })
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Size-preserving padding for a dilated odd kernel.
    pub fn same_dilated(kh: usize, kw: usize, dilation: usize) -> Result<Self> {
        let base = Self::same(kh, kw)?;
        Ok(Self {
            padding: (base.padding.0 * dilation, base.padding.1 * dilation),
            dilation,
            ..base
        })
    }

    /// Output spatial size for an input of `(h, w)` and a kernel of `(kh, kw)`.
    pub fn output_hw(
        &self,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
    ) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(shape_err!(
                "stride, dilation and groups must be positive: {self:?}"
            ));
        }
        let axis = |len: usize, pad: usize, k: usize| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = len + 2 * pad;
            if padded < span {
                return Err(shape_err!(
                    "kernel extent {span} exceeds padded input {padded}"
                ));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((axis(h, self.padding.0, kh)?, axis(w, self.padding.1, kw)?))
    }
}

/// Checks channel/group compatibility and returns the output dims.
pub fn conv_output_dims(x: [usize; 4], k: [usize; 4], spec: &ConvSpec) -> Result<[usize; 4]> {
    let [n, cin, h, w] = x;
    let [cout, cin_g, kh, kw] = k;
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(shape_err!(
            "groups {g} must divide input channels {cin} and output channels {cout}"
        ));
    }
    if cin_g != cin / g {
        return Err(shape_err!(
            "kernel expects {cin_g} channels per group, input provides {}",
            cin / g
        ));
    }
    let (ho, wo) = spec.output_hw((h, w), (kh, kw))?;
    Ok([n, cout, ho, wo])
}

fn check_bias(bias: Option<&[f64]>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(shape_err!("bias has {} entries, expected {cout}", b.len()));
        }
        if let Some(v) = b.iter().find(|v| !v.is_finite()) {
            return Err(crate::error::invalid!("conv bias: non-finite value {v}"));
        }
    }
    Ok(())
}

/// Cross-correlation of `x` with `kernel` (`(C_out, C_in / groups, kh, kw)`).
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    conv2d_with(Exec::default(), x, kernel, bias, spec)
}

pub fn conv2d_with(
    exec: Exec,
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let out_dims = conv_output_dims(x.dims(), kernel.dims(), spec)?;
    check_bias(bias, out_dims[1])?;
    x.ensure_finite("conv2d input")?;
    kernel.ensure_finite("conv2d kernel")?;

    let [_, cin, h, w] = x.dims();
    let [cout, cin_g, kh, kw] = kernel.dims();
    let [_, _, ho, wo] = out_dims;
    let cout_g = cout / spec.groups;
    let (ph, pw) = spec.padding;
    let (s, d) = (spec.stride, spec.dilation);
    let xs = x.data();
    let ks = kernel.data();

    let mut out = Tensor::zeros(out_dims);
    par::for_each_chunk(exec, out.data_mut(), ho * wo, |plane, dst| {
        let (n, co) = (plane / cout, plane % cout);
        let ci0 = (co / cout_g) * cin_g;
        dst.fill(bias.map_or(0.0, |b| b[co]));
        // tap-major accumulation over contiguous output rows
        for cl in 0..cin_g {
            let xbase = (n * cin + ci0 + cl) * h * w;
            let kbase = (co * cin_g + cl) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = ks[kbase + ky * kw + kx];
                    let off = kx * d;
                    // valid ow satisfy 0 <= ow * s + off - pw < w
                    let lo = pw.saturating_sub(off).div_ceil(s);
                    let hi = if w + pw > off {
                        ((w + pw - off - 1) / s + 1).min(wo)
                    } else {
                        0
                    };
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = (oh * s + ky * d) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xs[xbase + ih as usize * w..xbase + (ih as usize + 1) * w];
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        if s == 1 {
                            let start = lo + off - pw;
                            for (o, xv) in
                                drow[lo..hi].iter_mut().zip(&xrow[start..start + hi - lo])
                            {
                                *o += kv * xv;
                            }
                        } else {
                            for ow in lo..hi {
                                drow[ow] += kv * xrow[ow * s + off - pw];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of `<upstream, conv2d(x, kernel) + bias>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub dx: Tensor,
    pub dkernel: Tensor,
    pub dbias: Vec<f64>,
}

pub fn conv2d_vjp(
    x: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    conv2d_vjp_with(Exec::default(), x, kernel, spec, upstream)
}

pub fn conv2d_vjp_with(
    exec: Exec,
    x: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    upstream: &Tensor,
) -> Result<ConvGrads> {
    let out_dims = conv_output_dims(x.dims(), kernel.dims(), spec)?;
    if upstream.dims() != out_dims {
        return Err(shape_err!(
            "upstream dims {:?} differ from conv output {:?}",
            upstream.dims(),
            out_dims
        ));
    }
    let [nb, cin, h, w] = x.dims();
    let [cout, cin_g, kh, kw] = kernel.dims();
    let [_, _, ho, wo] = out_dims;
    let cout_g = cout / spec.groups;
    let (ph, pw) = spec.padding;
    let (s, d) = (spec.stride, spec.dilation);
    let xs = x.data();
    let ks = kernel.data();
    let us = upstream.data();

    // dx: gather per input plane.
    let mut dx = Tensor::zeros(x.dims());
    par::for_each_chunk(exec, dx.data_mut(), h * w, |plane, dst| {
        let (n, ci) = (plane / cin, plane % cin);
        let g = ci / cin_g;
        let cl = ci % cin_g;
        for ih in 0..h {
            for iw in 0..w {
                let mut acc = 0.0;
                for co in g * cout_g..(g + 1) * cout_g {
                    let ubase = (n * cout + co) * ho * wo;
                    let kbase = (co * cin_g + cl) * kh * kw;
                    for ky in 0..kh {
                        let t = ih as isize + ph as isize - (ky * d) as isize;
                        if t < 0 || t % s as isize != 0 {
                            continue;
                        }
                        let oh = t as usize / s;
                        if oh >= ho {
                            continue;
                        }
                        for kx in 0..kw {
                            let t = iw as isize + pw as isize - (kx * d) as isize;
                            if t < 0 || t % s as isize != 0 {
                                continue;
                            }
                            let ow = t as usize / s;
                            if ow >= wo {
                                continue;
                            }
                            acc += us[ubase + oh * wo + ow] * ks[kbase + ky * kw + kx];
                        }
                    }
                }
                dst[ih * w + iw] = acc;
            }
        }
    });

    // dkernel: one chunk per output channel.
    let mut dkernel = Tensor::zeros(kernel.dims());
    par::for_each_chunk(exec, dkernel.data_mut(), cin_g * kh * kw, |co, dst| {
        let ci0 = (co / cout_g) * cin_g;
        for cl in 0..cin_g {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for n in 0..nb {
                        let ubase = (n * cout + co) * ho * wo;
                        let xbase = (n * cin + ci0 + cl) * h * w;
                        for oh in 0..ho {
                            let ih = (oh * s + ky * d) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * s + kx * d) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += us[ubase + oh * wo + ow]
                                    * xs[xbase + ih as usize * w + iw as usize];
                            }
                        }
                    }
                    dst[(cl * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });

    let dbias = (0..cout)
        .map(|co| {
            (0..nb)
                .map(|n| upstream.plane(n, co).iter().sum::<f64>())
                .sum()
        })
        .collect();

    Ok(ConvGrads { dx, dkernel, dbias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: [usize; 4], v: &[f64]) -> Tensor {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    /// Direct transcription of the definition with a zero-padded input lookup.
    fn naive(x: &Tensor, k: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor {
        let [n, _, h, w] = x.dims();
        let [co, cig, kh, kw] = k.dims();
        let ho = (h + 2 * spec.padding.0 - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
        let wo = (w + 2 * spec.padding.1 - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
        let cog = co / spec.groups;
        Tensor::from_fn([n, co, ho, wo], |[b, o, i, j]| {
            let mut acc = bias.map_or(0.0, |v| v[o]);
            for c in 0..cig {
                for u in 0..kh {
                    for v in 0..kw {
                        let yi =
                            (i * spec.stride + u * spec.dilation) as i64 - spec.padding.0 as i64;
                        let xj =
                            (j * spec.stride + v * spec.dilation) as i64 - spec.padding.1 as i64;
                        if (0..h as i64).contains(&yi) && (0..w as i64).contains(&xj) {
                            acc += k.at(o, c, u, v)
                                * x.at(b, (o / cog) * cig + c, yi as usize, xj as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    proptest::proptest! {
        #[test]
        fn matches_definition(
            seed in proptest::prelude::any::<u64>(),
            groups in 1usize..3,
            stride in 1usize..4,
            dilation in 1usize..3,
            pad in (0usize..3, 0usize..3),
            kdims in (1usize..4, 1usize..4),
            hw in (5usize..10, 5usize..10),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([2, 2 * groups, hw.0, hw.1], &mut rng);
            let k = Tensor::randn([3 * groups, 2, kdims.0, kdims.1], &mut rng);
            let bias: Vec<f64> = (0..3 * groups).map(|i| i as f64 * 0.5).collect();
            let spec = ConvSpec { stride, padding: pad, dilation, groups };
            let got = conv2d(&x, &k, Some(&bias), &spec).unwrap();
            let want = naive(&x, &k, Some(&bias), &spec);
            proptest::prop_assert_eq!(got.dims(), want.dims());
            proptest::prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_dot_product() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t([1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv2d(&x, &k, None, &ConvSpec::valid()).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn unit_kernel_is_identity_and_zero_kernel_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 1, 5, 4], &mut rng);
        let one = t([1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &one, None, &ConvSpec::valid()).unwrap(), x);
        let zero = Tensor::zeros([3, 1, 3, 3]);
        let y = conv2d(&x, &zero, None, &ConvSpec::same(3, 3).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_of_scalar_dot_product() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t([1, 1, 2, 2], &[5., 6., 7., 8.]);
        let up = t([1, 1, 1, 1], &[1.0]);
        let g = conv2d_vjp(&x, &k, &ConvSpec::valid(), &up).unwrap();
        assert_eq!(g.dkernel, x);
        assert_eq!(g.dx, k);
        assert_eq!(g.dbias, vec![1.0]);
    }

    #[test]
    fn vjp_zero_and_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([2, 4, 6, 5], &mut rng);
        let k = Tensor::randn([6, 2, 3, 3], &mut rng);
        let spec = ConvSpec::same(3, 3).unwrap().with_groups(2);
        let up = Tensor::randn([2, 6, 6, 5], &mut rng);
        let z = conv2d_vjp(&x, &k, &spec, &Tensor::zeros(up.dims())).unwrap();
        assert!(z.dx.max_abs() == 0.0 && z.dkernel.max_abs() == 0.0);
        let g1 = conv2d_vjp(&x, &k, &spec, &up).unwrap();
        let g2 = conv2d_vjp(&x, &k, &spec, &up.scale(2.0)).unwrap();
        assert!(g2.dx.max_abs_diff(&g1.dx.scale(2.0)).unwrap() <= 1e-12 * g1.dx.max_abs());
        assert!(
            g2.dkernel.max_abs_diff(&g1.dkernel.scale(2.0)).unwrap()
                <= 1e-12 * g1.dkernel.max_abs()
        );
    }

    #[test]
    fn strided_dilated_output_dims() {
        let spec = ConvSpec {
            stride: 2,
            padding: (1, 2),
            dilation: 2,
            groups: 1,
        };
        // (9 + 2 - 4 - 1) / 2 + 1 = 4 ; (8 + 4 - 4 - 1) / 2 + 1 = 4
        assert_eq!(spec.output_hw((9, 8), (3, 3)).unwrap(), (4, 4));
        assert!(ConvSpec::valid().output_hw((2, 2), (3, 3)).is_err());
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let k = Tensor::zeros([2, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, None, &ConvSpec::valid()),
            Err(Error::Shape(_))
        ));
        let k = Tensor::zeros([2, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, Some(&[0.0]), &ConvSpec::valid()),
            Err(Error::Shape(_))
        ));
        let mut bad = x.clone();
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(
            conv2d(&bad, &k, None, &ConvSpec::valid()),
            Err(Error::Validation(_))
        ));
        assert!(ConvSpec::same(2, 3).is_err());
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([2, 4, 9, 7], &mut rng);
        let k = Tensor::randn([8, 4, 3, 3], &mut rng);
        let spec = ConvSpec::same(3, 3).unwrap();
        let a = conv2d_with(Exec::Sequential, &x, &k, None, &spec).unwrap();
        let b = conv2d_with(Exec::Parallel, &x, &k, None, &spec).unwrap();
        assert_eq!(a, b);
        let up = Tensor::randn(a.dims(), &mut rng);
        assert_eq!(
            conv2d_vjp_with(Exec::Sequential, &x, &k, &spec, &up).unwrap(),
            conv2d_vjp_with(Exec::Parallel, &x, &k, &spec, &up).unwrap()
        );
    }
}
