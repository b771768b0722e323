//! Closed-form parameter and FLOP accounting for a [`ModelConfig`].
//!
//! FLOPs are `2 x` multiply-accumulates. Conventions beyond plain convolution:
//!
//! * one Haar analysis or synthesis step costs `8` per input pixel per channel;
//! * elementwise adds and gating multiplies cost `1` per element;
//! * a dynamic convolution is costed as merging its kernels (`2 M |W|`) and
//!   running one convolution, plus the pooled coefficient head;
//! * a 2D FFT over `P` points costs `5 P log2 P`;
//! * biases, activations and softmax are free.

use std::fmt;

use crate::conv::ConvSpec;
use crate::dynconv::{
    dynamic_ghost_param_count, expert_bank_param_count, ghost_param_count, head_hidden_width,
    head_param_count, C2fGdcConfig,
};
use crate::error::{config_err, Result};
use crate::okm::{
    dcam_hidden_width, okbranch_width, spd_param_count, AsfpConfig, OkmCspConfig, SPD_KERNEL,
};
use crate::wavelet::{wtconv_param_count, C2fWtcConfig};

use super::config::{LayerSpec, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub index: usize,
    pub kind: &'static str,
    pub out_dims: [usize; 4],
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountReport {
    pub input: [usize; 4],
    pub layers: Vec<LayerCount>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {:?}", self.input)?;
        writeln!(
            f,
            "{:>3} {:<13} {:<22} {:>14} {:>18}",
            "#", "kind", "output", "params", "FLOPs"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:>3} {:<13} {:<22} {:>14} {:>18}",
                l.index,
                l.kind,
                format!("{:?}", l.out_dims),
                l.params,
                l.flops
            )?;
        }
        write!(
            f,
            "    {:<36} {:>14} {:>18}\n    params {:.4} M   FLOPs {:.4} G",
            "total",
            self.total_params,
            self.total_flops,
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9
        )
    }
}

fn conv_flops(k: usize, c_in_per_group: usize, c_out: usize, out_hw: usize) -> u64 {
    (2 * k * k * c_in_per_group * c_out * out_hw) as u64
}

fn fft_flops(points: usize) -> u64 {
    if points <= 1 {
        return 0;
    }
    (5.0 * points as f64 * (points as f64).log2()).ceil() as u64
}

fn wtconv_flops(c: usize, k: usize, levels: usize, h: usize, w: usize) -> u64 {
    let mut f = conv_flops(k, 1, c, h * w);
    if levels > 0 {
        f += (c * h * w) as u64;
    }
    let (mut lh, mut lw) = (h, w);
    for level in 0..levels {
        let (ph, pw) = (lh + lh % 2, lw + lw % 2);
        let sub = (ph / 2) * (pw / 2);
        f += 2 * 8 * (c * ph * pw) as u64;
        f += conv_flops(k, 1, 4 * c, sub);
        if level + 1 < levels {
            f += (c * sub) as u64;
        }
        (lh, lw) = (ph / 2, pw / 2);
    }
    f
}

fn head_flops(c: usize, hidden: usize, experts: usize, hw: usize) -> u64 {
    (c * hw + 2 * (c * hidden + hidden * experts)) as u64
}

fn dynamic_flops(c_in: usize, c_out: usize, k: usize, m: usize, hw: usize) -> u64 {
    dynamic_flops_with_head(c_in, c_out, k, m, head_hidden_width(c_in, m), hw)
}

fn dynamic_flops_with_head(
    c_in: usize,
    c_out: usize,
    k: usize,
    m: usize,
    hidden: usize,
    hw: usize,
) -> u64 {
    head_flops(c_in, hidden, m, hw)
        + 2 * expert_bank_param_count(m, [c_out, c_in, k, k]) as u64
        + conv_flops(k, c_in, c_out, hw)
}

fn dynamic_params(c_in: usize, c_out: usize, k: usize, m: usize) -> usize {
    expert_bank_param_count(m, [c_out, c_in, k, k])
        + head_param_count(c_in, head_hidden_width(c_in, m), m)
}

fn ghost_flops(c_in: usize, c_out: usize, k: usize, experts: Option<usize>, hw: usize) -> u64 {
    let half = c_out / 2;
    let primary = match experts {
        Some(m) => dynamic_flops(c_in, half, k, m, hw),
        None => conv_flops(k, c_in, half, hw),
    };
    primary + conv_flops(3, 1, half, hw)
}

fn c2f_wtc_flops(cfg: &C2fWtcConfig, h: usize, w: usize) -> Result<u64> {
    let (hid, r) = (cfg.hidden()?, cfg.reduced()?);
    let hw = h * w;
    let bottleneck = conv_flops(1, hid, r, hw)
        + wtconv_flops(r, cfg.kernel, cfg.levels, h, w)
        + conv_flops(1, r, hid, hw)
        + (hid * hw) as u64;
    Ok(conv_flops(1, cfg.c_in, 2 * hid, hw)
        + cfg.n as u64 * bottleneck
        + conv_flops(1, (2 + cfg.n) * hid, cfg.c_out, hw))
}

fn c2f_gdc_flops(cfg: &C2fGdcConfig, hw: usize) -> Result<u64> {
    let (c, h, k, m) = (cfg.channels, cfg.hidden()?, cfg.kernel, cfg.experts);
    let hd = cfg.head_width()?;
    let ghost = dynamic_flops_with_head(h, h / 2, k, m, hd, hw) + conv_flops(3, 1, h / 2, hw);
    let mut bottleneck = ghost + conv_flops(3, h, h, hw) + 2 * (h * hw) as u64;
    if cfg.second_dynamic {
        bottleneck += dynamic_flops_with_head(h, h, k, m, hd, hw);
    }
    Ok(conv_flops(1, c, c, hw)
        + cfg.n as u64 * bottleneck
        + conv_flops(1, (2 + cfg.n) * h, c, hw)
        + (c * hw) as u64)
}

fn okm_flops(cfg: &OkmCspConfig, h: usize, w: usize) -> Result<u64> {
    let k = okbranch_width(cfg.c_in, cfg.e)?;
    let hw = h * w;
    let hd = dcam_hidden_width(k);
    let dcam =
        (k * hw) as u64 + 4 * (k * hw) as u64 + 2 * (2 * k * hd + hd * k) as u64 + (k * hw) as u64;
    let fsam = 2 * k as u64 * fft_flops(hw) + 2 * (k * hw) as u64;
    let global = dcam + fsam + conv_flops(1, k, k, hw);
    let lk = cfg.large_kernel;
    let large = (2 * (lk * lk + 2 * lk) * k * hw) as u64 + 2 * (k * hw) as u64;
    let local = conv_flops(3, 1, k, hw);
    let merge = conv_flops(1, 3 * k, k, hw);
    Ok(global + large + local + merge + conv_flops(1, cfg.c_in, cfg.c_out, hw))
}

fn spd_flops(c_in: usize, c_out: usize, scale: usize, h: usize, w: usize) -> u64 {
    conv_flops(
        SPD_KERNEL,
        c_in * scale * scale,
        c_out,
        (h / scale) * (w / scale),
    )
}

/// Closed-form count of one layer applied to `input`; returns `(out_dims, params, flops)`.
pub fn count_layer(spec: &LayerSpec, input: [usize; 4]) -> Result<([usize; 4], u64, u64)> {
    let [n, c, h, w] = input;
    if c != spec.in_channels() {
        return Err(config_err!(
            "expects {} input channels, got {c}",
            spec.in_channels()
        ));
    }
    let hw = h * w;
    let (out, params, flops): ([usize; 4], usize, u64) = match spec {
        LayerSpec::Conv {
            c_in,
            c_out,
            k,
            stride,
            groups,
            bias,
            ..
        } => {
            if *groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                return Err(config_err!(
                    "groups {groups} must divide {c_in} and {c_out}"
                ));
            }
            let cs = ConvSpec::same(*k, *k)?
                .with_stride(*stride)
                .with_groups(*groups);
            let (ho, wo) = cs.output_hw((h, w), (*k, *k))?;
            let p = c_out * (c_in / groups) * k * k + if *bias { *c_out } else { 0 };
            (
                [n, *c_out, ho, wo],
                p,
                conv_flops(*k, c_in / groups, *c_out, ho * wo),
            )
        }
        LayerSpec::WtConv { c, k, levels } => {
            if k % 2 == 0 {
                return Err(config_err!("wtconv kernel must be odd, got {k}"));
            }
            (
                input,
                wtconv_param_count(*c, *k, *levels),
                wtconv_flops(*c, *k, *levels, h, w),
            )
        }
        LayerSpec::C2fWtc(cfg) => (
            [n, cfg.c_out, h, w],
            cfg.param_count()?,
            c2f_wtc_flops(cfg, h, w)?,
        ),
        LayerSpec::DynamicConv {
            c_in,
            c_out,
            k,
            experts,
        } => {
            if *experts == 0 || k % 2 == 0 {
                return Err(config_err!(
                    "dynamic_conv needs experts >= 1 and an odd kernel"
                ));
            }
            (
                [n, *c_out, h, w],
                dynamic_params(*c_in, *c_out, *k, *experts),
                dynamic_flops(*c_in, *c_out, *k, *experts, hw),
            )
        }
        LayerSpec::Ghost {
            c_in,
            c_out,
            k,
            experts,
        } => {
            let p = match experts {
                Some(m) => dynamic_ghost_param_count(*c_in, *c_out, *k, *m)?,
                None => ghost_param_count(*c_in, *c_out, *k)?,
            };
            (
                [n, *c_out, h, w],
                p,
                ghost_flops(*c_in, *c_out, *k, *experts, hw),
            )
        }
        LayerSpec::C2fGdc(cfg) => (input, cfg.param_count()?, c2f_gdc_flops(cfg, hw)?),
        LayerSpec::OkmCsp(cfg) => (
            [n, cfg.c_out, h, w],
            cfg.param_count()?,
            okm_flops(cfg, h, w)?,
        ),
        LayerSpec::SpdConv { c_in, c_out, scale } => {
            if *scale == 0 || h % scale != 0 || w % scale != 0 {
                return Err(config_err!(
                    "spatial dims {h}x{w} not divisible by scale {scale}"
                ));
            }
            (
                [n, *c_out, h / scale, w / scale],
                spd_param_count(*c_in, *c_out, *scale),
                spd_flops(*c_in, *c_out, *scale, h, w),
            )
        }
        LayerSpec::AsfpFuse(cfg) => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(config_err!("P2 dims {h}x{w} must be even"));
            }
            let (h3, w3) = (h / 2, w / 2);
            let f = spd_flops(cfg.c2, cfg.spd_out, 2, h, w) + okm_flops(&cfg.okm(), h3, w3)?;
            ([n, cfg.c_out, h3, w3], AsfpConfig::param_count(cfg)?, f)
        }
    };
    Ok((out, params as u64, flops * n as u64))
}

/// Walks the layer chain from `input`, failing with the offending layer's index and kind.
pub fn count_params_flops(cfg: &ModelConfig, input: [usize; 4]) -> Result<CountReport> {
    if input.contains(&0) {
        return Err(config_err!("input dims must be positive, got {input:?}"));
    }
    let mut dims = input;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (i, spec) in cfg.layers.iter().enumerate() {
        let (out, params, flops) = count_layer(spec, dims)
            .map_err(|e| config_err!("layer {} ({}): {e}", i + 1, spec.kind()))?;
        layers.push(LayerCount {
            index: i + 1,
            kind: spec.kind(),
            out_dims: out,
            params,
            flops,
        });
        dims = out;
    }
    Ok(CountReport {
        input,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_closed_forms() {
        let cfg = ModelConfig::parse("conv c_in=16 c_out=32 k=3\n").unwrap();
        let r = count_params_flops(&cfg, [1, 16, 8, 8]).unwrap();
        assert_eq!(r.total_params, 4640);
        assert_eq!(r.total_flops, 589_824);
        let r = count_params_flops(&cfg, [2, 16, 8, 8]).unwrap();
        assert_eq!(r.total_flops, 2 * 589_824);
        let strided = ModelConfig::parse("conv c_in=3 c_out=8 k=3 stride=2\n").unwrap();
        assert_eq!(
            count_params_flops(&strided, [1, 3, 9, 9]).unwrap().layers[0].out_dims,
            [1, 8, 5, 5]
        );
    }

    #[test]
    fn wtconv_slope_in_levels() {
        let count = |l: usize| {
            let cfg = ModelConfig::parse(&format!("wtconv c=8 k=3 levels={l}\n")).unwrap();
            count_params_flops(&cfg, [1, 8, 32, 32])
                .unwrap()
                .total_params
        };
        for l in 0..4 {
            assert_eq!(count(l + 1) - count(l), 4 * 8 * 9);
        }
    }

    #[test]
    fn totals_are_sums_and_match_instantiation() {
        let text = "conv c_in=3 c_out=16 k=3 stride=2\nc2f_wtc c_in=16 c_out=16\nc2f_gdc c=16 second=true\nghost c_in=16 c_out=8 experts=2 k=3\nokm_csp c_in=8 c_out=8\nasfp_fuse c2=8 c3=4 c_out=8\nspd_conv c_in=8 c_out=4\ndynamic_conv c_in=4 c_out=4\nghost c_in=4 c_out=4\nwtconv c=4 levels=3\n";
        let cfg = ModelConfig::parse(text).unwrap();
        let r = count_params_flops(&cfg, [1, 3, 64, 64]).unwrap();
        assert_eq!(
            r.total_params,
            r.layers.iter().map(|l| l.params).sum::<u64>()
        );
        assert_eq!(r.total_flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
        let enumerated = cfg
            .enumerate_params(&mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(r.total_params, enumerated as u64);
        assert!(r.to_string().contains("asfp_fuse"));
    }

    #[test]
    fn predicted_dims_match_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let text = "conv c_in=2 c_out=8 k=3 stride=2\nc2f_wtc c_in=8 c_out=8 levels=1\nc2f_gdc c=8\nokm_csp c_in=8 c_out=4\nspd_conv c_in=4 c_out=4\nwtconv c=4 levels=1\n";
        let cfg = ModelConfig::parse(text).unwrap();
        let layers = cfg.build(&mut rng).unwrap();
        let mut x = Tensor::randn([1, 2, 12, 12], &mut rng);
        let report = count_params_flops(&cfg, x.dims()).unwrap();
        for (layer, row) in layers.iter().zip(&report.layers) {
            x = layer.forward(&[&x]).unwrap();
            assert_eq!(x.dims(), row.out_dims, "{}", row.kind);
        }
    }

    #[test]
    fn inconsistent_chain_names_layer() {
        let cfg = ModelConfig::parse("conv c_in=3 c_out=8\nspd_conv c_in=8 c_out=8\n").unwrap();
        let msg = count_params_flops(&cfg, [1, 3, 5, 5])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("layer 2 (spd_conv)"), "{msg}");
        let msg = count_params_flops(&cfg, [1, 4, 4, 4])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("layer 1 (conv)"), "{msg}");
    }

    #[test]
    fn haar_and_fft_conventions() {
        // one level, zero kernels contribute only transform and add costs
        assert_eq!(wtconv_flops(1, 1, 1, 2, 2), 2 * 4 + 16 * 4 + 2 * 4 + 4);
        assert_eq!(fft_flops(1), 0);
        assert_eq!(fft_flops(8), 120);
    }
}
