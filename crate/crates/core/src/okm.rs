//! OmniKernel CSP block, space-to-depth convolution and the P2-into-P3
//! pyramid fusion built from them.
//!
//! The OmniKernel runs three branches on the first `floor(C * e)` channels:
//!
//! * global: channel attention from a dual-domain descriptor (DCAM), then a
//!   radial frequency gate (FSAM), then a 1x1 conv;
//! * large: depthwise `k x k`, `1 x k` and `k x 1` kernels, summed;
//! * local: depthwise 3x3.
//!
//! Their outputs are concatenated in that order and merged back to the input
//! width by a 1x1 conv. The untouched channels are appended and a 1x1 fuse
//! conv produces the block output.

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{config_err, invalid, shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::layer::{ConvLayer, Layer, ParamCursor};
use crate::ops::Activation;
use crate::par::{self, Exec};
use crate::tensor::Tensor;

pub const DEFAULT_SPLIT: f64 = 0.25;
pub const DEFAULT_LARGE_KERNEL: usize = 7;
pub const DEFAULT_FSAM_BINS: usize = 4;
const LOCAL_KERNEL: usize = 3;

/// Number of channels routed through the OmniKernel.
pub fn okbranch_width(channels: usize, e: f64) -> Result<usize> {
    if !(e > 0.0 && e <= 1.0) {
        return Err(invalid!("split ratio must lie in (0, 1], got {e}"));
    }
    let k = (channels as f64 * e).floor() as usize;
    if k == 0 {
        return Err(invalid!(
            "split ratio {e} leaves no okbranch channels out of {channels}"
        ));
    }
    Ok(k)
}

/// First `floor(C * e)` channels, then the rest (possibly `None` when `e = 1`).
pub fn okm_split(x: &Tensor, e: f64) -> Result<(Tensor, Option<Tensor>)> {
    let c = x.channels();
    let k = okbranch_width(c, e)?;
    let ok = x.slice_channels(0, k)?;
    let id = (k < c).then(|| x.slice_channels(k, c - k)).transpose()?;
    Ok((ok, id))
}

// ---------------------------------------------------------------- DCAM

/// Lowest non-DC frequency used by the DCAM descriptor: `(0, 1)` unless the map is one column wide.
fn probe_frequency(h: usize, w: usize) -> Option<(usize, usize)> {
    if w > 1 {
        Some((0, 1))
    } else if h > 1 {
        Some((1, 0))
    } else {
        None
    }
}

/// Unitary DFT coefficient of one plane at `(fu, fv)`, returned with its basis angles.
fn dft_coefficient(plane: &[f64], h: usize, w: usize, (fu, fv): (usize, usize)) -> (f64, f64) {
    let s = 1.0 / ((h * w) as f64).sqrt();
    let (mut re, mut im) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let th =
                std::f64::consts::TAU * ((fu * i) as f64 / h as f64 + (fv * j) as f64 / w as f64);
            re += plane[i * w + j] * th.cos();
            im -= plane[i * w + j] * th.sin();
        }
    }
    (re * s, im * s)
}

/// `|DFT(x)[probe]|` per channel, shaped `(N, C, 1, 1)`.
pub fn low_frequency_magnitude(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    if let Some(f) = probe_frequency(h, w) {
        for b in 0..n {
            for ch in 0..c {
                let (re, im) = dft_coefficient(x.plane(b, ch), h, w, f);
                out.set(b, ch, 0, 0, re.hypot(im));
            }
        }
    }
    out
}

struct MagnitudeOp;

impl Backward for MagnitudeOp {
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let [n, c, h, w] = x.dims();
        let mut dx = Tensor::zeros(x.dims());
        let Some((fu, fv)) = probe_frequency(h, w) else {
            return Ok(vec![Some(dx)]);
        };
        let s = 1.0 / ((h * w) as f64).sqrt();
        for b in 0..n {
            for ch in 0..c {
                let mag = output.at(b, ch, 0, 0);
                if mag == 0.0 {
                    continue;
                }
                let (re, im) = dft_coefficient(x.plane(b, ch), h, w, (fu, fv));
                let g = grad.at(b, ch, 0, 0) * s / mag;
                for i in 0..h {
                    for j in 0..w {
                        let th = std::f64::consts::TAU
                            * ((fu * i) as f64 / h as f64 + (fv * j) as f64 / w as f64);
                        dx.set(b, ch, i, j, g * (re * th.cos() - im * th.sin()));
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Hidden width of the DCAM head: `max(2, ceil(C / 2))`.
pub fn dcam_hidden_width(channels: usize) -> usize {
    2.max(channels.div_ceil(2))
}

pub fn dcam_param_count(channels: usize) -> usize {
    let h = dcam_hidden_width(channels);
    2 * channels * h + h + h * channels + channels
}

/// Dual-domain channel attention: `x * sigmoid(fc2(relu(fc1([mean(x), |X(probe)|]))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dcam {
    pub fc1: ConvLayer,
    pub fc2: ConvLayer,
}

impl Dcam {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Result<Self> {
        let h = dcam_hidden_width(channels);
        Ok(Self {
            fc1: ConvLayer::pointwise(rng, 2 * channels, h, Activation::Relu)?,
            fc2: ConvLayer::pointwise(rng, h, channels, Activation::Sigmoid)?,
        })
    }
}

impl Layer for Dcam {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let x = inputs[0];
        let mean = g.global_avg_pool(x);
        let mag = {
            let v = low_frequency_magnitude(g.value(x));
            g.push(&[x], v, MagnitudeOp)
        };
        let desc = g.concat(&[mean, mag])?;
        let h = self.fc1.trace(g, &[desc], params)?;
        let gate = self.fc2.trace(g, &[h], params)?;
        g.channel_scale(x, gate)
    }
}

// ---------------------------------------------------------------- FSAM

/// Radial bin of DFT index `(u, v)` on an `h x w` grid. Frequencies are folded
/// so that `(u, v)` and `(-u, -v)` share a bin, which keeps the gated signal real.
pub fn radial_bin(u: usize, v: usize, h: usize, w: usize, bins: usize) -> usize {
    let fu = u.min(h - u) as f64 / h as f64;
    let fv = v.min(w - v) as f64 / w as f64;
    let r = (fu * fu + fv * fv).sqrt() / 0.5f64.sqrt();
    ((r * bins as f64).floor() as usize).min(bins - 1)
}

struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    h: usize,
    w: usize,
}

impl Plans {
    fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            row_fwd: p.plan_fft_forward(w),
            row_inv: p.plan_fft_inverse(w),
            col_fwd: p.plan_fft_forward(h),
            col_inv: p.plan_fft_inverse(h),
            h,
            w,
        }
    }

    /// Unnormalised 2D transform in place: rows, then columns.
    fn transform(&self, buf: &mut [Complex<f64>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut t = vec![Complex::default(); h * w];
        for i in 0..h {
            for j in 0..w {
                t[j * h + i] = buf[i * w + j];
            }
        }
        col.process(&mut t);
        for i in 0..h {
            for j in 0..w {
                buf[i * w + j] = t[j * h + i];
            }
        }
    }

    fn forward_unitary(&self, plane: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        let s = 1.0 / ((self.h * self.w) as f64).sqrt();
        buf.iter_mut().for_each(|z| *z *= s);
        buf
    }

    fn inverse_unitary_real(&self, mut spec: Vec<Complex<f64>>) -> Vec<f64> {
        self.transform(&mut spec, true);
        let s = 1.0 / ((self.h * self.w) as f64).sqrt();
        spec.iter().map(|z| z.re * s).collect()
    }
}

/// `IDFT(g[c, bin(u, v)] * DFT(x))` per plane; `gate` is `(1, C, B, 1)`.
pub fn frequency_gate(exec: Exec, x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = x.dims();
    let [g1, gc, bins, g4] = gate.dims();
    if g1 != 1 || g4 != 1 || gc != c {
        return Err(shape_err!(
            "frequency gate {:?} for {c} channels",
            gate.dims()
        ));
    }
    let plans = Plans::new(h, w);
    let bin_of: Vec<usize> = (0..h * w)
        .map(|k| radial_bin(k / w, k % w, h, w, bins))
        .collect();
    let mut out = Tensor::zeros(x.dims());
    par::for_each_chunk(exec, out.data_mut(), h * w, |idx, dst| {
        let ch = idx % c;
        let g = &gate.data()[ch * bins..(ch + 1) * bins];
        let mut spec = plans.forward_unitary(&x.data()[idx * h * w..(idx + 1) * h * w]);
        for (z, &b) in spec.iter_mut().zip(&bin_of) {
            *z *= g[b];
        }
        dst.copy_from_slice(&plans.inverse_unitary_real(spec));
    });
    Ok(out)
}

/// `d<grad, y>/d gate[c, b] = Re Σ_{bin b} conj(DFT(grad)) · DFT(x)`
fn frequency_gate_grad(x: &Tensor, grad: &Tensor, bins: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    let plans = Plans::new(h, w);
    let per_plane: Vec<Vec<f64>> = par::map_indices(Exec::Parallel, n * c, |idx| {
        let fx = plans.forward_unitary(&x.data()[idx * h * w..(idx + 1) * h * w]);
        let fg = plans.forward_unitary(&grad.data()[idx * h * w..(idx + 1) * h * w]);
        let mut acc = vec![0.0; bins];
        for k in 0..h * w {
            acc[radial_bin(k / w, k % w, h, w, bins)] += (fg[k].conj() * fx[k]).re;
        }
        acc
    });
    let mut dg = Tensor::zeros([1, c, bins, 1]);
    for (idx, acc) in per_plane.iter().enumerate() {
        let ch = idx % c;
        for (b, v) in acc.iter().enumerate() {
            dg.data_mut()[ch * bins + b] += v;
        }
    }
    dg
}

struct FrequencyGateOp;

impl Backward for FrequencyGateOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, gate) = (inputs[0], inputs[1]);
        // the gated transform is real symmetric, so it is its own adjoint
        let dx = frequency_gate(Exec::Parallel, grad, gate)?;
        let dg = frequency_gate_grad(x, grad, gate.dims()[2]);
        Ok(vec![Some(dx), Some(dg)])
    }
}

/// Frequency-based spatial attention with one real gate per channel and radial frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Fsam {
    /// `(1, C, B, 1)`
    pub gate: Tensor,
}

impl Fsam {
    /// Gates start near one, so the module starts near the identity.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, channels: usize, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(config_err!("frequency gate needs at least one bin"));
        }
        let noise = Tensor::uniform([1, channels, bins, 1], 0.1, rng);
        Ok(Self {
            gate: noise.map(|v| 1.0 + v),
        })
    }

    pub fn bins(&self) -> usize {
        self.gate.dims()[2]
    }
}

impl Layer for Fsam {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.gate]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gate]
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let gate = params.next()?;
        let y = frequency_gate(g.exec(), g.value(inputs[0]), g.value(gate))?;
        Ok(g.push(&[inputs[0], gate], y, FrequencyGateOp))
    }
}

// ---------------------------------------------------------------- OmniKernel

#[derive(Clone, Debug, PartialEq)]
pub struct OmniKernel {
    pub dcam: Dcam,
    pub fsam: Fsam,
    pub global_conv: ConvLayer,
    pub large_square: ConvLayer,
    pub large_row: ConvLayer,
    pub large_col: ConvLayer,
    pub local: ConvLayer,
    pub merge: ConvLayer,
}

impl OmniKernel {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        large_kernel: usize,
        bins: usize,
    ) -> Result<Self> {
        if large_kernel.is_multiple_of(2) {
            return Err(config_err!(
                "large-branch kernel must be odd, got {large_kernel}"
            ));
        }
        let k = large_kernel;
        Ok(Self {
            dcam: Dcam::init(rng, channels)?,
            fsam: Fsam::init(rng, channels, bins)?,
            global_conv: ConvLayer::pointwise(rng, channels, channels, Activation::Identity)?,
            large_square: ConvLayer::depthwise(rng, channels, (k, k))?,
            large_row: ConvLayer::depthwise(rng, channels, (1, k))?,
            large_col: ConvLayer::depthwise(rng, channels, (k, 1))?,
            local: ConvLayer::depthwise(rng, channels, (LOCAL_KERNEL, LOCAL_KERNEL))?,
            merge: ConvLayer::pointwise(rng, 3 * channels, channels, Activation::Identity)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.merge.out_channels()
    }
}

pub fn omni_kernel_param_count(channels: usize, large_kernel: usize, bins: usize) -> usize {
    let (c, k) = (channels, large_kernel);
    dcam_param_count(c)
        + c * bins
        + (c * c + c)
        + c * (k * k + 2 * k)
        + c * LOCAL_KERNEL * LOCAL_KERNEL
        + (3 * c * c + c)
}

impl Layer for OmniKernel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.dcam.params();
        p.extend(self.fsam.params());
        for l in [
            &self.global_conv,
            &self.large_square,
            &self.large_row,
            &self.large_col,
            &self.local,
            &self.merge,
        ] {
            p.extend(l.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.dcam.params_mut();
        p.extend(self.fsam.params_mut());
        for l in [
            &mut self.global_conv,
            &mut self.large_square,
            &mut self.large_row,
            &mut self.large_col,
            &mut self.local,
            &mut self.merge,
        ] {
            p.extend(l.params_mut());
        }
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let x = inputs[0];
        let c = g.dims(x)[1];
        if c != self.channels() {
            return Err(shape_err!(
                "omni kernel expects {} channels, got {c}",
                self.channels()
            ));
        }
        let a = self.dcam.trace(g, &[x], params)?;
        let f = self.fsam.trace(g, &[a], params)?;
        let global = self.global_conv.trace(g, &[f], params)?;

        let sq = self.large_square.trace(g, &[x], params)?;
        let row = self.large_row.trace(g, &[x], params)?;
        let col = self.large_col.trace(g, &[x], params)?;
        let large = g.add(sq, row)?;
        let large = g.add(large, col)?;

        let local = self.local.trace(g, &[x], params)?;
        let cat = g.concat(&[global, large, local])?;
        self.merge.trace(g, &[cat], params)
    }
}

pub fn omni_kernel(x_ok: &Tensor, params: &OmniKernel) -> Result<Tensor> {
    params.forward(&[x_ok])
}

// ---------------------------------------------------------------- OKM-CSP

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OkmCspConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub e: f64,
    pub large_kernel: usize,
    pub bins: usize,
}

impl OkmCspConfig {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            e: DEFAULT_SPLIT,
            large_kernel: DEFAULT_LARGE_KERNEL,
            bins: DEFAULT_FSAM_BINS,
        }
    }

    fn validate(&self) -> Result<usize> {
        if self.c_in < 2 || self.c_out == 0 {
            return Err(config_err!(
                "okm_csp needs at least 2 input channels and 1 output, got {} -> {}",
                self.c_in,
                self.c_out
            ));
        }
        okbranch_width(self.c_in, self.e)
    }

    pub fn param_count(&self) -> Result<usize> {
        let k = self.validate()?;
        Ok(omni_kernel_param_count(k, self.large_kernel, self.bins)
            + self.c_in * self.c_out
            + self.c_out)
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<OkmCsp> {
        let k = self.validate()?;
        Ok(OkmCsp {
            e: self.e,
            omni: OmniKernel::init(rng, k, self.large_kernel, self.bins)?,
            fuse: ConvLayer::pointwise(rng, self.c_in, self.c_out, Activation::Identity)?,
        })
    }
}

pub type OkmCspParams = OkmCsp;

/// `fuse(concat(omni(x_ok), x_id))`
#[derive(Clone, Debug, PartialEq)]
pub struct OkmCsp {
    pub e: f64,
    pub omni: OmniKernel,
    pub fuse: ConvLayer,
}

impl Layer for OkmCsp {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.omni.params();
        p.extend(self.fuse.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.omni.params_mut();
        p.extend(self.fuse.params_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let x = inputs[0];
        let c = g.dims(x)[1];
        if c != self.fuse.in_channels() {
            return Err(shape_err!(
                "okm_csp expects {} channels, got {c}",
                self.fuse.in_channels()
            ));
        }
        let k = okbranch_width(c, self.e)?;
        let ok = g.slice(x, 0, k)?;
        let y = self.omni.trace(g, &[ok], params)?;
        let cat = if k < c {
            let id = g.slice(x, k, c - k)?;
            g.concat(&[y, id])?
        } else {
            y
        };
        self.fuse.trace(g, &[cat], params)
    }
}

pub fn okm_csp(x: &Tensor, params: &OkmCsp) -> Result<Tensor> {
    params.forward(&[x])
}

// ---------------------------------------------------------------- SPD and ASFP

/// Space-to-depth by `scale`, then a stride-1 3x3 conv with bias and SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdConv {
    pub scale: usize,
    pub conv: ConvLayer,
}

pub type SpdParams = SpdConv;

pub const SPD_KERNEL: usize = 3;

impl SpdConv {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        scale: usize,
    ) -> Result<Self> {
        if scale == 0 {
            return Err(config_err!("space-to-depth scale must be positive"));
        }
        Ok(Self {
            scale,
            conv: ConvLayer::init(
                rng,
                c_in * scale * scale,
                c_out,
                (SPD_KERNEL, SPD_KERNEL),
                1,
                true,
                Activation::Silu,
            )?,
        })
    }
}

pub fn spd_param_count(c_in: usize, c_out: usize, scale: usize) -> usize {
    c_in * scale * scale * c_out * SPD_KERNEL * SPD_KERNEL + c_out
}

impl Layer for SpdConv {
    fn params(&self) -> Vec<&Tensor> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.conv.params_mut()
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let s = g.space_to_depth(inputs[0], self.scale)?;
        self.conv.trace(g, &[s], params)
    }
}

pub fn spd_conv(x: &Tensor, p: &SpdConv) -> Result<Tensor> {
    p.forward(&[x])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsfpConfig {
    /// P2 channels.
    pub c2: usize,
    /// P3 channels.
    pub c3: usize,
    pub c_out: usize,
    /// Channels produced by the SPD conv; defaults to `c2`.
    pub spd_out: usize,
    pub e: f64,
    pub large_kernel: usize,
    pub bins: usize,
}

impl AsfpConfig {
    pub fn new(c2: usize, c3: usize, c_out: usize) -> Self {
        Self {
            c2,
            c3,
            c_out,
            spd_out: c2,
            e: DEFAULT_SPLIT,
            large_kernel: DEFAULT_LARGE_KERNEL,
            bins: DEFAULT_FSAM_BINS,
        }
    }

    pub fn okm(&self) -> OkmCspConfig {
        OkmCspConfig {
            c_in: self.spd_out + self.c3,
            c_out: self.c_out,
            e: self.e,
            large_kernel: self.large_kernel,
            bins: self.bins,
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(spd_param_count(self.c2, self.spd_out, 2) + self.okm().param_count()?)
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Asfp> {
        Ok(Asfp {
            spd: SpdConv::init(rng, self.c2, self.spd_out, 2)?,
            okm: self.okm().build(rng)?,
        })
    }
}

/// `okm_csp(concat(spd(P2), P3))`; takes two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Asfp {
    pub spd: SpdConv,
    pub okm: OkmCsp,
}

impl Layer for Asfp {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.spd.params();
        p.extend(self.okm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.spd.params_mut();
        p.extend(self.okm.params_mut());
        p
    }

    fn num_inputs(&self) -> usize {
        2
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let (p2, p3) = (inputs[0], inputs[1]);
        let [n2, _, h2, w2] = g.dims(p2);
        let [n3, _, h3, w3] = g.dims(p3);
        if n2 != n3 || h2 != 2 * h3 || w2 != 2 * w3 {
            return Err(shape_err!(
                "P2 {h2}x{w2} (batch {n2}) must be twice P3 {h3}x{w3} (batch {n3})"
            ));
        }
        let s = self.spd.trace(g, &[p2], params)?;
        let cat = g.concat(&[s, p3])?;
        self.okm.trace(g, &[cat], params)
    }
}

pub fn asfp_fuse(p2: &Tensor, p3: &Tensor, cfg: &Asfp) -> Result<Tensor> {
    cfg.forward(&[p2, p3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};
    use crate::layer::{fill_params, LayerFn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn centred_delta(c: usize, kh: usize, kw: usize) -> Tensor {
        Tensor::from_fn([c, 1, kh, kw], |[_, _, i, j]| {
            if i == kh / 2 && j == kw / 2 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn split_widths() {
        let x = Tensor::randn([1, 64, 2, 2], &mut rng(0));
        let (ok, id) = okm_split(&x, 0.25).unwrap();
        assert_eq!((ok.channels(), id.as_ref().unwrap().channels()), (16, 48));
        assert_eq!(
            Tensor::concat_channels(&[&ok, id.as_ref().unwrap()]).unwrap(),
            x
        );
        assert_eq!(okbranch_width(10, 0.25).unwrap(), 2);
        assert!(okm_split(&x, 0.0).is_err());
        assert!(okm_split(&x, 1.5).is_err());
        assert!(okbranch_width(3, 0.25).is_err());
        let (ok, id) = okm_split(&x, 1.0).unwrap();
        assert_eq!(ok, x);
        assert!(id.is_none());
    }

    #[test]
    fn radial_bins_are_folded() {
        for (h, w) in [(4, 4), (5, 7), (1, 6)] {
            for u in 0..h {
                for v in 0..w {
                    let b = radial_bin(u, v, h, w, 4);
                    assert!(b < 4);
                    assert_eq!(b, radial_bin((h - u) % h, (w - v) % w, h, w, 4));
                }
            }
        }
        assert_eq!(radial_bin(0, 0, 8, 8, 4), 0);
        assert_eq!(radial_bin(4, 4, 8, 8, 4), 3);
    }

    #[test]
    fn unit_gate_is_identity_and_single_bin_scales() {
        let x = Tensor::randn([2, 3, 5, 6], &mut rng(1));
        let ones = Tensor::filled([1, 3, 4, 1], 1.0);
        assert!(
            frequency_gate(Exec::Parallel, &x, &ones)
                .unwrap()
                .max_abs_diff(&x)
                .unwrap()
                <= 1e-12
        );
        let half = Tensor::filled([1, 3, 1, 1], 0.5);
        let y = frequency_gate(Exec::Sequential, &x, &half).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() <= 1e-12);
    }

    #[test]
    fn gate_passes_only_dc_when_other_bins_are_zero() {
        let x = Tensor::randn([1, 1, 8, 8], &mut rng(2));
        let gate = Tensor::new([1, 1, 4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = frequency_gate(Exec::Parallel, &x, &gate).unwrap();
        // bin 0 holds DC and the lowest ring; the output keeps the mean
        let mean = x.data().iter().sum::<f64>() / 64.0;
        let ymean = y.data().iter().sum::<f64>() / 64.0;
        assert!((mean - ymean).abs() < 1e-12);
    }

    #[test]
    fn frequency_gate_is_self_adjoint() {
        let mut r = rng(3);
        let x = Tensor::randn([1, 2, 6, 5], &mut r);
        let z = Tensor::randn([1, 2, 6, 5], &mut r);
        let gate = Tensor::randn([1, 2, 4, 1], &mut r);
        let lhs = frequency_gate(Exec::Parallel, &x, &gate)
            .unwrap()
            .dot(&z)
            .unwrap();
        let rhs = x
            .dot(&frequency_gate(Exec::Parallel, &z, &gate).unwrap())
            .unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn magnitude_probe() {
        // a pure horizontal cosine of frequency one has all its energy in (0, ±1)
        let x = Tensor::from_fn([1, 1, 4, 4], |[_, _, _, j]| {
            (std::f64::consts::TAU * j as f64 / 4.0).cos()
        });
        let m = low_frequency_magnitude(&x);
        assert!((m.data()[0] - 2.0).abs() < 1e-12);
        let col = Tensor::from_fn(
            [1, 1, 4, 1],
            |[_, _, i, _]| if i % 2 == 0 { 1.0 } else { 0.0 },
        );
        assert!(low_frequency_magnitude(&col).data()[0] < 1e-12);
        assert_eq!(
            low_frequency_magnitude(&Tensor::filled([1, 1, 1, 1], 3.0)).data(),
            &[0.0]
        );
    }

    #[test]
    fn omni_shapes_zeros_and_count() {
        let mut r = rng(4);
        let mut ok = OmniKernel::init(&mut r, 4, 7, 4).unwrap();
        assert_eq!(ok.param_count(), omni_kernel_param_count(4, 7, 4));
        let x = Tensor::randn([2, 4, 9, 7], &mut r);
        assert_eq!(omni_kernel(&x, &ok).unwrap().dims(), x.dims());
        fill_params(&mut ok, 0.0);
        assert_eq!(omni_kernel(&x, &ok).unwrap().max_abs(), 0.0);
        assert!(omni_kernel(&Tensor::zeros([1, 3, 4, 4]), &ok).is_err());
    }

    #[test]
    fn okm_csp_with_pass_through_is_a_permutation() {
        let mut r = rng(5);
        let cfg = OkmCspConfig::new(8, 8);
        let mut block = cfg.build(&mut r).unwrap();
        assert_eq!(block.param_count(), cfg.param_count().unwrap());
        fill_params(&mut block, 0.0);
        let k = 2;
        block.omni.local.weight = centred_delta(k, 3, 3);
        // merge picks the local branch (channels 2k..3k of the concat)
        block.omni.merge.weight =
            Tensor::from_fn(
                [k, 3 * k, 1, 1],
                |[o, i, _, _]| if i == 2 * k + o { 1.0 } else { 0.0 },
            );
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        block.fuse.weight = Tensor::from_fn(
            [8, 8, 1, 1],
            |[o, i, _, _]| if perm[o] == i { 1.0 } else { 0.0 },
        );
        let x = Tensor::randn([1, 8, 5, 5], &mut r);
        let y = okm_csp(&x, &block).unwrap();
        for (o, &i) in perm.iter().enumerate() {
            assert_eq!(
                y.slice_channels(o, 1).unwrap(),
                x.slice_channels(i, 1).unwrap()
            );
        }
    }

    #[test]
    fn okm_csp_routes_quarter_of_channels() {
        let block = OkmCspConfig::new(64, 32).build(&mut rng(6)).unwrap();
        assert_eq!(block.omni.channels(), 16);
        let y = okm_csp(&Tensor::randn([1, 64, 4, 4], &mut rng(7)), &block).unwrap();
        assert_eq!(y.dims(), [1, 32, 4, 4]);
        assert!(OkmCspConfig::new(1, 4).build(&mut rng(0)).is_err());
    }

    #[test]
    fn spd_shapes() {
        let mut r = rng(8);
        let spd = SpdConv::init(&mut r, 3, 5, 2).unwrap();
        assert_eq!(spd.param_count(), spd_param_count(3, 5, 2));
        assert_eq!(
            spd_conv(&Tensor::zeros([1, 3, 8, 6]), &spd).unwrap().dims(),
            [1, 5, 4, 3]
        );
        assert!(spd_conv(&Tensor::zeros([1, 3, 7, 6]), &spd).is_err());
    }

    #[test]
    fn asfp_shapes_and_errors() {
        let mut r = rng(9);
        let cfg = AsfpConfig::new(4, 8, 8);
        let a = cfg.build(&mut r).unwrap();
        assert_eq!(a.param_count(), cfg.param_count().unwrap());
        let p2 = Tensor::randn([1, 4, 8, 8], &mut r);
        let p3 = Tensor::randn([1, 8, 4, 4], &mut r);
        assert_eq!(asfp_fuse(&p2, &p3, &a).unwrap().dims(), [1, 8, 4, 4]);
        assert!(asfp_fuse(&p2, &Tensor::zeros([1, 8, 3, 4]), &a).is_err());
    }

    #[test]
    fn gradients() {
        let mut r = rng(10);
        let cfg = GradCheckConfig::default();

        let block = OkmCspConfig::new(8, 6).build(&mut r).unwrap();
        let f = LayerFn::new(&block);
        let args = f.arguments(vec![Tensor::randn([1, 8, 5, 6], &mut r)]);
        let rep = finite_diff_check(&f, &args, &cfg).unwrap();
        assert!(rep.passed, "okm {rep}");

        let a = AsfpConfig::new(2, 4, 4).build(&mut r).unwrap();
        let f = LayerFn::new(&a);
        let args = f.arguments(vec![
            Tensor::randn([1, 2, 8, 8], &mut r),
            Tensor::randn([1, 4, 4, 4], &mut r),
        ]);
        let rep = finite_diff_check(&f, &args, &cfg).unwrap();
        assert!(rep.passed, "asfp {rep}");
        let grads =
            crate::gradcheck::Differentiable::vjp(&f, &args, &Tensor::randn([1, 4, 4, 4], &mut r))
                .unwrap();
        assert!(grads[0].max_abs() > 0.0 && grads[1].max_abs() > 0.0);
    }

    proptest! {
        #[test]
        fn frequency_gate_is_linear_in_x(seed in 0u64..10_000, a in -2.0f64..2.0) {
            let mut r = rng(seed);
            let x = Tensor::randn([1, 2, 4, 6], &mut r);
            let y = Tensor::randn([1, 2, 4, 6], &mut r);
            let g = Tensor::randn([1, 2, 4, 1], &mut r);
            let lhs = frequency_gate(Exec::Parallel, &x.scale(a).add(&y).unwrap(), &g).unwrap();
            let rhs = frequency_gate(Exec::Parallel, &x, &g).unwrap().scale(a).add(&frequency_gate(Exec::Parallel, &y, &g).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
        }

        #[test]
        fn split_then_concat_is_identity(c in 2usize..40, e in 0.05f64..1.0, seed in 0u64..1000) {
            let x = Tensor::randn([1, c, 2, 2], &mut rng(seed));
            if let Ok((ok, id)) = okm_split(&x, e) {
                prop_assert_eq!(ok.channels() + id.as_ref().map_or(0, |t| t.channels()), c);
                let back = match &id {
                    Some(t) => Tensor::concat_channels(&[&ok, t]).unwrap(),
                    None => ok.clone(),
                };
                prop_assert_eq!(back, x);
            } else {
                prop_assert!(((c as f64) * e).floor() < 1.0);
            }
        }
    }
}
