//! Orthonormal Haar analysis/synthesis, the LL cascade, wavelet-domain
//! depthwise convolution (WTConv) and the C2f-WTC block.
//!
//! For a 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a - b + c - d) / 2   (horizontal difference)
//! HL = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! The transform matrix is orthogonal, so synthesis is its transpose and the
//! sum of squares is preserved.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{config_err, shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::layer::{C2f, ConvLayer, Layer, ParamCursor};
use crate::ops::Activation;
use crate::tensor::Tensor;

/// How odd spatial sizes are handled before a Haar step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Padding {
    /// Odd sizes are a shape error.
    Strict,
    /// Reflect-pad one row/column on the bottom/right, crop after synthesis.
    #[default]
    Reflect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubBands {
    /// `(N, 4C, h, w)` with channel blocks ordered LL, LH, HL, HH.
    pub fn pack(&self) -> Result<Tensor> {
        Tensor::concat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    pub fn unpack(packed: &Tensor) -> Result<SubBands> {
        let c4 = packed.channels();
        if !c4.is_multiple_of(4) {
            return Err(shape_err!("packed sub-bands need 4k channels, got {c4}"));
        }
        let c = c4 / 4;
        Ok(SubBands {
            ll: packed.slice_channels(0, c)?,
            lh: packed.slice_channels(c, c)?,
            hl: packed.slice_channels(2 * c, c)?,
            hh: packed.slice_channels(3 * c, c)?,
        })
    }

    pub fn norm_sq(&self) -> f64 {
        self.ll.norm_sq() + self.lh.norm_sq() + self.hl.norm_sq() + self.hh.norm_sq()
    }
}

/// One-level analysis into the packed `(N, 4C, H/2, W/2)` layout. H and W must be even.
pub fn haar_wt_packed(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("Haar analysis needs even dims, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, 4 * c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    let band = c * ho * wo;
    for b in 0..n {
        for ch in 0..c {
            let xp = (b * c + ch) * h * w;
            let op = b * 4 * band + ch * ho * wo;
            for i in 0..ho {
                for j in 0..wo {
                    let a = src[xp + 2 * i * w + 2 * j];
                    let bb = src[xp + 2 * i * w + 2 * j + 1];
                    let cc = src[xp + (2 * i + 1) * w + 2 * j];
                    let d = src[xp + (2 * i + 1) * w + 2 * j + 1];
                    let o = op + i * wo + j;
                    dst[o] = 0.5 * (a + bb + cc + d);
                    dst[o + band] = 0.5 * (a - bb + cc - d);
                    dst[o + 2 * band] = 0.5 * (a + bb - cc - d);
                    dst[o + 3 * band] = 0.5 * (a - bb - cc + d);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`haar_wt_packed`].
pub fn haar_iwt_packed(packed: &Tensor) -> Result<Tensor> {
    let [n, c4, ho, wo] = packed.dims();
    if c4 % 4 != 0 {
        return Err(shape_err!("packed sub-bands need 4k channels, got {c4}"));
    }
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = packed.data();
    let dst = out.data_mut();
    let band = c * ho * wo;
    for b in 0..n {
        for ch in 0..c {
            let xp = (b * c + ch) * h * w;
            let ip = b * 4 * band + ch * ho * wo;
            for i in 0..ho {
                for j in 0..wo {
                    let o = ip + i * wo + j;
                    let (ll, lh, hl, hh) =
                        (src[o], src[o + band], src[o + 2 * band], src[o + 3 * band]);
                    dst[xp + 2 * i * w + 2 * j] = 0.5 * (ll + lh + hl + hh);
                    dst[xp + 2 * i * w + 2 * j + 1] = 0.5 * (ll - lh + hl - hh);
                    dst[xp + (2 * i + 1) * w + 2 * j] = 0.5 * (ll + lh - hl - hh);
                    dst[xp + (2 * i + 1) * w + 2 * j + 1] = 0.5 * (ll - lh - hl + hh);
                }
            }
        }
    }
    Ok(out)
}

pub fn haar_wt(x: &Tensor) -> Result<SubBands> {
    SubBands::unpack(&haar_wt_packed(x)?)
}

pub fn haar_iwt(bands: &SubBands) -> Result<Tensor> {
    let d = bands.ll.dims();
    for t in [&bands.lh, &bands.hl, &bands.hh] {
        if t.dims() != d {
            return Err(shape_err!(
                "sub-band dims differ: {:?} vs {:?}",
                t.dims(),
                d
            ));
        }
    }
    haar_iwt_packed(&bands.pack()?)
}

/// Reflect-pads to even height/width by appending one row/column when odd.
pub fn pad_to_even(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let (hp, wp) = (h + h % 2, w + w % 2);
    if (hp, wp) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn([n, c, hp, wp], |[b, ch, i, j]| {
        x.at(b, ch, reflect_index(i, h), reflect_index(j, w))
    })
}

fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        len.saturating_sub(2)
    }
}

/// Top-left `h x w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, xh, xw] = x.dims();
    if h > xh || w > xw || h == 0 || w == 0 {
        return Err(shape_err!("crop {h}x{w} from {xh}x{xw}"));
    }
    Ok(Tensor::from_fn([n, c, h, w], |[b, ch, i, j]| {
        x.at(b, ch, i, j)
    }))
}

/// Cascade of Haar steps applied to successive LL bands.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    /// `bands[i]` is the decomposition at level `i + 1`.
    pub bands: Vec<SubBands>,
    /// Deepest LL band, or the input itself when no level was taken.
    pub residual_ll: Tensor,
    /// Spatial size entering each level, before any padding.
    pub sizes: Vec<(usize, usize)>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.bands.len()
    }

    /// Squared norm over the residual LL and all detail bands.
    pub fn energy(&self) -> f64 {
        self.residual_ll.norm_sq()
            + self
                .bands
                .iter()
                .map(|b| b.lh.norm_sq() + b.hl.norm_sq() + b.hh.norm_sq())
                .sum::<f64>()
    }
}

pub fn wt_cascade(x: &Tensor, levels: usize, padding: Padding) -> Result<WaveletPyramid> {
    let mut bands = Vec::with_capacity(levels);
    let mut sizes = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for level in 0..levels {
        let (h, w) = (cur.height(), cur.width());
        sizes.push((h, w));
        if h % 2 != 0 || w % 2 != 0 {
            match padding {
                Padding::Strict => {
                    return Err(shape_err!(
                        "level {} input {h}x{w} is odd; dims must be divisible by 2^{levels}",
                        level + 1
                    ))
                }
                Padding::Reflect => cur = pad_to_even(&cur),
            }
        }
        let sb = haar_wt(&cur)?;
        cur = sb.ll.clone();
        bands.push(sb);
    }
    Ok(WaveletPyramid {
        bands,
        residual_ll: cur,
        sizes,
    })
}

/// Rebuilds the input from the residual LL and the stored detail bands.
pub fn iwt_cascade(p: &WaveletPyramid) -> Result<Tensor> {
    let mut ll = p.residual_ll.clone();
    for (sb, &(h, w)) in p.bands.iter().zip(&p.sizes).rev() {
        let rec = haar_iwt(&SubBands {
            ll,
            lh: sb.lh.clone(),
            hl: sb.hl.clone(),
            hh: sb.hh.clone(),
        })?;
        ll = crop(&rec, h, w)?;
    }
    Ok(ll)
}

struct HaarAnalysisOp;

impl Backward for HaarAnalysisOp {
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(haar_iwt_packed(grad)?)])
    }
}

struct HaarSynthesisOp;

impl Backward for HaarSynthesisOp {
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(haar_wt_packed(grad)?)])
    }
}

struct PadEvenOp;

impl Backward for PadEvenOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let [n, c, h, w] = inputs[0].dims();
        let [_, _, hp, wp] = grad.dims();
        let mut dx = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..hp {
                    for j in 0..wp {
                        let (si, sj) = (reflect_index(i, h), reflect_index(j, w));
                        let v = dx.at(b, ch, si, sj) + grad.at(b, ch, i, j);
                        dx.set(b, ch, si, sj, v);
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct CropOp;

impl Backward for CropOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let [_, _, h, w] = grad.dims();
        let mut dx = Tensor::zeros(inputs[0].dims());
        let [n, c, _, _] = dx.dims();
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dx.set(b, ch, i, j, grad.at(b, ch, i, j));
                    }
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Graph op: Haar analysis into the packed layout.
pub fn trace_haar(g: &mut Graph, x: Var) -> Result<Var> {
    let y = haar_wt_packed(g.value(x))?;
    Ok(g.push(&[x], y, HaarAnalysisOp))
}

/// Graph op: Haar synthesis from the packed layout.
pub fn trace_ihaar(g: &mut Graph, packed: Var) -> Result<Var> {
    let y = haar_iwt_packed(g.value(packed))?;
    Ok(g.push(&[packed], y, HaarSynthesisOp))
}

fn trace_pad_even(g: &mut Graph, x: Var) -> Var {
    let [_, _, h, w] = g.dims(x);
    if h % 2 == 0 && w % 2 == 0 {
        return x;
    }
    let y = pad_to_even(g.value(x));
    g.push(&[x], y, PadEvenOp)
}

fn trace_crop(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let [_, _, xh, xw] = g.dims(x);
    if (xh, xw) == (h, w) {
        return Ok(x);
    }
    let y = crop(g.value(x), h, w)?;
    Ok(g.push(&[x], y, CropOp))
}

/// Receptive field (in input pixels, per axis) of a WTConv with kernel `k` and `levels` levels.
pub fn wtconv_receptive_field(kernel: usize, levels: usize) -> usize {
    kernel << levels
}

/// Closed-form parameter count: one base kernel plus four band kernels per level, all depthwise.
pub fn wtconv_param_count(channels: usize, kernel: usize, levels: usize) -> usize {
    channels * kernel * kernel * (1 + 4 * levels)
}

/// Depthwise wavelet-domain convolution.
///
/// `Y = base * X + R`, where `R` is the cascade reconstruction in which every
/// sub-band of every level is convolved with its own `k x k` depthwise kernel
/// before synthesis; the convolved LL of level `i` is added to the
/// reconstruction coming up from level `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct WtConv {
    pub channels: usize,
    pub kernel: usize,
    /// `(C, 1, k, k)`, applied in the spatial domain.
    pub base: Tensor,
    /// Per level `(4C, 1, k, k)`, channel blocks LL, LH, HL, HH.
    pub bands: Vec<Tensor>,
    pub padding: Padding,
}

pub type WtConvWeights = WtConv;

impl WtConv {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        kernel: usize,
        levels: usize,
    ) -> Result<Self> {
        if channels == 0 || kernel.is_multiple_of(2) {
            return Err(config_err!(
                "wtconv needs positive channels and an odd kernel, got C={channels} k={kernel}"
            ));
        }
        let bound = 1.0 / kernel as f64;
        Ok(Self {
            channels,
            kernel,
            base: Tensor::uniform([channels, 1, kernel, kernel], bound, rng),
            bands: (0..levels)
                .map(|_| Tensor::uniform([4 * channels, 1, kernel, kernel], bound, rng))
                .collect(),
            padding: Padding::Reflect,
        })
    }

    pub fn from_parts(base: Tensor, bands: Vec<Tensor>) -> Result<Self> {
        let [c, one, k, k2] = base.dims();
        if one != 1 || k != k2 || k % 2 == 0 {
            return Err(shape_err!(
                "base kernel must be (C, 1, k, k) with odd k, got {:?}",
                base.dims()
            ));
        }
        for b in &bands {
            if b.dims() != [4 * c, 1, k, k] {
                return Err(shape_err!(
                    "band kernel {:?}, expected [{}, 1, {k}, {k}]",
                    b.dims(),
                    4 * c
                ));
            }
        }
        Ok(Self {
            channels: c,
            kernel: k,
            base,
            bands,
            padding: Padding::Reflect,
        })
    }

    pub fn levels(&self) -> usize {
        self.bands.len()
    }

    pub fn receptive_field(&self) -> usize {
        wtconv_receptive_field(self.kernel, self.levels())
    }

    fn spec(&self, groups: usize) -> ConvSpec {
        ConvSpec::same(self.kernel, self.kernel)
            .expect("odd kernel checked at construction")
            .with_groups(groups)
    }
}

impl Layer for WtConv {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.base];
        p.extend(self.bands.iter());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.base];
        p.extend(self.bands.iter_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let x = inputs[0];
        let c = self.channels;
        if g.dims(x)[1] != c {
            return Err(shape_err!(
                "wtconv built for {c} channels, input has {}",
                g.dims(x)[1]
            ));
        }
        let base = params.next()?;
        let band_vars = (0..self.levels())
            .map(|_| params.next())
            .collect::<Result<Vec<_>>>()?;
        let spatial = g.conv(x, base, None, self.spec(c))?;
        if band_vars.is_empty() {
            return Ok(spatial);
        }

        let mut sizes = Vec::with_capacity(band_vars.len());
        let mut filtered = Vec::with_capacity(band_vars.len());
        let mut ll = x;
        for (level, &k) in band_vars.iter().enumerate() {
            let [_, _, h, w] = g.dims(ll);
            if self.padding == Padding::Strict && (h % 2 != 0 || w % 2 != 0) {
                return Err(shape_err!(
                    "wtconv level {} input {h}x{w} is odd",
                    level + 1
                ));
            }
            sizes.push((h, w));
            let even = trace_pad_even(g, ll);
            let packed = trace_haar(g, even)?;
            filtered.push(g.conv(packed, k, None, self.spec(4 * c))?);
            ll = g.slice(packed, 0, c)?;
        }

        let mut up: Option<Var> = None;
        for (level, &(h, w)) in sizes.iter().enumerate().rev() {
            let mut bands = filtered[level];
            if let Some(deeper) = up {
                let ll = g.slice(bands, 0, c)?;
                let detail = g.slice(bands, c, 3 * c)?;
                let ll = g.add(ll, deeper)?;
                bands = g.concat(&[ll, detail])?;
            }
            let rec = trace_ihaar(g, bands)?;
            up = Some(trace_crop(g, rec, h, w)?);
        }
        g.add(spatial, up.expect("at least one level"))
    }
}

pub fn wtconv(x: &Tensor, weights: &WtConv) -> Result<Tensor> {
    weights.forward(&[x])
}

/// Hyper-parameters of a C2f-WTC block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C2fWtcConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Number of bottlenecks.
    pub n: usize,
    pub levels: usize,
    pub kernel: usize,
    /// Bottleneck channel reduction factor.
    pub reduction: f64,
}

impl C2fWtcConfig {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            n: 1,
            levels: 2,
            kernel: 3,
            reduction: 0.5,
        }
    }

    /// Width of each half after the entry conv.
    pub fn hidden(&self) -> Result<usize> {
        if !self.c_out.is_multiple_of(2) || self.c_out == 0 {
            return Err(config_err!(
                "c2f_wtc output width {} cannot be split into two halves",
                self.c_out
            ));
        }
        Ok(self.c_out / 2)
    }

    /// Width inside each bottleneck.
    pub fn reduced(&self) -> Result<usize> {
        let r = (self.hidden()? as f64 * self.reduction).floor() as usize;
        if r == 0 || !(self.reduction > 0.0 && self.reduction <= 1.0) {
            return Err(config_err!(
                "bottleneck reduction {} leaves no channels",
                self.reduction
            ));
        }
        Ok(r)
    }

    pub fn param_count(&self) -> Result<usize> {
        let (h, r, k) = (self.hidden()?, self.reduced()?, self.kernel);
        let entry = self.c_in * 2 * h + 2 * h;
        let bottleneck = (h * r + r) + wtconv_param_count(r, k, self.levels) + (r * h + h);
        let fuse = (2 + self.n) * h * self.c_out + self.c_out;
        Ok(entry + self.n * bottleneck + fuse)
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<C2fWtc> {
        if self.c_in == 0 {
            return Err(config_err!("c2f_wtc needs input channels"));
        }
        let (h, r) = (self.hidden()?, self.reduced()?);
        let blocks = (0..self.n)
            .map(|_| WtcBottleneck::init(rng, h, r, self.kernel, self.levels))
            .collect::<Result<Vec<_>>>()?;
        C2f::init(rng, self.c_in, self.c_out, h, blocks)
    }
}

/// `x + expand(wtconv(reduce(x)))`
#[derive(Clone, Debug, PartialEq)]
pub struct WtcBottleneck {
    pub reduce: ConvLayer,
    pub wt: WtConv,
    pub expand: ConvLayer,
}

impl WtcBottleneck {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        reduced: usize,
        kernel: usize,
        levels: usize,
    ) -> Result<Self> {
        Ok(Self {
            reduce: ConvLayer::pointwise(rng, channels, reduced, Activation::Silu)?,
            wt: WtConv::init(rng, reduced, kernel, levels)?,
            expand: ConvLayer::pointwise(rng, reduced, channels, Activation::Silu)?,
        })
    }
}

impl Layer for WtcBottleneck {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.reduce.params();
        p.extend(self.wt.params());
        p.extend(self.expand.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.reduce.params_mut();
        p.extend(self.wt.params_mut());
        p.extend(self.expand.params_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let r = self.reduce.trace(g, inputs, params)?;
        let w = self.wt.trace(g, &[r], params)?;
        let e = self.expand.trace(g, &[w], params)?;
        g.add(inputs[0], e)
    }
}

pub type C2fWtc = C2f<WtcBottleneck>;

pub fn c2f_wtc_block(x: &Tensor, block: &C2fWtc) -> Result<Tensor> {
    block.forward(&[x])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};
    use crate::layer::{fill_params, LayerFn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn delta(c: usize, k: usize) -> Tensor {
        Tensor::from_fn([c, 1, k, k], |[_, _, i, j]| {
            if i == k / 2 && j == k / 2 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn haar_of_single_block() {
        let x = Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = haar_wt(&x).unwrap();
        assert_eq!(b.ll.data(), &[5.0]);
        assert_eq!(b.lh.data(), &[-1.0]);
        assert_eq!(b.hl.data(), &[-2.0]);
        assert_eq!(b.hh.data(), &[0.0]);
        assert_eq!(b.norm_sq(), 30.0);
        assert_eq!(x.norm_sq(), 30.0);
        assert_eq!(haar_iwt(&b).unwrap(), x);
    }

    #[test]
    fn constant_block_has_only_ll() {
        let b = haar_wt(&Tensor::filled([1, 1, 2, 2], 1.5)).unwrap();
        assert_eq!(b.ll.data(), &[3.0]);
        assert_eq!(b.lh.data(), &[0.0]);
        assert_eq!(b.hl.data(), &[0.0]);
        assert_eq!(b.hh.data(), &[0.0]);
        let z = Tensor::zeros([1, 1, 1, 1]);
        let back = haar_iwt(&SubBands {
            ll: Tensor::filled([1, 1, 1, 1], 3.0),
            lh: z.clone(),
            hl: z.clone(),
            hh: z.clone(),
        })
        .unwrap();
        assert_eq!(back, Tensor::filled([1, 1, 2, 2], 1.5));
        let zeros = SubBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        };
        assert_eq!(haar_iwt(&zeros).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn odd_input_is_a_shape_error_without_padding() {
        assert!(haar_wt(&Tensor::zeros([1, 1, 3, 4])).is_err());
        assert!(wt_cascade(&Tensor::zeros([1, 1, 4, 6]), 2, Padding::Strict).is_err());
        assert!(wt_cascade(&Tensor::zeros([1, 1, 4, 8]), 2, Padding::Strict).is_ok());
        let bad = SubBands {
            ll: Tensor::zeros([1, 1, 2, 2]),
            lh: Tensor::zeros([1, 1, 2, 2]),
            hl: Tensor::zeros([1, 1, 2, 1]),
            hh: Tensor::zeros([1, 1, 2, 2]),
        };
        assert!(haar_iwt(&bad).is_err());
    }

    #[test]
    fn cascade_of_constant() {
        let p = wt_cascade(&Tensor::filled([1, 1, 4, 4], 2.0), 2, Padding::Strict).unwrap();
        assert_eq!(p.residual_ll.data(), &[8.0]);
        for b in &p.bands {
            assert_eq!(b.lh.max_abs() + b.hl.max_abs() + b.hh.max_abs(), 0.0);
        }
    }

    #[test]
    fn cascade_shapes_and_level_zero() {
        let x = Tensor::randn([1, 2, 8, 8], &mut rng(1));
        let p = wt_cascade(&x, 3, Padding::Strict).unwrap();
        let dims: Vec<usize> = p.bands.iter().map(|b| b.ll.height()).collect();
        assert_eq!(dims, vec![4, 2, 1]);
        let p0 = wt_cascade(&x, 0, Padding::Strict).unwrap();
        assert!(p0.bands.is_empty());
        assert_eq!(p0.residual_ll, x);
    }

    #[test]
    fn odd_sizes_round_trip_with_reflection() {
        let x = Tensor::randn([2, 3, 7, 5], &mut rng(2));
        let p = wt_cascade(&x, 3, Padding::Reflect).unwrap();
        let back = iwt_cascade(&p).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn wtconv_identity_cases() {
        let x = Tensor::randn([1, 3, 8, 8], &mut rng(3));
        let w0 = WtConv::from_parts(delta(3, 3), vec![]).unwrap();
        assert_eq!(wtconv(&x, &w0).unwrap(), x);

        let w1 = WtConv::from_parts(Tensor::zeros([3, 1, 3, 3]), vec![delta(12, 3)]).unwrap();
        assert!(wtconv(&x, &w1).unwrap().max_abs_diff(&x).unwrap() <= 1e-12);

        let mut wz = WtConv::init(&mut rng(4), 3, 3, 2).unwrap();
        fill_params(&mut wz, 0.0);
        assert_eq!(wtconv(&x, &wz).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn wtconv_level_zero_is_depthwise_conv() {
        let mut r = rng(5);
        let w = WtConv::init(&mut r, 2, 5, 0).unwrap();
        let x = Tensor::randn([2, 2, 6, 6], &mut r);
        let expect = conv2d(
            &x,
            &w.base,
            None,
            &ConvSpec::same(5, 5).unwrap().with_groups(2),
        )
        .unwrap();
        assert_eq!(wtconv(&x, &w).unwrap(), expect);
    }

    #[test]
    fn wtconv_rejects_channel_mismatch() {
        let w = WtConv::init(&mut rng(6), 2, 3, 1).unwrap();
        assert!(wtconv(&Tensor::zeros([1, 3, 4, 4]), &w).is_err());
        assert!(WtConv::from_parts(
            Tensor::zeros([2, 1, 3, 3]),
            vec![Tensor::zeros([4, 1, 3, 3])]
        )
        .is_err());
    }

    #[test]
    fn wtconv_param_count_matches_instance() {
        for levels in 0..4 {
            let w = WtConv::init(&mut rng(7), 5, 3, levels).unwrap();
            assert_eq!(w.param_count(), wtconv_param_count(5, 3, levels));
        }
        assert_eq!(
            wtconv_param_count(5, 3, 3) - wtconv_param_count(5, 3, 2),
            4 * 5 * 9
        );
    }

    /// Width of the set of outputs that respond to an impulse at the centre.
    fn impulse_support(w: &WtConv, size: usize) -> usize {
        let c = w.channels;
        let x = Tensor::from_fn([1, c, size, size], |[_, _, i, j]| {
            if i == size / 2 && j == size / 2 {
                1.0
            } else {
                0.0
            }
        });
        let y = wtconv(&x, w).unwrap();
        let cols: Vec<usize> = (0..size)
            .filter(|&j| (0..size).any(|i| y.at(0, 0, i, j).abs() > 1e-14))
            .collect();
        cols.last().unwrap() - cols.first().unwrap() + 1
    }

    #[test]
    fn receptive_field_doubles_per_level() {
        let mut r = rng(8);
        for levels in 1..=3 {
            let w = WtConv::init(&mut r, 1, 3, levels).unwrap();
            assert_eq!(
                impulse_support(&w, 64),
                wtconv_receptive_field(3, levels),
                "L={levels}"
            );
        }
        assert_eq!(wtconv_receptive_field(3, 0), 3);
    }

    #[test]
    fn wtconv_gradients() {
        let mut r = rng(9);
        let w = WtConv::init(&mut r, 2, 3, 2).unwrap();
        let f = LayerFn::new(&w);
        let args = f.arguments(vec![Tensor::randn([1, 2, 6, 6], &mut r)]);
        let rep = finite_diff_check(&f, &args, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep}");
        // odd spatial dims exercise the reflect pad and crop adjoints
        let args = f.arguments(vec![Tensor::randn([1, 2, 7, 5], &mut r)]);
        let rep = finite_diff_check(&f, &args, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn c2f_wtc_shapes_zero_weights_and_gradients() {
        let mut r = rng(10);
        let cfg = C2fWtcConfig::new(6, 8);
        let block = cfg.build(&mut r).unwrap();
        assert_eq!(block.param_count(), cfg.param_count().unwrap());
        let x = Tensor::randn([2, 6, 8, 8], &mut r);
        assert_eq!(c2f_wtc_block(&x, &block).unwrap().dims(), [2, 8, 8, 8]);

        let mut bn = block.blocks[0].clone();
        fill_params(&mut bn, 0.0);
        let half = Tensor::randn([1, 4, 8, 8], &mut r);
        assert_eq!(bn.forward(&[&half]).unwrap(), half);

        let f = LayerFn::new(&block);
        let args = f.arguments(vec![Tensor::randn([1, 6, 4, 4], &mut r)]);
        let rep = finite_diff_check(&f, &args, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn c2f_wtc_odd_width_is_config_error() {
        let cfg = C2fWtcConfig::new(4, 7);
        assert!(matches!(
            cfg.build(&mut rng(0)),
            Err(crate::Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_parseval_linearity(hh in 1usize..6, ww in 1usize..6, c in 1usize..3, seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut r = rng(seed);
            let x = Tensor::randn([1, c, 2 * hh, 2 * ww], &mut r);
            let y = Tensor::randn([1, c, 2 * hh, 2 * ww], &mut r);
            let bx = haar_wt(&x).unwrap();
            prop_assert!(haar_iwt(&bx).unwrap().max_abs_diff(&x).unwrap() <= 1e-10);
            prop_assert!((bx.norm_sq() - x.norm_sq()).abs() <= 1e-10 * x.norm_sq());
            let mix = x.scale(a).add(&y.scale(b)).unwrap();
            let lhs = haar_wt_packed(&mix).unwrap();
            let rhs = haar_wt_packed(&x).unwrap().scale(a).add(&haar_wt_packed(&y).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.max_abs()));
        }

        #[test]
        fn wtconv_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut r = rng(seed);
            let w = WtConv::init(&mut r, 2, 3, 2).unwrap();
            let x = Tensor::randn([1, 2, 8, 8], &mut r);
            let y = Tensor::randn([1, 2, 8, 8], &mut r);
            let lhs = wtconv(&x.scale(a).add(&y.scale(b)).unwrap(), &w).unwrap();
            let rhs = wtconv(&x, &w).unwrap().scale(a).add(&wtconv(&y, &w).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.max_abs()));
        }
    }
}
