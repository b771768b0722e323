//! Expert-mixture ("dynamic") convolution, the ghost feature generator and the
//! C2f-GDC block.
//!
//! A dynamic convolution holds `M` kernels of identical shape. A small head
//! maps the pooled input to `M` logits; their softmax `α_n` weights the
//! expert outputs per sample: `Y_n = Σ_i α_{n,i} · conv(X_n, W_i)`.

use rand::Rng;

use crate::conv::{conv2d, conv2d_vjp, ConvSpec};
use crate::error::{config_err, shape_err, Result};
use crate::graph::{Backward, Graph, Var};
use crate::layer::{C2f, ConvLayer, Layer, ParamCursor};
use crate::ops::{global_avg_pool, softmax, Activation};
use crate::tensor::Tensor;

pub const DEFAULT_EXPERTS: usize = 4;

/// `max(M, ceil(C / 4))`
pub fn head_hidden_width(channels: usize, experts: usize) -> usize {
    experts.max(channels.div_ceil(4))
}

pub fn head_param_count(channels: usize, hidden: usize, experts: usize) -> usize {
    channels * hidden + hidden + hidden * experts + experts
}

/// Two 1x1 affine maps with a ReLU between, applied to the pooled `(N, C, 1, 1)` descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffHead {
    pub fc1: ConvLayer,
    pub fc2: ConvLayer,
}

impl CoeffHead {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, channels: usize, experts: usize) -> Result<Self> {
        Self::with_hidden(rng, channels, experts, head_hidden_width(channels, experts))
    }

    pub fn with_hidden<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        experts: usize,
        hidden: usize,
    ) -> Result<Self> {
        if channels == 0 || experts == 0 || hidden == 0 {
            return Err(config_err!(
                "coefficient head needs positive widths, got C={channels} h={hidden} M={experts}"
            ));
        }
        Ok(Self {
            fc1: ConvLayer::pointwise(rng, channels, hidden, Activation::Relu)?,
            fc2: ConvLayer::pointwise(rng, hidden, experts, Activation::Identity)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_channels()
    }

    pub fn experts(&self) -> usize {
        self.fc2.out_channels()
    }
}

impl Layer for CoeffHead {
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

    /// Maps the input feature map to `(N, M, 1, 1)` logits.
    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let c = g.dims(inputs[0])[1];
        if c != self.channels() {
            return Err(shape_err!(
                "coefficient head expects {} channels, got {c}",
                self.channels()
            ));
        }
        let pooled = g.global_avg_pool(inputs[0]);
        let h = self.fc1.trace(g, &[pooled], params)?;
        self.fc2.trace(g, &[h], params)
    }
}

/// Per-sample mixture weights, one row of length `M` per batch element.
pub fn dyn_coeffs(x: &Tensor, head: &CoeffHead) -> Result<Vec<Vec<f64>>> {
    if x.channels() != head.channels() {
        return Err(shape_err!(
            "coefficient head expects {} channels, got {}",
            head.channels(),
            x.channels()
        ));
    }
    let pooled = global_avg_pool(x);
    let logits = head.fc2.forward(&[&head.fc1.forward(&[&pooled])?])?;
    let m = head.experts();
    logits.data().chunks(m).map(softmax).collect()
}

/// `M` kernels of identical dims with an optional shared bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub kernels: Vec<Tensor>,
    /// `(1, C_out, 1, 1)`
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl ExpertBank {
    pub fn new(kernels: Vec<Tensor>, bias: Option<Tensor>, spec: ConvSpec) -> Result<Self> {
        let Some(first) = kernels.first() else {
            return Err(config_err!("expert bank needs at least one kernel"));
        };
        let d = first.dims();
        if let Some(k) = kernels.iter().find(|k| k.dims() != d) {
            return Err(shape_err!(
                "expert kernels differ in dims: {:?} vs {:?}",
                k.dims(),
                d
            ));
        }
        if let Some(b) = &bias {
            if b.dims() != [1, d[0], 1, 1] {
                return Err(shape_err!(
                    "expert bias dims {:?} for {} outputs",
                    b.dims(),
                    d[0]
                ));
            }
        }
        Ok(Self {
            kernels,
            bias,
            spec,
        })
    }

    /// Stride-1 "same" bank with uniform `±1/sqrt(fan_in)` kernels and no bias.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        experts: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let spec = ConvSpec::same(kernel, kernel)?;
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let kernels = (0..experts)
            .map(|_| Tensor::uniform([c_out, c_in, kernel, kernel], bound, rng))
            .collect();
        Self::new(kernels, None, spec)
    }

    pub fn experts(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        self.kernels[0].dims()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel_dims()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel_dims()[0]
    }

    /// `Σ_i α_i W_i`
    pub fn merged_kernel(&self, alpha: &[f64]) -> Result<Tensor> {
        if alpha.len() != self.experts() {
            return Err(shape_err!(
                "{} coefficients for {} experts",
                alpha.len(),
                self.experts()
            ));
        }
        let mut k = Tensor::zeros(self.kernel_dims());
        for (a, w) in alpha.iter().zip(&self.kernels) {
            k.axpy(*a, w)?;
        }
        Ok(k)
    }
}

pub fn expert_bank_param_count(experts: usize, kernel_dims: [usize; 4]) -> usize {
    experts * kernel_dims.iter().product::<usize>()
}

/// `Y_n = Σ_i α_{n,i} · conv(X_n, W_i) (+ bias)`, evaluated as written (one convolution per expert).
pub fn dynamic_conv(x: &Tensor, bank: &ExpertBank, alpha: &[Vec<f64>]) -> Result<Tensor> {
    let n = x.batch();
    if alpha.len() != n {
        return Err(shape_err!("{} coefficient rows for batch {n}", alpha.len()));
    }
    if let Some(row) = alpha.iter().find(|r| r.len() != bank.experts()) {
        return Err(shape_err!(
            "coefficient row of length {} for {} experts",
            row.len(),
            bank.experts()
        ));
    }
    let flat: Vec<f64> = alpha.concat();
    let a = Tensor::new([n, bank.experts(), 1, 1], flat)?;
    mix_forward(x, &a, &bank.kernels, bank.bias.as_ref(), &bank.spec)
}

fn mix_forward(
    x: &Tensor,
    alpha: &Tensor,
    kernels: &[Tensor],
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let m = kernels.len();
    let mut out: Option<Tensor> = None;
    for (i, w) in kernels.iter().enumerate() {
        let mut y = conv2d(x, w, None, spec)?;
        let per = y.len() / y.batch();
        for (n, chunk) in y.data_mut().chunks_mut(per).enumerate() {
            let a = alpha.data()[n * m + i];
            chunk.iter_mut().for_each(|v| *v *= a);
        }
        out = Some(match out {
            None => y,
            Some(acc) => acc.add(&y)?,
        });
    }
    let mut out = out.expect("bank is non-empty");
    if let Some(b) = bias {
        let [bn, c, h, w] = out.dims();
        let plane = h * w;
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[idx % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(bn * c * plane, out.len());
    }
    Ok(out)
}

/// Inputs: `x`, `alpha (N, M, 1, 1)`, the `M` kernels, then the bias if present.
struct MixOp {
    spec: ConvSpec,
    experts: usize,
    has_bias: bool,
}

impl Backward for MixOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, alpha) = (inputs[0], inputs[1]);
        let m = self.experts;
        let n = x.batch();
        let per = grad.len() / n;
        let mut dx = Tensor::zeros(x.dims());
        let mut dalpha = Tensor::zeros(alpha.dims());
        let mut dkernels = Vec::with_capacity(m);
        for i in 0..m {
            let w = inputs[2 + i];
            let y = conv2d(x, w, None, &self.spec)?;
            let mut scaled = grad.clone();
            for (b, chunk) in scaled.data_mut().chunks_mut(per).enumerate() {
                let a = alpha.data()[b * m + i];
                chunk.iter_mut().for_each(|v| *v *= a);
                let yg: f64 = y.data()[b * per..(b + 1) * per]
                    .iter()
                    .zip(&grad.data()[b * per..(b + 1) * per])
                    .map(|(p, q)| p * q)
                    .sum();
                dalpha.data_mut()[b * m + i] = yg;
            }
            let g = conv2d_vjp(x, w, &self.spec, &scaled)?;
            dx.axpy(1.0, &g.dx)?;
            dkernels.push(Some(g.dkernel));
        }
        let mut out = vec![Some(dx), Some(dalpha)];
        out.extend(dkernels);
        if self.has_bias {
            let [_, c, h, w] = grad.dims();
            let mut db = Tensor::zeros([1, c, 1, 1]);
            for (idx, chunk) in grad.data().chunks(h * w).enumerate() {
                db.data_mut()[idx % c] += chunk.iter().sum::<f64>();
            }
            out.push(Some(db));
        }
        Ok(out)
    }
}

fn trace_mix(
    g: &mut Graph,
    x: Var,
    alpha: Var,
    kernels: &[Var],
    bias: Option<Var>,
    spec: ConvSpec,
) -> Result<Var> {
    let kt: Vec<Tensor> = kernels.iter().map(|&k| g.value(k).clone()).collect();
    let y = mix_forward(
        g.value(x),
        g.value(alpha),
        &kt,
        bias.map(|b| g.value(b)),
        &spec,
    )?;
    let mut ins = vec![x, alpha];
    ins.extend_from_slice(kernels);
    ins.extend(bias);
    Ok(g.push(
        &ins,
        y,
        MixOp {
            spec,
            experts: kernels.len(),
            has_bias: bias.is_some(),
        },
    ))
}

/// Coefficient head plus expert bank, followed by a pointwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConv {
    pub head: CoeffHead,
    pub bank: ExpertBank,
    pub act: Activation,
}

impl DynamicConv {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        experts: usize,
        act: Activation,
    ) -> Result<Self> {
        Self::with_head(
            rng,
            c_in,
            c_out,
            kernel,
            experts,
            head_hidden_width(c_in, experts),
            act,
        )
    }

    /// As [`DynamicConv::init`] with an explicit coefficient-head hidden width.
    pub fn with_head<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        experts: usize,
        hidden: usize,
        act: Activation,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(config_err!("dynamic convolution needs at least one expert"));
        }
        Ok(Self {
            head: CoeffHead::with_hidden(rng, c_in, experts, hidden)?,
            bank: ExpertBank::init(rng, experts, c_in, c_out, kernel)?,
            act,
        })
    }

    pub fn coefficients(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        dyn_coeffs(x, &self.head)
    }
}

impl Layer for DynamicConv {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.head.params();
        p.extend(self.bank.kernels.iter());
        p.extend(self.bank.bias.as_ref());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.head.params_mut();
        p.extend(self.bank.kernels.iter_mut());
        p.extend(self.bank.bias.as_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let x = inputs[0];
        let logits = self.head.trace(g, &[x], params)?;
        let alpha = g.softmax_channels(logits)?;
        let kernels = (0..self.bank.experts())
            .map(|_| params.next())
            .collect::<Result<Vec<_>>>()?;
        let bias = match self.bank.bias {
            Some(_) => Some(params.next()?),
            None => None,
        };
        let y = trace_mix(g, x, alpha, &kernels, bias, self.bank.spec)?;
        Ok(g.activation(y, self.act))
    }
}

/// Convolution producing the first half of a ghost module's output.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Primary {
    Static(ConvLayer),
    Dynamic(DynamicConv),
}

impl Layer for Primary {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Primary::Static(c) => c.params(),
            Primary::Dynamic(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Primary::Static(c) => c.params_mut(),
            Primary::Dynamic(d) => d.params_mut(),
        }
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        match self {
            Primary::Static(c) => c.trace(g, inputs, params),
            Primary::Dynamic(d) => d.trace(g, inputs, params),
        }
    }
}

/// `concat(P, cheap(P))` with `P = primary(X)` and `cheap` a bias-free depthwise 3x3.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostModule {
    pub primary: Primary,
    pub cheap: ConvLayer,
}

pub type GhostParams = GhostModule;

const CHEAP_KERNEL: usize = 3;

fn ghost_half(c_out: usize) -> Result<usize> {
    if c_out == 0 || !c_out.is_multiple_of(2) {
        return Err(config_err!(
            "ghost module output width {c_out} must be even and positive"
        ));
    }
    Ok(c_out / 2)
}

impl GhostModule {
    /// Static primary: `k x k` conv with bias and SiLU.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let half = ghost_half(c_out)?;
        Ok(Self {
            primary: Primary::Static(ConvLayer::init(
                rng,
                c_in,
                half,
                (kernel, kernel),
                1,
                true,
                Activation::Silu,
            )?),
            cheap: ConvLayer::depthwise(rng, half, (CHEAP_KERNEL, CHEAP_KERNEL))?,
        })
    }

    /// Dynamic primary with `experts` bias-free kernels and SiLU.
    pub fn init_dynamic<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        experts: usize,
    ) -> Result<Self> {
        Self::init_dynamic_with_head(
            rng,
            c_in,
            c_out,
            kernel,
            experts,
            head_hidden_width(c_in, experts),
        )
    }

    /// As [`GhostModule::init_dynamic`] with an explicit coefficient-head hidden width.
    pub fn init_dynamic_with_head<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        experts: usize,
        hidden: usize,
    ) -> Result<Self> {
        let half = ghost_half(c_out)?;
        Ok(Self {
            primary: Primary::Dynamic(DynamicConv::with_head(
                rng,
                c_in,
                half,
                kernel,
                experts,
                hidden,
                Activation::Silu,
            )?),
            cheap: ConvLayer::depthwise(rng, half, (CHEAP_KERNEL, CHEAP_KERNEL))?,
        })
    }
}

impl Layer for GhostModule {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.primary.params();
        p.extend(self.cheap.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.primary.params_mut();
        p.extend(self.cheap.params_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let p = self.primary.trace(g, inputs, params)?;
        let q = self.cheap.trace(g, &[p], params)?;
        g.concat(&[p, q])
    }
}

pub fn ghost_module(x: &Tensor, g: &GhostModule) -> Result<Tensor> {
    g.forward(&[x])
}

/// Closed-form count for a ghost module with a static `k x k` primary.
pub fn ghost_param_count(c_in: usize, c_out: usize, kernel: usize) -> Result<usize> {
    let half = ghost_half(c_out)?;
    Ok(c_in * half * kernel * kernel + half + half * CHEAP_KERNEL * CHEAP_KERNEL)
}

/// Closed-form count for a ghost module with a dynamic primary.
pub fn dynamic_ghost_param_count(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    experts: usize,
) -> Result<usize> {
    dynamic_ghost_param_count_with_head(
        c_in,
        c_out,
        kernel,
        experts,
        head_hidden_width(c_in, experts),
    )
}

pub fn dynamic_ghost_param_count_with_head(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    experts: usize,
    hidden: usize,
) -> Result<usize> {
    let half = ghost_half(c_out)?;
    Ok(
        expert_bank_param_count(experts, [half, c_in, kernel, kernel])
            + head_param_count(c_in, hidden, experts)
            + half * CHEAP_KERNEL * CHEAP_KERNEL,
    )
}

/// Hyper-parameters of a C2f-GDC block. Input and output widths are both `channels`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C2fGdcConfig {
    pub channels: usize,
    /// Number of bottlenecks.
    pub n: usize,
    pub experts: usize,
    pub kernel: usize,
    /// Apply a second dynamic convolution to `Y_dynamic1 + X` before the outer conv.
    pub second_dynamic: bool,
    /// Fixed hidden width of every coefficient head. `None` uses [`head_hidden_width`],
    /// which grows with `M` once `M > ceil(C / 4)`; a fixed width keeps the count affine in `M`.
    pub head_hidden: Option<usize>,
}

impl C2fGdcConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            n: 1,
            experts: DEFAULT_EXPERTS,
            kernel: 3,
            second_dynamic: false,
            head_hidden: None,
        }
    }

    pub fn with_experts(mut self, experts: usize) -> Self {
        self.experts = experts;
        self
    }

    pub fn with_head_hidden(mut self, hidden: usize) -> Self {
        self.head_hidden = Some(hidden);
        self
    }

    /// Hidden width of the coefficient heads inside each bottleneck.
    pub fn head_width(&self) -> Result<usize> {
        let h = self.hidden()?;
        match self.head_hidden {
            Some(0) => Err(config_err!("c2f_gdc head width must be positive")),
            Some(w) => Ok(w),
            None => Ok(head_hidden_width(h, self.experts)),
        }
    }

    /// Width of each half after the entry conv; the ghost primary uses half of that.
    pub fn hidden(&self) -> Result<usize> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(config_err!(
                "c2f_gdc width {} must be a positive multiple of 4",
                self.channels
            ));
        }
        if self.experts == 0 {
            return Err(config_err!("c2f_gdc needs at least one expert"));
        }
        Ok(self.channels / 2)
    }

    pub fn param_count(&self) -> Result<usize> {
        let (c, h, k, m) = (self.channels, self.hidden()?, self.kernel, self.experts);
        let entry = c * c + c;
        let hw = self.head_width()?;
        let mut bottleneck = dynamic_ghost_param_count_with_head(h, h, k, m, hw)? + (h * h * 9 + h);
        if self.second_dynamic {
            bottleneck += expert_bank_param_count(m, [h, h, k, k]) + head_param_count(h, hw, m);
        }
        let fuse = (2 + self.n) * h * c + c;
        Ok(entry + self.n * bottleneck + fuse)
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<C2fGdc> {
        let (h, hw) = (self.hidden()?, self.head_width()?);
        let blocks = (0..self.n)
            .map(|_| {
                GdcBottleneck::with_head(rng, h, self.kernel, self.experts, hw, self.second_dynamic)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(C2fGdc {
            inner: C2f::init(rng, self.channels, self.channels, h, blocks)?,
        })
    }
}

pub fn gdc_param_count(cfg: &C2fGdcConfig) -> Result<usize> {
    cfg.param_count()
}

/// `conv(D(ghost(X) + X)) + X`, where `D` is the optional second dynamic conv.
#[derive(Clone, Debug, PartialEq)]
pub struct GdcBottleneck {
    pub ghost: GhostModule,
    pub second: Option<DynamicConv>,
    pub conv: ConvLayer,
}

impl GdcBottleneck {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        kernel: usize,
        experts: usize,
        second_dynamic: bool,
    ) -> Result<Self> {
        Self::with_head(
            rng,
            channels,
            kernel,
            experts,
            head_hidden_width(channels, experts),
            second_dynamic,
        )
    }

    pub fn with_head<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        kernel: usize,
        experts: usize,
        head_hidden: usize,
        second_dynamic: bool,
    ) -> Result<Self> {
        Ok(Self {
            ghost: GhostModule::init_dynamic_with_head(
                rng,
                channels,
                channels,
                kernel,
                experts,
                head_hidden,
            )?,
            second: if second_dynamic {
                Some(DynamicConv::with_head(
                    rng,
                    channels,
                    channels,
                    kernel,
                    experts,
                    head_hidden,
                    Activation::Silu,
                )?)
            } else {
                None
            },
            conv: ConvLayer::init(rng, channels, channels, (3, 3), 1, true, Activation::Silu)?,
        })
    }
}

impl Layer for GdcBottleneck {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.ghost.params();
        if let Some(d) = &self.second {
            p.extend(d.params());
        }
        p.extend(self.conv.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.ghost.params_mut();
        if let Some(d) = &mut self.second {
            p.extend(d.params_mut());
        }
        p.extend(self.conv.params_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let x = inputs[0];
        let y1 = self.ghost.trace(g, &[x], params)?;
        let mut t = g.add(y1, x)?;
        if let Some(d) = &self.second {
            t = d.trace(g, &[t], params)?;
        }
        let z = self.conv.trace(g, &[t], params)?;
        g.add(z, x)
    }
}

/// C2f wrapper around ghost-dynamic bottlenecks with an outer residual.
#[derive(Clone, Debug, PartialEq)]
pub struct C2fGdc {
    pub inner: C2f<GdcBottleneck>,
}

impl Layer for C2fGdc {
    fn params(&self) -> Vec<&Tensor> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.inner.params_mut()
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let y = self.inner.trace(g, inputs, params)?;
        if g.dims(y) != g.dims(inputs[0]) {
            return Err(shape_err!(
                "c2f_gdc residual needs matching dims: {:?} vs {:?}",
                g.dims(y),
                g.dims(inputs[0])
            ));
        }
        g.add(y, inputs[0])
    }
}

pub fn c2f_gdc_block(x: &Tensor, block: &C2fGdc) -> Result<Tensor> {
    block.forward(&[x])
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

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
    }

    #[test]
    fn zero_head_gives_uniform_coefficients() {
        let mut head = CoeffHead::init(&mut rng(0), 8, 4).unwrap();
        fill_params(&mut head, 0.0);
        let x = Tensor::randn([3, 8, 4, 4], &mut rng(1));
        for row in dyn_coeffs(&x, &head).unwrap() {
            assert_eq!(row, vec![0.25; 4]);
        }
    }

    #[test]
    fn final_bias_sets_coefficients() {
        let mut head = CoeffHead::init(&mut rng(0), 4, 2).unwrap();
        fill_params(&mut head, 0.0);
        head.fc2.bias.as_mut().unwrap().data_mut()[1] = 3f64.ln();
        let x = Tensor::randn([1, 4, 3, 3], &mut rng(2));
        let a = &dyn_coeffs(&x, &head).unwrap()[0];
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn head_width_and_count() {
        assert_eq!(head_hidden_width(64, 4), 16);
        assert_eq!(head_hidden_width(8, 4), 4);
        let head = CoeffHead::init(&mut rng(0), 12, 3).unwrap();
        assert_eq!(head.hidden(), 3);
        assert_eq!(head.param_count(), head_param_count(12, 3, 3));
        assert_eq!(head_param_count(12, 3, 3), 12 * 3 + 3 + 3 * 3 + 3);
        assert!(dyn_coeffs(&Tensor::zeros([1, 5, 2, 2]), &head).is_err());
    }

    #[test]
    fn single_expert_is_plain_conv() {
        let mut r = rng(3);
        let bank = ExpertBank::init(&mut r, 1, 3, 2, 3).unwrap();
        let x = Tensor::randn([2, 3, 5, 5], &mut r);
        let y = dynamic_conv(&x, &bank, &[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(y, conv2d(&x, &bank.kernels[0], None, &bank.spec).unwrap());
    }

    #[test]
    fn identical_experts_ignore_alpha() {
        let mut r = rng(4);
        let w = Tensor::randn([2, 2, 3, 3], &mut r);
        let bank =
            ExpertBank::new(vec![w.clone(); 3], None, ConvSpec::same(3, 3).unwrap()).unwrap();
        let x = Tensor::randn([1, 2, 6, 6], &mut r);
        let reference = conv2d(&x, &w, None, &bank.spec).unwrap();
        for alpha in [[1.0, 0.0, 0.0], [0.2, 0.3, 0.5], [0.0, 0.0, 1.0]] {
            let y = dynamic_conv(&x, &bank, &[alpha.to_vec()]).unwrap();
            assert!(y.max_abs_diff(&reference).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn mismatches_are_shape_errors() {
        let mut r = rng(5);
        let bank = ExpertBank::init(&mut r, 2, 2, 2, 3).unwrap();
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(dynamic_conv(&x, &bank, &[vec![1.0]]).is_err());
        assert!(dynamic_conv(&x, &bank, &[vec![0.5, 0.5], vec![0.5, 0.5]]).is_err());
        let odd = vec![Tensor::zeros([2, 2, 3, 3]), Tensor::zeros([2, 2, 1, 1])];
        assert!(ExpertBank::new(odd, None, ConvSpec::valid()).is_err());
        assert!(ExpertBank::new(vec![], None, ConvSpec::valid()).is_err());
    }

    #[test]
    fn bias_is_added_once() {
        let mut r = rng(6);
        let mut bank = ExpertBank::init(&mut r, 2, 1, 2, 1).unwrap();
        bank.bias = Some(Tensor::new([1, 2, 1, 1], vec![1.0, -2.0]).unwrap());
        for k in &mut bank.kernels {
            k.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let y = dynamic_conv(&Tensor::zeros([1, 1, 2, 2]), &bank, &[vec![0.3, 0.7]]).unwrap();
        assert_eq!(y.plane(0, 0), &[1.0; 4]);
        assert_eq!(y.plane(0, 1), &[-2.0; 4]);
    }

    #[test]
    fn expert_bank_closed_form() {
        assert_eq!(expert_bank_param_count(4, [32, 32, 3, 3]), 36864);
        let bank = ExpertBank::init(&mut rng(0), 4, 32, 32, 3).unwrap();
        let mut layer = DynamicConv::init(&mut rng(0), 32, 32, 3, 4, Activation::Identity).unwrap();
        layer.bank = bank;
        assert_eq!(layer.param_count(), 36864 + head_param_count(32, 8, 4));
    }

    #[test]
    fn ghost_halves() {
        let mut r = rng(7);
        let mut gm = GhostModule::init(&mut r, 4, 6, 1).unwrap();
        gm.cheap.weight = Tensor::from_fn(
            [3, 1, 3, 3],
            |[_, _, i, j]| if i == 1 && j == 1 { 1.0 } else { 0.0 },
        );
        let x = Tensor::randn([2, 4, 5, 5], &mut r);
        let y = ghost_module(&x, &gm).unwrap();
        assert_eq!(y.dims(), [2, 6, 5, 5]);
        assert_eq!(
            y.slice_channels(0, 3).unwrap(),
            y.slice_channels(3, 3).unwrap()
        );
        assert!(matches!(
            GhostModule::init(&mut r, 4, 5, 1),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn ghost_is_cheaper_than_dense() {
        let gm = GhostModule::init(&mut rng(8), 64, 64, 3).unwrap();
        let dense =
            ConvLayer::init(&mut rng(8), 64, 64, (3, 3), 1, true, Activation::Silu).unwrap();
        assert_eq!(gm.param_count(), ghost_param_count(64, 64, 3).unwrap());
        assert!(gm.param_count() < dense.param_count());
        let dg = GhostModule::init_dynamic(&mut rng(8), 8, 6, 3, 3).unwrap();
        assert_eq!(
            dg.param_count(),
            dynamic_ghost_param_count(8, 6, 3, 3).unwrap()
        );
    }

    #[test]
    fn c2f_gdc_zero_weights_is_identity() {
        for second in [false, true] {
            let cfg = C2fGdcConfig {
                second_dynamic: second,
                ..C2fGdcConfig::new(8)
            };
            let mut block = cfg.build(&mut rng(9)).unwrap();
            assert_eq!(block.param_count(), cfg.param_count().unwrap());
            let x = Tensor::randn([2, 8, 5, 6], &mut rng(10));
            assert_eq!(c2f_gdc_block(&x, &block).unwrap().dims(), x.dims());
            fill_params(&mut block, 0.0);
            assert_eq!(c2f_gdc_block(&x, &block).unwrap(), x);
        }
    }

    #[test]
    fn c2f_gdc_rejects_bad_widths() {
        assert!(C2fGdcConfig::new(6).build(&mut rng(0)).is_err());
        let block = C2fGdcConfig::new(8).build(&mut rng(0)).unwrap();
        assert!(c2f_gdc_block(&Tensor::zeros([1, 4, 4, 4]), &block).is_err());
    }

    #[test]
    fn param_count_is_affine_in_experts() {
        let counts: Vec<usize> = (1..=4)
            .map(|m| C2fGdcConfig::new(32).with_experts(m).param_count().unwrap())
            .collect();
        let d: Vec<usize> = counts.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(d.windows(2).all(|w| w[0] == w[1]));
        // one expert kernel (16 outputs, 16 inputs, 3x3) plus one head output row
        let hh = head_hidden_width(16, 4);
        assert_eq!(d[0], 8 * 16 * 9 + hh + 1);
        for m in 1..=4 {
            let cfg = C2fGdcConfig::new(32).with_experts(m);
            assert_eq!(cfg.build(&mut rng(0)).unwrap().param_count(), counts[m - 1]);
        }
    }

    #[test]
    fn dynamic_and_gdc_gradients() {
        let mut r = rng(11);
        let dynl = DynamicConv::init(&mut r, 3, 2, 3, 3, Activation::Identity).unwrap();
        let f = LayerFn::new(&dynl);
        let args = f.arguments(vec![Tensor::randn([2, 3, 4, 4], &mut r)]);
        let rep = finite_diff_check(&f, &args, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep}");

        let mut with_bias = dynl.clone();
        with_bias.bank.bias = Some(Tensor::randn([1, 2, 1, 1], &mut r));
        let f = LayerFn::new(&with_bias);
        let args = f.arguments(vec![Tensor::randn([1, 3, 4, 4], &mut r)]);
        assert!(
            finite_diff_check(&f, &args, &GradCheckConfig::default())
                .unwrap()
                .passed
        );

        let cfg = C2fGdcConfig {
            second_dynamic: true,
            ..C2fGdcConfig::new(8)
        };
        let block = cfg.build(&mut r).unwrap();
        let f = LayerFn::new(&block);
        let args = f.arguments(vec![Tensor::randn([1, 8, 4, 4], &mut r)]);
        let rep = finite_diff_check(&f, &args, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep}");
    }

    proptest! {
        #[test]
        fn matches_merged_kernel(seed in 0u64..10_000, m in 1usize..5) {
            let mut r = rng(seed);
            let layer = DynamicConv::init(&mut r, 3, 2, 3, m, Activation::Identity).unwrap();
            let x = Tensor::randn([2, 3, 5, 5], &mut r);
            let alpha = layer.coefficients(&x).unwrap();
            for row in &alpha {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            let y = dynamic_conv(&x, &layer.bank, &alpha).unwrap();
            prop_assert_eq!(&layer.forward(&[&x]).unwrap(), &y);
            for (n, row) in alpha.iter().enumerate() {
                let merged = layer.bank.merged_kernel(row).unwrap();
                let oracle = conv2d(&x.sample(n), &merged, None, &layer.bank.spec).unwrap();
                prop_assert!(rel(&y.sample(n), &oracle) <= 1e-12);
            }
        }

        #[test]
        fn coefficients_shift_invariant(seed in 0u64..10_000, shift in -20.0f64..20.0) {
            let mut r = rng(seed);
            let head = CoeffHead::init(&mut r, 6, 3).unwrap();
            let x = Tensor::randn([2, 6, 3, 3], &mut r);
            let mut shifted = head.clone();
            shifted.fc2.bias.as_mut().unwrap().data_mut().iter_mut().for_each(|b| *b += shift);
            let a = dyn_coeffs(&x, &head).unwrap();
            let b = dyn_coeffs(&x, &shifted).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                for (p, q) in ra.iter().zip(rb) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }
}
