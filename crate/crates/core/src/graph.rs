//! Reverse-mode tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the adjoint pass. Modules outside this file add
//! their own operators through [`Graph::push`] with a [`Backward`] impl.

use crate::conv::{conv2d_vjp_with, conv2d_with, ConvSpec};
use crate::error::{shape_err, Result};
use crate::ops::{self, Activation};
use crate::par::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operator.
///
/// Returns one entry per input; `None` means the input receives no gradient.
pub trait Backward: Send + Sync {
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.dims()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.dims()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an operator whose forward value has already been computed.
    pub fn push(&mut self, inputs: &[Var], value: Tensor, op: impl Backward + 'static) -> Var {
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
        });
        Var(self.nodes.len() - 1)
    }

    /// Adjoint pass seeded with `seed` at `out`.
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        self.value(out).same_dims(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let input_grads = op.vjp(&inputs, &node.value, &g)?;
            grads[i] = Some(g);
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn conv(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let b = match bias {
            Some(b) => Some(bias_slice(self.value(b), self.dims(kernel)[0])?),
            None => None,
        };
        let y = conv2d_with(self.exec, self.value(x), self.value(kernel), b, &spec)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            &inputs,
            y,
            ConvOp {
                spec,
                exec: self.exec,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(&[a, b], y, AddOp))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let y = Tensor::concat_channels(&ts)?;
        Ok(self.push(parts, y, ConcatOp))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(&[x], y, SliceOp { start }))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let y = self.value(x).map(|v| act.apply(v));
        self.push(&[x], y, ActOp(act))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = ops::global_avg_pool(self.value(x));
        self.push(&[x], y, PoolOp)
    }

    /// Softmax across channels of an `(N, C, 1, 1)` tensor, per sample.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = t.dims();
        if h != 1 || w != 1 {
            return Err(shape_err!(
                "softmax_channels expects (N, C, 1, 1), got {:?}",
                t.dims()
            ));
        }
        let mut data = Vec::with_capacity(n * c);
        for b in 0..n {
            data.extend(ops::softmax(&t.data()[b * c..(b + 1) * c])?);
        }
        let y = Tensor::new([n, c, 1, 1], data)?;
        Ok(self.push(&[x], y, SoftmaxOp))
    }

    /// `x * gate` with an `(N, C, 1, 1)` gate broadcast over each plane.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xt, gt) = (self.value(x), self.value(gate));
        let [n, c, _, _] = xt.dims();
        if gt.dims() != [n, c, 1, 1] {
            return Err(shape_err!(
                "channel gate {:?} does not match input {:?}",
                gt.dims(),
                xt.dims()
            ));
        }
        let hw = xt.plane_len();
        let mut y = xt.clone();
        for (i, chunk) in y.data_mut().chunks_mut(hw).enumerate() {
            let s = gt.data()[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(&[x, gate], y, ChannelScaleOp))
    }

    pub fn space_to_depth(&mut self, x: Var, scale: usize) -> Result<Var> {
        let y = ops::space_to_depth(self.value(x), scale)?;
        Ok(self.push(&[x], y, SpaceToDepthOp(scale)))
    }
}

fn bias_slice(b: &Tensor, cout: usize) -> Result<&[f64]> {
    if b.dims() != [1, cout, 1, 1] {
        return Err(shape_err!(
            "bias dims {:?}, expected [1, {cout}, 1, 1]",
            b.dims()
        ));
    }
    Ok(b.data())
}

struct ConvOp {
    spec: ConvSpec,
    exec: Exec,
}

impl Backward for ConvOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = conv2d_vjp_with(self.exec, inputs[0], inputs[1], &self.spec, grad)?;
        let mut out = vec![Some(g.dx), Some(g.dkernel)];
        if inputs.len() == 3 {
            let n = g.dbias.len();
            out.push(Some(Tensor::new([1, n, 1, 1], g.dbias)?));
        }
        Ok(out)
    }
}

struct AddOp;

impl Backward for AddOp {
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

struct ConcatOp;

impl Backward for ConcatOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        inputs
            .iter()
            .map(|t| {
                let part = grad.slice_channels(start, t.channels())?;
                start += t.channels();
                Ok(Some(part))
            })
            .collect()
    }
}

struct SliceOp {
    start: usize,
}

impl Backward for SliceOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let [n, c, h, w] = inputs[0].dims();
        let len = grad.channels();
        let mut dx = Tensor::zeros([n, c, h, w]);
        let hw = h * w;
        for b in 0..n {
            let dst = (b * c + self.start) * hw;
            let src = b * len * hw;
            dx.data_mut()[dst..dst + len * hw].copy_from_slice(&grad.data()[src..src + len * hw]);
        }
        Ok(vec![Some(dx)])
    }
}

struct ActOp(Activation);

impl Backward for ActOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let act = self.0;
        Ok(vec![Some(
            inputs[0].zip_map(grad, |x, g| g * act.derivative(x))?,
        )])
    }
}

struct PoolOp;

impl Backward for PoolOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let inv = 1.0 / x.plane_len() as f64;
        let dx = Tensor::from_fn(x.dims(), |[n, c, _, _]| grad.at(n, c, 0, 0) * inv);
        Ok(vec![Some(dx)])
    }
}

struct SoftmaxOp;

impl Backward for SoftmaxOp {
    fn vjp(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let [n, c, _, _] = output.dims();
        let mut data = Vec::with_capacity(n * c);
        for b in 0..n {
            let r = b * c..(b + 1) * c;
            data.extend(ops::softmax_vjp(&output.data()[r.clone()], &grad.data()[r]));
        }
        Ok(vec![Some(Tensor::new(output.dims(), data)?)])
    }
}

struct ChannelScaleOp;

impl Backward for ChannelScaleOp {
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, gate) = (inputs[0], inputs[1]);
        let hw = x.plane_len();
        let mut dx = grad.clone();
        let mut dgate = Tensor::zeros(gate.dims());
        for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
            let s = gate.data()[i];
            let xs = &x.data()[i * hw..(i + 1) * hw];
            dgate.data_mut()[i] = chunk.iter().zip(xs).map(|(g, v)| g * v).sum();
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        Ok(vec![Some(dx), Some(dgate)])
    }
}

struct SpaceToDepthOp(usize);

impl Backward for SpaceToDepthOp {
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ops::depth_to_space(grad, self.0)?)])
    }
}
