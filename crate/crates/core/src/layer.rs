//! Parameterised building blocks traced onto a [`Graph`].
//!
//! A layer lists its parameter tensors through [`Layer::params`] and consumes
//! the matching graph variables, in the same order, from a [`ParamCursor`]
//! inside [`Layer::trace`]. Composite layers concatenate their children's
//! lists, so one flat ordering covers the whole tree.

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{shape_err, Result};
use crate::gradcheck::Differentiable;
use crate::graph::{Graph, Var};
use crate::ops::Activation;
use crate::tensor::Tensor;

pub struct ParamCursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, next: 0 }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.next)
            .copied()
            .ok_or_else(|| shape_err!("layer consumed more parameters than it declares"))?;
        self.next += 1;
        Ok(v)
    }

    pub fn remaining(&self) -> usize {
        self.vars.len() - self.next
    }
}

pub trait Layer: Send + Sync {
    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var>;

    fn num_inputs(&self) -> usize {
        1
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xs: Vec<Var> = inputs.iter().map(|t| g.leaf((*t).clone())).collect();
        let ps = bind_params(self, &mut g);
        let mut cursor = ParamCursor::new(&ps);
        let out = self.trace(&mut g, &xs, &mut cursor)?;
        check_consumed(&cursor)?;
        Ok(g.value(out).clone())
    }
}

/// Adds every parameter of `layer` to `g` as a leaf.
pub fn bind_params<L: Layer + ?Sized>(layer: &L, g: &mut Graph) -> Vec<Var> {
    layer
        .params()
        .into_iter()
        .map(|t| g.leaf(t.clone()))
        .collect()
}

fn check_consumed(cursor: &ParamCursor<'_>) -> Result<()> {
    if cursor.remaining() != 0 {
        return Err(shape_err!(
            "layer left {} declared parameters unused",
            cursor.remaining()
        ));
    }
    Ok(())
}

pub fn fill_params<L: Layer + ?Sized>(layer: &mut L, value: f64) {
    for p in layer.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = value);
    }
}

/// Treats `(inputs ++ params)` of a layer as the arguments of one differentiable function.
pub struct LayerFn<'a, L: Layer + ?Sized> {
    pub layer: &'a L,
}

impl<'a, L: Layer + ?Sized> LayerFn<'a, L> {
    pub fn new(layer: &'a L) -> Self {
        Self { layer }
    }

    /// `data` followed by clones of the current parameters.
    pub fn arguments(&self, data: Vec<Tensor>) -> Vec<Tensor> {
        let mut all = data;
        all.extend(self.layer.params().into_iter().cloned());
        all
    }

    fn build(&self, args: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)> {
        let n_in = self.layer.num_inputs();
        let declared = self.layer.params();
        if args.len() != n_in + declared.len() {
            return Err(shape_err!(
                "expected {} arguments, got {}",
                n_in + declared.len(),
                args.len()
            ));
        }
        for (a, p) in args[n_in..].iter().zip(&declared) {
            a.same_dims(p, "parameter override")?;
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = args.iter().map(|t| g.leaf(t.clone())).collect();
        let mut cursor = ParamCursor::new(&vars[n_in..]);
        let out = self.layer.trace(&mut g, &vars[..n_in], &mut cursor)?;
        check_consumed(&cursor)?;
        Ok((g, vars, out))
    }
}

impl<L: Layer + ?Sized> Differentiable for LayerFn<'_, L> {
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let (g, _, out) = self.build(inputs)?;
        Ok(g.value(out).clone())
    }

    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let (g, vars, out) = self.build(inputs)?;
        let grads = g.backward(out, upstream.clone())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get_or_zeros(*v, t))
            .collect())
    }
}

/// Convolution with optional bias and pointwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    /// `(1, C_out, 1, 1)`
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
    pub act: Activation,
}

impl ConvLayer {
    pub fn from_parts(
        weight: Tensor,
        bias: Option<Tensor>,
        spec: ConvSpec,
        act: Activation,
    ) -> Result<Self> {
        let cout = weight.dims()[0];
        if !cout.is_multiple_of(spec.groups) {
            return Err(shape_err!(
                "groups {} do not divide {cout} output channels",
                spec.groups
            ));
        }
        if let Some(b) = &bias {
            if b.dims() != [1, cout, 1, 1] {
                return Err(shape_err!("bias dims {:?} for {cout} outputs", b.dims()));
            }
        }
        Ok(Self {
            weight,
            bias,
            spec,
            act,
        })
    }

    /// Stride-1 "same" convolution with uniform `±1/sqrt(fan_in)` initialisation.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        groups: usize,
        bias: bool,
        act: Activation,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(shape_err!(
                "groups {groups} must divide {c_in} inputs and {c_out} outputs"
            ));
        }
        let spec = ConvSpec::same(kernel.0, kernel.1)?.with_groups(groups);
        let cin_g = c_in / groups;
        let bound = 1.0 / ((cin_g * kernel.0 * kernel.1) as f64).sqrt();
        let weight = Tensor::uniform([c_out, cin_g, kernel.0, kernel.1], bound, rng);
        let bias = bias.then(|| Tensor::uniform([1, c_out, 1, 1], bound, rng));
        Self::from_parts(weight, bias, spec, act)
    }

    pub fn pointwise<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        act: Activation,
    ) -> Result<Self> {
        Self::init(rng, c_in, c_out, (1, 1), 1, true, act)
    }

    pub fn depthwise<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        Self::init(
            rng,
            channels,
            channels,
            kernel,
            channels,
            false,
            Activation::Identity,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Layer for ConvLayer {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.weight];
        p.extend(self.bias.as_ref());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.weight];
        p.extend(self.bias.as_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let w = params.next()?;
        let b = match self.bias {
            Some(_) => Some(params.next()?),
            None => None,
        };
        let y = g.conv(inputs[0], w, b, self.spec)?;
        Ok(g.activation(y, self.act))
    }
}

/// Cross-stage-partial wrapper: entry 1x1 conv to `2 * hidden` channels, split,
/// blocks applied in sequence to the second half, every intermediate
/// concatenated, then a 1x1 fuse conv.
#[derive(Clone, Debug, PartialEq)]
pub struct C2f<B> {
    pub entry: ConvLayer,
    pub blocks: Vec<B>,
    pub fuse: ConvLayer,
    pub hidden: usize,
}

impl<B: Layer> C2f<B> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        blocks: Vec<B>,
    ) -> Result<Self> {
        let entry = ConvLayer::pointwise(rng, c_in, 2 * hidden, Activation::Silu)?;
        let fuse = ConvLayer::pointwise(rng, (2 + blocks.len()) * hidden, c_out, Activation::Silu)?;
        Ok(Self {
            entry,
            blocks,
            fuse,
            hidden,
        })
    }
}

impl<B: Layer> Layer for C2f<B> {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.entry.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.fuse.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.entry.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.fuse.params_mut());
        p
    }

    fn trace(&self, g: &mut Graph, inputs: &[Var], params: &mut ParamCursor<'_>) -> Result<Var> {
        let a = self.entry.trace(g, inputs, params)?;
        let mut parts = vec![
            g.slice(a, 0, self.hidden)?,
            g.slice(a, self.hidden, self.hidden)?,
        ];
        for b in &self.blocks {
            let prev = *parts.last().expect("non-empty");
            parts.push(b.trace(g, &[prev], params)?);
        }
        let cat = g.concat(&parts)?;
        self.fuse.trace(g, &[cat], params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_matches_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = ConvLayer::init(&mut rng, 4, 6, (3, 3), 2, true, Activation::Identity).unwrap();
        let x = Tensor::randn([2, 4, 5, 5], &mut rng);
        let y = layer.forward(&[&x]).unwrap();
        let expect = conv2d(
            &x,
            &layer.weight,
            Some(layer.bias.as_ref().unwrap().data()),
            &layer.spec,
        )
        .unwrap();
        assert_eq!(y, expect);
        assert_eq!(layer.param_count(), 6 * 2 * 9 + 6);
    }

    #[test]
    fn argument_count_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = ConvLayer::pointwise(&mut rng, 2, 2, Activation::Silu).unwrap();
        let f = LayerFn::new(&layer);
        let x = Tensor::zeros([1, 2, 2, 2]);
        assert!(f.forward(std::slice::from_ref(&x)).is_err());
        assert!(f.forward(&f.arguments(vec![x])).is_ok());
    }
}
