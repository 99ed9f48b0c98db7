//! Named parameter storage and the layers built on top of [`crate::ops`].

use rand::Rng;

use crate::autograd::{Gradients, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is used for. Drives weight-decay partitioning and the
/// backbone/attention parameter breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    NormAffine,
    AttentionWeight,
    AttentionAffine,
    AttentionNorm,
}

impl ParamRole {
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ParamRole::AttentionWeight | ParamRole::AttentionAffine | ParamRole::AttentionNorm
        )
    }

    /// Scale/shift style parameters exempt from weight decay by default.
    pub fn is_affine(self) -> bool {
        matches!(
            self,
            ParamRole::NormAffine | ParamRole::AttentionAffine | ParamRole::AttentionNorm
        )
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            role,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Leaves for one forward pass. With `track` unset nothing downstream
    /// records a backward rule.
    pub fn bind(&self, track: bool) -> Bindings<T> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if track {
                    Var::leaf(p.value.clone())
                } else {
                    Var::constant(p.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Adds gradients from one backward pass onto the stored `grad`s.
    pub fn accumulate_grads(&mut self, bindings: &Bindings<T>, grads: &mut Gradients<T>) {
        for (param, var) in self.params.iter_mut().zip(&bindings.vars) {
            let Some(g) = grads.take(var) else { continue };
            match param.grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => param.grad = Some(g),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }
}

/// Graph leaves standing in for a [`ParamStore`] during one forward pass.
pub struct Bindings<T: Scalar = f32> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bindings<T> {
    /// Wraps caller-made leaves, one per parameter in store order.
    pub fn from_vars(store: &ParamStore<T>, vars: Vec<Var<T>>) -> Result<Self> {
        expect_len("bound variables", vars.len(), store.len())?;
        for (p, v) in store.params.iter().zip(&vars) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim(
                    "bind",
                    format!("'{}' is {:?}, got {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
        }
        Ok(Self { vars })
    }

    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

/// Kaiming-normal initialization scaled by fan-out.
pub fn fan_out_normal<T: Scalar>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<T> {
    let fan_out = shape[0] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_out as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Bias-free square convolution with "same"-style padding `kernel / 2`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = fan_out_normal([out_channels, in_channels, kernel, kernel], rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, ParamRole::Weight),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::conv2d(x, b.get(self.weight), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    /// Multiply-adds per image for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_size(h, w);
        (self.param_count() * ho * wo) as u64
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            ops::conv_output_size(h, self.kernel, self.stride, self.padding),
            ops::conv_output_size(w, self.kernel, self.stride, self.padding),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        role: ParamRole,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = Tensor::uniform([out_features, in_features], bound, rng);
        let weight = store.add(format!("{name}.weight"), w, role);
        let bias = bias.then(|| {
            let role = if role.is_attention() { role } else { ParamRole::Bias };
            store.add(format!("{name}.bias"), Tensor::zeros([out_features]), role)
        });
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, b: &Bindings<T>, x: &Var<T>) -> Result<Var<T>> {
        ops::linear(x, b.get(self.weight), self.bias.map(|id| b.get(id)))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, channels: usize, role: ParamRole) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels]), role),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), role),
            state: BatchNormState::new(channels),
        }
    }

    pub fn forward(&mut self, b: &Bindings<T>, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        ops::batch_norm(x, b.get(self.gamma), b.get(self.beta), &mut self.state, mode)
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }
}

pub(crate) fn expect_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::config(format!("{what}: expected {expected}, found {got}")));
    }
    Ok(())
}
