//! Channel-attention modules.
//!
//! Every module maps a channel descriptor `X' : [N, C]` (the spatial mean of
//! the residual branch) to an attention map `V ∈ (0, 1)^{N×C}`:
//!
//! * `se`: `σ(W_expand · relu(W_reduce · X'))`
//! * `se_deep`: the SE transform stacked `k` times with independent weights
//! * `se_shared`: the SE transform applied `k` times with one weight pair
//! * `eca`: `σ(conv1d_channels(X'))`
//! * `ras`: a single per-channel scale/shift `g(x) = x·γ + β` applied
//!   `k` times, with a connection (by default a batch norm that is distinct per
//!   step) between consecutive applications: `V = σ(g(BN_{k-1}(… g(BN_1(g(X'))))))`
//!
//! The recurrent kinds (`se_deep`, `se_shared`, `ras`) accept a connection
//! between steps. For `ras` it defaults to batch normalization; for the SE
//! variants it defaults to `identity`, which reproduces the plain stacked
//! recursion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{expect_len, BatchNorm, Bindings, Linear, ParamId, ParamRole, ParamStore};
use crate::ops::{self, Activation, Mode};
use crate::tensor::{Scalar, Tensor};

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| {
                        let allowed: Vec<_> = $name::ALL.iter().map(|v| v.as_str()).collect();
                        Error::config(format!(
                            "unknown {} '{s}' (expected one of {})",
                            stringify!($name),
                            allowed.join(", ")
                        ))
                    })
            }
        }
    };
}

named_enum!(
    AttentionKind {
        None => "none",
        Se => "se",
        SeDeep => "se_deep",
        SeShared => "se_shared",
        Eca => "eca",
        Ras => "ras",
    }
);

named_enum!(
    /// Whether the recurrence reuses one batch norm for every connection.
    BnMode {
        Shared => "shared",
        NonShared => "non_shared",
    }
);

named_enum!(
    /// Map applied between consecutive recurrence steps.
    Connection {
        Bn => "bn",
        Relu => "relu",
        Tanh => "tanh",
        Sigmoid => "sigmoid",
        Identity => "identity",
    }
);

impl AttentionKind {
    pub fn is_recurrent(self) -> bool {
        matches!(self, AttentionKind::SeDeep | AttentionKind::SeShared | AttentionKind::Ras)
    }
}

impl Connection {
    fn activation(self) -> Option<Activation> {
        match self {
            Connection::Bn => None,
            Connection::Relu => Some(Activation::Relu),
            Connection::Tanh => Some(Activation::Tanh),
            Connection::Sigmoid => Some(Activation::Sigmoid),
            Connection::Identity => Some(Activation::Identity),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcaKernel {
    /// Odd size derived from the channel count.
    Adaptive,
    Fixed(usize),
}

impl fmt::Display for EcaKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EcaKernel::Adaptive => f.write_str("adaptive"),
            EcaKernel::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for EcaKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(EcaKernel::Adaptive);
        }
        match s.parse::<usize>() {
            Ok(k) if k % 2 == 1 => Ok(EcaKernel::Fixed(k)),
            _ => Err(Error::config(format!(
                "eca kernel must be 'adaptive' or an odd positive integer, got '{s}'"
            ))),
        }
    }
}

/// `t = floor(|log2(C)/γ + b/γ|)`, bumped to the next odd number, at least 3.
pub fn adaptive_eca_kernel(channels: usize, gamma: f64, b: f64) -> usize {
    let t = ((channels as f64).log2() / gamma + b / gamma).abs().floor() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Implicit depth `k`: number of applications of the attention transform.
    pub depth: usize,
    pub bn_mode: BnMode,
    /// `None` picks the kind's default connection.
    pub connection: Option<Connection>,
    pub reduction: usize,
    pub eca_kernel: EcaKernel,
    pub gamma_init: f64,
    pub beta_init: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::Ras,
            depth: 2,
            bn_mode: BnMode::NonShared,
            connection: None,
            reduction: 16,
            eca_kernel: EcaKernel::Adaptive,
            gamma_init: 1.0,
            beta_init: 0.0,
        }
    }
}

impl AttentionConfig {
    pub fn of_kind(kind: AttentionKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self::of_kind(AttentionKind::None)
    }

    pub fn ras(depth: usize, bn_mode: BnMode) -> Self {
        Self {
            kind: AttentionKind::Ras,
            depth,
            bn_mode,
            ..Self::default()
        }
    }

    pub fn with_connection(mut self, connection: Connection) -> Self {
        self.connection = Some(connection);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("implicit depth k must be at least 1"));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction ratio must be at least 1"));
        }
        if let EcaKernel::Fixed(k) = self.eca_kernel {
            if k % 2 == 0 {
                return Err(Error::config(format!("eca kernel {k} must be odd")));
            }
        }
        Ok(())
    }

    pub fn effective_connection(&self) -> Connection {
        self.connection.unwrap_or(match self.kind {
            AttentionKind::Ras => Connection::Bn,
            _ => Connection::Identity,
        })
    }

    /// Number of applications of the transform.
    pub fn steps(&self) -> usize {
        if self.kind.is_recurrent() {
            self.depth
        } else {
            1
        }
    }

    /// Distinct batch norms between recurrence steps.
    pub fn norm_count(&self) -> usize {
        if !self.kind.is_recurrent() || self.effective_connection() != Connection::Bn {
            return 0;
        }
        let connections = self.depth - 1;
        match self.bn_mode {
            BnMode::NonShared => connections,
            BnMode::Shared => connections.min(1),
        }
    }

    /// SE bottleneck width `max(1, C / r)`.
    pub fn bottleneck(&self, channels: usize) -> usize {
        (channels / self.reduction).max(1)
    }

    pub fn eca_kernel_size(&self, channels: usize) -> usize {
        match self.eca_kernel {
            EcaKernel::Fixed(k) => k,
            EcaKernel::Adaptive => adaptive_eca_kernel(channels, 2.0, 1.0),
        }
    }

    /// Closed-form trainable parameter count of one module on `channels`.
    pub fn param_count(&self, channels: usize) -> usize {
        let c = channels;
        let se_pair = 2 * c * self.bottleneck(c);
        let norms = 2 * c * self.norm_count();
        match self.kind {
            AttentionKind::None => 0,
            AttentionKind::Se => se_pair,
            AttentionKind::SeDeep => self.depth * se_pair + norms,
            AttentionKind::SeShared => se_pair + norms,
            AttentionKind::Eca => self.eca_kernel_size(c),
            AttentionKind::Ras => 2 * c + norms,
        }
    }

    /// Short human-readable tag, e.g. `ras(k=2,non_shared,bn)`.
    pub fn label(&self) -> String {
        match self.kind {
            AttentionKind::None | AttentionKind::Se => self.kind.to_string(),
            AttentionKind::Eca => format!("eca(k={})", self.eca_kernel),
            _ => format!(
                "{}(k={},{},{})",
                self.kind,
                self.depth,
                self.bn_mode,
                self.effective_connection()
            ),
        }
    }
}

/// One SE transform `W_expand · relu(W_reduce · x)` (no sigmoid).
pub fn se_transform<T: Scalar>(x: &Var<T>, reduce: &Var<T>, expand: &Var<T>) -> Result<Var<T>> {
    let hidden = ops::relu(&ops::linear(x, reduce, None)?)?;
    ops::linear(&hidden, expand, None)
}

/// Squeeze-and-excitation map. `reduce: [C/r, C]`, `expand: [C, C/r]`.
pub fn se_forward<T: Scalar>(desc: &Var<T>, reduce: &Var<T>, expand: &Var<T>) -> Result<Var<T>> {
    ops::activation(&se_transform(desc, reduce, expand)?, Activation::Sigmoid)
}

/// Recurrence skeleton shared by the deepened variants:
/// `g⁰ = x`, `gⁱ = step(i, connect(i-1, gⁱ⁻¹))` (no connection before the
/// first step), result `σ(gᵏ)`. Steps and connections are 1-based.
pub fn unroll<T: Scalar>(
    desc: &Var<T>,
    steps: usize,
    mut connect: impl FnMut(usize, &Var<T>) -> Result<Var<T>>,
    mut step: impl FnMut(usize, &Var<T>) -> Result<Var<T>>,
) -> Result<Var<T>> {
    if steps == 0 {
        return Err(Error::config("implicit depth k must be at least 1"));
    }
    let mut g = step(1, desc)?;
    for i in 2..=steps {
        let linked = connect(i - 1, &g)?;
        g = step(i, &linked)?;
    }
    ops::activation(&g, Activation::Sigmoid)
}

/// Explicitly deepened SE: one independent `(reduce, expand)` pair per step,
/// no connection between steps.
pub fn se_deep_forward<T: Scalar>(desc: &Var<T>, pairs: &[(Var<T>, Var<T>)]) -> Result<Var<T>> {
    if pairs.is_empty() {
        return Err(Error::config("se_deep needs at least one weight pair"));
    }
    unroll(
        desc,
        pairs.len(),
        |_, g| Ok(g.clone()),
        |i, g| se_transform(g, &pairs[i - 1].0, &pairs[i - 1].1),
    )
}

/// Weight-shared SE: the same pair applied `k` times.
pub fn se_shared_forward<T: Scalar>(
    desc: &Var<T>,
    reduce: &Var<T>,
    expand: &Var<T>,
    k: usize,
) -> Result<Var<T>> {
    unroll(desc, k, |_, g| Ok(g.clone()), |_, g| se_transform(g, reduce, expand))
}

/// Efficient channel attention: sigmoid of a channel-axis 1-D convolution.
pub fn eca_forward<T: Scalar>(desc: &Var<T>, kernel: &Var<T>) -> Result<Var<T>> {
    ops::activation(&ops::channel_conv1d(desc, kernel)?, Activation::Sigmoid)
}

/// Recurrent linear enhancement with an arbitrary connection between steps.
pub fn ras_forward<T: Scalar>(
    desc: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    k: usize,
    connect: impl FnMut(usize, &Var<T>) -> Result<Var<T>>,
) -> Result<Var<T>> {
    unroll(desc, k, connect, |_, g| ops::scale_shift(g, gamma, beta))
}

/// Runtime connections between recurrence steps.
#[derive(Debug, Clone)]
pub struct Connectors<T: Scalar = f32> {
    pub kind: Connection,
    pub bn_mode: BnMode,
    pub norms: Vec<BatchNorm<T>>,
}

impl<T: Scalar> Connectors<T> {
    fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize, cfg: &AttentionConfig) -> Self {
        let norms = (0..cfg.norm_count())
            .map(|i| BatchNorm::new(store, &format!("{prefix}.link{}", i + 1), channels, ParamRole::AttentionNorm))
            .collect();
        Self {
            kind: cfg.effective_connection(),
            bn_mode: cfg.bn_mode,
            norms,
        }
    }

    /// Checks that the norm stores match `k` and the sharing mode.
    pub fn check(&self, k: usize) -> Result<()> {
        if self.kind != Connection::Bn {
            return expect_len("connection batch norms", self.norms.len(), 0);
        }
        let expected = match self.bn_mode {
            BnMode::NonShared => k - 1,
            BnMode::Shared => (k - 1).min(1),
        };
        expect_len(
            &format!("batch norms for k={k} ({})", self.bn_mode),
            self.norms.len(),
            expected,
        )
    }

    /// Applies connection number `index` (1-based).
    pub fn apply(&mut self, b: &Bindings<T>, index: usize, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        match self.kind.activation() {
            Some(act) => ops::activation(x, act),
            None => {
                let slot = match self.bn_mode {
                    BnMode::NonShared => index - 1,
                    BnMode::Shared => 0,
                };
                self.norms[slot].forward(b, x, mode)
            }
        }
    }
}

/// Trainable state of a RAS module: one scale/shift pair shared by all steps
/// plus the connection norms.
#[derive(Debug, Clone)]
pub struct RasParams<T: Scalar = f32> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub connectors: Connectors<T>,
}

impl<T: Scalar> RasParams<T> {
    /// With nothing to differentiate, eval-mode recurrence through affine
    /// connections is one per-channel affine map `a·x + b`. Returns `(a, b)`,
    /// or `None` when the chain has a nonlinearity or gradients are needed.
    fn folded(&self, bindings: &Bindings<T>, k: usize, mode: Mode) -> Option<(Tensor<T>, Tensor<T>)> {
        let (gamma, beta) = (bindings.get(self.gamma), bindings.get(self.beta));
        let affine = matches!(self.connectors.kind, Connection::Bn | Connection::Identity);
        let norm_vars = self
            .connectors
            .norms
            .iter()
            .flat_map(|n| [bindings.get(n.gamma), bindings.get(n.beta)]);
        let tracked = gamma.requires_grad() || beta.requires_grad() || norm_vars.clone().any(|v| v.requires_grad());
        if mode != Mode::Eval || !affine || tracked {
            return None;
        }
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let c = gv.len();
        let mut a: Vec<T> = gv.to_vec();
        let mut sh: Vec<T> = bv.to_vec();
        for i in 1..k {
            if self.connectors.kind == Connection::Bn {
                let slot = match self.connectors.bn_mode {
                    BnMode::NonShared => i - 1,
                    BnMode::Shared => 0,
                };
                let n = &self.connectors.norms[slot];
                let (ng, nb) = (bindings.get(n.gamma).value().data(), bindings.get(n.beta).value().data());
                let eps = T::from_f64(n.state.epsilon);
                for ch in 0..c {
                    let s = ng[ch] / (n.state.running_var[ch] + eps).sqrt();
                    a[ch] = a[ch] * s;
                    sh[ch] = (sh[ch] - n.state.running_mean[ch]) * s + nb[ch];
                }
            }
            for ch in 0..c {
                a[ch] = a[ch] * gv[ch];
                sh[ch] = sh[ch] * gv[ch] + bv[ch];
            }
        }
        Some((Tensor::from_parts(vec![c], a), Tensor::from_parts(vec![c], sh)))
    }
}

#[derive(Debug, Clone)]
enum Body<T: Scalar> {
    None,
    Se {
        reduce: Linear,
        expand: Linear,
    },
    SeDeep {
        pairs: Vec<(Linear, Linear)>,
        connectors: Connectors<T>,
    },
    SeShared {
        reduce: Linear,
        expand: Linear,
        connectors: Connectors<T>,
    },
    Eca {
        kernel: ParamId,
    },
    Ras(RasParams<T>),
}

/// An attention module bound to a channel count, with its parameters living
/// in a [`ParamStore`] under a common name prefix.
#[derive(Debug, Clone)]
pub struct Attention<T: Scalar = f32> {
    cfg: AttentionConfig,
    channels: usize,
    params: Vec<ParamId>,
    body: Body<T>,
}

fn se_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> (Linear, Linear) {
    let role = ParamRole::AttentionWeight;
    (
        Linear::new(store, &format!("{prefix}.reduce"), channels, hidden, false, role, rng),
        Linear::new(store, &format!("{prefix}.expand"), hidden, channels, false, role, rng),
    )
}

/// Builds the module described by `cfg` for `channels` channels,
/// registering its parameters under `prefix`.
pub fn make_attention<T: Scalar>(
    cfg: &AttentionConfig,
    channels: usize,
    store: &mut ParamStore<T>,
    prefix: &str,
    rng: &mut impl Rng,
) -> Result<Attention<T>> {
    cfg.validate()?;
    let first = store.len();
    let hidden = cfg.bottleneck(channels);
    let body = match cfg.kind {
        AttentionKind::None => Body::None,
        AttentionKind::Se => {
            let (reduce, expand) = se_pair(store, prefix, channels, hidden, rng);
            Body::Se { reduce, expand }
        }
        AttentionKind::SeDeep => {
            let pairs = (1..=cfg.depth)
                .map(|i| se_pair(store, &format!("{prefix}.step{i}"), channels, hidden, rng))
                .collect();
            Body::SeDeep {
                pairs,
                connectors: Connectors::new(store, prefix, channels, cfg),
            }
        }
        AttentionKind::SeShared => {
            let (reduce, expand) = se_pair(store, prefix, channels, hidden, rng);
            Body::SeShared {
                reduce,
                expand,
                connectors: Connectors::new(store, prefix, channels, cfg),
            }
        }
        AttentionKind::Eca => {
            let size = cfg.eca_kernel_size(channels);
            let bound = 1.0 / (size as f64).sqrt();
            let kernel = store.add(
                format!("{prefix}.kernel"),
                Tensor::uniform([size], bound, rng),
                ParamRole::AttentionWeight,
            );
            Body::Eca { kernel }
        }
        AttentionKind::Ras => {
            let gamma = store.add(
                format!("{prefix}.gamma"),
                Tensor::full([channels], T::from_f64(cfg.gamma_init)),
                ParamRole::AttentionAffine,
            );
            let beta = store.add(
                format!("{prefix}.beta"),
                Tensor::full([channels], T::from_f64(cfg.beta_init)),
                ParamRole::AttentionAffine,
            );
            Body::Ras(RasParams {
                gamma,
                beta,
                connectors: Connectors::new(store, prefix, channels, cfg),
            })
        }
    };
    let params = (first..store.len()).map(ParamId).collect();
    Ok(Attention {
        cfg: cfg.clone(),
        channels,
        params,
        body,
    })
}

impl<T: Scalar> Attention<T> {
    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `true` for `kind = none`, whose map is identically 1.
    pub fn is_identity(&self) -> bool {
        matches!(self.body, Body::None)
    }

    /// Parameters registered by this module, in creation order.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn ras_params(&self) -> Option<&RasParams<T>> {
        match &self.body {
            Body::Ras(p) => Some(p),
            _ => None,
        }
    }

    pub fn ras_params_mut(&mut self) -> Option<&mut RasParams<T>> {
        match &mut self.body {
            Body::Ras(p) => Some(p),
            _ => None,
        }
    }

    /// Connection norms, for kinds that have them.
    pub fn norms(&self) -> &[BatchNorm<T>] {
        match &self.body {
            Body::Ras(p) => &p.connectors.norms,
            Body::SeDeep { connectors, .. } | Body::SeShared { connectors, .. } => &connectors.norms,
            _ => &[],
        }
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNorm<T>] {
        match &mut self.body {
            Body::Ras(p) => &mut p.connectors.norms,
            Body::SeDeep { connectors, .. } | Body::SeShared { connectors, .. } => &mut connectors.norms,
            _ => &mut [],
        }
    }

    /// Attention map `V : [N, C]` for descriptor `desc : [N, C]`.
    pub fn forward(&mut self, b: &Bindings<T>, desc: &Var<T>, mode: Mode) -> Result<Var<T>> {
        if desc.shape().len() != 2 || desc.shape()[1] != self.channels {
            return Err(Error::dim(
                "attention",
                format!("descriptor {:?} for a {}-channel module", desc.shape(), self.channels),
            ));
        }
        let k = self.cfg.depth;
        match &mut self.body {
            Body::None => Ok(Var::constant(Tensor::ones(desc.shape().to_vec()))),
            Body::Se { reduce, expand } => se_forward(desc, b.get(reduce.weight), b.get(expand.weight)),
            Body::SeDeep { pairs, connectors } => {
                connectors.check(pairs.len())?;
                unroll(
                    desc,
                    pairs.len(),
                    |i, g| connectors.apply(b, i, g, mode),
                    |i, g| {
                        let (r, e) = &pairs[i - 1];
                        se_transform(g, b.get(r.weight), b.get(e.weight))
                    },
                )
            }
            Body::SeShared {
                reduce,
                expand,
                connectors,
            } => {
                connectors.check(k)?;
                let (r, e) = (b.get(reduce.weight), b.get(expand.weight));
                unroll(desc, k, |i, g| connectors.apply(b, i, g, mode), |_, g| se_transform(g, r, e))
            }
            Body::Eca { kernel } => eca_forward(desc, b.get(*kernel)),
            Body::Ras(p) => {
                p.connectors.check(k)?;
                let (gamma, beta) = (b.get(p.gamma), b.get(p.beta));
                if let Some((scale, shift)) = p.folded(b, k, mode) {
                    let g = ops::scale_shift(desc, &Var::constant(scale), &Var::constant(shift))?;
                    return ops::activation(&g, Activation::Sigmoid);
                }
                let connectors = &mut p.connectors;
                ras_forward(desc, gamma, beta, k, |i, g| connectors.apply(b, i, g, mode))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &AttentionConfig, c: usize) -> (ParamStore<f64>, Attention<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = make_attention(cfg, c, &mut store, "att", &mut rng).unwrap();
        (store, att)
    }

    #[test]
    fn enum_names_round_trip() {
        for k in AttentionKind::ALL {
            assert_eq!(k.as_str().parse::<AttentionKind>().unwrap(), *k);
        }
        assert!("cbam".parse::<AttentionKind>().is_err());
        assert_eq!("non_shared".parse::<BnMode>().unwrap(), BnMode::NonShared);
        assert_eq!("bn".parse::<Connection>().unwrap(), Connection::Bn);
        assert!("4".parse::<EcaKernel>().is_err());
        assert_eq!("5".parse::<EcaKernel>().unwrap(), EcaKernel::Fixed(5));
    }

    #[test]
    fn adaptive_kernel_sizes() {
        assert_eq!(adaptive_eca_kernel(64, 2.0, 1.0), 3);
        assert_eq!(adaptive_eca_kernel(128, 2.0, 1.0), 5);
        assert_eq!(adaptive_eca_kernel(256, 2.0, 1.0), 5);
        assert_eq!(adaptive_eca_kernel(4, 2.0, 1.0), 3);
    }

    #[test]
    fn closed_form_counts() {
        let se = AttentionConfig::of_kind(AttentionKind::Se);
        assert_eq!(se.param_count(64), 512);
        assert_eq!(se.param_count(256), 8192);
        let deep = AttentionConfig {
            kind: AttentionKind::SeDeep,
            depth: 2,
            ..AttentionConfig::default()
        };
        assert_eq!(deep.param_count(64), 1024);
        let ras = AttentionConfig::ras(2, BnMode::NonShared);
        assert_eq!(ras.param_count(64), 256);
        assert_eq!(AttentionConfig::none().param_count(64), 0);
    }

    #[test]
    fn built_modules_match_closed_form() {
        let mut configs = vec![
            AttentionConfig::none(),
            AttentionConfig::of_kind(AttentionKind::Se),
            AttentionConfig::of_kind(AttentionKind::Eca),
        ];
        for depth in 1..=4 {
            for bn_mode in [BnMode::Shared, BnMode::NonShared] {
                for kind in [AttentionKind::Ras, AttentionKind::SeDeep, AttentionKind::SeShared] {
                    for conn in [None, Some(Connection::Bn), Some(Connection::Tanh)] {
                        configs.push(AttentionConfig {
                            kind,
                            depth,
                            bn_mode,
                            connection: conn,
                            ..AttentionConfig::default()
                        });
                    }
                }
            }
        }
        for cfg in configs {
            for c in [8, 64, 256] {
                let (store, att) = build(&cfg, c);
                let actual: usize = att.params().iter().map(|&id| store.get(id).value.numel()).sum();
                assert_eq!(actual, cfg.param_count(c), "{}", cfg.label());
                assert_eq!(store.numel(), actual);
            }
        }
    }

    #[test]
    fn none_is_all_ones() {
        let (store, mut att) = build(&AttentionConfig::none(), 4);
        let b = store.bind(false);
        let desc = Var::constant(Tensor::from_fn([3, 4], |i| i as f64));
        let v = att.forward(&b, &desc, Mode::Eval).unwrap();
        assert!(v.value().data().iter().all(|&x| x == 1.0));
        assert!(att.is_identity());
    }

    #[test]
    fn zero_se_gives_half() {
        let desc = Var::constant(Tensor::<f64>::zeros([2, 64]));
        let r = Var::constant(Tensor::zeros([4, 64]));
        let e = Var::constant(Tensor::zeros([64, 4]));
        let v = se_forward(&desc, &r, &e).unwrap();
        assert!(v.value().data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn eca_identity_kernel() {
        let desc = Var::constant(Tensor::<f64>::from_fn([2, 6], |i| i as f64 * 0.3 - 1.0));
        let k = Var::constant(Tensor::new([3], vec![0.0, 1.0, 0.0]).unwrap());
        let v = eca_forward(&desc, &k).unwrap();
        for (a, &x) in v.value().data().iter().zip(desc.value().data()) {
            assert_eq!(*a, ops::sigmoid(x));
        }
    }

    #[test]
    fn inconsistent_norm_count_rejected() {
        let cfg = AttentionConfig::ras(3, BnMode::NonShared);
        let (store, mut att) = build(&cfg, 4);
        att.ras_params_mut().unwrap().connectors.norms.pop();
        let b = store.bind(false);
        let desc = Var::constant(Tensor::zeros([2, 4]));
        assert!(matches!(att.forward(&b, &desc, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = AttentionConfig::default();
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AttentionConfig::default();
        cfg.eca_kernel = EcaKernel::Fixed(4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eval_folding_matches_step_by_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 1..=4 {
            for cfg in [
                AttentionConfig::ras(k, BnMode::NonShared),
                AttentionConfig::ras(k, BnMode::Shared),
                AttentionConfig::ras(k, BnMode::NonShared).with_connection(Connection::Identity),
            ] {
                let (mut store, mut att) = build(&cfg, 6);
                for p in store.iter_mut() {
                    p.value = Tensor::randn(p.value.shape().to_vec(), 0.8, &mut rng).map(|v| v + 1.0);
                }
                let warm = Var::constant(Tensor::randn([5, 6], 1.0, &mut rng));
                att.forward(&store.bind(false), &warm, Mode::Train).unwrap();
                let x = Var::constant(Tensor::randn([3, 6], 1.0, &mut rng));
                let fused = att.forward(&store.bind(false), &x, Mode::Eval).unwrap();
                let stepped = att.forward(&store.bind(true), &x, Mode::Eval).unwrap();
                assert!(fused.value().max_abs_diff(stepped.value()) < 1e-12, "{}", cfg.label());
            }
        }
    }
}
