//! Pre-activation bottleneck ResNets for 32×32 inputs, depth `9n + 2`, with a
//! channel-attention module inside every residual block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{make_attention, Attention, AttentionConfig};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Bindings, Conv2d, Linear, ParamRole, ParamStore};
use crate::ops::{self, Mode};
use crate::tensor::{Scalar, Tensor};

/// Output width of a bottleneck block relative to its inner width.
pub const EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub attention: AttentionConfig,
}

impl BlockSpec {
    pub fn new(in_channels: usize, bottleneck_channels: usize, stride: usize, attention: AttentionConfig) -> Self {
        Self {
            in_channels,
            bottleneck_channels,
            out_channels: EXPANSION * bottleneck_channels,
            stride,
            attention,
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels != EXPANSION * self.bottleneck_channels {
            return Err(Error::config(format!(
                "bottleneck block needs out = {EXPANSION} x inner, got {} vs {}",
                self.out_channels, self.bottleneck_channels
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::config(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.in_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::config("block channel counts must be positive"));
        }
        self.attention.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Bottleneck blocks per stage, `n`; depth is `9n + 2`.
    pub blocks_per_stage: usize,
    /// Inner (bottleneck) width of each of the three stages. The stem
    /// produces `stage_widths[0]` channels.
    pub stage_widths: [usize; 3],
    pub num_classes: usize,
    pub attention: AttentionConfig,
    pub input_resolution: (usize, usize),
}

impl ModelSpec {
    pub fn resnet(blocks_per_stage: usize, num_classes: usize, attention: AttentionConfig) -> Self {
        Self {
            blocks_per_stage,
            stage_widths: [16, 32, 64],
            num_classes,
            attention,
            input_resolution: (32, 32),
        }
    }

    pub fn resnet164(num_classes: usize, attention: AttentionConfig) -> Self {
        Self::resnet(18, num_classes, attention)
    }

    pub fn resnet83(num_classes: usize, attention: AttentionConfig) -> Self {
        Self::resnet(9, num_classes, attention)
    }

    pub fn depth(&self) -> usize {
        9 * self.blocks_per_stage + 2
    }

    /// `resnet{depth}` for the standard widths and 32×32 inputs, otherwise
    /// a `micro-…` tag spelling out the shape.
    pub fn id(&self) -> String {
        if self.stage_widths == [16, 32, 64] && self.input_resolution == (32, 32) {
            format!("resnet{}", self.depth())
        } else {
            let [a, b, c] = self.stage_widths;
            let (h, w) = self.input_resolution;
            format!("micro-n{}-w{a}.{b}.{c}-{h}x{w}", self.blocks_per_stage)
        }
    }

    pub fn with_attention(&self, attention: AttentionConfig) -> Self {
        Self {
            attention,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage < 1 {
            return Err(Error::config("blocks per stage must be at least 1"));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::config("stage widths must be positive"));
        }
        if self.num_classes < 1 {
            return Err(Error::config("need at least one class"));
        }
        let (h, w) = self.input_resolution;
        if h < 4 || w < 4 {
            return Err(Error::config(format!("input resolution {h}x{w} too small for two stride-2 stages")));
        }
        self.attention.validate()
    }

    /// Block layout in forward order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut specs = Vec::with_capacity(3 * self.blocks_per_stage);
        let mut in_channels = self.stage_widths[0];
        for (stage, &width) in self.stage_widths.iter().enumerate() {
            for i in 0..self.blocks_per_stage {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let spec = BlockSpec::new(in_channels, width, stride, self.attention.clone());
                in_channels = spec.out_channels;
                specs.push(spec);
            }
        }
        specs
    }

    pub fn final_channels(&self) -> usize {
        EXPANSION * self.stage_widths[2]
    }
}

/// One pre-activation bottleneck block:
/// `Y = shortcut(X) + f(X) ⊗ V`, `V = attention(GAP(f(X)))`.
#[derive(Debug, Clone)]
pub struct Block<T: Scalar = f32> {
    pub spec: BlockSpec,
    pub bn1: BatchNorm<T>,
    pub conv1: Conv2d,
    pub bn2: BatchNorm<T>,
    pub conv2: Conv2d,
    pub bn3: BatchNorm<T>,
    pub conv3: Conv2d,
    pub shortcut: Option<Conv2d>,
    pub attention: Attention<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: BlockSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let (cin, mid, cout) = (spec.in_channels, spec.bottleneck_channels, spec.out_channels);
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), cin, ParamRole::NormAffine);
        let conv1 = Conv2d::new(store, &format!("{prefix}.conv1"), cin, mid, 1, 1, rng);
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), mid, ParamRole::NormAffine);
        let conv2 = Conv2d::new(store, &format!("{prefix}.conv2"), mid, mid, 3, spec.stride, rng);
        let bn3 = BatchNorm::new(store, &format!("{prefix}.bn3"), mid, ParamRole::NormAffine);
        let conv3 = Conv2d::new(store, &format!("{prefix}.conv3"), mid, cout, 1, 1, rng);
        let shortcut = spec
            .needs_projection()
            .then(|| Conv2d::new(store, &format!("{prefix}.shortcut"), cin, cout, 1, spec.stride, rng));
        let attention = make_attention(&spec.attention, cout, store, &format!("{prefix}.attention"), rng)?;
        Ok(Self {
            spec,
            bn1,
            conv1,
            bn2,
            conv2,
            bn3,
            conv3,
            shortcut,
            attention,
        })
    }

    /// The residual branch `f(X)`.
    pub fn residual(&mut self, b: &Bindings<T>, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let h = ops::relu(&self.bn1.forward(b, x, mode)?)?;
        let h = self.conv1.forward(b, &h)?;
        let h = ops::relu(&self.bn2.forward(b, &h, mode)?)?;
        let h = self.conv2.forward(b, &h)?;
        let h = ops::relu(&self.bn3.forward(b, &h, mode)?)?;
        self.conv3.forward(b, &h)
    }

    pub fn forward(&mut self, b: &Bindings<T>, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        if x.shape().len() != 4 || x.shape()[1] != self.spec.in_channels {
            return Err(Error::config(format!(
                "block expects {} input channels, got shape {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let branch = self.residual(b, x, mode)?;
        let branch = if self.attention.is_identity() {
            branch
        } else {
            let descriptor = ops::global_avg_pool(&branch)?;
            let map = self.attention.forward(b, &descriptor, mode)?;
            ops::channel_gate(&branch, &map)?
        };
        let identity = match &self.shortcut {
            Some(proj) => proj.forward(b, x)?,
            None => x.clone(),
        };
        ops::add(&identity, &branch)
    }
}

/// A built network: parameters plus the layer graph that reads them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    store: ParamStore<T>,
    pub stem: Conv2d,
    pub blocks: Vec<Block<T>>,
    pub final_bn: BatchNorm<T>,
    pub head: Linear,
}

/// Builds the network for `spec` with weights drawn deterministically from
/// `seed`.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stem = Conv2d::new(&mut store, "stem", 3, spec.stage_widths[0], 3, 1, &mut rng);
    let mut blocks = Vec::new();
    for (i, bspec) in spec.blocks().into_iter().enumerate() {
        let (stage, idx) = (i / spec.blocks_per_stage + 1, i % spec.blocks_per_stage);
        blocks.push(Block::new(&mut store, &format!("stage{stage}.block{idx}"), bspec, &mut rng)?);
    }
    let c = spec.final_channels();
    let final_bn = BatchNorm::new(&mut store, "final_bn", c, ParamRole::NormAffine);
    let head = Linear::new(&mut store, "fc", c, spec.num_classes, true, ParamRole::Weight, &mut rng);
    Ok(Model {
        spec: spec.clone(),
        store,
        stem,
        blocks,
        final_bn,
        head,
    })
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn bind(&self, track: bool) -> Bindings<T> {
        self.store.bind(track)
    }

    /// Convolutions on the main path plus the classifier: `9n + 2`.
    pub fn weighted_layers(&self) -> usize {
        1 + 3 * self.blocks.len() + 1
    }

    /// Logits `[N, num_classes]` for images `[N, 3, H, W]`.
    pub fn forward(&mut self, b: &Bindings<T>, x: &Var<T>, mode: Mode) -> Result<Var<T>> {
        let (h, w) = self.spec.input_resolution;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != h || s[3] != w {
            return Err(Error::dim(
                "model_forward",
                format!("expected [N, 3, {h}, {w}] input, got {s:?}"),
            ));
        }
        let mut h = self.stem.forward(b, x)?;
        for block in &mut self.blocks {
            h = block.forward(b, &h, mode)?;
        }
        let h = ops::relu(&self.final_bn.forward(b, &h, mode)?)?;
        let pooled = ops::global_avg_pool(&h)?;
        self.head.forward(b, &pooled)
    }

    /// Untracked forward pass.
    pub fn predict(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let b = self.bind(false);
        let x = Var::constant(images.clone());
        Ok(self.forward(&b, &x, mode)?.into_value())
    }

    /// Sets the classifier weights and bias to zero.
    pub fn zero_head(&mut self) {
        let ids = std::iter::once(self.head.weight).chain(self.head.bias);
        for id in ids {
            let p = self.store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    fn all_norms_mut(&mut self) -> Vec<(String, &mut BatchNorm<T>)> {
        let per_stage = self.spec.blocks_per_stage;
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let prefix = format!("stage{}.block{}", i / per_stage + 1, i % per_stage);
            let Block { bn1, bn2, bn3, attention, .. } = block;
            out.push((format!("{prefix}.bn1"), bn1));
            out.push((format!("{prefix}.bn2"), bn2));
            out.push((format!("{prefix}.bn3"), bn3));
            for (j, n) in attention.norms_mut().iter_mut().enumerate() {
                out.push((format!("{prefix}.attention.link{}", j + 1), n));
            }
        }
        out.push(("final_bn".to_string(), &mut self.final_bn));
        out
    }

    /// Parameters and batch-norm running statistics as named tensors.
    pub fn state_tensors(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (name, bn) in self.all_norms_mut() {
            let c = bn.channels();
            out.push((
                format!("{name}.running_mean"),
                Tensor::from_parts(vec![c], bn.state.running_mean.clone()),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::from_parts(vec![c], bn.state.running_var.clone()),
            ));
        }
        out
    }

    /// Restores tensors produced by [`Model::state_tensors`]. Every name must
    /// be known and every known tensor present.
    pub fn load_state(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut remaining: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = remaining
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for p in self.store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = take(&p.name, &shape)?;
        }
        for (name, bn) in self.all_norms_mut() {
            let c = [bn.channels()];
            bn.state.running_mean = take(&format!("{name}.running_mean"), &c)?.into_data();
            bn.state.running_var = take(&format!("{name}.running_var"), &c)?.into_data();
        }
        if let Some(extra) = remaining.keys().next() {
            return Err(Error::Checkpoint(format!("unknown tensor '{extra}'")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionKind, BnMode};

    fn micro(att: AttentionConfig) -> ModelSpec {
        ModelSpec {
            blocks_per_stage: 1,
            stage_widths: [2, 2, 4],
            num_classes: 3,
            attention: att,
            input_resolution: (8, 8),
        }
    }

    #[test]
    fn depth_law() {
        for n in [1, 2, 9, 18] {
            let spec = ModelSpec::resnet(n, 10, AttentionConfig::none());
            let model: Model = build_model(&spec, 0).unwrap();
            assert_eq!(model.weighted_layers(), 9 * n + 2);
            assert_eq!(spec.depth(), 9 * n + 2);
        }
    }

    #[test]
    fn zero_blocks_rejected() {
        let spec = ModelSpec::resnet(0, 10, AttentionConfig::none());
        assert!(matches!(build_model::<f32>(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn stage_transitions() {
        let blocks = ModelSpec::resnet(2, 10, AttentionConfig::none()).blocks();
        let strides: Vec<_> = blocks.iter().map(|b| b.stride).collect();
        assert_eq!(strides, [1, 1, 2, 1, 2, 1]);
        let projections: Vec<_> = blocks.iter().map(|b| b.needs_projection()).collect();
        assert_eq!(projections, [true, false, true, false, true, false]);
        assert_eq!(blocks.last().unwrap().out_channels, 256);
    }

    #[test]
    fn attention_changes_only_attention_params() {
        let base: Model = build_model(&micro(AttentionConfig::none()), 3).unwrap();
        let base_names: Vec<_> = base.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        for kind in [AttentionKind::Se, AttentionKind::Eca, AttentionKind::Ras] {
            let m: Model = build_model(&micro(AttentionConfig::of_kind(kind)), 3).unwrap();
            let names: Vec<_> = m
                .params()
                .iter()
                .filter(|p| !p.role.is_attention())
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect();
            assert_eq!(names, base_names);
        }
    }

    #[test]
    fn resolution_mismatch() {
        let mut m: Model = build_model(&micro(AttentionConfig::none()), 0).unwrap();
        let x = Tensor::zeros([2, 3, 16, 16]);
        assert!(matches!(m.predict(&x, Mode::Eval), Err(Error::Dimension { .. })));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m: Model = build_model(&micro(AttentionConfig::ras(2, BnMode::NonShared)), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([2, 3, 8, 8], 1.0, &mut rng);
        let a = m.predict(&x, Mode::Eval).unwrap();
        let b = m.predict(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m: Model = build_model(&micro(AttentionConfig::of_kind(AttentionKind::Se)), 5).unwrap();
        m.zero_head();
        let logits = m.predict(&Tensor::zeros([2, 3, 8, 8]), Mode::Eval).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn state_round_trip() {
        let spec = micro(AttentionConfig::ras(3, BnMode::NonShared));
        let mut a: Model = build_model(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([4, 3, 8, 8], 1.0, &mut rng);
        a.predict(&x, Mode::Train).unwrap();
        let mut b: Model = build_model(&spec, 99).unwrap();
        b.load_state(a.state_tensors()).unwrap();
        assert_eq!(a.predict(&x, Mode::Eval).unwrap(), b.predict(&x, Mode::Eval).unwrap());
    }
}
