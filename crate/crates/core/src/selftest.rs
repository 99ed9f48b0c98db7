//! Built-in verification: finite-difference gradient checks, degeneracy
//! identities of the attention variants and parameter-count laws, all on
//! tiny models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{closed_form_attention_params, count_params};
use crate::attention::{
    make_attention, ras_forward, se_deep_forward, se_forward, se_shared_forward, unroll, AttentionConfig,
    AttentionKind, BnMode, Connection,
};
use crate::autograd::{backward, Var};
use crate::backbone::{build_model, Block, BlockSpec, Model, ModelSpec};
use crate::error::Result;
use crate::gradcheck::{self, GRAD_TOLERANCE};
use crate::nn::{Bindings, ParamStore};
use crate::ops::{self, Activation, BatchNormState, Mode};
use crate::tensor::Tensor;

/// Default number of random seeds for gradient checks.
pub const DEFAULT_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub op: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(module: &'static str, op: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            module,
            op: op.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(module: &'static str, op: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(module, op, passed, detail),
            Err(e) => Self::new(module, op, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}/{}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.op,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelftestReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }

    /// One line per check plus a closing count. Contains no timings, so
    /// repeated runs print the same text.
    pub fn summary(&self) -> String {
        let mut s: String = self.outcomes.iter().map(|o| o.line() + "\n").collect();
        let failed = self.failures().len();
        s.push_str(&format!(
            "{} checks, {} passed, {} failed\n",
            self.outcomes.len(),
            self.outcomes.len() - failed,
            failed
        ));
        s
    }
}

/// Runs every check with gradient checks over seeds `0..seeds`.
pub fn run(seeds: u64) -> SelftestReport {
    let mut outcomes = gradient_suite(0..seeds);
    outcomes.extend(weight_sharing_checks(&[2, 3, 4]));
    outcomes.extend(degeneracy_checks());
    outcomes.extend(param_law_checks());
    SelftestReport { outcomes }
}

type LossFn = Box<dyn FnMut(&[Var<f64>]) -> Result<Var<f64>>>;

struct Case {
    module: &'static str,
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    loss: LossFn,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Shifts values at least 0.2 away from zero so kinks stay out of reach of
/// the finite-difference step.
fn off_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v + 0.2 * v.signum())
}

fn probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, rng)
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();
    let mut add = |op, inputs, loss: LossFn| {
        cases.push(Case {
            module: "autodiff-nn",
            op,
            inputs,
            loss,
        })
    };

    for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
        let w = probe(&[2, 4, 3, 3], r);
        let x = randn(&[2, 3, 5, 5], r);
        let kernel = randn(&[4, 3, k, k], r);
        let out = ops::conv_output_size(5, k, stride, padding);
        let w = Tensor::from_fn([2, 4, out, out], |i| w.data()[i % w.numel()]);
        add(
            "conv2d",
            vec![x, kernel],
            Box::new(move |v| ops::weighted_sum(&ops::conv2d(&v[0], &v[1], stride, padding)?, &w)),
        );
    }

    let w = probe(&[2, 6], r);
    add(
        "channel_conv1d",
        vec![randn(&[2, 6], r), randn(&[3], r)],
        Box::new(move |v| ops::weighted_sum(&ops::channel_conv1d(&v[0], &v[1])?, &w)),
    );

    let w = probe(&[3, 4], r);
    add(
        "fully_connected",
        vec![randn(&[3, 5], r), randn(&[4, 5], r), randn(&[4], r)],
        Box::new(move |v| ops::weighted_sum(&ops::linear(&v[0], &v[1], Some(&v[2]))?, &w)),
    );

    for shape in [vec![4, 3], vec![3, 2, 3, 3]] {
        let c = shape[1];
        let w = probe(&shape, r);
        let mut state = BatchNormState::new(c);
        add(
            "batch_norm",
            vec![randn(&shape, r), randn(&[c], r), randn(&[c], r)],
            Box::new(move |v| ops::weighted_sum(&ops::batch_norm(&v[0], &v[1], &v[2], &mut state, Mode::Train)?, &w)),
        );
    }
    let w = probe(&[3, 2, 3, 3], r);
    let mut state = BatchNormState::new(2);
    state.running_mean = vec![0.3, -0.2];
    state.running_var = vec![1.7, 0.4];
    add(
        "batch_norm",
        vec![randn(&[3, 2, 3, 3], r), randn(&[2], r), randn(&[2], r)],
        Box::new(move |v| ops::weighted_sum(&ops::batch_norm(&v[0], &v[1], &v[2], &mut state, Mode::Eval)?, &w)),
    );

    for act in Activation::ALL {
        let w = probe(&[2, 5], r);
        add(
            "activation",
            vec![off_zero(randn(&[2, 5], r))],
            Box::new(move |v| ops::weighted_sum(&ops::activation(&v[0], act)?, &w)),
        );
    }

    let w = probe(&[2, 3], r);
    add(
        "add",
        vec![randn(&[2, 3], r), randn(&[2, 3], r)],
        Box::new(move |v| ops::weighted_sum(&ops::add(&v[0], &v[1])?, &w)),
    );
    let w = probe(&[2, 3], r);
    add(
        "mul",
        vec![randn(&[2, 3], r), randn(&[2, 3], r)],
        Box::new(move |v| ops::weighted_sum(&ops::mul(&v[0], &v[1])?, &w)),
    );
    add("sum", vec![randn(&[3, 2], r)], Box::new(|v| ops::sum(&v[0])));
    let w = probe(&[2, 3, 2, 2], r);
    add(
        "weighted_sum",
        vec![randn(&[2, 3, 2, 2], r)],
        Box::new(move |v| ops::weighted_sum(&v[0], &w)),
    );
    let w = probe(&[2, 3], r);
    add(
        "global_avg_pool",
        vec![randn(&[2, 3, 3, 2], r)],
        Box::new(move |v| ops::weighted_sum(&ops::global_avg_pool(&v[0])?, &w)),
    );
    let w = probe(&[3, 4], r);
    add(
        "scale_shift",
        vec![randn(&[3, 4], r), randn(&[4], r), randn(&[4], r)],
        Box::new(move |v| ops::weighted_sum(&ops::scale_shift(&v[0], &v[1], &v[2])?, &w)),
    );
    let w = probe(&[2, 3, 2, 2], r);
    add(
        "channel_gate",
        vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)],
        Box::new(move |v| ops::weighted_sum(&ops::channel_gate(&v[0], &v[1])?, &w)),
    );
    add(
        "cross_entropy",
        vec![randn(&[3, 4], r)],
        Box::new(|v| ops::cross_entropy(&v[0], &[0, 3, 1])),
    );
    cases
}

fn attention_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77e);
    let r = &mut rng;
    let mut cases = Vec::new();
    for cfg in [
        AttentionConfig::of_kind(AttentionKind::Se),
        AttentionConfig::of_kind(AttentionKind::Eca),
        AttentionConfig::ras(2, BnMode::NonShared),
        AttentionConfig::ras(3, BnMode::Shared),
        AttentionConfig {
            kind: AttentionKind::SeShared,
            depth: 2,
            ..AttentionConfig::default()
        },
    ] {
        let c = 16;
        let mut store = ParamStore::<f64>::new();
        let mut att = make_attention(&cfg, c, &mut store, "att", r).expect("valid attention config");
        let mut inputs = vec![randn(&[4, c], r)];
        inputs.extend(store.iter().map(|p| p.value.map(|v| v + 0.1)));
        let w = probe(&[4, c], r);
        let op = match cfg.kind {
            AttentionKind::Se => "se_forward",
            AttentionKind::Eca => "eca_forward",
            AttentionKind::SeShared => "se_shared_forward",
            _ => "ras_forward",
        };
        cases.push(Case {
            module: "attention",
            op,
            inputs,
            loss: Box::new(move |v| {
                let b = Bindings::from_vars(&store, v[1..].to_vec())?;
                ops::weighted_sum(&att.forward(&b, &v[0], Mode::Train)?, &w)
            }),
        });
    }
    cases
}

/// A pre-activation bottleneck block with RAS (k=2, non-shared BN) checked
/// against its input and every parameter, in train mode.
fn ras_block_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let mut store = ParamStore::<f64>::new();
    let spec = BlockSpec::new(8, 2, 1, AttentionConfig::ras(2, BnMode::NonShared));
    let mut block = Block::new(&mut store, "block", spec, &mut rng).expect("valid block");
    let mut inputs = vec![randn(&[2, 8, 4, 4], &mut rng)];
    for p in store.iter() {
        // Move affine parameters off their 1/0 initialization.
        inputs.push(p.value.map(|v| v + 0.1).clone());
    }
    let w = probe(&[2, 8, 4, 4], &mut rng);
    Case {
        module: "backbone",
        op: "ras_block",
        inputs,
        loss: Box::new(move |v| {
            let b = Bindings::from_vars(&store, v[1..].to_vec())?;
            ops::weighted_sum(&block.forward(&b, &v[0], Mode::Train)?, &w)
        }),
    }
}

/// Finite-difference checks of every primitive, the attention modules and a
/// full RAS block, once per seed. One outcome per op name with the worst
/// error across cases and seeds.
pub fn gradient_suite(seeds: impl IntoIterator<Item = u64>) -> Vec<CheckOutcome> {
    let mut worst: Vec<(&'static str, &'static str, f64, Option<String>, usize)> = Vec::new();
    let mut n_seeds = 0;
    for seed in seeds {
        n_seeds += 1;
        let mut cases = primitive_cases(seed);
        cases.extend(attention_cases(seed));
        cases.push(ras_block_case(seed));
        for mut case in cases {
            let res = gradcheck::check(&case.inputs, &mut case.loss);
            let slot = match worst.iter().position(|w| w.0 == case.module && w.1 == case.op) {
                Some(i) => i,
                None => {
                    worst.push((case.module, case.op, 0.0, None, 0));
                    worst.len() - 1
                }
            };
            let entry = &mut worst[slot];
            entry.4 += 1;
            match res {
                Ok(r) => entry.2 = entry.2.max(r.max_rel_error),
                Err(e) => entry.3 = Some(format!("seed {seed}: {e}")),
            }
        }
    }
    worst
        .into_iter()
        .map(|(module, op, err, failure, runs)| match failure {
            Some(msg) => CheckOutcome::new(module, op, false, msg),
            None => CheckOutcome::new(
                module,
                op,
                err < GRAD_TOLERANCE,
                format!("max rel err {err:.2e} over {runs} checks, {n_seeds} seeds"),
            ),
        })
        .collect()
}

fn rel_close(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Shared-parameter gradients against the summed per-step gradients of an
/// unrolled copy with tied initial values.
pub fn weight_sharing_checks(depths: &[usize]) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for &k in depths {
        out.push(CheckOutcome::from_result("attention", format!("ras_weight_sharing(k={k})"), ras_sharing(k)));
        out.push(CheckOutcome::from_result(
            "attention",
            format!("se_shared_weight_sharing(k={k})"),
            se_sharing(k),
        ));
    }
    out
}

const SHARING_TOLERANCE: f64 = 1e-6;

fn ras_sharing(k: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
    let c = 5;
    let x = Var::constant(randn(&[4, c], &mut rng));
    let gamma0 = randn(&[c], &mut rng).map(|v| v + 1.0);
    let beta0 = randn(&[c], &mut rng);
    let link_affine: Vec<(Tensor<f64>, Tensor<f64>)> = (1..k)
        .map(|_| (randn(&[c], &mut rng).map(|v| v + 1.0), randn(&[c], &mut rng)))
        .collect();
    let w = randn(&[4, c], &mut rng);

    let links = |states: &mut Vec<BatchNormState<f64>>, i: usize, g: &Var<f64>| {
        let (lg, lb) = &link_affine[i - 1];
        ops::batch_norm(
            g,
            &Var::constant(lg.clone()),
            &Var::constant(lb.clone()),
            &mut states[i - 1],
            Mode::Train,
        )
    };

    let gamma = Var::leaf(gamma0.clone());
    let beta = Var::leaf(beta0.clone());
    let mut states = vec![BatchNormState::new(c); k - 1];
    let y = ras_forward(&x, &gamma, &beta, k, |i, g| links(&mut states, i, g))?;
    let grads = backward(&ops::weighted_sum(&y, &w)?)?;

    let gammas: Vec<_> = (0..k).map(|_| Var::leaf(gamma0.clone())).collect();
    let betas: Vec<_> = (0..k).map(|_| Var::leaf(beta0.clone())).collect();
    let mut states = vec![BatchNormState::new(c); k - 1];
    let y_unrolled = unroll(
        &x,
        k,
        |i, g| links(&mut states, i, g),
        |i, g| ops::scale_shift(g, &gammas[i - 1], &betas[i - 1]),
    )?;
    let unrolled = backward(&ops::weighted_sum(&y_unrolled, &w)?)?;

    let summed = |vars: &[Var<f64>]| {
        let mut acc = Tensor::zeros([c]);
        for v in vars {
            acc.add_assign(unrolled.get(v).expect("every step contributes"));
        }
        acc
    };
    let eg = rel_close(grads.get(&gamma).expect("gamma gradient"), &summed(&gammas));
    let eb = rel_close(grads.get(&beta).expect("beta gradient"), &summed(&betas));
    let err = eg.max(eb).max(rel_close(y.value(), y_unrolled.value()));
    Ok((err <= SHARING_TOLERANCE, format!("max rel diff {err:.2e}")))
}

fn se_sharing(k: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + k as u64);
    let (c, h) = (8, 2);
    let x = Var::constant(randn(&[3, c], &mut rng));
    let r0 = randn(&[h, c], &mut rng);
    let e0 = randn(&[c, h], &mut rng);
    let w = randn(&[3, c], &mut rng);

    let (reduce, expand) = (Var::leaf(r0.clone()), Var::leaf(e0.clone()));
    let y = se_shared_forward(&x, &reduce, &expand, k)?;
    let grads = backward(&ops::weighted_sum(&y, &w)?)?;

    let pairs: Vec<_> = (0..k).map(|_| (Var::leaf(r0.clone()), Var::leaf(e0.clone()))).collect();
    let y_unrolled = se_deep_forward(&x, &pairs)?;
    let unrolled = backward(&ops::weighted_sum(&y_unrolled, &w)?)?;

    let mut sum_r = Tensor::zeros([h, c]);
    let mut sum_e = Tensor::zeros([c, h]);
    for (r, e) in &pairs {
        sum_r.add_assign(unrolled.get(r).expect("reduce gradient"));
        sum_e.add_assign(unrolled.get(e).expect("expand gradient"));
    }
    let err = rel_close(grads.get(&reduce).expect("reduce gradient"), &sum_r)
        .max(rel_close(grads.get(&expand).expect("expand gradient"), &sum_e));
    Ok((err <= SHARING_TOLERANCE, format!("max rel diff {err:.2e}")))
}

fn bit_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn identity_outcome(op: &str, r: Result<bool>) -> CheckOutcome {
    CheckOutcome::from_result(
        "attention",
        op.to_string(),
        r.map(|ok| (ok, if ok { "bit-exact".to_string() } else { "outputs differ".to_string() })),
    )
}

/// Bit-exact identities between attention variants at depth one and of the
/// attention-free block.
pub fn degeneracy_checks() -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 32;
    let desc = Var::constant(Tensor::<f32>::randn([4, c], 1.0, &mut rng));
    let gamma = Var::constant(Tensor::<f32>::randn([c], 1.0, &mut rng));
    let beta = Var::constant(Tensor::<f32>::randn([c], 1.0, &mut rng));
    let reduce = Var::constant(Tensor::<f32>::randn([2, c], 0.3, &mut rng));
    let expand = Var::constant(Tensor::<f32>::randn([c, 2], 0.3, &mut rng));

    let ras = (|| {
        let via_ras = ras_forward(&desc, &gamma, &beta, 1, |_, g| Ok(g.clone()))?;
        let direct = ops::activation(&ops::scale_shift(&desc, &gamma, &beta)?, Activation::Sigmoid)?;
        Ok(bit_equal(via_ras.value(), direct.value()))
    })();
    let se = (|| {
        let base = se_forward(&desc, &reduce, &expand)?;
        let deep = se_deep_forward(&desc, &[(reduce.clone(), expand.clone())])?;
        let shared = se_shared_forward(&desc, &reduce, &expand, 1)?;
        Ok(bit_equal(base.value(), deep.value()) && bit_equal(base.value(), shared.value()))
    })();
    let mut out = vec![
        identity_outcome("ras_forward(k=1) == sigmoid(scale_shift)", ras),
        identity_outcome("se_deep(k=1) == se_shared(k=1) == se_forward", se),
    ];
    out.push(CheckOutcome::from_result(
        "backbone",
        "none_block == plain_residual",
        plain_block_identity().map(|ok| (ok, if ok { "bit-exact" } else { "outputs differ" }.to_string())),
    ));
    out.push(CheckOutcome::from_result(
        "backbone",
        "zero_residual_block == identity",
        zero_residual_identity().map(|ok| (ok, if ok { "bit-exact" } else { "outputs differ" }.to_string())),
    ));
    out
}

/// With the last conv zeroed the residual branch is exactly zero and an
/// identity-shortcut block passes its input through, with or without attention.
fn zero_residual_identity() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    for cfg in [
        AttentionConfig::none(),
        AttentionConfig::of_kind(AttentionKind::Se),
        AttentionConfig::of_kind(AttentionKind::Eca),
        AttentionConfig::ras(3, BnMode::NonShared),
    ] {
        let mut store = ParamStore::<f32>::new();
        let mut block = Block::new(&mut store, "b", BlockSpec::new(16, 4, 1, cfg), &mut rng)?;
        let id = store.find("b.conv3.weight").expect("conv3 weight");
        store.get_mut(id).value.data_mut().fill(0.0);
        let x = Var::constant(Tensor::randn([2, 16, 5, 5], 1.0, &mut rng));
        let b = store.bind(false);
        for mode in [Mode::Eval, Mode::Train] {
            ok &= bit_equal(block.forward(&b, &x, mode)?.value(), x.value());
        }
    }
    Ok(ok)
}

fn plain_block_identity() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    for (cin, stride) in [(16, 1), (8, 2)] {
        let mut store = ParamStore::<f32>::new();
        let spec = BlockSpec::new(cin, 4, stride, AttentionConfig::none());
        let mut block = Block::new(&mut store, "b", spec, &mut rng)?;
        let x = Var::constant(Tensor::randn([2, cin, 6, 6], 1.0, &mut rng));
        let b = store.bind(false);
        for mode in [Mode::Eval, Mode::Train] {
            let y = block.forward(&b, &x, mode)?;
            let mut reference = block.clone();
            let f = reference.residual(&b, &x, mode)?;
            let shortcut = match &reference.shortcut {
                Some(p) => p.forward(&b, &x)?,
                None => x.clone(),
            };
            let plain = ops::add(&shortcut, &f)?;
            ok &= bit_equal(y.value(), plain.value());
        }
    }
    Ok(ok)
}

fn micro(attention: AttentionConfig) -> ModelSpec {
    ModelSpec {
        blocks_per_stage: 2,
        stage_widths: [4, 8, 16],
        num_classes: 5,
        attention,
        input_resolution: (8, 8),
    }
}

/// Built parameter counts against closed forms on micro-models.
pub fn param_law_checks() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let base: Model = match build_model(&micro(AttentionConfig::none()), 0) {
        Ok(m) => m,
        Err(e) => return vec![CheckOutcome::new("backbone", "build_model", false, e.to_string())],
    };
    let base_count = count_params(&base);
    out.push(CheckOutcome::new(
        "backbone",
        "depth_law",
        base.weighted_layers() == micro(AttentionConfig::none()).depth(),
        format!("{} weighted layers for n=2", base.weighted_layers()),
    ));
    out.push(CheckOutcome::new(
        "analysis",
        "count_params(none)",
        base_count.attention == 0,
        format!("attention params {}", base_count.attention),
    ));

    let configs = [
        AttentionConfig::of_kind(AttentionKind::Se),
        AttentionConfig::of_kind(AttentionKind::Eca),
        AttentionConfig {
            kind: AttentionKind::SeDeep,
            depth: 3,
            ..AttentionConfig::default()
        },
        AttentionConfig {
            kind: AttentionKind::SeShared,
            depth: 3,
            ..AttentionConfig::default()
        },
        AttentionConfig::ras(1, BnMode::NonShared),
        AttentionConfig::ras(2, BnMode::NonShared),
        AttentionConfig::ras(3, BnMode::NonShared),
        AttentionConfig::ras(3, BnMode::Shared),
        AttentionConfig::ras(3, BnMode::NonShared).with_connection(Connection::Tanh),
    ];
    for cfg in configs {
        let spec = micro(cfg.clone());
        let r = build_model::<f32>(&spec, 0).map(|m| {
            let counts = count_params(&m);
            let closed = closed_form_attention_params(&spec);
            let ok = counts.attention == closed && counts.backbone == base_count.backbone;
            (ok, format!("attention {} vs closed form {closed}", counts.attention))
        });
        out.push(CheckOutcome::from_result("analysis", format!("count_params({})", cfg.label()), r));
    }

    // Default RAS adds 4C per block: one gamma/beta pair and one norm.
    let spec = micro(AttentionConfig::ras(2, BnMode::NonShared));
    let expected: u64 = spec.blocks().iter().map(|b| 4 * b.out_channels as u64).sum();
    let r = build_model::<f32>(&spec, 0).map(|m| {
        let delta = count_params(&m).total - base_count.total;
        (delta == expected, format!("delta {delta}, expected {expected}"))
    });
    out.push(CheckOutcome::from_result("backbone", "ras_overhead_law", r));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let outcomes = gradient_suite(0..1);
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.line()).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn identities_and_laws_pass() {
        for o in degeneracy_checks().iter().chain(&param_law_checks()).chain(&weight_sharing_checks(&[2, 3])) {
            assert!(o.passed, "{}", o.line());
        }
    }

    #[test]
    fn corrupted_conv_backward_is_caught() {
        let _guard = crate::ops::fault_injection::CorruptConvBackward::new();
        let outcomes = gradient_suite(0..1);
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
        assert!(failed.iter().any(|o| o.op == "conv2d"));
        assert!(failed.iter().all(|o| o.op == "conv2d" || o.op == "ras_block"), "{failed:?}");
    }
}
