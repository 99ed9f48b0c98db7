use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization layers use batch statistics (and update their
/// running averages) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and hyperparameters of one batch-normalization layer.
/// The affine `gamma`/`beta` are trainable and passed to [`batch_norm`]
/// separately.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

struct BatchNormOp<T: Scalar> {
    input: Var<T>,
    gamma: Var<T>,
    beta: Var<T>,
    normalized: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNormOp<T> {
    fn plane(&self) -> usize {
        self.input.shape()[2..].iter().product()
    }
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input, &self.gamma, &self.beta]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.gamma.shape()[0];
        let count = T::from_f64((grad.numel() / c) as f64);
        let g = grad.data();
        let gamma = self.gamma.value().data();

        let plane = self.plane();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, (gp, xp)) in g.chunks_exact(plane).zip(self.normalized.chunks_exact(plane)).enumerate() {
            let ch = i % c;
            for (&dy, &xh) in gp.iter().zip(xp) {
                dgamma[ch] = dgamma[ch] + dy * xh;
                dbeta[ch] = dbeta[ch] + dy;
            }
        }

        let dx = needs[0].then(|| {
            let mut data = Vec::with_capacity(g.len());
            for (i, (gp, xp)) in g.chunks_exact(plane).zip(self.normalized.chunks_exact(plane)).enumerate() {
                let ch = i % c;
                let scale = gamma[ch] * self.inv_std[ch];
                if self.batch_stats {
                    // dx = γ/σ · (dy − mean(dy) − x̂ · mean(dy · x̂))
                    let (mg, mgx) = (dbeta[ch] / count, dgamma[ch] / count);
                    data.extend(gp.iter().zip(xp).map(|(&dy, &xh)| scale * (dy - mg - xh * mgx)));
                } else {
                    data.extend(gp.iter().map(|&dy| scale * dy));
                }
            }
            Tensor::from_parts(grad.shape().to_vec(), data)
        });

        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

/// Applies `f(channel, element)` to a buffer laid out as `[N, C, plane]`.
#[inline]
fn per_channel<T: Scalar>(data: &mut [T], c: usize, plane: usize, mut f: impl FnMut(usize, &mut T)) {
    if plane == 1 {
        for row in data.chunks_exact_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                f(ch, v);
            }
        }
    } else {
        for (i, p) in data.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            p.iter_mut().for_each(|v| f(ch, v));
        }
    }
}

/// Batch normalization over the channel axis (axis 1) of `[N, C]` or
/// `[N, C, H, W]` inputs.
///
/// In [`Mode::Train`] the output is normalized with the biased batch variance
/// and the running statistics are updated with the unbiased one. In
/// [`Mode::Eval`] only the running statistics are used.
pub fn batch_norm<T: Scalar>(
    input: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Var<T>> {
    let s = input.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(Error::dim(
            "batch_norm",
            format!("expected [N, C] or [N, C, H, W], got {s:?}"),
        ));
    }
    let (n, c) = (s[0], s[1]);
    if gamma.shape() != [c] || beta.shape() != [c] || state.channels() != c {
        return Err(Error::dim(
            "batch_norm",
            format!(
                "{c} channels but gamma {:?}, beta {:?}, state for {}",
                gamma.shape(),
                beta.shape(),
                state.channels()
            ),
        ));
    }
    let plane: usize = s[2..].iter().product();
    let x = input.value().data();
    let eps = T::from_f64(state.epsilon);

    let (mean, inv_std) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::DegenerateBatch {
                    op: "batch_norm",
                    batch: n,
                });
            }
            let count = (n * plane) as f64;
            let mut sum = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for (chunk_idx, chunk) in x.chunks_exact(plane).enumerate() {
                let ch = chunk_idx % c;
                for &v in chunk {
                    sum[ch] += v.as_f64();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
            for (chunk_idx, chunk) in x.chunks_exact(plane).enumerate() {
                let ch = chunk_idx % c;
                for &v in chunk {
                    let d = v.as_f64() - mean[ch];
                    sq[ch] += d * d;
                }
            }
            let momentum = state.momentum;
            let mut inv_std = Vec::with_capacity(c);
            for ch in 0..c {
                let var = sq[ch] / count;
                let unbiased = sq[ch] / (count - 1.0);
                let rm = state.running_mean[ch].as_f64();
                let rv = state.running_var[ch].as_f64();
                state.running_mean[ch] = T::from_f64((1.0 - momentum) * rm + momentum * mean[ch]);
                state.running_var[ch] = T::from_f64((1.0 - momentum) * rv + momentum * unbiased);
                inv_std.push(T::one() / (T::from_f64(var) + eps).sqrt());
            }
            (mean.into_iter().map(T::from_f64).collect::<Vec<_>>(), inv_std)
        }
        Mode::Eval => (
            state.running_mean.clone(),
            state
                .running_var
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect(),
        ),
    };

    let gv = gamma.value().data();
    let bv = beta.value().data();
    let tracked = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let mut normalized = Vec::new();
    if tracked {
        normalized = x.to_vec();
        per_channel(&mut normalized, c, plane, |ch, v| *v = (*v - mean[ch]) * inv_std[ch]);
    }
    // Folded affine: y = x·(γ/σ) + (β − μ·γ/σ).
    let scale: Vec<T> = (0..c).map(|ch| gv[ch] * inv_std[ch]).collect();
    let shift: Vec<T> = (0..c).map(|ch| bv[ch] - mean[ch] * scale[ch]).collect();
    let mut out = x.to_vec();
    per_channel(&mut out, c, plane, |ch, v| *v = *v * scale[ch] + shift[ch]);

    Var::from_op(
        Tensor::from_parts(s.to_vec(), out),
        Box::new(BatchNormOp {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            normalized,
            inv_std,
            batch_stats: mode == Mode::Train,
        }),
    )
}
