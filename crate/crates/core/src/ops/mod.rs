//! Differentiable primitives.
//!
//! Each op validates shapes, computes its forward value eagerly and, when any
//! input is tracked, records a backward rule on the returned [`Var`].

mod conv;
mod norm;

use std::fmt;
use std::str::FromStr;

pub use conv::{channel_conv1d, conv2d, conv_output_size};
pub use norm::{batch_norm, BatchNormState, Mode, BN_EPSILON, BN_MOMENTUM};

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[doc(hidden)]
pub mod fault_injection {
    //! Test fixture for checking that gradient verification catches a broken
    //! backward rule.
    pub use super::conv::CorruptConvBackward;
}

fn check_rank<T: Scalar>(op: &'static str, v: &Var<T>, rank: usize) -> Result<()> {
    if v.shape().len() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", v.shape()),
        ));
    }
    Ok(())
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the output value.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown activation '{s}'")))
    }
}

/// Logistic function, kept strictly inside (0, 1) even where the exact
/// value rounds to 0 or 1 in the working precision.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::from_f64(2.0);
    s.max(T::min_positive_value()).min(upper)
}

struct ActivationOp<T: Scalar> {
    input: Var<T>,
    kind: Activation,
}

impl<T: Scalar> Backward<T> for ActivationOp<T> {
    fn name(&self) -> &'static str {
        "activation"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input]
    }

    fn backward(&self, out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let data = out
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| g * self.kind.derivative_from_output(y))
            .collect();
        Ok(vec![Some(Tensor::from_parts(out.shape().to_vec(), data))])
    }
}

pub fn activation<T: Scalar>(x: &Var<T>, kind: Activation) -> Result<Var<T>> {
    let value = x.value().map(|v| kind.apply(v));
    Var::from_op(
        value,
        Box::new(ActivationOp {
            input: x.clone(),
            kind,
        }),
    )
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    activation(x, Activation::Relu)
}

struct AddOp<T: Scalar> {
    a: Var<T>,
    b: Var<T>,
}

impl<T: Scalar> Backward<T> for AddOp<T> {
    fn name(&self) -> &'static str {
        "add"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ])
    }
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same_shape("add", a, b)?;
    let data = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(&x, &y)| x + y)
        .collect();
    Var::from_op(
        Tensor::from_parts(a.shape().to_vec(), data),
        Box::new(AddOp {
            a: a.clone(),
            b: b.clone(),
        }),
    )
}

struct MulOp<T: Scalar> {
    a: Var<T>,
    b: Var<T>,
}

impl<T: Scalar> Backward<T> for MulOp<T> {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.a, &self.b]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let times = |other: &Var<T>| {
            let data = grad
                .data()
                .iter()
                .zip(other.value().data())
                .map(|(&g, &o)| g * o)
                .collect();
            Tensor::from_parts(grad.shape().to_vec(), data)
        };
        Ok(vec![
            needs[0].then(|| times(&self.b)),
            needs[1].then(|| times(&self.a)),
        ])
    }
}

/// Elementwise product of equally shaped values.
pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same_shape("mul", a, b)?;
    let data = a
        .value()
        .data()
        .iter()
        .zip(b.value().data())
        .map(|(&x, &y)| x * y)
        .collect();
    Var::from_op(
        Tensor::from_parts(a.shape().to_vec(), data),
        Box::new(MulOp {
            a: a.clone(),
            b: b.clone(),
        }),
    )
}

struct SumOp<T: Scalar> {
    input: Var<T>,
}

impl<T: Scalar> Backward<T> for SumOp<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(self.input.shape().to_vec(), grad.item()))])
    }
}

pub fn sum<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    Var::from_op(
        Tensor::scalar(x.value().sum()),
        Box::new(SumOp { input: x.clone() }),
    )
}

struct WeightedSumOp<T: Scalar> {
    input: Var<T>,
    weights: Tensor<T>,
}

impl<T: Scalar> Backward<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item();
        Ok(vec![Some(self.weights.map(|w| w * g))])
    }
}

/// `sum(x * weights)` against a constant weight tensor; a convenient
/// scalar probe for gradient checks.
pub fn weighted_sum<T: Scalar>(x: &Var<T>, weights: &Tensor<T>) -> Result<Var<T>> {
    if x.shape() != weights.shape() {
        return Err(Error::dim(
            "weighted_sum",
            format!("{:?} vs {:?}", x.shape(), weights.shape()),
        ));
    }
    let total = x
        .value()
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| a * b)
        .sum();
    Var::from_op(
        Tensor::scalar(total),
        Box::new(WeightedSumOp {
            input: x.clone(),
            weights: weights.clone(),
        }),
    )
}

struct GapOp<T: Scalar> {
    input: Var<T>,
}

impl<T: Scalar> Backward<T> for GapOp<T> {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = self.input.shape();
        let plane = shape[2] * shape[3];
        let scale = T::one() / T::from_f64(plane as f64);
        let mut data = Vec::with_capacity(self.input.value().numel());
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g * scale, plane));
        }
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), data))])
    }
}

/// Sum with eight independent accumulators, which lets the compiler
/// vectorize the loop.
pub(crate) fn plane_sum<T: Scalar>(p: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = p.chunks_exact(8);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = *a + v;
        }
    }
    let mut total = tail.iter().fold(T::zero(), |a, &v| a + v);
    for a in acc {
        total = total + a;
    }
    total
}

/// Mean over the spatial plane: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    check_rank("global_avg_pool", x, 4)?;
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let denom = T::from_f64(plane as f64);
    let data = x
        .value()
        .data()
        .chunks_exact(plane)
        .map(|p| plane_sum(p) / denom)
        .collect();
    Var::from_op(
        Tensor::from_parts(vec![n, c], data),
        Box::new(GapOp { input: x.clone() }),
    )
}

struct LinearOp<T: Scalar> {
    input: Var<T>,
    weight: Var<T>,
    bias: Option<Var<T>>,
}

impl<T: Scalar> Backward<T> for LinearOp<T> {
    fn name(&self) -> &'static str {
        "fully_connected"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        let mut v = vec![&self.input, &self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, din) = (self.input.shape()[0], self.input.shape()[1]);
        let dout = self.weight.shape()[0];
        let g = grad.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * din];
            T::gemm(
                n,
                dout,
                din,
                T::one(),
                (g, dout as isize, 1),
                (self.weight.value().data(), din as isize, 1),
                T::zero(),
                (&mut dx, din as isize, 1),
            );
            Tensor::from_parts(vec![n, din], dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); dout * din];
            T::gemm(
                dout,
                n,
                din,
                T::one(),
                (g, 1, dout as isize),
                (self.input.value().data(), din as isize, 1),
                T::zero(),
                (&mut dw, din as isize, 1),
            );
            Tensor::from_parts(vec![dout, din], dw)
        });
        let mut out = vec![dx, dw];
        if self.bias.is_some() {
            out.push(needs[2].then(|| {
                let mut db = vec![T::zero(); dout];
                for row in g.chunks_exact(dout) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                Tensor::from_parts(vec![dout], db)
            }));
        }
        Ok(out)
    }
}

/// Affine map `x · Wᵀ + b` with `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
pub fn linear<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
    check_rank("fully_connected", x, 2)?;
    check_rank("fully_connected", weight, 2)?;
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, wdin) = (weight.shape()[0], weight.shape()[1]);
    if din != wdin {
        return Err(Error::dim(
            "fully_connected",
            format!("input width {din} does not match weight {:?}", weight.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::dim(
                "fully_connected",
                format!("bias shape {:?}, expected [{dout}]", b.shape()),
            ));
        }
    }
    let mut out = vec![T::zero(); n * dout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b.value().data());
        }
    }
    T::gemm(
        n,
        din,
        dout,
        T::one(),
        (x.value().data(), din as isize, 1),
        (weight.value().data(), 1, din as isize),
        if bias.is_some() { T::one() } else { T::zero() },
        (&mut out, dout as isize, 1),
    );
    Var::from_op(
        Tensor::from_parts(vec![n, dout], out),
        Box::new(LinearOp {
            input: x.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
        }),
    )
}

struct ScaleShiftOp<T: Scalar> {
    input: Var<T>,
    gamma: Var<T>,
    beta: Var<T>,
}

impl<T: Scalar> Backward<T> for ScaleShiftOp<T> {
    fn name(&self) -> &'static str {
        "scale_shift"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input, &self.gamma, &self.beta]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.gamma.shape()[0];
        let gamma = self.gamma.value().data();
        let g = grad.data();
        let dx = needs[0].then(|| {
            let data = g
                .chunks_exact(c)
                .flat_map(|row| row.iter().zip(gamma).map(|(&v, &w)| v * w))
                .collect();
            Tensor::from_parts(grad.shape().to_vec(), data)
        });
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (row_g, row_x) in g.chunks_exact(c).zip(self.input.value().data().chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] = dgamma[ch] + row_g[ch] * row_x[ch];
                dbeta[ch] = dbeta[ch] + row_g[ch];
            }
        }
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

/// Per-channel `x[n, c] * gamma[c] + beta[c]`.
pub fn scale_shift<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
    check_rank("scale_shift", x, 2)?;
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "scale_shift",
            format!(
                "{c} channels, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let (gv, bv) = (gamma.value().data(), beta.value().data());
    let mut out = x.value().clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ((v, &w), &b) in row.iter_mut().zip(gv).zip(bv) {
            *v = *v * w + b;
        }
    }
    Var::from_op(
        out,
        Box::new(ScaleShiftOp {
            input: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
        }),
    )
}

struct ChannelGateOp<T: Scalar> {
    input: Var<T>,
    gate: Var<T>,
}

impl<T: Scalar> Backward<T> for ChannelGateOp<T> {
    fn name(&self) -> &'static str {
        "channel_gate"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input, &self.gate]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.input.shape();
        let plane = s[2] * s[3];
        let gate = self.gate.value().data();
        let dx = needs[0].then(|| {
            let mut dx = grad.clone();
            for (p, &v) in dx.data_mut().chunks_exact_mut(plane).zip(gate) {
                p.iter_mut().for_each(|d| *d = *d * v);
            }
            dx
        });
        let dv = needs[1].then(|| {
            let data = grad
                .data()
                .chunks_exact(plane)
                .zip(self.input.value().data().chunks_exact(plane))
                .map(|(g, x)| g.iter().zip(x).map(|(&a, &b)| a * b).sum())
                .collect();
            Tensor::from_parts(vec![s[0], s[1]], data)
        });
        Ok(vec![dx, dv])
    }
}

/// Rescales each `[H, W]` plane of `x: [N, C, H, W]` by `gate[n, c]`.
pub fn channel_gate<T: Scalar>(x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
    check_rank("channel_gate", x, 4)?;
    let s = x.shape();
    if gate.shape() != [s[0], s[1]] {
        return Err(Error::dim(
            "channel_gate",
            format!("gate {:?} for input {s:?}", gate.shape()),
        ));
    }
    let plane = s[2] * s[3];
    let mut out = x.value().clone();
    for (p, &v) in out.data_mut().chunks_exact_mut(plane).zip(gate.value().data()) {
        p.iter_mut().for_each(|d| *d = *d * v);
    }
    Var::from_op(
        out,
        Box::new(ChannelGateOp {
            input: x.clone(),
            gate: gate.clone(),
        }),
    )
}

struct CrossEntropyOp<T: Scalar> {
    logits: Var<T>,
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.logits]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let k = self.logits.shape()[1];
        let scale = grad.item() / T::from_f64(self.labels.len() as f64);
        let mut d = self.probs.clone();
        for (row, &label) in d.chunks_exact_mut(k).zip(&self.labels) {
            row[label] = row[label] - T::one();
            row.iter_mut().for_each(|v| *v = *v * scale);
        }
        Ok(vec![Some(Tensor::from_parts(self.logits.shape().to_vec(), d))])
    }
}

/// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    check_rank("cross_entropy", logits, 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::dim(
            "cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::dim(
            "cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &label) in logits.value().data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_denom = denom.ln();
        total = total + log_denom - (row[label] - max);
        probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
    }
    Var::from_op(
        Tensor::scalar(total / T::from_f64(n as f64)),
        Box::new(CrossEntropyOp {
            logits: logits.clone(),
            probs,
            labels: labels.to_vec(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::backward;

    fn leaf(shape: &[usize], data: Vec<f64>) -> Var<f64> {
        Var::leaf(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = leaf(&[1], vec![0.0]);
        let y = activation(&x, Activation::Sigmoid).unwrap();
        assert_eq!(y.value().data(), &[0.5]);
    }

    #[test]
    fn sigmoid_stays_open_interval_in_f32() {
        let x = Var::constant(Tensor::<f32>::new([4], vec![-200.0, -40.0, 40.0, 200.0]).unwrap());
        let y = activation(&x, Activation::Sigmoid).unwrap();
        assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn relu_definition() {
        let x = leaf(&[4], vec![-2.0, -0.5, 0.5, 3.0]);
        let y = relu(&x).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn unknown_activation_is_config_error() {
        assert!(matches!("gelu".parse::<Activation>(), Err(Error::Config(_))));
        assert_eq!("tanh".parse::<Activation>().unwrap(), Activation::Tanh);
    }

    #[test]
    fn gap_of_small_plane() {
        let x = leaf(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.value().data(), &[2.5]);
    }

    #[test]
    fn gap_of_constant_plane() {
        let x = Var::constant(Tensor::<f64>::full([2, 3, 5, 7], 1.25));
        let y = global_avg_pool(&x).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn linear_identity_and_mismatch() {
        let x = leaf(&[2, 2], vec![1.0, -2.0, 3.5, 4.0]);
        let w = leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&[2], vec![0.0, 0.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let w_bad = leaf(&[3, 3], vec![0.0; 9]);
        assert!(matches!(linear(&x, &w_bad, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_parameter_count() {
        let w = Tensor::<f32>::zeros([3, 2]);
        let b = Tensor::<f32>::zeros([3]);
        assert_eq!(w.numel() + b.numel(), 9);
    }

    #[test]
    fn scale_shift_degenerate_cases() {
        let x = leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ones = leaf(&[3], vec![1.0; 3]);
        let zeros = leaf(&[3], vec![0.0; 3]);
        let y = scale_shift(&x, &ones, &zeros).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let b = leaf(&[3], vec![7.0, 8.0, 9.0]);
        let y = scale_shift(&x, &zeros, &b).unwrap();
        assert_eq!(y.value().data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);

        let short = leaf(&[2], vec![1.0; 2]);
        assert!(scale_shift(&x, &short, &zeros).is_err());
    }

    #[test]
    fn scale_shift_gamma_gradient_is_channel_sum() {
        let x = leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let gamma = leaf(&[3], vec![0.3, -1.0, 2.0]);
        let beta = leaf(&[3], vec![0.1, 0.2, 0.3]);
        let loss = sum(&scale_shift(&x, &gamma, &beta).unwrap()).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&gamma).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(grads.get(&beta).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_loss_gives_ones() {
        let x = leaf(&[2, 2], vec![0.5, -1.0, 3.0, 2.0]);
        let grads = backward(&sum(&x).unwrap()).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let x = leaf(&[3], vec![1.0, 2.0, 3.0]);
        let loss = sum(&add(&x, &x).unwrap()).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let x = leaf(&[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_graph_records_nothing() {
        let x = Var::constant(Tensor::<f32>::ones([2, 2]));
        let y = relu(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = leaf(&[2, 4], vec![0.0; 8]);
        let loss = cross_entropy(&logits, &[1, 3]).unwrap();
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[1, 4]).is_err());
    }

    #[test]
    fn non_finite_output_is_error() {
        let x = Var::constant(Tensor::<f32>::new([1], vec![f32::NAN]).unwrap());
        assert!(matches!(
            activation(&x, Activation::Identity),
            Err(Error::NonFinite { .. })
        ));
    }
}
