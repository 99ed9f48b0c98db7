use std::cell::Cell;

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static CORRUPT_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, conv2d weight gradients on this thread are deliberately
/// wrong (scaled by 1.5).
pub struct CorruptConvBackward {
    previous: bool,
}

impl CorruptConvBackward {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let previous = CORRUPT_BACKWARD.with(|c| c.replace(true));
        Self { previous }
    }
}

impl Drop for CorruptConvBackward {
    fn drop(&mut self) {
        CORRUPT_BACKWARD.with(|c| c.set(self.previous));
    }
}

/// Spatial output size of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column offset `j`.
    fn col_range(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).div_ceil(self.stride);
        let limit = (self.w + self.pad).saturating_sub(j); // ix = ox*s + j - pad < w
        let hi = limit.div_ceil(self.stride).min(self.wo);
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(g: &Geometry, image: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.col_range(j);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + j - g.pad;
                        out[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = line[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.col_range(j);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        let ix = ox * g.stride + j - g.pad;
                        line[ix] = line[ix] + vals[ox];
                    }
                }
            }
        }
    }
}

struct Conv2dOp<T: Scalar> {
    input: Var<T>,
    weight: Var<T>,
    geom: Geometry,
}

impl<T: Scalar> Backward<T> for Conv2dOp<T> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input, &self.weight]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let g = self.geom;
        let n = self.input.shape()[0];
        let cout = self.weight.shape()[0];
        let (k, plane) = (g.patch(), g.out_plane());
        let in_plane = g.cin * g.h * g.w;
        let x = self.input.value().data();
        let w = self.weight.value().data();
        let dy = grad.data();

        let mut dw = needs[1].then(|| vec![T::zero(); cout * k]);
        let mut dx = needs[0].then(|| vec![T::zero(); n * in_plane]);
        let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
        let mut dcol = vec![T::zero(); if g.is_pointwise() || dx.is_none() { 0 } else { k * plane }];

        for b in 0..n {
            let dy_b = &dy[b * cout * plane..(b + 1) * cout * plane];
            let x_b = &x[b * in_plane..(b + 1) * in_plane];
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = if g.is_pointwise() {
                    x_b
                } else {
                    im2col(&g, x_b, &mut col);
                    &col
                };
                // dW += dY_b · colᵀ
                T::gemm(
                    cout,
                    plane,
                    k,
                    T::one(),
                    (dy_b, plane as isize, 1),
                    (cols, 1, plane as isize),
                    T::one(),
                    (dw, k as isize, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dx_b = &mut dx[b * in_plane..(b + 1) * in_plane];
                let target: &mut [T] = if g.is_pointwise() { dx_b } else { &mut dcol };
                // dcol = Wᵀ · dY_b
                T::gemm(
                    k,
                    cout,
                    plane,
                    T::one(),
                    (w, 1, k as isize),
                    (dy_b, plane as isize, 1),
                    T::zero(),
                    (target, plane as isize, 1),
                );
                if !g.is_pointwise() {
                    col2im(&g, &dcol, dx_b);
                }
            }
        }

        if CORRUPT_BACKWARD.with(Cell::get) {
            if let Some(dw) = dw.as_mut() {
                dw.iter_mut().for_each(|v| *v = *v * T::from_f64(1.5));
            }
        }

        Ok(vec![
            dx.map(|d| Tensor::from_parts(self.input.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(self.weight.shape().to_vec(), d)),
        ])
    }
}

/// 2-D convolution (cross-correlation) with zero padding.
///
/// `input: [N, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]` with odd kernel
/// sides; output spatial size is `floor((H + 2p - kh) / s) + 1`.
pub fn conv2d<T: Scalar>(input: &Var<T>, weight: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
    let (xs, ws) = (input.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
        ));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin != wcin {
        return Err(Error::dim(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} must have odd sides")));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dim(
            "conv2d",
            format!("{h}x{w} input with padding {padding} is smaller than the {kh}x{kw} kernel"),
        ));
    }
    let geom = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho: conv_output_size(h, kh, stride, padding),
        wo: conv_output_size(w, kw, stride, padding),
    };
    let (k, plane) = (geom.patch(), geom.out_plane());
    let in_plane = cin * h * w;
    let x = input.value().data();
    let wd = weight.value().data();
    let mut out = vec![T::zero(); n * cout * plane];
    let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * plane }];
    for b in 0..n {
        let x_b = &x[b * in_plane..(b + 1) * in_plane];
        let cols: &[T] = if geom.is_pointwise() {
            x_b
        } else {
            im2col(&geom, x_b, &mut col);
            &col
        };
        T::gemm(
            cout,
            k,
            plane,
            T::one(),
            (wd, k as isize, 1),
            (cols, plane as isize, 1),
            T::zero(),
            (&mut out[b * cout * plane..(b + 1) * cout * plane], plane as isize, 1),
        );
    }
    Var::from_op(
        Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out),
        Box::new(Conv2dOp {
            input: input.clone(),
            weight: weight.clone(),
            geom,
        }),
    )
}

struct ChannelConvOp<T: Scalar> {
    input: Var<T>,
    kernel: Var<T>,
}

impl<T: Scalar> Backward<T> for ChannelConvOp<T> {
    fn name(&self) -> &'static str {
        "channel_conv1d"
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        vec![&self.input, &self.kernel]
    }

    fn backward(&self, _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.input.shape()[1];
        let kernel = self.kernel.value().data();
        let half = kernel.len() / 2;
        let mut dx = vec![T::zero(); self.input.value().numel()];
        let mut dk = vec![T::zero(); kernel.len()];
        for ((g_row, x_row), dx_row) in grad
            .data()
            .chunks_exact(c)
            .zip(self.input.value().data().chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            for (ch, &g) in g_row.iter().enumerate() {
                for (j, &kv) in kernel.iter().enumerate() {
                    let src = ch as isize + j as isize - half as isize;
                    if src < 0 || src >= c as isize {
                        continue;
                    }
                    let src = src as usize;
                    dx_row[src] = dx_row[src] + kv * g;
                    dk[j] = dk[j] + x_row[src] * g;
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_parts(self.input.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![kernel.len()], dk)),
        ])
    }
}

/// 1-D convolution along the channel axis of `x: [N, C]` with a zero-padded,
/// odd-length kernel; output keeps the input shape.
pub fn channel_conv1d<T: Scalar>(x: &Var<T>, kernel: &Var<T>) -> Result<Var<T>> {
    if x.shape().len() != 2 || kernel.shape().len() != 1 {
        return Err(Error::dim(
            "channel_conv1d",
            format!("input {:?}, kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let len = kernel.shape()[0];
    if len % 2 == 0 {
        return Err(Error::config(format!("channel kernel length {len} must be odd")));
    }
    let c = x.shape()[1];
    let half = len / 2;
    let kv = kernel.value().data();
    let mut out = vec![T::zero(); x.value().numel()];
    for (row, out_row) in x.value().data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        for (ch, o) in out_row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &w) in kv.iter().enumerate() {
                let src = ch as isize + j as isize - half as isize;
                if (0..c as isize).contains(&src) {
                    acc = acc + w * row[src as usize];
                }
            }
            *o = acc;
        }
    }
    Var::from_op(
        Tensor::from_parts(x.shape().to_vec(), out),
        Box::new(ChannelConvOp {
            input: x.clone(),
            kernel: kernel.clone(),
        }),
    )
}
