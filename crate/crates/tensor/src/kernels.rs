//! Forward and backward kernels shared by the tape and by gradient-free callers.
//!
//! All image tensors are NCHW.

use crate::{Scalar, Tensor};

/// Row-major matrix view: `rows x cols`, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T: Scalar> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m x n) <- a * b + (accumulate ? out : 0)`.
pub fn matmul_into<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    assert_eq!(out.len(), m * n, "matmul output size mismatch");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a.data, rsa, csa, b.data, rsb, csb, beta, out, n as isize, 1);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        assert!(input + 2 * self.padding >= kernel, "kernel larger than padded input");
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

fn is_pointwise(kh: usize, kw: usize, g: &ConvGeometry) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.padding == 0
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: &ConvGeometry,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: &ConvGeometry,
    x: &mut [T],
) {
    let ohw = oh * ow;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution. `weight` is `(out, in / groups, kh, kw)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (o, cg, kh, kw) = weight.dims4();
    assert!(geom.groups >= 1 && c % geom.groups == 0 && o % geom.groups == 0, "bad group count");
    assert_eq!(cg, c / geom.groups, "conv weight expects {} input channels per group", cg);
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[o], "conv bias shape");
    }
    let oh = geom.output_size(h, kh);
    let ow = geom.output_size(w, kw);
    let og = o / geom.groups;
    let ohw = oh * ow;
    let krow = cg * kh * kw;
    let pointwise = is_pointwise(kh, kw, &geom);
    let mut out = vec![T::zero(); n * o * ohw];
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); krow * ohw] };
    let wd = weight.data();
    for b in 0..n {
        for grp in 0..geom.groups {
            let xin = &x.data()[(b * c + grp * cg) * h * w..(b * c + (grp + 1) * cg) * h * w];
            let colmat = if pointwise {
                Mat::new(xin, krow, ohw)
            } else {
                im2col(xin, cg, h, w, kh, kw, oh, ow, &geom, &mut cols);
                Mat::new(&cols, krow, ohw)
            };
            let wmat = Mat::new(&wd[grp * og * krow..(grp + 1) * og * krow], og, krow);
            let dst = &mut out[(b * o + grp * og) * ohw..(b * o + (grp + 1) * og) * ohw];
            matmul_into(wmat, colmat, dst, false);
        }
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * o + oc) * ohw..(b * o + oc + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (n, c, h, w) = x.dims4();
    let (o, cg, kh, kw) = weight.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let og = o / geom.groups;
    let ohw = oh * ow;
    let krow = cg * kh * kw;
    let pointwise = is_pointwise(kh, kw, &geom);
    let mut dx = if need_input { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = if need_weight { vec![T::zero(); weight.len()] } else { Vec::new() };
    let mut cols = vec![T::zero(); krow * ohw];
    let mut dcols = vec![T::zero(); krow * ohw];
    let wd = weight.data();
    for b in 0..n {
        for grp in 0..geom.groups {
            let dyg = Mat::new(&dy.data()[(b * o + grp * og) * ohw..(b * o + (grp + 1) * og) * ohw], og, ohw);
            let xrange = (b * c + grp * cg) * h * w..(b * c + (grp + 1) * cg) * h * w;
            if need_weight {
                let xin = &x.data()[xrange.clone()];
                let colmat = if pointwise {
                    Mat::new(xin, krow, ohw)
                } else {
                    im2col(xin, cg, h, w, kh, kw, oh, ow, &geom, &mut cols);
                    Mat::new(&cols, krow, ohw)
                };
                matmul_into(dyg, colmat.t(), &mut dw[grp * og * krow..(grp + 1) * og * krow], true);
            }
            if need_input {
                let wmat = Mat::new(&wd[grp * og * krow..(grp + 1) * og * krow], og, krow);
                if pointwise {
                    matmul_into(wmat.t(), dyg, &mut dx[xrange], true);
                } else {
                    matmul_into(wmat.t(), dyg, &mut dcols, false);
                    col2im_add(&dcols, cg, h, w, kh, kw, oh, ow, &geom, &mut dx[xrange]);
                }
            }
        }
    }
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); o];
        for b in 0..n {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += dy.data()[(b * o + oc) * ohw..(b * o + oc + 1) * ohw].iter().copied().sum();
            }
        }
        Tensor::new(&[o], db)
    });
    ConvGrads {
        input: need_input.then(|| Tensor::new(x.shape(), dx)),
        weight: need_weight.then(|| Tensor::new(weight.shape(), dw)),
        bias: db,
    }
}

/// Interpolation taps along one axis (half-pixel centers, edge clamped).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of the two trailing axes.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            let (fy0, fy1) = (T::lit(1.0 - fy), T::lit(fy));
            for &(x0, x1, fx) in &tx {
                let (fx0, fx1) = (T::lit(1.0 - fx), T::lit(fx));
                let top = plane[y0 * w + x0] * fx0 + plane[y0 * w + x1] * fx1;
                let bot = plane[y1 * w + x0] * fx0 + plane[y1 * w + x1] * fx1;
                out.push(top * fy0 + bot * fy1);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, dplane) in dx.chunks_exact_mut(h * w).zip(dy.data().chunks_exact(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy0, fy1) = (T::lit(1.0 - fy), T::lit(fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx0, fx1) = (T::lit(1.0 - fx), T::lit(fx));
                let g = dplane[oy * ow + ox];
                plane[y0 * w + x0] += g * fy0 * fx0;
                plane[y0 * w + x1] += g * fy0 * fx1;
                plane[y1 * w + x0] += g * fy1 * fx0;
                plane[y1 * w + x1] += g * fy1 * fx1;
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

/// Max pooling with implicit `-inf` padding. Forward only.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let geom = ConvGeometry { stride, padding, groups: 1 };
    let oh = geom.output_size(h, kernel);
    let ow = geom.output_size(w, kernel);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            best = best.max(plane[iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
        }
        let m = s / count;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                ss += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

/// `y = scale[c] * x + shift[c]`.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let ch = i % c;
        for v in plane {
            *v = *v * scale[ch] + shift[ch];
        }
    }
    out
}

/// Row-wise softmax over the trailing axis.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let cols = *x.shape().last().expect("softmax on scalar");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Batched matmul over the leading axis of two rank-3 tensors.
pub fn bmm<T: Scalar>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Tensor<T> {
    assert_eq!(a.ndim(), 3);
    assert_eq!(b.ndim(), 3);
    let batch = a.shape()[0];
    assert_eq!(batch, b.shape()[0], "bmm batch mismatch");
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let m = if trans_a { ac } else { ar };
    let n = if trans_b { br } else { bc };
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let mut am = Mat::new(&a.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
        let mut bm = Mat::new(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc);
        am.trans = trans_a;
        bm.trans = trans_b;
        matmul_into(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
    }
    Tensor::new(&[batch, m, n], out)
}
