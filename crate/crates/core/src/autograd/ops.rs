//! Differentiable operators.
//!
//! Shape algebra (leading `..` axes are arbitrary):
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `add`, `mul` | `[..s]`, `[s]` (suffix broadcast) | `[..s]` |
//! | `matmul` | `[.., m, k]` x `[k, n]` or batched `[b.., m, k]` x `[b.., k, n]` | `[.., m, n]` |
//! | `conv2d` | `[B, C, H, W]`, weight `[O, C/g, kh, kw]`, bias `[O]` | `[B, O, H', W']` |
//! | `conv1d` | `[B, C, L]`, weight `[O, C/g, k]`, bias `[O]` | `[B, O, L']` |
//! | `layer_norm` | `[.., D]`, gamma `[D]`, beta `[D]` | `[.., D]` |
//! | `softmax` | `[.., D]` (last axis) | `[.., D]` |
//! | `avg_pool2d`, `max_pool2d` | `[B, C, H, W]` | `[B, C, H/k, W/k]` |
//! | `mean_axis` | `[.., n, ..]` | axis removed |
//! | `softmax_cross_entropy` | logits `[B, K]`, labels | `[1]` (batch mean) |

use std::rc::Rc;

use super::{BackwardCtx, Var};
use crate::error::{config, Error, Result};
use crate::tensor::{check_shape, Tensor};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// `ta`/`tb` mean the operand is stored transposed.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    c[i * n + j] += dot;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

/// Sums a `[reps, inner]` buffer down to `[inner]`.
fn reduce_leading(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in g.chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geo: Conv2dGeometry,
}

impl ConvDims {
    fn cin_g(&self) -> usize {
        self.cin / self.geo.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.geo.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds group `g` of image `b` into a `[Cg*kh*kw, ho*wo]` matrix.
    fn im2col(&self, x: &[f64], b: usize, g: usize, col: &mut [f64]) {
        let (sh, sw) = self.geo.stride;
        let (ph, pw) = self.geo.padding;
        let cg = self.cin_g();
        for c in 0..cg {
            let plane = &x[((b * self.cin) + g * cg + c) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * self.spatial()..(row + 1) * self.spatial()];
                    for oi in 0..self.ho {
                        let ii = (oi * sh + ki) as isize - ph as isize;
                        for oj in 0..self.wo {
                            let jj = (oj * sw + kj) as isize - pw as isize;
                            dst[oi * self.wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < self.h && (jj as usize) < self.w {
                                plane[ii as usize * self.w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], b: usize, g: usize, dx: &mut [f64]) {
        let (sh, sw) = self.geo.stride;
        let (ph, pw) = self.geo.padding;
        let cg = self.cin_g();
        for c in 0..cg {
            let base = ((b * self.cin) + g * cg + c) * self.h * self.w;
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * self.spatial()..(row + 1) * self.spatial()];
                    for oi in 0..self.ho {
                        let ii = (oi * sh + ki) as isize - ph as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * sw + kj) as isize - pw as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            dx[base + ii as usize * self.w + jj as usize] += src[oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Elementwise sum. The smaller operand's shape must be a suffix of the
    /// larger one's and is broadcast over the leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "add", |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    /// Elementwise product with the same suffix broadcasting as [`Var::add`].
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.broadcast_binary(other, "mul", |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    fn broadcast_binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        // `big` always goes first below; remember whether we swapped.
        let swapped = if is_suffix(b.shape(), a.shape()) {
            false
        } else if is_suffix(a.shape(), b.shape()) {
            true
        } else {
            return Err(mismatch(op, a.shape(), b.shape()));
        };
        let (big, small) = if swapped { (&b, &a) } else { (&a, &b) };
        let inner = small.numel();
        let out: Vec<f64> = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = small.data()[i % inner];
                if swapped {
                    f(y, x)
                } else {
                    f(x, y)
                }
            })
            .collect();
        let out = Tensor::new(big.shape().to_vec(), out)?;
        Ok(self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let (big_is_a, inner) = if swapped { (false, a.numel()) } else { (true, b.numel()) };
                let n = ctx.grad.numel();
                let pair = |i: usize| -> (f64, f64) {
                    if big_is_a {
                        (a.data()[i], b.data()[i % inner])
                    } else {
                        (a.data()[i % inner], b.data()[i])
                    }
                };
                let grad_for = |which_a: bool| -> Vec<f64> {
                    (0..n)
                        .map(|i| {
                            let (x, y) = pair(i);
                            let g = ctx.grad.data()[i];
                            if which_a {
                                da(g, x, y)
                            } else {
                                db(g, x, y)
                            }
                        })
                        .collect()
                };
                let ga = ctx.needs[0].then(|| {
                    let full = grad_for(true);
                    let data = if big_is_a { full } else { reduce_leading(&full, inner) };
                    Tensor::new(a.shape().to_vec(), data).expect("grad shape")
                });
                let gb = ctx.needs[1].then(|| {
                    let full = grad_for(false);
                    let data = if big_is_a { reduce_leading(&full, inner) } else { full };
                    Tensor::new(b.shape().to_vec(), data).expect("grad shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.push_op(
            out,
            &[self],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * c))]),
        )
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push_op(
            out,
            &[self],
            Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                vec![Some(Tensor::full(ctx.parents[0].shape().to_vec(), g))]
            }),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", ash, bsh));
        }
        let shared_rhs = bsh.len() == 2;
        if !shared_rhs && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(mismatch("matmul", ash, bsh));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        if shared_rhs {
            gemm(a.data(), b.data(), &mut out, batch * m, k, n, false, false);
        } else {
            for i in 0..batch {
                gemm(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    false,
                );
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape.push_op(
            out,
            &[self, other],
            Box::new(move |ctx| {
                let (a, b, g) = (&ctx.parents[0], &ctx.parents[1], ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    let mut da = vec![0.0; a.numel()];
                    if shared_rhs {
                        gemm(g, b.data(), &mut da, batch * m, n, k, false, true);
                    } else {
                        for i in 0..batch {
                            gemm(
                                &g[i * m * n..(i + 1) * m * n],
                                &b.data()[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                true,
                            );
                        }
                    }
                    Tensor::new(a.shape().to_vec(), da).expect("grad shape")
                });
                let gb = ctx.needs[1].then(|| {
                    let mut db = vec![0.0; b.numel()];
                    if shared_rhs {
                        gemm(a.data(), g, &mut db, k, batch * m, n, true, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                &a.data()[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                            );
                        }
                    }
                    Tensor::new(b.shape().to_vec(), db).expect("grad shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        check_shape(shape)?;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(mismatch("reshape", v.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(|ctx| {
                vec![Some(
                    Tensor::new(ctx.parents[0].shape().to_vec(), ctx.grad.data().to_vec()).expect("grad shape"),
                )]
            }),
        ))
    }

    /// `out[i] = input[index[i]]`; the backward pass scatter-adds.
    pub fn gather(self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        check_shape(out_shape)?;
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(mismatch("gather", &[index.len()], out_shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(config(format!("gather index {bad} out of range for {} elements", v.numel())));
        }
        let out = Tensor::new(out_shape.to_vec(), index.iter().map(|&i| v.data()[i]).collect())?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; ctx.parents[0].numel()];
                for (o, &i) in index.iter().enumerate() {
                    g[i] += ctx.grad.data()[o];
                }
                vec![Some(Tensor::new(ctx.parents[0].shape().to_vec(), g).expect("grad shape"))]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(config(format!("invalid permutation {axes:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut in_strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(coord.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(config("transpose needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.conv2d_general(
            weight,
            bias,
            Conv2dGeometry {
                stride: (stride, stride),
                padding: (padding, padding),
                groups: 1,
            },
        )
    }

    pub fn conv2d_general(self, weight: Var<'t>, bias: Option<Var<'t>>, geo: Conv2dGeometry) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch("conv2d", xs, ws));
        }
        let g = geo.groups;
        if g == 0 || geo.stride.0 == 0 || geo.stride.1 == 0 {
            return Err(config("conv2d needs positive stride and groups"));
        }
        if xs[1] % g != 0 || ws[0] % g != 0 || ws[1] * g != xs[1] {
            return Err(mismatch("conv2d", xs, ws));
        }
        let (hp, wp) = (xs[2] + 2 * geo.padding.0, xs[3] + 2 * geo.padding.1);
        if hp < ws[2] || wp < ws[3] {
            return Err(config(format!("conv2d kernel {ws:?} larger than padded input {xs:?}")));
        }
        let dims = ConvDims {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho: (hp - ws[2]) / geo.stride.0 + 1,
            wo: (wp - ws[3]) / geo.stride.1 + 1,
            geo,
        };
        if let Some(b) = bias {
            if b.shape() != [dims.cout] {
                return Err(mismatch("conv2d bias", &b.shape(), &[dims.cout]));
            }
        }
        let bias_v = bias.map(|b| b.value());
        let sp = dims.spatial();
        let mut out = vec![0.0; dims.batch * dims.cout * sp];
        let mut col = vec![0.0; dims.col_rows() * sp];
        for b in 0..dims.batch {
            for gi in 0..g {
                dims.im2col(x.data(), b, gi, &mut col);
                let wg = &w.data()[gi * dims.cout_g() * dims.col_rows()..][..dims.cout_g() * dims.col_rows()];
                let og = &mut out[(b * dims.cout + gi * dims.cout_g()) * sp..][..dims.cout_g() * sp];
                gemm(wg, &col, og, dims.cout_g(), dims.col_rows(), sp, false, false);
            }
            if let Some(bv) = &bias_v {
                for o in 0..dims.cout {
                    let bo = bv.data()[o];
                    for v in &mut out[(b * dims.cout + o) * sp..][..sp] {
                        *v += bo;
                    }
                }
            }
        }
        let out = Tensor::new(vec![dims.batch, dims.cout, dims.ho, dims.wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.push_op(
            out,
            &parents,
            Box::new(move |ctx| {
                let (x, w, gr) = (&ctx.parents[0], &ctx.parents[1], ctx.grad.data());
                let sp = dims.spatial();
                let mut dx = ctx.needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = ctx.needs[1].then(|| vec![0.0; w.numel()]);
                let mut col = vec![0.0; dims.col_rows() * sp];
                let mut dcol = vec![0.0; dims.col_rows() * sp];
                for b in 0..dims.batch {
                    for gi in 0..dims.geo.groups {
                        let gout = &gr[(b * dims.cout + gi * dims.cout_g()) * sp..][..dims.cout_g() * sp];
                        let woff = gi * dims.cout_g() * dims.col_rows();
                        if let Some(dw) = dw.as_mut() {
                            dims.im2col(x.data(), b, gi, &mut col);
                            gemm(
                                gout,
                                &col,
                                &mut dw[woff..woff + dims.cout_g() * dims.col_rows()],
                                dims.cout_g(),
                                sp,
                                dims.col_rows(),
                                false,
                                true,
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            dcol.iter_mut().for_each(|v| *v = 0.0);
                            gemm(
                                &w.data()[woff..woff + dims.cout_g() * dims.col_rows()],
                                gout,
                                &mut dcol,
                                dims.col_rows(),
                                dims.cout_g(),
                                sp,
                                true,
                                false,
                            );
                            dims.col2im(&dcol, b, gi, dx);
                        }
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("grad shape")),
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("grad shape")),
                ];
                if ctx.parents.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut db = vec![0.0; dims.cout];
                        for b in 0..dims.batch {
                            for (o, dbo) in db.iter_mut().enumerate() {
                                *dbo += gr[(b * dims.cout + o) * sp..][..sp].iter().sum::<f64>();
                            }
                        }
                        Tensor::new(vec![dims.cout], db).expect("grad shape")
                    }));
                }
                grads
            }),
        ))
    }

    /// One-dimensional convolution over the last axis of `[B, C, L]`.
    pub fn conv1d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize, groups: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(mismatch("conv1d", &xs, &ws));
        }
        let x4 = self.reshape(&[xs[0], xs[1], 1, xs[2]])?;
        let w4 = weight.reshape(&[ws[0], ws[1], 1, ws[2]])?;
        let y = x4.conv2d_general(
            w4,
            bias,
            Conv2dGeometry {
                stride: (1, stride),
                padding: (0, padding),
                groups,
            },
        )?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }

    /// Normalizes over the last axis, then applies `gamma * x_hat + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(config("layer-norm epsilon must be positive"));
        }
        let x = self.value();
        let d = *x.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(mismatch("layer_norm", x.shape(), &gamma.shape()));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * gv.data()[i % d] + bv.data()[i % d])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push_op(
            out,
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = &ctx.parents[1];
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let dxh = g[r * d + j] * gamma.data()[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gamma.data()[j];
                            dx[r * d + j] = inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    Tensor::new(ctx.parents[0].shape().to_vec(), dx).expect("grad shape")
                });
                let dgamma = ctx.needs[1].then(|| {
                    let mut dg = vec![0.0; d];
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % d] += gv * xhat[i];
                    }
                    Tensor::new(vec![d], dg).expect("grad shape")
                });
                let dbeta = ctx.needs[2].then(|| Tensor::new(vec![d], reduce_leading(g, d)).expect("grad shape"));
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// GELU in its exact `x * Phi(x)` form.
    pub fn gelu(self) -> Var<'t> {
        let out = self.value().map(gelu);
        self.tape.push_op(
            out,
            &[self],
            Box::new(|ctx| {
                let x = &ctx.parents[0];
                let d = x
                    .data()
                    .iter()
                    .zip(ctx.grad.data())
                    .map(|(&v, &g)| g * gelu_grad(v))
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), d).expect("grad shape"))]
            }),
        )
    }

    /// Softmax over the last axis with the row maximum subtracted.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.tape.push_op(
            out,
            &[self],
            Box::new(move |ctx| {
                let (y, g) = (ctx.out.data(), ctx.grad.data());
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let s = r * d..(r + 1) * d;
                    let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                    for j in s {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(Tensor::new(ctx.out.shape().to_vec(), dx).expect("grad shape"))]
            }),
        )
    }

    fn pool_dims(&self, kernel: usize, stride: usize) -> Result<[usize; 6]> {
        let s = self.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(config(format!("pooling kernel {kernel} / stride {stride} invalid for shape {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3], (s[2] - kernel) / stride + 1, (s[3] - kernel) / stride + 1])
    }

    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let [b, c, h, w, ho, wo] = self.pool_dims(kernel, stride)?;
        let x = self.value();
        let area = (kernel * kernel) as f64;
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += x.data()[p * h * w + (oi * stride + ki) * w + oj * stride + kj];
                        }
                    }
                    out[p * ho * wo + oi * wo + oj] = acc / area;
                }
            }
        }
        let out = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut dx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let g = ctx.grad.data()[p * ho * wo + oi * wo + oj] / area;
                            for ki in 0..kernel {
                                for kj in 0..kernel {
                                    dx[p * h * w + (oi * stride + ki) * w + oj * stride + kj] += g;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, c, h, w], dx).expect("grad shape"))]
            }),
        ))
    }

    /// Max pooling; ties resolve to the first maximum in scan order.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let [b, c, h, w, ho, wo] = self.pool_dims(kernel, stride)?;
        let x = self.value();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for p in 0..b * c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = p * h * w + (oi * stride + ki) * w + oj * stride + kj;
                            if x.data()[idx] > best.0 {
                                best = (x.data()[idx], idx);
                            }
                        }
                    }
                    let o = p * ho * wo + oi * wo + oj;
                    out[o] = best.0;
                    arg[o] = best.1;
                }
            }
        }
        let out = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut dx = vec![0.0; b * c * h * w];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += ctx.grad.data()[o];
                }
                vec![Some(Tensor::new(vec![b, c, h, w], dx).expect("grad shape"))]
            }),
        ))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis >= s.len() || s.len() < 2 {
            return Err(config(format!("mean over axis {axis} invalid for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * n + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.tape.push_op(
            out,
            &[self],
            Box::new(move |ctx| {
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = ctx.grad.data()[o * inner + i] / n as f64;
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.parents[0].shape().to_vec(), dx).expect("grad shape"))]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(config(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            loss += log_sum_exp(row) - row[labels[r]];
            softmax_in_place(row);
        }
        let labels = labels.to_vec();
        Ok(self.tape.push_op(
            Tensor::scalar(loss / b as f64),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] / b as f64;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= 1.0;
                }
                dx.iter_mut().for_each(|v| *v *= g);
                vec![Some(Tensor::new(vec![b, k], dx).expect("grad shape"))]
            }),
        ))
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Per-row cross-entropy of `[B, K]` logits (no tape).
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| log_sum_exp(row) - row[l])
        .collect()
}
