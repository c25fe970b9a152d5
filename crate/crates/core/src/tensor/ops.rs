use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::graph::{Graph, Op, Var};
use super::{strides, Real, Tensor};
use crate::error::{Error, Result};

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

/// Numpy-style broadcast of two batch shapes, returning the output batch shape
/// and, for every output batch element, the flat batch index into each input.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return shape_err(format!("batch dims {:?} and {:?} do not broadcast", a, b));
        }
    }
    let total: usize = out.iter().product();
    let (sa, sb) = (strides(&pa), strides(&pb));
    let so = strides(&out);
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    for flat in 0..total {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..rank {
            let coord = (flat / so[d]) % out[d];
            if pa[d] != 1 {
                oa += coord * sa[d];
            }
            if pb[d] != 1 {
                ob += coord * sb[d];
            }
        }
        ia.push(oa);
        ib.push(ob);
    }
    Ok((out, ia, ib))
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let moved: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&moved).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Source coordinate and blend weight for half-pixel bilinear sampling.
#[inline]
fn bilinear_src(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (Float::floor(src) as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Split `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_range(out_len: usize, in_len: usize, k: usize, padding: usize, stride: usize) -> (usize, usize) {
    // valid output positions o with 0 <= o*stride + k - padding < in_len
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + padding > k {
        ((in_len + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor { shape: va.shape().to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return shape_err(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                xs
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += *bb;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(x, s))
    }

    /// Elementwise product with constant weights that receive no gradient.
    pub fn mul_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return shape_err(format!(
                "{} constant weights for tensor of shape {:?}",
                weights.len(),
                self.shape(x)
            ));
        }
        let mut out = self.value(x).clone();
        out.data.iter_mut().zip(&weights).for_each(|(v, w)| *v *= *w);
        Ok(self.push(out, Op::MulConst(x, weights)))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.sqrt());
        self.push(out, Op::Sqrt(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return shape_err(format!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch, a_batch, b_batch) =
            broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).map_err(|_| {
                Error::Shape(format!("matmul: cannot multiply {:?} by {:?}", sa, sb))
            })?;
        let mut out = vec![T::zero(); a_batch.len() * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for (bi, (&ia, &ib)) in a_batch.iter().zip(&b_batch).enumerate() {
                let am = &da[ia * m * k..(ia + 1) * m * k];
                let bm = &db[ib * k * n..(ib + 1) * k * n];
                let cm = &mut out[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    let crow = &mut cm[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = am[i * k + p];
                        let brow = &bm[p * n..(p + 1) * n];
                        for (c, bv) in crow.iter_mut().zip(brow) {
                            *c += av * *bv;
                        }
                    }
                }
            }
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let out = Tensor { shape, data: out };
        Ok(self.push(out, Op::MatMul { a, b, a_batch, b_batch, m, k, n }))
    }

    /// `x[.., in] W[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// 2-D cross-correlation of `x[c_in, h, w]` with `kernel[c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] || stride == 0 {
            return shape_err(format!(
                "conv2d: input {:?} incompatible with kernel {:?} (stride {stride})",
                xs, ks
            ));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv2d: bias {:?} for {cout} outputs", self.shape(b)));
            }
        }
        let geo = ConvGeometry { cin, h, w, kh, kw, oh, ow, padding, stride };
        let cols = geo.im2col(self.value(x).data());
        let (kd, p, r) = (self.value(kernel).data(), oh * ow, cin * kh * kw);
        let mut out = vec![T::zero(); cout * p];
        for co in 0..cout {
            let plane = &mut out[co * p..(co + 1) * p];
            if let Some(b) = bias {
                let bv = self.value(b).data()[co];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            for (j, row) in cols.chunks_exact(p).enumerate() {
                axpy(plane, kd[co * r + j], row);
            }
        }
        let out = Tensor { shape: vec![cout, oh, ow], data: out };
        Ok(self.push(out, Op::Conv2d { x, kernel, bias, padding, stride }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
        self.push(out, Op::Relu(x))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::Shape("layernorm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!(
                "layernorm: gamma {:?} / beta {:?} for last axis {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d.max(1);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        let dn = T::lit(d as f64);
        for row in xd.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let xh = (*v - mean) * inv;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor { shape: xs, data: out };
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return shape_err(format!("softmax axis {axis} out of range for {:?}", xs));
        }
        let (outer, len, inner) = axis_split(&xs, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(d[base + a * inner]);
                }
                let mut s = T::zero();
                for a in 0..len {
                    let e = (d[base + a * inner] - mx).exp();
                    d[base + a * inner] = e;
                    s += e;
                }
                for a in 0..len {
                    d[base + a * inner] /= s;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// 2x2 max pooling with stride 2 on `[c, h, w]`.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] < 2 || xs[2] < 2 {
            return shape_err(format!("maxpool2d needs [c, h>=2, w>=2], got {:?}", xs));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor { shape: vec![c, oh, ow], data: out };
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    /// `k x k` average pooling with stride `k` on `[c, h, w]`; `h` and `w`
    /// must be multiples of `k`.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || k == 0 || xs[1] % k != 0 || xs[2] % k != 0 {
            return shape_err(format!("avgpool2d({k}) needs [c, h, w] divisible by k, got {:?}", xs));
        }
        if k == 1 {
            return Ok(x);
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / k, w / k);
        let norm = T::one() / T::lit((k * k) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[ch * oh * ow + (y / k) * ow + xx / k] += xd[ch * h * w + y * w + xx] * norm;
                }
            }
        }
        let out = Tensor { shape: vec![c, oh, ow], data: out };
        Ok(self.push(out, Op::AvgPool { x, k }))
    }

    /// Half-pixel bilinear resampling of `[c, h, w]` to `[c, out_h, out_w]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || out_h == 0 || out_w == 0 || xs[1] == 0 || xs[2] == 0 {
            return shape_err(format!("bilinear_resize of {:?} to {out_h}x{out_w}", xs));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let p = &xd[ch * h * w..(ch + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1, ly) = bilinear_src(oy, h, out_h);
                let ly = T::lit(ly);
                for ox in 0..out_w {
                    let (x0, x1, lx) = bilinear_src(ox, w, out_w);
                    let lx = T::lit(lx);
                    let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                    let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                    out.push(top * (T::one() - ly) + bot * ly);
                }
            }
        }
        let out = Tensor { shape: vec![c, out_h, out_w], data: out };
        Ok(self.push(out, Op::Bilinear(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor { shape, data: out };
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {:?}", xs));
        }
        let (outer, full, inner) = axis_split(&xs, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor { shape, data: out };
        Ok(self.push(out, Op::Narrow { x, axis, start }))
    }

    /// Inverted dropout. Identity (no node) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= *m);
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || core::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permutation {:?} invalid for {:?}", perm, xs));
        }
        let (data, shape) = permute_data(self.value(x).data(), &xs, perm);
        let out = Tensor { shape, data };
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err(format!("transpose needs rank >= 2, got {:?}", self.shape(x)));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Selects sub-tensors along axis 0: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || index.iter().any(|&i| i >= xs[0]) {
            return shape_err(format!("gather index out of range for {:?}", xs));
        }
        let row: usize = xs[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in &index {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = xs;
        shape[0] = index.len();
        let out = Tensor { shape, data: out };
        Ok(self.push(out, Op::Gather { x, index }))
    }

    pub(crate) fn backprop_node(&mut self, i: usize, g: &[T]) {
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |ga| add_into(ga, g));
                self.accumulate(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |ga| add_into(ga, g));
                self.accumulate(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= *y));
            }
            Op::Mul(a, b) => {
                let vb = self.value(*b).data().to_vec();
                let va = self.value(*a).data().to_vec();
                self.accumulate(*a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&vb) {
                        *x += *y * *z
                    }
                });
                self.accumulate(*b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&va) {
                        *x += *y * *z
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(*x, |gx| add_into(gx, g));
                let n = self.shape(*b)[0];
                self.accumulate(*b, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += *b * s));
            }
            Op::MulConst(x, w) => {
                self.accumulate(*x, |gx| {
                    for ((a, b), c) in gx.iter_mut().zip(g).zip(w) {
                        *a += *b * *c
                    }
                });
            }
            Op::Sqrt(x) => {
                let out = self.nodes[i].value.data().to_vec();
                let half = T::lit(0.5);
                self.accumulate(*x, |gx| {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(&out) {
                        if *y > T::zero() {
                            *a += *b * half / *y;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |gx| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::MatMul { a, b, a_batch, b_batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(*a) {
                    let bd = self.value(*b).data().to_vec();
                    self.accumulate(*a, |ga| {
                        for (bi, (&ia, &ib)) in a_batch.iter().zip(b_batch).enumerate() {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let bm = &bd[ib * k * n..(ib + 1) * k * n];
                            let gam = &mut ga[ia * m * k..(ia + 1) * m * k];
                            for r in 0..m {
                                let grow = &gc[r * n..(r + 1) * n];
                                for p in 0..k {
                                    let brow = &bm[p * n..(p + 1) * n];
                                    let mut s = T::zero();
                                    for (x, y) in grow.iter().zip(brow) {
                                        s += *x * *y;
                                    }
                                    gam[r * k + p] += s;
                                }
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data().to_vec();
                    self.accumulate(*b, |gb| {
                        for (bi, (&ia, &ib)) in a_batch.iter().zip(b_batch).enumerate() {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let am = &ad[ia * m * k..(ia + 1) * m * k];
                            let gbm = &mut gb[ib * k * n..(ib + 1) * k * n];
                            for r in 0..m {
                                let grow = &gc[r * n..(r + 1) * n];
                                for p in 0..k {
                                    let av = am[r * k + p];
                                    let dst = &mut gbm[p * n..(p + 1) * n];
                                    for (d, y) in dst.iter_mut().zip(grow) {
                                        *d += av * *y;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, kernel, bias, padding, stride } => {
                self.conv2d_backward(*x, *kernel, *bias, *padding, *stride, i, g);
            }
            Op::Relu(x) => {
                let out = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for ((a, b), y) in gx.iter_mut().zip(g).zip(&out) {
                        if *y > T::zero() {
                            *a += *b;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data().to_vec();
                self.accumulate(*gamma, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((a, b), c) in gg.iter_mut().zip(grow).zip(hrow) {
                            *a += *b * *c;
                        }
                    }
                });
                self.accumulate(*beta, |gb| {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                });
                let dn = T::lit(d as f64);
                self.accumulate(*x, |gx| {
                    let mut dxh = vec![T::zero(); d];
                    for (r, ((gxrow, grow), hrow)) in
                        gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxh[j] = grow[j] * gam[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * hrow[j];
                        }
                        let inv = inv_std[r] / dn;
                        for j in 0..d {
                            gxrow[j] += inv * (dn * dxh[j] - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = T::zero();
                            for a in 0..len {
                                dot += g[base + a * inner] * y[base + a * inner];
                            }
                            for a in 0..len {
                                let idx = base + a * inner;
                                gx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(*x, |gx| {
                    for (src, gv) in argmax.iter().zip(g) {
                        gx[*src] += *gv;
                    }
                });
            }
            Op::AvgPool { x, k } => {
                let k = *k;
                let xs = self.shape(*x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = T::one() / T::lit((k * k) as f64);
                self.accumulate(*x, |gx| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[ch * h * w + y * w + xx] +=
                                    g[ch * oh * ow + (y / k) * ow + xx / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Bilinear(x) => {
                let xs = self.shape(*x).to_vec();
                let os = self.nodes[i].value.shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (os[1], os[2]);
                self.accumulate(*x, |gx| {
                    for ch in 0..c {
                        let p = &mut gx[ch * h * w..(ch + 1) * h * w];
                        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        for oy in 0..oh {
                            let (y0, y1, ly) = bilinear_src(oy, h, oh);
                            let ly = T::lit(ly);
                            for ox in 0..ow {
                                let (x0, x1, lx) = bilinear_src(ox, w, ow);
                                let lx = T::lit(lx);
                                let gv = gp[oy * ow + ox];
                                let top = gv * (T::one() - ly);
                                let bot = gv * ly;
                                p[y0 * w + x0] += top * (T::one() - lx);
                                p[y0 * w + x1] += top * lx;
                                p[y1 * w + x0] += bot * (T::one() - lx);
                                p[y1 * w + x1] += bot * lx;
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, *axis);
                let mut offset = 0;
                for v in xs {
                    let len = self.shape(*v)[*axis];
                    self.accumulate(*v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, full, inner) = axis_split(&xs, *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let start = *start;
                self.accumulate(*x, |gx| {
                    for o in 0..outer {
                        let s = (o * full + start) * inner;
                        add_into(&mut gx[s..s + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, |gx| {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += *b * *m;
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(*x, |gx| add_into(gx, g)),
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let mut inverse = vec![0; perm.len()];
                for (d, p) in perm.iter().enumerate() {
                    inverse[*p] = d;
                }
                let (back, _) = permute_data(g, &out_shape, &inverse);
                self.accumulate(*x, |gx| add_into(gx, &back));
            }
            Op::Gather { x, index } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                self.accumulate(*x, |gx| {
                    for (o, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * row..(src + 1) * row], &g[o * row..(o + 1) * row]);
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
        node: usize,
        g: &[T],
    ) {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let os = self.nodes[node].value.shape().to_vec();
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = (os[1], os[2]);
        let geo = ConvGeometry { cin, h, w, kh, kw, oh, ow, padding, stride };
        let (p, r) = (oh * ow, cin * kh * kw);
        if let Some(b) = bias {
            self.accumulate(b, |gb| {
                for co in 0..cout {
                    gb[co] += g[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            });
        }
        if self.requires_grad(kernel) {
            let cols = geo.im2col(self.value(x).data());
            self.accumulate(kernel, |gk| {
                for co in 0..cout {
                    let gp = &g[co * p..(co + 1) * p];
                    for (j, row) in cols.chunks_exact(p).enumerate() {
                        gk[co * r + j] += dot(gp, row);
                    }
                }
            });
        }
        if self.requires_grad(x) {
            let kd = self.value(kernel).data();
            let mut dcols = vec![T::zero(); r * p];
            for (j, drow) in dcols.chunks_exact_mut(p).enumerate() {
                for co in 0..cout {
                    axpy(drow, kd[co * r + j], &g[co * p..(co + 1) * p]);
                }
            }
            self.accumulate(x, |gx| geo.col2im(&dcols, gx));
        }
    }
}

/// Index bookkeeping shared by the convolution passes.
#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    padding: usize,
    stride: usize,
}

impl ConvGeometry {
    /// `[cin*kh*kw, oh*ow]` patch matrix; out-of-bounds taps are zero.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let p = self.oh * self.ow;
        let mut cols = vec![T::zero(); self.cin * self.kh * self.kw * p];
        self.walk(|row, oy, ox0, ox1, src| {
            let dst = &mut cols[row * p + oy * self.ow..row * p + (oy + 1) * self.ow];
            if self.stride == 1 {
                dst[ox0..ox1].copy_from_slice(&x[src..src + (ox1 - ox0)]);
            } else {
                for (k, ox) in (ox0..ox1).enumerate() {
                    dst[ox] = x[src + k * self.stride];
                }
            }
        });
        cols
    }

    /// Scatter-adds a patch-matrix gradient back onto the input.
    fn col2im<T: Real>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.oh * self.ow;
        self.walk(|row, oy, ox0, ox1, src| {
            let from = &cols[row * p + oy * self.ow..row * p + (oy + 1) * self.ow];
            if self.stride == 1 {
                add_into(&mut gx[src..src + (ox1 - ox0)], &from[ox0..ox1]);
            } else {
                for (k, ox) in (ox0..ox1).enumerate() {
                    gx[src + k * self.stride] += from[ox];
                }
            }
        });
    }

    /// Calls `f(row, oy, ox0, ox1, src)` for every in-bounds output run, where
    /// `src` is the flat input index of output column `ox0`.
    fn walk(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                let (oy0, oy1) = conv_range(self.oh, self.h, ky, self.padding, self.stride);
                for kx in 0..self.kw {
                    let (ox0, ox1) = conv_range(self.ow, self.w, kx, self.padding, self.stride);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.padding;
                        let src = ci * self.h * self.w + iy * self.w + ox0 * self.stride + kx - self.padding;
                        f(row, oy, ox0, ox1, src);
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], a: T, x: &[T]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * *v;
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = acc.iter().copied().fold(T::zero(), |s, v| s + v);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
