//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in append order,
//! so the node list is a topological order by construction. [`Graph::backward`]
//! walks it once in reverse and deposits parameter gradients into the
//! [`ParamStore`]. A fresh graph is built for every step.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{config_err, dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, Float, Mat, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct AttentionSaved<T> {
    heads: usize,
    /// Normalized queries and keys, `[n][head][d][L]`.
    qn: Vec<T>,
    kn: Vec<T>,
    /// Row norms, `[n][head][d]`.
    rq: Vec<T>,
    rk: Vec<T>,
    /// Raw Gram matrix and softmax output, `[n][head][d][d]`.
    gram: Vec<T>,
    attn: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Permute {
        x: Var,
        /// Output element `i` reads input element `map[i]`.
        map: Rc<Vec<usize>>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Combine {
        parts: Vec<Var>,
        groups: Vec<Vec<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        temp: Var,
        saved: Box<AttentionSaved<T>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, for leaf nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input_with_grad`] or a parameter leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// The tape for one forward/backward pass.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    macs: Cell<u64>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(a: &[usize], b: &[usize], na: usize, nb: usize) -> Result<Vec<usize>> {
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(dim_err!("elementwise shape mismatch {:?} vs {:?}", a, b))
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            macs: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates performed by convolutions, linear maps and
    /// attention products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    fn count(&self, macs: u64) {
        self.macs.set(self.macs.get() + macs);
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; frozen parameters behave as constants.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    fn binary(&self, a: Var, b: Var, op: fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = same_or_scalar(va.shape(), vb.shape(), va.numel(), vb.numel())?;
        let data: Vec<T> = if va.numel() == vb.numel() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| op(x, y))
                .collect()
        } else if vb.numel() == 1 {
            let y = vb.data()[0];
            va.data().iter().map(|&x| op(x, y)).collect()
        } else {
            let x = va.data()[0];
            vb.data().iter().map(|&y| op(x, y)).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, mk(a, b), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), self.rg(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a), self.rg(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a), self.rg(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), self.rg(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), self.rg(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.rg(a)))
    }

    /// Affine map over the last dimension: `x · w + b` with `w: [cin, cout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let cin = vx.last_dim();
        let (wi, wo) = match vw.shape() {
            [i, o] => (*i, *o),
            s => return Err(dim_err!("linear weight must be 2D, got {:?}", s)),
        };
        if wi != cin {
            return Err(dim_err!("linear expects last dim {}, got {}", wi, cin));
        }
        let rows = vx.numel() / cin;
        let mut out = vec![T::zero(); rows * wo];
        gemm(
            Mat::new(vx.data(), rows, cin),
            Mat::new(vw.data(), cin, wo),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [wo] {
                return Err(dim_err!(
                    "linear bias must be [{}], got {:?}",
                    wo,
                    vb.shape()
                ));
            }
            for row in out.chunks_exact_mut(wo) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        self.count((rows * cin * wo) as u64);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank>=1") = wo;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2D convolution, NHWC input and `[k, k, cin/groups, cout]` weights.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, h, wd, cin) = vx.nhwc()?;
        let (k, k2, cig, cout) = match vw.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(dim_err!("conv weight must be 4D, got {:?}", s)),
        };
        if stride == 0 || groups == 0 {
            return Err(config_err!("conv stride and groups must be >= 1"));
        }
        if k != k2 {
            return Err(dim_err!("conv kernel must be square, got {}x{}", k, k2));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(dim_err!(
                "channels {}->{} not divisible by groups {}",
                cin,
                cout,
                groups
            ));
        }
        if cig != cin / groups {
            return Err(dim_err!(
                "conv weight expects {} input channels per group, input gives {}",
                cig,
                cin / groups
            ));
        }
        let span_h = h + 2 * pad;
        let span_w = wd + 2 * pad;
        if span_h < k
            || span_w < k
            || !(span_h - k).is_multiple_of(stride)
            || !(span_w - k).is_multiple_of(stride)
        {
            return Err(config_err!(
                "conv output size not integral: ({}+2*{}-{})/{}",
                h,
                pad,
                k,
                stride
            ));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            groups,
            ho: (span_h - k) / stride + 1,
            wo: (span_w - k) / stride + 1,
        };
        let bias = b.map(|b| self.value(b));
        if let Some(vb) = &bias {
            if vb.shape() != [cout] {
                return Err(dim_err!(
                    "conv bias must be [{}], got {:?}",
                    cout,
                    vb.shape()
                ));
            }
        }
        let out =
            kernels::conv2d_forward(&geom, vx.data(), vw.data(), bias.as_ref().map(|t| t.data()));
        self.count(geom.macs());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&[n, geom.ho, geom.wo, cout], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Normalize each position over the channel dimension, then scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(config_err!("layer_norm eps must be > 0"));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.last_dim();
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(dim_err!("layer_norm affine params must be [{}]", c));
        }
        let rows = vx.numel() / c;
        let cf = T::from_usize(c).expect("c");
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let xh = (row[i] - mean) * rs;
                xhat[r * c + i] = xh;
                out[r * c + i] = xh * vg.data()[i] + vb.data()[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(vx.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if axis >= shape.len() {
            return Err(dim_err!(
                "softmax axis {} out of range for {:?}",
                axis,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vx.data().to_vec();
        let mut buf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    buf[j] = out[(o * len + j) * inner + i];
                }
                kernels::softmax_row(&mut buf);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = buf[j];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            self.rg(x),
        ))
    }

    fn permute(&self, x: Var, shape: &[usize], map: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let data = map.iter().map(|&i| vx.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                map: Rc::new(map),
            },
            self.rg(x),
        ))
    }

    /// `(N,H,W,C) -> (N,H/r,W/r,C·r²)`.
    pub fn pixel_unshuffle(&self, x: Var, r: usize) -> Result<Var> {
        let (n, h, w, c) = self.value(x).nhwc()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(dim_err!(
                "pixel_unshuffle: {}x{} not divisible by {}",
                h,
                w,
                r
            ));
        }
        let map = kernels::unshuffle_map(n, h, w, c, r);
        self.permute(x, &[n, h / r, w / r, c * r * r], map)
    }

    /// `(N,H,W,C·r²) -> (N,H·r,W·r,C)`, the inverse of [`Graph::pixel_unshuffle`].
    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let (n, h, w, cr) = self.value(x).nhwc()?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(dim_err!(
                "pixel_shuffle: channels {} not divisible by {}",
                cr,
                r * r
            ));
        }
        let c = cr / (r * r);
        let fwd = kernels::unshuffle_map(n, h * r, w * r, c, r);
        let mut map = vec![0; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            map[src] = i;
        }
        self.permute(x, &[n, h * r, w * r, c], map)
    }

    /// Concatenate along the channel (last) dimension.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err!("concat shape mismatch {:?} vs {:?}", sa, sb));
        }
        let (ca, cb) = (va.last_dim(), vb.last_dim());
        let rows = va.numel() / ca;
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("rank") = ca + cb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { a, b }, rg))
    }

    /// Channels `start..start + len` of the last dimension.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if len == 0 || start + len > c {
            return Err(dim_err!(
                "channel slice {}..{} out of range {}",
                start,
                start + len,
                c
            ));
        }
        let out: Vec<T> = vx
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank") = len;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::SliceChannels { x, start },
            self.rg(x),
        ))
    }

    /// Mean over height and width: `(N,H,W,C) -> (N,C)`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, h, w, c) = vx.nhwc()?;
        let l = h * w;
        let inv = T::one() / T::from_usize(l).expect("l");
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for p in 0..l {
                let row = &vx.data()[(b * l + p) * c..(b * l + p + 1) * c];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(x), self.rg(x)))
    }

    /// Select batch entries in order.
    pub fn gather_batch(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x).select_batch(indices)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            self.rg(x),
        ))
    }

    /// Scatter per-group sub-batches back into original batch order.
    ///
    /// `groups[g][j]` is the batch position of row `j` of `parts[g]`; the
    /// groups must partition `0..batch`.
    pub fn combine(&self, parts: &[Var], groups: &[Vec<usize>], batch: usize) -> Result<Var> {
        if parts.len() != groups.len() || parts.is_empty() {
            return Err(Error::Internal("combine: parts/groups mismatch".into()));
        }
        let mut seen = vec![false; batch];
        for &i in groups.iter().flatten() {
            if i >= batch || seen[i] {
                return Err(Error::Internal(format!(
                    "combine: index {i} repeated or out of range"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Internal(
                "combine: plan does not cover the batch".into(),
            ));
        }
        let first = self.value(parts[0]);
        let mut shape = first.shape().to_vec();
        let stride = first.numel() / shape[0];
        shape[0] = batch;
        let mut out = vec![T::zero(); batch * stride];
        for (p, idx) in parts.iter().zip(groups) {
            let vp = self.value(*p);
            if vp.shape()[0] != idx.len() || vp.numel() / vp.shape()[0] != stride {
                return Err(dim_err!(
                    "combine part shape {:?} does not match plan",
                    vp.shape()
                ));
            }
            for (j, &dst) in idx.iter().enumerate() {
                out[dst * stride..(dst + 1) * stride]
                    .copy_from_slice(&vp.data()[j * stride..(j + 1) * stride]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Combine {
                parts: parts.to_vec(),
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head attention over the channel dimension.
    ///
    /// Per head, the `d x d` map (`d = C / heads`) is the softmax over keys of
    /// `temperature · q̂ k̂ᵀ`, where rows of `q̂, k̂` are L2-normalized across
    /// spatial positions. The result is that map applied to `v`.
    pub fn channel_attention_core(
        &self,
        q: Var,
        k: Var,
        v: Var,
        temp: Var,
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv, vt) = (
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(temp),
        );
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(dim_err!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            ));
        }
        if vt.shape() != [heads] {
            return Err(dim_err!(
                "temperature must be [{}], got {:?}",
                heads,
                vt.shape()
            ));
        }
        let (out, saved) = attention_forward(&vq, &vk, &vv, vt.data(), heads)?;
        let (n, h, w, c) = vq.nhwc()?;
        let d = c / heads;
        self.count((n * heads * d * d * h * w * 2) as u64);
        let rg = [q, k, v, temp].iter().any(|&x| self.rg(x));
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                temp,
                saved: Box::new(saved),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits: [N, K]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, k) = match vl.shape() {
            [n, k] => (*n, *k),
            s => return Err(dim_err!("cross_entropy expects [N,K] logits, got {:?}", s)),
        };
        if labels.len() != n {
            return Err(dim_err!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            ));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Data(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let row = &vl.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
            kernels::softmax_row(&mut probs[i * k..(i + 1) * k]);
        }
        loss = loss / T::from_usize(n).expect("n");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            self.rg(logits),
        ))
    }

    /// Reverse pass from a scalar loss. Trainable parameter gradients are
    /// added into `store`; leaf gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = Acc {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    store.accumulate_grad(*id, &t)?;
                    leaf_grads[i] = Some(t);
                }
                Op::Add(a, b) => {
                    acc.broadcast_into(*a, &g, |x| x);
                    acc.broadcast_into(*b, &g, |x| x);
                }
                Op::Sub(a, b) => {
                    acc.broadcast_into(*a, &g, |x| x);
                    acc.broadcast_into(*b, &g, |x| -x);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    acc.mul_into(*a, &g, &vb);
                    acc.mul_into(*b, &g, &va);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc.with(*a, |d| {
                        for (d, &gv) in d.iter_mut().zip(&g) {
                            *d += gv * s;
                        }
                    });
                }
                Op::Gelu(a) => {
                    let va = nodes[a.0].value.clone();
                    acc.with(*a, |d| {
                        for ((d, &gv), &x) in d.iter_mut().zip(&g).zip(va.data()) {
                            *d += gv * kernels::gelu_grad(x);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.clone();
                    acc.with(*a, |d| {
                        for ((d, &gv), &s) in d.iter_mut().zip(&g).zip(y.data()) {
                            *d += gv * s * (T::one() - s);
                        }
                    });
                }
                Op::Abs(a) => {
                    let va = nodes[a.0].value.clone();
                    acc.with(*a, |d| {
                        for ((d, &gv), &x) in d.iter_mut().zip(&g).zip(va.data()) {
                            if x > T::zero() {
                                *d += gv;
                            } else if x < T::zero() {
                                *d -= gv;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    acc.with(*a, |d| d.iter_mut().for_each(|d| *d += gv));
                }
                Op::Mean(a) => {
                    let n = T::from_usize(nodes[a.0].value.numel()).expect("n");
                    let gv = g[0] / n;
                    acc.with(*a, |d| d.iter_mut().for_each(|d| *d += gv));
                }
                Op::Reshape(a) => {
                    acc.with(*a, |d| {
                        for (d, &gv) in d.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (nodes[x.0].value.clone(), nodes[w.0].value.clone());
                    let cin = vx.last_dim();
                    let cout = vw.shape()[1];
                    let rows = vx.numel() / cin;
                    acc.with(*w, |d| {
                        gemm(
                            Mat::new(vx.data(), rows, cin).t(),
                            Mat::new(&g, rows, cout),
                            d,
                            true,
                        )
                    });
                    acc.with(*x, |d| {
                        gemm(
                            Mat::new(&g, rows, cout),
                            Mat::new(vw.data(), cin, cout).t(),
                            d,
                            true,
                        )
                    });
                    if let Some(b) = b {
                        acc.with(*b, |d| {
                            for row in g.chunks_exact(cout) {
                                for (d, &gv) in d.iter_mut().zip(row) {
                                    *d += gv;
                                }
                            }
                        });
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (vx, vw) = (nodes[x.0].value.clone(), nodes[w.0].value.clone());
                    let mut dx = acc.take(*x);
                    let mut dw = acc.take(*w);
                    let mut db = b.and_then(|b| acc.take(b));
                    kernels::conv2d_backward(
                        geom,
                        vx.data(),
                        vw.data(),
                        &g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    acc.put(*x, dx);
                    acc.put(*w, dw);
                    if let Some(b) = b {
                        acc.put(*b, db);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let vg = nodes[gamma.0].value.clone();
                    let c = vg.numel();
                    let cf = T::from_usize(c).expect("c");
                    acc.with(*gamma, |d| {
                        for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for i in 0..c {
                                d[i] += gr[i] * xr[i];
                            }
                        }
                    });
                    acc.with(*beta, |d| {
                        for gr in g.chunks_exact(c) {
                            for i in 0..c {
                                d[i] += gr[i];
                            }
                        }
                    });
                    acc.with(*x, |d| {
                        let mut dxh = vec![T::zero(); c];
                        for (r, (gr, xr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate()
                        {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for i in 0..c {
                                dxh[i] = gr[i] * vg.data()[i];
                                m1 += dxh[i];
                                m2 += dxh[i] * xr[i];
                            }
                            m1 = m1 / cf;
                            m2 = m2 / cf;
                            let dr = &mut d[r * c..(r + 1) * c];
                            for i in 0..c {
                                dr[i] += rstd[r] * (dxh[i] - m1 - xr[i] * m2);
                            }
                        }
                    });
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.clone();
                    let (outer, len, inner) = (*outer, *len, *inner);
                    acc.with(*x, |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let dot: T = (0..len).map(|j| g[idx(j)] * y.data()[idx(j)]).sum();
                                for j in 0..len {
                                    d[idx(j)] += y.data()[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::Permute { x, map } => {
                    acc.with(*x, |d| {
                        for (&src, &gv) in map.iter().zip(&g) {
                            d[src] += gv;
                        }
                    });
                }
                Op::Concat { a, b } => {
                    let ca = nodes[a.0].value.last_dim();
                    let cb = nodes[b.0].value.last_dim();
                    acc.with(*a, |d| {
                        for (dr, gr) in d.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                            for (dv, &gv) in dr.iter_mut().zip(&gr[..ca]) {
                                *dv += gv;
                            }
                        }
                    });
                    acc.with(*b, |d| {
                        for (dr, gr) in d.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                            for (dv, &gv) in dr.iter_mut().zip(&gr[ca..]) {
                                *dv += gv;
                            }
                        }
                    });
                }
                Op::SliceChannels { x, start } => {
                    let c = nodes[x.0].value.last_dim();
                    let len = node.value.last_dim();
                    let start = *start;
                    acc.with(*x, |d| {
                        for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                            for (dv, &gv) in dr[start..start + len].iter_mut().zip(gr) {
                                *dv += gv;
                            }
                        }
                    });
                }
                Op::GlobalAvgPool(x) => {
                    let (n, h, w, c) = nodes[x.0].value.nhwc()?;
                    let l = h * w;
                    let inv = T::one() / T::from_usize(l).expect("l");
                    acc.with(*x, |d| {
                        for b in 0..n {
                            let gr = &g[b * c..(b + 1) * c];
                            for p in 0..l {
                                let dr = &mut d[(b * l + p) * c..(b * l + p + 1) * c];
                                for (dv, &gv) in dr.iter_mut().zip(gr) {
                                    *dv += gv * inv;
                                }
                            }
                        }
                    });
                }
                Op::Gather { x, indices } => {
                    let stride = node.value.numel() / indices.len();
                    acc.with(*x, |d| {
                        for (j, &src) in indices.iter().enumerate() {
                            for (dv, &gv) in d[src * stride..(src + 1) * stride]
                                .iter_mut()
                                .zip(&g[j * stride..(j + 1) * stride])
                            {
                                *dv += gv;
                            }
                        }
                    });
                }
                Op::Combine { parts, groups } => {
                    let stride = node.value.numel() / node.value.shape()[0];
                    for (p, idx) in parts.iter().zip(groups) {
                        acc.with(*p, |d| {
                            for (j, &dst) in idx.iter().enumerate() {
                                for (dv, &gv) in d[j * stride..(j + 1) * stride]
                                    .iter_mut()
                                    .zip(&g[dst * stride..(dst + 1) * stride])
                                {
                                    *dv += gv;
                                }
                            }
                        });
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    temp,
                    saved,
                } => {
                    let vv = nodes[v.0].value.clone();
                    let vt = nodes[temp.0].value.clone();
                    let mut dq = acc.take(*q);
                    let mut dk = acc.take(*k);
                    let mut dv = acc.take(*v);
                    let mut dt = acc.take(*temp);
                    attention_backward(
                        saved,
                        &vv,
                        vt.data(),
                        &g,
                        AttnGrads {
                            dq: dq.as_deref_mut(),
                            dk: dk.as_deref_mut(),
                            dv: dv.as_deref_mut(),
                            dt: dt.as_deref_mut(),
                        },
                    )?;
                    acc.put(*q, dq);
                    acc.put(*k, dk);
                    acc.put(*v, dv);
                    acc.put(*temp, dt);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / T::from_usize(n).expect("n");
                    acc.with(*logits, |d| {
                        for (i, &y) in labels.iter().enumerate() {
                            for j in 0..k {
                                let onehot = if j == y { T::one() } else { T::zero() };
                                d[i * k + j] += (probs[i * k + j] - onehot) * scale;
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradient accumulator view used during the reverse pass.
struct Acc<'a, T: Float> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Float> Acc<'_, T> {
    fn take(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn put(&mut self, v: Var, g: Option<Vec<T>>) {
        if g.is_some() {
            self.grads[v.0] = g;
        }
    }

    fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut buf) = self.take(v) {
            f(&mut buf);
            self.grads[v.0] = Some(buf);
        }
    }

    /// Accumulate `f(g)`, summing over elements when `v` is a broadcast scalar.
    fn broadcast_into(&mut self, v: Var, g: &[T], f: impl Fn(T) -> T) {
        let scalar = self.nodes[v.0].value.numel() == 1 && g.len() != 1;
        self.with(v, |d| {
            if scalar {
                d[0] += f(g.iter().copied().sum());
            } else {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += f(gv);
                }
            }
        });
    }

    /// Accumulate `g ⊙ other` into `v`, with scalar broadcasting on either side.
    fn mul_into(&mut self, v: Var, g: &[T], other: &Tensor<T>) {
        let self_scalar = self.nodes[v.0].value.numel() == 1 && g.len() != 1;
        let od = other.data();
        self.with(v, |d| {
            if self_scalar {
                let s: T = if od.len() == 1 {
                    g.iter().copied().sum::<T>() * od[0]
                } else {
                    g.iter().zip(od).map(|(&a, &b)| a * b).sum()
                };
                d[0] += s;
            } else if od.len() == 1 && g.len() != 1 {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += gv * od[0];
                }
            } else {
                for ((dv, &gv), &o) in d.iter_mut().zip(g).zip(od) {
                    *dv += gv * o;
                }
            }
        });
    }
}

fn gather_head<T: Float>(
    src: &[T],
    n: usize,
    l: usize,
    c: usize,
    c0: usize,
    d: usize,
    out: &mut [T],
) {
    for p in 0..l {
        let row = &src[(n * l + p) * c + c0..(n * l + p) * c + c0 + d];
        for i in 0..d {
            out[i * l + p] = row[i];
        }
    }
}

fn scatter_head_add<T: Float>(
    dst: &mut [T],
    n: usize,
    l: usize,
    c: usize,
    c0: usize,
    d: usize,
    buf: &[T],
) {
    for p in 0..l {
        let row = &mut dst[(n * l + p) * c + c0..(n * l + p) * c + c0 + d];
        for i in 0..d {
            row[i] += buf[i * l + p];
        }
    }
}

const NORM_EPS: f64 = 1e-12;

fn normalize_rows<T: Float>(m: &mut [T], l: usize, norms: &mut [T]) {
    let eps = T::lit(NORM_EPS);
    for (row, r) in m.chunks_exact_mut(l).zip(norms.iter_mut()) {
        let s: T = row.iter().map(|&v| v * v).sum();
        *r = (s + eps).sqrt();
        let inv = T::one() / *r;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

fn attention_forward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    temp: &[T],
    heads: usize,
) -> Result<(Tensor<T>, AttentionSaved<T>)> {
    let (n, h, w, c) = q.nhwc()?;
    if heads == 0 || c % heads != 0 {
        return Err(config_err!(
            "channels {} not divisible by heads {}",
            c,
            heads
        ));
    }
    let l = h * w;
    let d = c / heads;
    let blocks = n * heads;
    let mut saved = AttentionSaved {
        heads,
        qn: vec![T::zero(); blocks * d * l],
        kn: vec![T::zero(); blocks * d * l],
        rq: vec![T::zero(); blocks * d],
        rk: vec![T::zero(); blocks * d],
        gram: vec![T::zero(); blocks * d * d],
        attn: vec![T::zero(); blocks * d * d],
    };
    let mut out = vec![T::zero(); q.numel()];
    let mut vh = vec![T::zero(); d * l];
    let mut oh = vec![T::zero(); d * l];
    for b in 0..n {
        for hd in 0..heads {
            let blk = b * heads + hd;
            let c0 = hd * d;
            let qn = &mut saved.qn[blk * d * l..(blk + 1) * d * l];
            let kn = &mut saved.kn[blk * d * l..(blk + 1) * d * l];
            gather_head(q.data(), b, l, c, c0, d, qn);
            gather_head(k.data(), b, l, c, c0, d, kn);
            normalize_rows(qn, l, &mut saved.rq[blk * d..(blk + 1) * d]);
            normalize_rows(kn, l, &mut saved.rk[blk * d..(blk + 1) * d]);
            let gram = &mut saved.gram[blk * d * d..(blk + 1) * d * d];
            gemm(Mat::new(qn, d, l), Mat::new(kn, d, l).t(), gram, false);
            let attn = &mut saved.attn[blk * d * d..(blk + 1) * d * d];
            for (a, &gv) in attn.iter_mut().zip(gram.iter()) {
                *a = gv * temp[hd];
            }
            for row in attn.chunks_exact_mut(d) {
                kernels::softmax_row(row);
            }
            gather_head(v.data(), b, l, c, c0, d, &mut vh);
            gemm(Mat::new(attn, d, d), Mat::new(&vh, d, l), &mut oh, false);
            scatter_head_add(&mut out, b, l, c, c0, d, &oh);
        }
    }
    Ok((Tensor::new(q.shape(), out)?, saved))
}

struct AttnGrads<'a, T> {
    dq: Option<&'a mut [T]>,
    dk: Option<&'a mut [T]>,
    dv: Option<&'a mut [T]>,
    dt: Option<&'a mut [T]>,
}

fn attention_backward<T: Float>(
    saved: &AttentionSaved<T>,
    v: &Tensor<T>,
    temp: &[T],
    g: &[T],
    mut grads: AttnGrads<'_, T>,
) -> Result<()> {
    let (n, h, w, c) = v.nhwc()?;
    let heads = saved.heads;
    let l = h * w;
    let d = c / heads;
    let mut go = vec![T::zero(); d * l];
    let mut vh = vec![T::zero(); d * l];
    let mut da = vec![T::zero(); d * d];
    let mut ds = vec![T::zero(); d * d];
    let mut buf = vec![T::zero(); d * l];
    for b in 0..n {
        for hd in 0..heads {
            let blk = b * heads + hd;
            let c0 = hd * d;
            let qn = &saved.qn[blk * d * l..(blk + 1) * d * l];
            let kn = &saved.kn[blk * d * l..(blk + 1) * d * l];
            let attn = &saved.attn[blk * d * d..(blk + 1) * d * d];
            let gram = &saved.gram[blk * d * d..(blk + 1) * d * d];
            gather_head(g, b, l, c, c0, d, &mut go);
            gather_head(v.data(), b, l, c, c0, d, &mut vh);
            if let Some(dv) = grads.dv.as_deref_mut() {
                gemm(
                    Mat::new(attn, d, d).t(),
                    Mat::new(&go, d, l),
                    &mut buf,
                    false,
                );
                scatter_head_add(dv, b, l, c, c0, d, &buf);
            }
            gemm(Mat::new(&go, d, l), Mat::new(&vh, d, l).t(), &mut da, false);
            for i in 0..d {
                let ar = &attn[i * d..(i + 1) * d];
                let dar = &da[i * d..(i + 1) * d];
                let dot: T = ar.iter().zip(dar).map(|(&a, &x)| a * x).sum();
                for j in 0..d {
                    ds[i * d + j] = ar[j] * (dar[j] - dot);
                }
            }
            if let Some(dt) = grads.dt.as_deref_mut() {
                dt[hd] += ds.iter().zip(gram).map(|(&a, &b)| a * b).sum::<T>();
            }
            ds.iter_mut().for_each(|x| *x *= temp[hd]);
            let pairs: [(Option<&mut [T]>, &[T], &[T], &[T], bool); 2] = [
                (
                    grads.dq.as_deref_mut(),
                    kn,
                    qn,
                    &saved.rq[blk * d..(blk + 1) * d],
                    false,
                ),
                (
                    grads.dk.as_deref_mut(),
                    qn,
                    kn,
                    &saved.rk[blk * d..(blk + 1) * d],
                    true,
                ),
            ];
            for (dst, other, own, norms, transpose) in pairs {
                let Some(dst) = dst else { continue };
                // d(own_normalized) = dS · other  (or dSᵀ · other for keys)
                let dsm = if transpose {
                    Mat::new(&ds[..], d, d).t()
                } else {
                    Mat::new(&ds[..], d, d)
                };
                gemm(dsm, Mat::new(other, d, l), &mut buf, false);
                for i in 0..d {
                    let br = &mut buf[i * l..(i + 1) * l];
                    let orow = &own[i * l..(i + 1) * l];
                    let dot: T = br.iter().zip(orow).map(|(&a, &b)| a * b).sum();
                    let inv = T::one() / norms[i];
                    for p in 0..l {
                        br[p] = (br[p] - orow[p] * dot) * inv;
                    }
                }
                scatter_head_add(dst, b, l, c, c0, d, &buf);
            }
        }
    }
    Ok(())
}

/// Per-head channel attention maps `[N, heads, d, d]` for inspection.
pub fn attention_maps<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    temp: &[T],
    heads: usize,
) -> Result<Tensor<T>> {
    let (n, _, _, c) = q.nhwc()?;
    let (_, saved) = attention_forward(q, k, q, temp, heads)?;
    let d = c / heads;
    Tensor::new(&[n, heads, d, d], saved.attn)
}
