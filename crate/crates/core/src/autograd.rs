//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Named parameter
//! leaves are interned so their gradients can be collected by name after
//! [`Graph::backward`]. Leaves created with [`Graph::input`] or
//! [`Graph::constant`] receive gradients too but are never reported as
//! parameters.

use std::collections::BTreeMap;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Resize {
        x: Var,
    },
    Silu(Var),
    Gelu(Var),
    /// Logistic sigmoid clamped to `[eps, 1 - eps]`.
    Sigmoid {
        x: Var,
        eps: f64,
    },
    ConcatRows(Vec<Var>),
    MatMul(Var, Var),
    Transpose(Var),
    AddBias {
        x: Var,
        b: Var,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Patchify {
        x: Var,
        p: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    param_prefix: String,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Returns the leaf for a named parameter, creating it on first use.
    /// The name is interned with the current parameter prefix prepended.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let key = format!("{}{name}", self.param_prefix);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.params.insert(key, v);
        v
    }

    /// Prefix for parameters registered from now on, so two networks with
    /// the same parameter names can share one tape.
    pub fn set_param_prefix(&mut self, prefix: &str) {
        self.param_prefix = prefix.to_string();
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ---- operations ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape(), data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshaped(shape)
            .expect("reshape: element count mismatch");
        self.push(t, Op::Reshape(a))
    }

    /// Stride-1 convolution with replicate padding. `x: [C,H,W]`, `w: [O,C,k,k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d: input must be [C,H,W]");
        assert_eq!(ws, [ws[0], xs[0], k, k], "conv2d: weight shape");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let o = ws[0];
        let cols = im2col(self.value(x).data(), c, h, wd, k);
        let hw = h * wd;
        let mut out = vec![0.0; o * hw];
        let bias = self.value(b).data();
        for (oc, row) in out.chunks_mut(hw).enumerate() {
            row.fill(bias[oc]);
        }
        let ckk = c * k * k;
        gemm(
            o,
            ckk,
            hw,
            self.value(w).data(),
            (ckk, 1),
            &cols,
            (hw, 1),
            1.0,
            &mut out,
        );
        self.push(Tensor::new(&[o, h, wd], out), Op::Conv2d { x, w, b, k })
    }

    /// Non-overlapping `k x k` average pooling over `[C,H,W]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(
            h % k == 0 && w % k == 0,
            "avg_pool: {h}x{w} not divisible by {k}"
        );
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for di in 0..k {
                        let row = (ch * h + i * k + di) * w + j * k;
                        s += src[row..row + k].iter().sum::<f64>();
                    }
                    out[(ch * oh + i) * ow + j] = s * inv;
                }
            }
        }
        self.push(Tensor::new(&[c, oh, ow], out), Op::AvgPool { x, k })
    }

    /// Bilinear resize of `[C,H,W]` to `[C,oh,ow]` (half-pixel centers).
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = resize_bilinear(self.value(x), oh, ow);
        self.push(t, Op::Resize { x })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid_clamped(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x).map(|v| sigmoid(v).clamp(eps, 1.0 - eps));
        self.push(t, Op::Sigmoid { x, eps })
    }

    /// Concatenates along the leading axis (channels for `[C,H,W]`).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[1..], first[1..], "concat_rows: trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(Tensor::new(&shape, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul: inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(&[n, m], out), Op::Transpose(a))
    }

    /// Adds a `[n]` bias to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = dims2(self.shape(x));
        assert_eq!(self.shape(b), [n], "add_bias: bias shape");
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        self.push(Tensor::new(&[m, n], out), Op::AddBias { x, b })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(&[m, n], out), Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = dims2(self.shape(x));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let (mean, inv_std) = row_stats(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(Tensor::new(&[m, n], out), Op::LayerNorm { x, gamma, beta })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = dims2(self.shape(x));
        assert!(start + len <= n, "slice_cols: out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new(&[m, len], out), Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| dims2(self.shape(p)).1).collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            assert_eq!(self.shape(p)[0], m, "concat_cols: row mismatch");
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new(&[m, n], out), Op::ConcatCols(parts.to_vec()))
    }

    /// `[C,H,W]` -> `[(H/p)*(W/p), C*p*p]`, one row per non-overlapping patch
    /// in row-major grid order.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(
            h % p == 0 && w % p == 0,
            "patchify: {h}x{w} not divisible by {p}"
        );
        let (gh, gw) = (h / p, w / p);
        let src = self.value(x).data();
        let cols = c * p * p;
        let mut out = vec![0.0; gh * gw * cols];
        for gi in 0..gh {
            for gj in 0..gw {
                let row = (gi * gw + gj) * cols;
                for ch in 0..c {
                    for di in 0..p {
                        let s = (ch * h + gi * p + di) * w + gj * p;
                        let d = row + (ch * p + di) * p;
                        out[d..d + p].copy_from_slice(&src[s..s + p]);
                    }
                }
            }
        }
        self.push(Tensor::new(&[gh * gw, cols], out), Op::Patchify { x, p })
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates the given output cotangents through the whole tape.
    /// Gradients accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, seeds: &[(Var, Tensor)]) {
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Tensor>> = std::mem::take(&mut self.grads);
        // Gradients of earlier backward calls must not be propagated again.
        let mut fresh: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(*v), "backward: seed shape mismatch");
            accumulate(&mut fresh, *v, g.clone());
        }
        let top = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for i in (0..top).rev() {
            let Some(g) = fresh[i].take() else { continue };
            self.backprop_node(i, &g, &mut fresh);
            match &mut grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        self.grads = grads;
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every named parameter; untouched parameters report zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Tensor, out: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(out, *a, g.clone());
                accumulate(out, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |x, y| x * y);
                let gb = zip_map(g, va, |x, y| x * y);
                accumulate(out, *a, ga);
                accumulate(out, *b, gb);
            }
            Op::Scale(a, s) => accumulate(out, *a, g.map(|v| v * s)),
            Op::Reshape(a) => {
                let t = g.clone().reshaped(self.shape(*a)).expect("reshape grad");
                accumulate(out, *a, t);
            }
            Op::Conv2d { x, w, b, k } => {
                let xs = self.shape(*x);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let o = self.shape(*w)[0];
                let hw = h * wd;
                let ckk = c * k * k;
                let gd = g.data();
                let gb: Vec<f64> = gd.chunks(hw).map(|r| r.iter().sum()).collect();
                let cols = im2col(self.value(*x).data(), c, h, wd, *k);
                let mut gw = vec![0.0; o * ckk];
                // dW = dY (o x hw) * cols^T (hw x ckk)
                gemm(o, hw, ckk, gd, (hw, 1), &cols, (1, hw), 0.0, &mut gw);
                // dcols = W^T (ckk x o) * dY (o x hw)
                let mut gcols = vec![0.0; ckk * hw];
                gemm(
                    ckk,
                    o,
                    hw,
                    self.value(*w).data(),
                    (1, ckk),
                    gd,
                    (hw, 1),
                    0.0,
                    &mut gcols,
                );
                let gx = col2im(&gcols, c, h, wd, *k);
                accumulate(out, *x, Tensor::new(xs, gx));
                accumulate(out, *w, Tensor::new(self.shape(*w), gw));
                accumulate(out, *b, Tensor::new(&[o], gb));
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; c * h * w];
                let gd = g.data();
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(ch * h + y) * w + xx] = gd[(ch * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                accumulate(out, *x, Tensor::new(xs, gx));
            }
            Op::Resize { x } => {
                let xs = self.shape(*x);
                let gx = resize_bilinear_backward(g, xs[1], xs[2]);
                accumulate(out, *x, gx);
            }
            Op::Silu(x) => {
                let gx = zip_map(g, self.value(*x), |gy, v| {
                    let s = sigmoid(v);
                    gy * s * (1.0 + v * (1.0 - s))
                });
                accumulate(out, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = zip_map(g, self.value(*x), |gy, v| gy * gelu_parts(v).1);
                accumulate(out, *x, gx);
            }
            Op::Sigmoid { x, eps } => {
                let y = &node.value;
                let lo = *eps;
                let hi = 1.0 - eps;
                let gx = zip_map(g, y, |gy, s| {
                    if s <= lo || s >= hi {
                        0.0
                    } else {
                        gy * s * (1.0 - s)
                    }
                });
                accumulate(out, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let t = Tensor::new(self.shape(p), g.data()[off..off + n].to_vec());
                    accumulate(out, p, t);
                    off += n;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let mut ga = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    (n, 1),
                    self.value(*b).data(),
                    (1, n),
                    0.0,
                    &mut ga,
                );
                let mut gb = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    self.value(*a).data(),
                    (1, k),
                    g.data(),
                    (n, 1),
                    0.0,
                    &mut gb,
                );
                accumulate(out, *a, Tensor::new(&[m, k], ga));
                accumulate(out, *b, Tensor::new(&[k, n], gb));
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(g.shape());
                let src = g.data();
                let mut t = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        t[c * m + r] = src[r * n + c];
                    }
                }
                accumulate(out, *a, Tensor::new(&[n, m], t));
            }
            Op::AddBias { x, b } => {
                let n = self.shape(*b)[0];
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(out, *x, g.clone());
                accumulate(out, *b, Tensor::new(&[n], gb));
            }
            Op::SoftmaxRows(x) => {
                let (_, n) = dims2(g.shape());
                let mut gx = vec![0.0; g.len()];
                for ((dst, gy), y) in gx
                    .chunks_mut(n)
                    .zip(g.data().chunks(n))
                    .zip(node.value.data().chunks(n))
                {
                    let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = y[j] * (gy[j] - dot);
                    }
                }
                accumulate(out, *x, Tensor::new(g.shape(), gx));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = dims2(g.shape());
                let gam = self.value(*gamma).data();
                let xv = self.value(*x).data();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let (mean, inv_std) = row_stats(row);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = gy[j] * gam[j];
                        gg[j] += gy[j] * xhat[j];
                        gbeta[j] += gy[j];
                    }
                    let mean_d: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                accumulate(out, *x, Tensor::new(&[m, n], gx));
                accumulate(out, *gamma, Tensor::new(&[n], gg));
                accumulate(out, *beta, Tensor::new(&[n], gbeta));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(self.shape(*x));
                let len = g.shape()[1];
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                accumulate(out, *x, Tensor::new(&[m, n], gx));
            }
            Op::ConcatCols(parts) => {
                let (m, n) = dims2(g.shape());
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut t = Vec::with_capacity(m * w);
                    for i in 0..m {
                        t.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                    }
                    accumulate(out, p, Tensor::new(&[m, w], t));
                    off += w;
                }
            }
            Op::Patchify { x, p } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (gh, gw) = (h / p, w / p);
                let cols = c * p * p;
                let gd = g.data();
                let mut gx = vec![0.0; c * h * w];
                for gi in 0..gh {
                    for gj in 0..gw {
                        let row = (gi * gw + gj) * cols;
                        for ch in 0..c {
                            for di in 0..*p {
                                let d = (ch * h + gi * p + di) * w + gj * p;
                                let s = row + (ch * p + di) * p;
                                gx[d..d + p].copy_from_slice(&gd[s..s + p]);
                            }
                        }
                    }
                }
                accumulate(out, *x, Tensor::new(xs, gx));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

fn dims2(s: &[usize]) -> (usize, usize) {
    assert_eq!(s.len(), 2, "expected a matrix, got shape {s:?}");
    (s[0], s[1])
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// tanh-approximated GELU and its derivative.
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// Source index of tap offset `d` at position `i`, replicating the border.
fn clamp_tap(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let src = (ch * h + clamp_tap(y, ki as isize - pad, h)) * w;
                    let dst = row + y * w;
                    for xx in 0..w {
                        cols[dst + xx] = x[src + clamp_tap(xx, dx, w)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let dst = (ch * h + clamp_tap(y, ki as isize - pad, h)) * w;
                    let src = row + y * w;
                    for xx in 0..w {
                        x[dst + clamp_tap(xx, dx, w)] += cols[src + xx];
                    }
                }
            }
        }
    }
    x
}

/// Per-axis source indices and weights for half-pixel bilinear sampling.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = pos - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resize of a `[C,H,W]` tensor with half-pixel centers and edge clamping.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let a = src[base + y0 * w + x0];
                let b = src[base + y0 * w + x1];
                let cc = src[base + y1 * w + x0];
                let d = src[base + y1 * w + x1];
                let top = a + (b - a) * wx;
                let bot = cc + (d - cc) * wx;
                out[(ch * oh + i) * ow + j] = top + (bot - top) * wy;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

fn resize_bilinear_backward(g: &Tensor, h: usize, w: usize) -> Tensor {
    let s = g.shape();
    let (c, oh, ow) = (s[0], s[1], s[2]);
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let gd = g.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = gd[(ch * oh + i) * ow + j];
                gx[base + y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                gx[base + y0 * w + x1] += v * (1.0 - wy) * wx;
                gx[base + y1 * w + x0] += v * wy * (1.0 - wx);
                gx[base + y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}
