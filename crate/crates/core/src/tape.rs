//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs, so nodes are topologically ordered by construction. `backward`
//! walks the tape once from the root down to the first node.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;


use crate::attention::{attend_head, HeadView, KeySet, Pattern, WindowSpec};
use crate::error::{Error, Result};
use crate::grid::Grid3;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-compressed sparse linear map: `out[i] = sum_k w[k] * in[cols[k]]`
/// for `k` in `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
    pub in_len: usize,
}

impl SparseRows {
    /// Pure selection map: `out[i] = in[index[i]]`.
    pub fn select(index: &[usize], in_len: usize) -> Self {
        Self {
            offsets: (0..=index.len()).collect(),
            cols: index.to_vec(),
            weights: vec![1.0; index.len()],
            in_len,
        }
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.out_len())
            .map(|i| {
                (self.offsets[i]..self.offsets[i + 1])
                    .fold(0.0, |acc, k| acc + self.weights[k] * input[self.cols[k]])
            })
            .collect()
    }
}

/// Fixed (non-trainable) 2D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_channels x in_channels x size x size`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.size) / self.stride + 1,
            (w + 2 * self.pad - self.size) / self.stride + 1,
        )
    }

    /// Visits every `(out_index, in_index, weight)` tap.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
        let (oh, ow) = self.output_dims(h, w);
        let k = self.size;
        for co in 0..self.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (co * oh + oy) * ow + ox;
                    for ci in 0..self.in_channels {
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                let wi = ((co * self.in_channels + ci) * k + ky) * k + kx;
                                let ii = (ci * h + y as usize) * w + x as usize;
                                f(o, ii, self.weight[wi]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Convolution of a `in_channels x h x w` image.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for (co, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias[co]);
        }
        self.for_each_tap(h, w, |o, i, wt| out[o] += wt * input[i]);
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, n: usize, k: usize, m: usize },
    AddRow { a: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    LayerNorm { a: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: usize },
    Tanh { a: usize },
    Gather { a: usize, map: Arc<SparseRows> },
    Conv { a: usize, kernel: Arc<ConvKernel>, h: usize, w: usize },
    Attention(AttentionRecord),
    MseConst { a: usize, target: Vec<f64> },
    MaskedL1 { a: usize, b: usize, mask: Arc<Vec<bool>>, count: usize },
}

#[derive(Debug, Clone)]
struct AttentionRecord {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    head_dim: usize,
    grid: Grid3,
    patterns: Vec<Pattern>,
    spec: WindowSpec,
    /// Softmax weights per head, concatenated in query order.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Dynamic computation graph, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
}

/// Gradients of a scalar root with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    params: Vec<(usize, Var)>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of `var`; zero if the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        let g = &self.grads[var.0];
        if g.is_empty() {
            vec![0.0; self.lens[var.0]]
        } else {
            g.clone()
        }
    }

    /// Gradients of every registered parameter, indexed by parameter id.
    pub fn params(&self, count: usize) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); count];
        for &(id, var) in &self.params {
            if id < count {
                let g = self.wrt(var);
                if out[id].is_empty() {
                    out[id] = g;
                } else {
                    for (a, b) in out[id].iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        out
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = libm::tanh(u);
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Internal(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::dim("constant data does not match its shape"));
        }
        Ok(self.push(value, rows, cols, Op::Leaf))
    }

    /// Trainable leaf; its gradient is reported under parameter `id`.
    pub fn param(&mut self, id: usize, value: Vec<f64>, rows: usize, cols: usize) -> Result<Var> {
        let v = self.constant(value, rows, cols)?;
        self.params.push((id, v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                for (o, &y) in row.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(out, n, m, Op::MatMul { a: a.0, b: b.0, n, k, m }))
    }

    /// Adds a `1 x m` row to every row of an `n x m` node.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(bias) != (1, m) {
            return Err(Error::dim("bias must be a single row of matching width"));
        }
        let bv = &self.nodes[bias.0].value;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % m])
            .collect();
        Ok(self.push(out, n, m, Op::AddRow { a: a.0, bias: bias.0 }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, r, c, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(out, r, c, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, k) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(out, r, k, Op::Scale { a: a.0, c })
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.shape(a);
        if self.shape(gain) != (1, m) || self.shape(bias) != (1, m) {
            return Err(Error::dim("layer norm gain/bias must be 1 x width"));
        }
        let x = &self.nodes[a.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[i] = is;
            for j in 0..m {
                let xh = (row[j] - mean) * is;
                xhat[i * m + j] = xh;
                out[i * m + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            n,
            m,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| gelu(x).0).collect();
        self.push(out, r, c, Op::Gelu { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| libm::tanh(x)).collect();
        self.push(out, r, c, Op::Tanh { a: a.0 })
    }

    /// Fixed sparse linear map applied to the flattened node.
    pub fn gather(&mut self, a: Var, map: Arc<SparseRows>, rows: usize, cols: usize) -> Result<Var> {
        let len = self.nodes[a.0].value.len();
        if map.in_len != len || map.out_len() != rows * cols {
            return Err(Error::dim("sparse map does not fit its operand"));
        }
        let out = map.apply(&self.nodes[a.0].value);
        Ok(self.push(out, rows, cols, Op::Gather { a: a.0, map }))
    }

    /// Fixed convolution of a `C x (h * w)` node; result is `C' x (h' * w')`.
    pub fn conv(&mut self, a: Var, kernel: Arc<ConvKernel>, h: usize, w: usize) -> Result<Var> {
        if self.nodes[a.0].value.len() != kernel.in_channels * h * w {
            return Err(Error::dim("convolution input size mismatch"));
        }
        let (oh, ow) = kernel.output_dims(h, w);
        let out = kernel.forward(&self.nodes[a.0].value, h, w);
        let co = kernel.out_channels;
        Ok(self.push(out, co, oh * ow, Op::Conv { a: a.0, kernel, h, w }))
    }

    /// Multi-head attention. `q`, `k`, `v` are `S x (heads * d)`; head `h`
    /// uses columns `h * d .. (h + 1) * d` and the pattern `patterns[h]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        head_dim: usize,
        grid: Grid3,
        patterns: &[Pattern],
        spec: WindowSpec,
    ) -> Result<Var> {
        let heads = patterns.len();
        let width = heads * head_dim;
        let s = grid.tokens();
        for x in [q, k, v] {
            if self.shape(x) != (s, width) {
                return Err(Error::dim(format!(
                    "attention operand is {:?}, expected ({s}, {width})",
                    self.shape(x)
                )));
            }
        }
        let mut out = vec![0.0; s * width];
        let mut probs = Vec::with_capacity(heads);
        for (h, &pattern) in patterns.iter().enumerate() {
            let view = |x: Var| HeadView {
                data: &self.nodes[x.0].value[..],
                stride: width,
                offset: h * head_dim,
            };
            let mut p = Vec::new();
            attend_head(
                view(q),
                view(k),
                view(v),
                head_dim,
                &grid,
                pattern,
                Some(&spec),
                &mut out,
                width,
                h * head_dim,
                Some(&mut p),
            )?;
            probs.push(p);
        }
        Ok(self.push(
            out,
            s,
            width,
            Op::Attention(AttentionRecord {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                head_dim,
                grid,
                patterns: patterns.to_vec(),
                spec,
                probs,
            }),
        ))
    }

    /// `mean((a - target)^2)` as a `1 x 1` node.
    pub fn mse_const(&mut self, a: Var, target: Vec<f64>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.len() != target.len() || x.is_empty() {
            return Err(Error::dim("mse target length mismatch"));
        }
        let n = x.len() as f64;
        let v = x
            .iter()
            .zip(&target)
            .fold(0.0, |acc, (p, t)| acc + (p - t) * (p - t))
            / n;
        Ok(self.push(vec![v], 1, 1, Op::MseConst { a: a.0, target }))
    }

    /// Mean absolute difference over the elements where `mask` is set.
    pub fn masked_l1(&mut self, a: Var, b: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.same_shape(a, b)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if mask.len() != x.len() {
            return Err(Error::dim("l1 mask length mismatch"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::arg("l1 mask selects nothing"));
        }
        let sum = x
            .iter()
            .zip(y)
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .fold(0.0, |acc, ((p, q), _)| acc + (p - q).abs());
        Ok(self.push(
            vec![sum / count as f64],
            1,
            1,
            Op::MaskedL1 {
                a: a.0,
                b: b.0,
                mask,
                count,
            },
        ))
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(Error::Internal(format!(
                "backward needs a scalar root, got {}x{}",
                root_node.rows, root_node.cols
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![1.0];

        fn acc<'g>(grads: &'g mut [Vec<f64>], lens: &[usize], i: usize) -> &'g mut Vec<f64> {
            if grads[i].is_empty() {
                grads[i] = vec![0.0; lens[i]];
            }
            &mut grads[i]
        }

        for idx in (0..=root.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = core::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, n, k, m } => {
                    if a >= idx || b >= idx {
                        return Err(Error::Internal("tape order violated".into()));
                    }
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    {
                        let ga = acc(&mut grads, &lens, a);
                        for i in 0..n {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += g[i * m + j] * bv[p * m + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    let gb = acc(&mut grads, &lens, b);
                    for i in 0..n {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..m {
                                gb[p * m + j] += x * g[i * m + j];
                            }
                        }
                    }
                }
                &Op::AddRow { a, bias } => {
                    let m = node.cols;
                    {
                        let ga = acc(&mut grads, &lens, a);
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    let gb = acc(&mut grads, &lens, bias);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % m] += y;
                    }
                }
                &Op::Add { a, b } => {
                    acc(&mut grads, &lens, a).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    acc(&mut grads, &lens, b).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                &Op::Sub { a, b } => {
                    acc(&mut grads, &lens, a).iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    acc(&mut grads, &lens, b).iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
                &Op::Scale { a, c } => {
                    acc(&mut grads, &lens, a)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += c * y);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (n, m) = (node.rows, node.cols);
                    let gv = &self.nodes[*gain].value;
                    {
                        let ggain = acc(&mut grads, &lens, *gain);
                        for i in 0..n {
                            for j in 0..m {
                                ggain[j] += g[i * m + j] * xhat[i * m + j];
                            }
                        }
                    }
                    {
                        let gbias = acc(&mut grads, &lens, *bias);
                        for i in 0..n {
                            for j in 0..m {
                                gbias[j] += g[i * m + j];
                            }
                        }
                    }
                    let ga = acc(&mut grads, &lens, *a);
                    for i in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..m {
                            let d = g[i * m + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat[i * m + j];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for j in 0..m {
                            let d = g[i * m + j] * gv[j];
                            ga[i * m + j] += inv_std[i] * (d - mean_d - xhat[i * m + j] * mean_dx);
                        }
                    }
                }
                &Op::Gelu { a } => {
                    let x = &self.nodes[a].value;
                    let ga = acc(&mut grads, &lens, a);
                    for ((o, &xi), &gi) in ga.iter_mut().zip(x).zip(&g) {
                        *o += gelu(xi).1 * gi;
                    }
                }
                &Op::Tanh { a } => {
                    let ga = acc(&mut grads, &lens, a);
                    for ((o, &y), &gi) in ga.iter_mut().zip(&node.value).zip(&g) {
                        *o += (1.0 - y * y) * gi;
                    }
                }
                Op::Gather { a, map } => {
                    let ga = acc(&mut grads, &lens, *a);
                    for i in 0..map.out_len() {
                        for k in map.offsets[i]..map.offsets[i + 1] {
                            ga[map.cols[k]] += map.weights[k] * g[i];
                        }
                    }
                }
                Op::Conv { a, kernel, h, w } => {
                    let ga = acc(&mut grads, &lens, *a);
                    kernel.for_each_tap(*h, *w, |o, i, wt| ga[i] += wt * g[o]);
                }
                Op::Attention(rec) => self.attention_backward(rec, &g, &mut grads, &lens)?,
                Op::MseConst { a, target } => {
                    let x = &self.nodes[*a].value;
                    let scale = 2.0 * g[0] / x.len() as f64;
                    let ga = acc(&mut grads, &lens, *a);
                    for ((o, p), t) in ga.iter_mut().zip(x).zip(target) {
                        *o += scale * (p - t);
                    }
                }
                Op::MaskedL1 { a, b, mask, count } => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let scale = g[0] / *count as f64;
                    let sign: Vec<f64> = x
                        .iter()
                        .zip(y)
                        .zip(mask.iter())
                        .map(|((p, q), &m)| {
                            if !m || p == q {
                                0.0
                            } else if p > q {
                                scale
                            } else {
                                -scale
                            }
                        })
                        .collect();
                    acc(&mut grads, &lens, *a).iter_mut().zip(&sign).for_each(|(o, s)| *o += s);
                    acc(&mut grads, &lens, *b).iter_mut().zip(&sign).for_each(|(o, s)| *o -= s);
                }
            }
            grads[idx] = g;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            lens,
        })
    }

    fn attention_backward(
        &self,
        rec: &AttentionRecord,
        g: &[f64],
        grads: &mut [Vec<f64>],
        lens: &[usize],
    ) -> Result<()> {
        let d = rec.head_dim;
        let width = rec.heads * d;
        let s = rec.grid.tokens();
        let scale = 1.0 / libm::sqrt(d as f64);
        let (qv, kv, vv) = (
            &self.nodes[rec.q].value,
            &self.nodes[rec.k].value,
            &self.nodes[rec.v].value,
        );
        let mut gq = vec![0.0; s * width];
        let mut gk = vec![0.0; s * width];
        let mut gv = vec![0.0; s * width];
        let mut dp = Vec::new();
        for h in 0..rec.heads {
            let off = h * d;
            let probs = &rec.probs[h];
            let mut cursor = 0;
            for i in 0..s {
                let keys = KeySet::for_query(rec.patterns[h], Some(&rec.spec), &rec.grid, i)?;
                let p = &probs[cursor..cursor + keys.len()];
                cursor += keys.len();
                let go = &g[i * width + off..i * width + off + d];
                dp.clear();
                let mut dot_pdp = 0.0;
                for (j, &pj) in keys.iter().zip(p) {
                    let vj = &vv[j * width + off..j * width + off + d];
                    let dpj: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot_pdp += pj * dpj;
                    dp.push(dpj);
                    for (o, &x) in gv[j * width + off..j * width + off + d].iter_mut().zip(go) {
                        *o += pj * x;
                    }
                }
                for ((j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                    let ds = pj * (dpj - dot_pdp) * scale;
                    for c in 0..d {
                        gq[i * width + off + c] += ds * kv[j * width + off + c];
                        gk[j * width + off + c] += ds * qv[i * width + off + c];
                    }
                }
            }
        }
        for (target, src) in [(rec.q, gq), (rec.k, gk), (rec.v, gv)] {
            if grads[target].is_empty() {
                grads[target] = vec![0.0; lens[target]];
            }
            grads[target].iter_mut().zip(&src).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "tape-test", 0);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                (fp - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()) + 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn scalar_mse_matches_closed_form() {
        let xs = [0.5, -1.0, 2.0];
        let ys = [1.0, 0.2, 3.5];
        let w = 0.7;
        let mut t = Tape::new();
        let wv = t.param(0, vec![w], 1, 1).unwrap();
        let x = t.constant(xs.to_vec(), 1, 3).unwrap();
        let p = t.matmul(wv, x).unwrap();
        let l = t.mse_const(p, ys.to_vec()).unwrap();
        let g = t.backward(l).unwrap().params(1);
        let expected: f64 = 2.0 * xs.iter().zip(&ys).map(|(x, y)| x * (w * x - y)).sum::<f64>() / 3.0;
        assert!((g[0][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, vec![1.0, 2.0], 1, 2).unwrap();
        let c = t.constant(vec![3.0, 4.0], 1, 2).unwrap();
        let l = t.mse_const(c, vec![0.0, 0.0]).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(p), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let c = t.constant(vec![3.0, 4.0], 1, 2).unwrap();
        assert!(matches!(t.backward(c), Err(Error::Internal(_))));
        assert!(matches!(t.backward(Var(99)), Err(Error::Internal(_))));
    }

    #[test]
    fn layer_norm_gelu_gradients() {
        let x0 = random(12, 1);
        let gain = random(4, 2);
        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.param(0, x.to_vec(), 3, 4).unwrap();
            let g = t.param(1, gain.clone(), 1, 4).unwrap();
            let b = t.constant(vec![0.1, -0.2, 0.3, 0.0], 1, 4).unwrap();
            let y = t.layer_norm(a, g, b).unwrap();
            let y = t.gelu(y);
            let y = t.tanh(y);
            let l = t.mse_const(y, vec![0.2; 12]).unwrap();
            (t, l, a)
        };
        let (t, l, a) = f(&x0);
        let analytic = t.backward(l).unwrap().wrt(a);
        let numeric = numeric_grad(&x0, |x| {
            let (t, l, _) = f(x);
            t.scalar(l)
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn attention_gradients_all_patterns() {
        let grid = Grid3::new(2, 2, 3);
        let (heads, d) = (3, 2);
        let s = grid.tokens();
        let patterns = [Pattern::Global, Pattern::Intra, Pattern::Window];
        let spec = WindowSpec::new(1, 3, 1).unwrap();
        let x0 = random(3 * s * heads * d, 3);
        let target = random(s * heads * d, 4);
        let build = |x: &[f64]| {
            let n = s * heads * d;
            let mut t = Tape::new();
            let q = t.param(0, x[..n].to_vec(), s, heads * d).unwrap();
            let k = t.param(1, x[n..2 * n].to_vec(), s, heads * d).unwrap();
            let v = t.param(2, x[2 * n..].to_vec(), s, heads * d).unwrap();
            let o = t.attention(q, k, v, d, grid, &patterns, spec).unwrap();
            let l = t.mse_const(o, target.clone()).unwrap();
            (t, l)
        };
        let (t, l) = build(&x0);
        let analytic: Vec<f64> = t.backward(l).unwrap().params(3).concat();
        let numeric = numeric_grad(&x0, |x| {
            let (t, l) = build(x);
            t.scalar(l)
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn gather_conv_l1_gradients() {
        let kernel = Arc::new(ConvKernel {
            in_channels: 2,
            out_channels: 3,
            size: 3,
            stride: 2,
            pad: 1,
            weight: random(54, 5),
            bias: random(3, 6),
        });
        let map = Arc::new(SparseRows {
            offsets: vec![0, 2, 3, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31, 32, 33, 34],
            cols: (0..34).map(|i| (i * 7) % 32).collect(),
            weights: random(34, 7),
            in_len: 32,
        });
        let x0 = random(32, 8);
        let other = random(12, 9);
        let build = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.param(0, x.to_vec(), 2, 16).unwrap();
            let b = t.gather(a, map.clone(), 2, 16).unwrap();
            let c = t.conv(b, kernel.clone(), 4, 4).unwrap();
            let o = t.constant(other.clone(), 3, 4).unwrap();
            let sub = t.sub(c, o).unwrap();
            let sc = t.scale(sub, 1.5);
            let z = t.constant(vec![0.0; 12], 3, 4).unwrap();
            let mask = Arc::new((0..12).map(|i| i % 5 != 0).collect::<Vec<_>>());
            let l1 = t.masked_l1(sc, z, mask).unwrap();
            (t, l1)
        };
        let (t, l) = build(&x0);
        let analytic = t.backward(l).unwrap().params(1).concat();
        let numeric = numeric_grad(&x0, |x| {
            let (t, l) = build(x);
            t.scalar(l)
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], 2, 3).unwrap();
        let b = t.constant(vec![0.0; 6], 2, 3).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
        let c = t.constant(vec![0.0; 4], 2, 2).unwrap();
        assert!(matches!(t.add(a, c), Err(Error::Dimension(_))));
    }
}
