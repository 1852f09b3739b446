//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value and enough context for
//! the backward rule. Nodes are only ever appended, so the node order is a
//! topological order and backward is a single reverse sweep.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Value written into attention scores above the diagonal.
pub const MASK_VALUE: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding used by [`Tape::conv1d_time`] along the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvPadding {
    /// Output `t` sees inputs `t-k+1 ..= t`; missing inputs are zero.
    #[default]
    Causal,
    /// Centred window that wraps around the series ends.
    Circular,
    /// Centred window with zeros outside the series.
    Zero,
}

impl ConvPadding {
    fn source(self, t: usize, tap: usize, k: usize, len: usize) -> Option<usize> {
        match self {
            ConvPadding::Causal => (t + tap).checked_sub(k - 1),
            ConvPadding::Circular => {
                let half = (k - 1) / 2;
                Some((t + tap + len * k - half) % len)
            }
            ConvPadding::Zero => {
                let half = (k - 1) / 2;
                (t + tap).checked_sub(half).filter(|&s| s < len)
            }
        }
    }

    /// Maximal runs `(t0, src0, n)` where outputs `t0..t0+n` read inputs
    /// `src0..src0+n` through `tap`.
    fn segments(self, tap: usize, k: usize, len: usize) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for t in 0..len {
            let Some(src) = self.source(t, tap, k, len) else {
                continue;
            };
            match out.last_mut() {
                Some((t0, s0, n)) if *t0 + *n == t && *s0 + *n == src => *n += 1,
                _ => out.push((t, src, 1)),
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    TransposeLast2(Var),
    SplitHeads { x: Var, heads: usize, groups: usize },
    MergeHeads { x: Var, groups: usize },
    SumGroups(Var, usize),
    Softmax(Var),
    MaskedFill(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        padding: ConvPadding,
        groups: usize,
    },
    Embedding {
        table: Var,
        index: usize,
    },
    Gather {
        tables: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    GatherRows(Var, Vec<usize>),
    Mse(Var, Var),
    SumAxis0(Var),
    Stack(Vec<Var>),
    Select(Var, usize),
    Reshape(Var),
    BlockReduce {
        x: Var,
        ratio: usize,
        mean: bool,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a dynamic computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// `c += a · b` for row-major `c [m, n]` with arbitrary strides on `a [m, k]`
/// and `b [k, n]`, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |(r, col): (usize, usize), rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * col;
    assert!(last(a_strides, m, k) < a.len() && last(b_strides, k, n) < b.len() && m * n <= c.len());
    // SAFETY: the assertion bounds every element the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn batch_of(shape: &[usize]) -> &[usize] {
    &shape[..shape.len() - 2]
}

/// Trailing-suffix broadcast: `b` must be a single element or match the
/// trailing extents of `a`.
fn broadcast_len(a: &[usize], b: &[usize], op: &'static str) -> Result<usize> {
    let bn: usize = b.iter().product();
    if bn == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b) {
        Ok(bn)
    } else {
        Err(Error::dims(op, a, b))
    }
}

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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`]. Leaves that require a
    /// gradient always have one after backward, zero when unreached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bn = broadcast_len(av.shape(), bv.shape(), op)?;
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, make(a, b), &[a, b]))
    }

    /// Elementwise `a + b`, with `b` broadcast over leading extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Batched matrix product over the last two extents. Either operand may
    /// be a plain matrix, which is then repeated across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (batch_of(&sa), batch_of(&sb));
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let batch_shape = if ba.is_empty() { bb } else { ba };
        let batches: usize = batch_shape.iter().product();
        let (step_a, step_b) = (
            if ba.is_empty() { 0 } else { m * k },
            if bb.is_empty() { 0 } else { k * n },
        );
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batches * m * n];
        for bi in 0..batches {
            let a_blk = &ad[bi * step_a..bi * step_a + m * k];
            let b_blk = &bd[bi * step_b..bi * step_b + k * n];
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            gemm(m, k, n, a_blk, (k, 1), b_blk, (n, 1), o_blk);
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · W + b` over the last extent.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != ws.first() || self.shape(b) != [ws[1]] {
            return Err(Error::dims("linear", &xs, &ws));
        }
        // A rank-1 input is treated as a single row.
        let (x2, squeeze) = if xs.len() == 1 {
            (self.reshape(x, vec![1, xs[0]])?, true)
        } else {
            (x, false)
        };
        let y = self.matmul(x2, w)?;
        let y = self.add(y, b)?;
        if squeeze {
            self.reshape(y, vec![ws[1]])
        } else {
            Ok(y)
        }
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dims("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = s.iter().product::<usize>() / (r * c);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batches {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = d[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::TransposeLast2(x), &[x]))
    }

    /// `[T, heads*dk] -> [heads, T, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.split_heads_grouped(x, heads, 1)
    }

    /// `[G*T, heads*dk] -> [G*heads, T, dk]`: independent attention groups of
    /// `T` consecutive rows each.
    pub fn split_heads_grouped(&mut self, x: Var, heads: usize, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) || groups == 0 || !s[0].is_multiple_of(groups) {
            return Err(Error::dims("split_heads", &s, &[groups, heads]));
        }
        let (t, d) = (s[0] / groups, s[1]);
        let dk = d / heads;
        let xd = self.value(x).data();
        let mut out = vec![0.0; s[0] * d];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..t {
                    let o = ((g * heads + h) * t + i) * dk;
                    let src = (g * t + i) * d + h * dk;
                    out[o..o + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![groups * heads, t, dk], out)?;
        Ok(self.push(value, Op::SplitHeads { x, heads, groups }, &[x]))
    }

    /// `[heads, T, dk] -> [T, heads*dk]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        self.merge_heads_grouped(x, 1)
    }

    /// Inverse of [`Tape::split_heads_grouped`].
    pub fn merge_heads_grouped(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || groups == 0 || !s[0].is_multiple_of(groups) {
            return Err(Error::dims("merge_heads", &s, &[groups]));
        }
        let (heads, t, dk) = (s[0] / groups, s[1], s[2]);
        let d = heads * dk;
        let xd = self.value(x).data();
        let mut out = vec![0.0; groups * t * d];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..t {
                    let src = ((g * heads + h) * t + i) * dk;
                    let o = (g * t + i) * d + h * dk;
                    out[o..o + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let value = Tensor::new(vec![groups * t, d], out)?;
        Ok(self.push(value, Op::MergeHeads { x, groups }, &[x]))
    }

    /// Sums consecutive runs of `size` rows: `[G*size, d] -> [G, d]`.
    pub fn sum_groups(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || size == 0 || !s[0].is_multiple_of(size) {
            return Err(Error::dims("sum_groups", &s, &[size]));
        }
        let d = s[1];
        let groups = s[0] / size;
        let xd = self.value(x).data();
        let mut out = vec![0.0; groups * d];
        for (r, row) in xd.chunks(d).enumerate() {
            for (o, v) in out[(r / size) * d..(r / size + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![groups, d], out)?;
        Ok(self.push(value, Op::SumGroups(x, size), &[x]))
    }

    /// Softmax over the last extent with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("rank >= 1");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Writes [`MASK_VALUE`] into every `(i, j)` with `j > i` of the trailing
    /// square block.
    pub fn masked_fill(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s.len();
        if n < 2 || s[n - 1] != s[n - 2] {
            return Err(Error::dims("masked_fill", &s, &[]));
        }
        let t = s[n - 1];
        let mut out = self.value(x).data().to_vec();
        for blk in out.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut blk[i * t + i + 1..(i + 1) * t] {
                    *v = MASK_VALUE;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::MaskedFill(x), &[x]))
    }

    /// Normalizes each row of the last extent (eps = 1e-5) then applies
    /// `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dims("layer_norm", &s, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Convolution along time: `x [T, c_in]`, `kernel [k, c_in, c_out]`,
    /// `bias [c_out]`, output `[T, c_out]`. `k` must be odd.
    pub fn conv1d_time(&mut self, x: Var, kernel: Var, bias: Var, padding: ConvPadding) -> Result<Var> {
        self.conv1d_time_grouped(x, kernel, bias, padding, 1)
    }

    /// [`Tape::conv1d_time`] applied independently to `groups` series of
    /// equal length stacked as `[G*T, c_in]`.
    pub fn conv1d_time_grouped(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        padding: ConvPadding,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[0].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv1d kernel must be [k, c_in, c_out] with odd k, got {ks:?}"
            )));
        }
        let (k, cin, cout) = (ks[0], ks[1], ks[2]);
        if xs.len() != 2 || xs[1] != cin || self.shape(bias) != [cout] || groups == 0 || !xs[0].is_multiple_of(groups) {
            return Err(Error::dims("conv1d_time", &xs, &ks));
        }
        let t_len = xs[0] / groups;
        let (xd, kd, bd) = (
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let mut out: Vec<f64> = bd.iter().copied().cycle().take(xs[0] * cout).collect();
        for tap in 0..k {
            let ktap = &kd[tap * cin * cout..(tap + 1) * cin * cout];
            for (t0, s0, n) in padding.segments(tap, k, t_len) {
                for grp in 0..groups {
                    let base = grp * t_len;
                    let xa = &xd[(base + s0) * cin..(base + s0 + n) * cin];
                    let o = &mut out[(base + t0) * cout..(base + t0 + n) * cout];
                    gemm(n, cin, cout, xa, (cin, 1), ktap, (cout, 1), o);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], cout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                padding,
                groups,
            },
            &[x, kernel, bias],
        ))
    }

    /// Copies row `index` of `table [V, d]`.
    pub fn embedding_lookup(&mut self, table: Var, index: usize, feature: &str) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dims("embedding_lookup", &s, &[]));
        }
        if index >= s[0] {
            return Err(Error::Index {
                feature: feature.to_string(),
                index,
                size: s[0],
            });
        }
        let row = self.value(table).row(index).to_vec();
        let value = Tensor::new(vec![s[1]], row)?;
        Ok(self.push(value, Op::Embedding { table, index }, &[table]))
    }

    /// Stacks rows picked from several tables: output row `i` is row
    /// `picks[i].1` of `tables[picks[i].0]`. `names` label the tables in
    /// index errors.
    pub fn embedding_gather(&mut self, tables: &[Var], picks: &[(usize, usize)], names: &[&str]) -> Result<Var> {
        let d = match tables.first() {
            Some(&t) if self.shape(t).len() == 2 => self.shape(t)[1],
            _ => return Err(Error::Usage("embedding_gather needs rank-2 tables".into())),
        };
        for &t in tables {
            if self.shape(t).len() != 2 || self.shape(t)[1] != d {
                return Err(Error::dims("embedding_gather", self.shape(tables[0]), self.shape(t)));
            }
        }
        if picks.is_empty() {
            return Err(Error::Usage("embedding_gather of nothing".into()));
        }
        let mut data = Vec::with_capacity(picks.len() * d);
        for &(ti, row) in picks {
            let table = *tables.get(ti).ok_or_else(|| Error::Index {
                feature: "table".into(),
                index: ti,
                size: tables.len(),
            })?;
            let size = self.shape(table)[0];
            if row >= size {
                return Err(Error::Index {
                    feature: names.get(ti).copied().unwrap_or("table").to_string(),
                    index: row,
                    size,
                });
            }
            data.extend_from_slice(self.value(table).row(row));
        }
        let value = Tensor::new(vec![picks.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                tables: tables.to_vec(),
                picks: picks.to_vec(),
            },
            tables,
        ))
    }

    /// Rows `indices` of a rank-2 `x`, in order, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::dims("gather_rows", &s, &[indices.len()]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::Index {
                    feature: "row".into(),
                    index: i,
                    size: s[0],
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![indices.len(), s[1]], data)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    /// Mean squared difference as a one-element tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dims("mse_loss", p.shape(), t.shape()));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), &[pred, target]))
    }

    /// Sums over the leading extent: `[n, ..rest] -> [..rest]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dims("sum_axis0", &s, &[]));
        }
        let inner: usize = s[1..].iter().product();
        let mut out = vec![0.0; inner];
        for chunk in self.value(x).data().chunks(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let value = Tensor::new(s[1..].to_vec(), out)?;
        Ok(self.push(value, Op::SumAxis0(x), &[x]))
    }

    /// Stacks equally shaped tensors along a new leading extent.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("stack of nothing".into()))?;
        let s = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(s.iter().product::<usize>() * items.len());
        for &v in items {
            if self.shape(v) != s.as_slice() {
                return Err(Error::dims("stack", &s, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![items.len()];
        shape.extend(&s);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(items.to_vec()), items))
    }

    /// Slice `i` of the leading extent: `[n, ..rest] -> [..rest]`.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || i >= s[0] {
            return Err(Error::Index {
                feature: "select".into(),
                index: i,
                size: s.first().copied().unwrap_or(0),
            });
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[i * inner..(i + 1) * inner].to_vec();
        let value = Tensor::new(s[1..].to_vec(), data)?;
        Ok(self.push(value, Op::Select(x, i), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reduces consecutive blocks of `ratio` entries along the last extent
    /// by mean or sum.
    pub fn block_reduce(&mut self, x: Var, ratio: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        if ratio == 0 || !n.is_multiple_of(ratio) {
            return Err(Error::dims("block_reduce", &s, &[ratio]));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(ratio)
            .map(|c| {
                let s = c.iter().sum::<f64>();
                if mean {
                    s / ratio as f64
                } else {
                    s
                }
            })
            .collect();
        let mut shape = s.clone();
        *shape.last_mut().unwrap() = n / ratio;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BlockReduce { x, ratio, mean }, &[x]))
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() && matches!(node.op, Op::Leaf) {
                *g = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(grads, *a, &mut |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    let bn = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bn] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                acc(grads, *a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % bn];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % bn] += y * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                acc(grads, *a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] / bv[i % bn];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        let d = bv[i % bn];
                        gb[i % bn] -= y * av[i] / (d * d);
                    }
                });
            }
            Op::Scale(x, c) => acc(grads, *x, &mut |gx| {
                for (v, y) in gx.iter_mut().zip(g) {
                    *v += c * y;
                }
            }),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(grads, *x, &mut |gx| {
                    for (bi, blk) in gx.chunks_mut(r * c).enumerate() {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                blk[i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads, groups } => {
                let s = self.shape(*x);
                let (t, d) = (s[0] / groups, s[1]);
                let dk = d / heads;
                acc(grads, *x, &mut |gx| {
                    for gi in 0..*groups {
                        for h in 0..*heads {
                            for i in 0..t {
                                let o = ((gi * heads + h) * t + i) * dk;
                                let src = (gi * t + i) * d + h * dk;
                                for c in 0..dk {
                                    gx[src + c] += g[o + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, groups } => {
                let s = self.shape(*x);
                let (heads, t, dk) = (s[0] / groups, s[1], s[2]);
                let d = heads * dk;
                acc(grads, *x, &mut |gx| {
                    for gi in 0..*groups {
                        for h in 0..heads {
                            for i in 0..t {
                                let src = ((gi * heads + h) * t + i) * dk;
                                let o = (gi * t + i) * d + h * dk;
                                for c in 0..dk {
                                    gx[src + c] += g[o + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::SumGroups(x, size) => {
                let d = *node.value.shape().last().unwrap();
                acc(grads, *x, &mut |gx| {
                    for (r, row) in gx.chunks_mut(d).enumerate() {
                        for (a, y) in row.iter_mut().zip(&g[(r / size) * d..(r / size + 1) * d]) {
                            *a += y;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                acc(grads, *x, &mut |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MaskedFill(x) => {
                let t = *node.value.shape().last().unwrap();
                acc(grads, *x, &mut |gx| {
                    for (bi, blk) in gx.chunks_mut(t * t).enumerate() {
                        for i in 0..t {
                            for j in 0..=i {
                                blk[i * t + j] += g[bi * t * t + i * t + j];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let d = gv.len();
                acc(grads, *gamma, &mut |gg| {
                    for (i, y) in g.iter().enumerate() {
                        gg[i % d] += y * xhat[i];
                    }
                });
                acc(grads, *beta, &mut |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                });
                acc(grads, *x, &mut |gx| {
                    let nd = d as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += is / nd * (nd * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                padding,
                groups,
            } => {
                let ks = self.shape(*kernel);
                let (k, cin, cout) = (ks[0], ks[1], ks[2]);
                let t_len = self.shape(*x)[0] / groups;
                let (xd, kd) = (self.value(*x).data(), self.value(*kernel).data());
                acc(grads, *bias, &mut |gb| {
                    for row in g.chunks(cout) {
                        for (b, y) in gb.iter_mut().zip(row) {
                            *b += y;
                        }
                    }
                });
                let segs: Vec<_> = (0..k).map(|tap| padding.segments(tap, k, t_len)).collect();
                acc(grads, *kernel, &mut |gk| {
                    for (tap, tsegs) in segs.iter().enumerate() {
                        let gtap = &mut gk[tap * cin * cout..(tap + 1) * cin * cout];
                        for &(t0, s0, n) in tsegs {
                            for grp in 0..*groups {
                                let base = grp * t_len;
                                let xa = &xd[(base + s0) * cin..(base + s0 + n) * cin];
                                let ga = &g[(base + t0) * cout..(base + t0 + n) * cout];
                                gemm(cin, n, cout, xa, (1, cin), ga, (cout, 1), gtap);
                            }
                        }
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for (tap, tsegs) in segs.iter().enumerate() {
                        let ktap = &kd[tap * cin * cout..(tap + 1) * cin * cout];
                        for &(t0, s0, n) in tsegs {
                            for grp in 0..*groups {
                                let base = grp * t_len;
                                let ga = &g[(base + t0) * cout..(base + t0 + n) * cout];
                                let gxa = &mut gx[(base + s0) * cin..(base + s0 + n) * cin];
                                gemm(n, cout, cin, ga, (cout, 1), ktap, (1, cout), gxa);
                            }
                        }
                    }
                });
            }
            Op::Gather { tables, picks } => {
                let d = self.shape(tables[0])[1];
                for (ti, &table) in tables.iter().enumerate() {
                    acc(grads, table, &mut |gt| {
                        for (i, &(pt, row)) in picks.iter().enumerate() {
                            if pt == ti {
                                for (t, y) in gt[row * d..(row + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                    *t += y;
                                }
                            }
                        }
                    });
                }
            }
            Op::GatherRows(x, indices) => {
                let d = self.shape(*x)[1];
                acc(grads, *x, &mut |gx| {
                    for (i, &row) in indices.iter().enumerate() {
                        for (t, y) in gx[row * d..(row + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *t += y;
                        }
                    }
                });
            }
            Op::Embedding { table, index } => {
                let d = g.len();
                acc(grads, *table, &mut |gt| {
                    for (t, y) in gt[index * d..(index + 1) * d].iter_mut().zip(g) {
                        *t += y;
                    }
                });
            }
            Op::Mse(pred, target) => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * g[0] / p.len() as f64;
                acc(grads, *pred, &mut |gp| {
                    for i in 0..p.len() {
                        gp[i] += scale * (p[i] - t[i]);
                    }
                });
                acc(grads, *target, &mut |gt| {
                    for i in 0..p.len() {
                        gt[i] -= scale * (p[i] - t[i]);
                    }
                });
            }
            Op::SumAxis0(x) => acc(grads, *x, &mut |gx| {
                for chunk in gx.chunks_mut(g.len()) {
                    for (v, y) in chunk.iter_mut().zip(g) {
                        *v += y;
                    }
                }
            }),
            Op::Stack(items) => {
                let inner = g.len() / items.len();
                for (i, v) in items.iter().enumerate() {
                    acc(grads, *v, &mut |gv| {
                        for (a, y) in gv.iter_mut().zip(&g[i * inner..(i + 1) * inner]) {
                            *a += y;
                        }
                    });
                }
            }
            Op::Select(x, i) => acc(grads, *x, &mut |gx| {
                let inner = g.len();
                for (a, y) in gx[i * inner..(i + 1) * inner].iter_mut().zip(g) {
                    *a += y;
                }
            }),
            Op::Reshape(x) => acc(grads, *x, &mut |gx| {
                for (a, y) in gx.iter_mut().zip(g) {
                    *a += y;
                }
            }),
            Op::BlockReduce { x, ratio, mean } => {
                let scale = if *mean { 1.0 / *ratio as f64 } else { 1.0 };
                acc(grads, *x, &mut |gx| {
                    for (i, a) in gx.iter_mut().enumerate() {
                        *a += g[i / ratio] * scale;
                    }
                });
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let batches = g.len() / (m * n);
        let step_a = if sa.len() == 2 { 0 } else { m * k };
        let step_b = if sb.len() == 2 { 0 } else { k * n };
        if self.nodes[a.0].requires_grad {
            let ga = grads[a.0].get_or_insert_with(|| vec![0.0; ad.len()]);
            for bi in 0..batches {
                let b_blk = &bd[bi * step_b..bi * step_b + k * n];
                let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                gemm(m, n, k, g_blk, (n, 1), b_blk, (1, n), &mut ga[bi * step_a..bi * step_a + m * k]);
            }
        }
        if self.nodes[b.0].requires_grad {
            let gb = grads[b.0].get_or_insert_with(|| vec![0.0; bd.len()]);
            for bi in 0..batches {
                let a_blk = &ad[bi * step_a..bi * step_a + m * k];
                let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                gemm(k, m, n, a_blk, (1, k), g_blk, (n, 1), &mut gb[bi * step_b..bi * step_b + k * n]);
            }
        }
    }
}
