use super::tape::{Op, Tape, Var};
use super::{axis_split, gemm, transpose_buf, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

/// Returns `true` when `small` can be repeated over the leading extents of
/// `big`: `small` with leading ones removed must equal a suffix of `big`.
fn broadcastable(big: &[usize], small: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let core = &small[first..];
    core.len() <= big.len() && big[big.len() - core.len()..] == *core
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

impl Tape {
    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = tensor(t.shape().to_vec(), data);
        self.push(out, op, &[x])
    }

    /// Orders two operands as (big, small) for a broadcasting binary op.
    fn broadcast_order(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((a, b));
        }
        let (big, small) = if self.value(a).numel() >= self.value(b).numel() {
            (a, b)
        } else {
            (b, a)
        };
        if broadcastable(self.shape(big), self.shape(small)) {
            Ok((big, small))
        } else {
            Err(Error::dim(op, sa, sb))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (big, small) = self.broadcast_order(op, a, b)?;
        let bt = self.value(big);
        let sd = self.value(small).data();
        let n = sd.len();
        let data = bt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, sd[i % n]))
            .collect();
        let out = tensor(bt.shape().to_vec(), data);
        let node = if op == "add" {
            Op::Add(big, small)
        } else {
            Op::Mul(big, small)
        };
        Ok(self.push(out, node, &[big, small]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.data(a), self.data(b), m, k, n);
        Ok(self.push(tensor(vec![m, n], data), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Axis { op: "transpose", axis: 1, rank: s.len() });
        }
        let (m, n) = (s[0], s[1]);
        let data = transpose_buf(self.data(x), m, n);
        Ok(self.push(tensor(vec![n, m], data), Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// `min(x, hi)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&mut self, x: Var, hi: f64) -> Var {
        self.unary(x, Op::ClampMax(x, hi), |v| v.min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { op: "reduce", axis, rank: shape.len() });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(tensor(oshape, out), op, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        Ok(self.push(tensor(shape, out), Op::Softmax(x, axis), &[x]))
    }

    /// Row softmax of a 2-D tensor over the entries where `visible` is set.
    /// Hidden entries come out as exactly zero.
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || visible.len() != shape[0] * shape[1] {
            return Err(Error::dim("masked_softmax", &shape, &[visible.len()]));
        }
        let (m, n) = (shape[0], shape[1]);
        let d = self.data(x);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            let vis = &visible[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(vis)
                .filter(|(_, &v)| v)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("attention row {r} has no visible key")));
            }
            let mut z = 0.0;
            for j in 0..n {
                if vis[j] {
                    let e = (row[j] - max).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        Ok(self.push(tensor(shape, out), Op::MaskedSoftmax(x), &[x]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(Error::Axis { op: "log_softmax", axis: 0, rank: 0 })?;
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for (row, orow) in d.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.push(tensor(shape, out), Op::LogSoftmax(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        Ok(self.push(tensor(oshape, out), Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis { op: "narrow", axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(tensor(oshape, out), Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let out = tensor(shape.to_vec(), t.data().to_vec());
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Row lookup `table[ids]`; the adjoint scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(Error::dim("gather_rows", &shape, &[ids.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of range for {rows} rows")));
        }
        let d = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(tensor(vec![ids.len(), cols], out), Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Multiplies row `i` of `x[m×n]` by `s[i]` (`s` has `m` elements).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.value(s).numel() != shape[0] {
            return Err(Error::dim("row_scale", &shape, self.shape(s)));
        }
        let n = shape[1];
        let sd = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / n])
            .collect();
        Ok(self.push(tensor(shape, data), Op::RowScale(x, s), &[x, s]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(Error::Axis { op: "layer_norm", axis: 0, rank: 0 })?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let d = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = d.len() / n;
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        Ok(self.push(tensor(shape, out), op, &[x, gamma, beta]))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(Error::Axis { op: "l2_normalize", axis: 0, rank: 0 })?;
        let d = self.data(x);
        let mut norms = Vec::with_capacity(d.len() / n);
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(n) {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(nr);
            out.extend(row.iter().map(|v| v / nr));
        }
        Ok(self.push(tensor(shape, out), Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(tensor(shape, mask));
        self.mul(x, m)
    }

    pub(crate) fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_buf(self.data(*b), k, n);
                    self.accumulate(adj, *a, gemm(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose_buf(self.data(*a), m, k);
                    self.accumulate(adj, *b, gemm(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                self.accumulate(adj, *x, transpose_buf(g, s[1], s[0]));
            }
            Op::Add(big, small) => {
                self.accumulate(adj, *big, g.to_vec());
                let n = self.value(*small).numel();
                let mut gs = vec![0.0; n];
                g.iter().enumerate().for_each(|(i, v)| gs[i % n] += v);
                self.accumulate(adj, *small, gs);
            }
            Op::Mul(big, small) => {
                let bd = self.data(*big);
                let sd = self.data(*small);
                let n = sd.len();
                if self.requires_grad(*big) {
                    let gb = g.iter().enumerate().map(|(i, v)| v * sd[i % n]).collect();
                    self.accumulate(adj, *big, gb);
                }
                if self.requires_grad(*small) {
                    let mut gs = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, v)| gs[i % n] += v * bd[i]);
                    self.accumulate(adj, *small, gs);
                }
            }
            Op::Scale(x, c) => self.accumulate(adj, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => self.accumulate(adj, *x, g.to_vec()),
            Op::Tanh(x) => {
                let gx = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(adj, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(adj, *x, gx);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let gx = g.iter().zip(xd).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(adj, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(adj, *x, gx);
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                let gx = g.iter().zip(xd).map(|(g, v)| g / v).collect();
                self.accumulate(adj, *x, gx);
            }
            Op::ClampMax(x, hi) => {
                let xd = self.data(*x);
                let gx = g.iter().zip(xd).map(|(g, v)| if v < hi { *g } else { 0.0 }).collect();
                self.accumulate(adj, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(adj, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(adj, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g[o * inner + i] * c;
                        }
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::MaskedSoftmax(x) => {
                let n = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        out[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[s..s + n * inner]);
                        }
                        self.accumulate(adj, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(adj, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(adj, *x, g.to_vec()),
            Op::GatherRows(table, ids) => {
                let shape = self.shape(*table);
                let cols = shape[1];
                let mut gt = vec![0.0; shape[0] * cols];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[i * cols + c] += g[r * cols + c];
                    }
                }
                self.accumulate(adj, *table, gt);
            }
            Op::RowScale(x, s) => {
                let n = self.shape(*x)[1];
                let xd = self.data(*x);
                let sd = self.data(*s);
                if self.requires_grad(*x) {
                    let gx = g.iter().enumerate().map(|(i, v)| v * sd[i / n]).collect();
                    self.accumulate(adj, *x, gx);
                }
                if self.requires_grad(*s) {
                    let gs = g
                        .chunks(n)
                        .zip(xd.chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(adj, *s, gs);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.value(*gamma).numel();
                let gam = self.data(*gamma);
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let gh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghx = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] = is * (gh[j] - mean_gh - hr[j] * mean_ghx);
                        }
                    }
                    self.accumulate(adj, *x, gx);
                }
                if self.requires_grad(*gamma) {
                    let mut gg = vec![0.0; n];
                    g.iter().zip(xhat).enumerate().for_each(|(i, (a, h))| gg[i % n] += a * h);
                    self.accumulate(adj, *gamma, gg);
                }
                if self.requires_grad(*beta) {
                    let mut gb = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, a)| gb[i % n] += a);
                    self.accumulate(adj, *beta, gb);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, nr) in norms.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = (gr[j] - yr[j] * dot) / nr;
                    }
                }
                self.accumulate(adj, *x, gx);
            }
        }
    }
}
