//! Minimal reverse-mode automatic differentiation on a Wengert tape.
//!
//! The unrolled mean-field computation graph is small and built fresh per
//! instance, so the tape stores dense `f64` vectors and evaluates eagerly on
//! push; `backward` walks the ops in reverse. Only the op set needed by the
//! unrolled updates exists — this is not a general tensor library.

pub(crate) type NodeId = usize;

#[derive(Debug)]
pub(crate) enum Op {
    /// Input or parameter; no backward.
    Leaf,
    /// `y = W x + b`, `W` row-major `out_dim x in_dim`.
    Affine { w: NodeId, b: NodeId, x: NodeId, out_dim: usize, in_dim: usize },
    Relu { x: NodeId },
    /// Elementwise product with a fixed mask (dropout).
    MulMask { x: NodeId, mask: Vec<f64> },
    /// `out[y, y2] = sum_r left[y*rank+r] * right[y2*rank+r]` (A B^T of the
    /// row-major reshaped factors), flattened row-major `rows x cols`.
    LowRank { left: NodeId, right: NodeId, rows: usize, cols: usize, rank: usize },
    /// `out = M v`, `M` row-major `rows x cols` (a tape node), `v` length `cols`.
    MatVec { m: NodeId, v: NodeId, rows: usize, cols: usize },
    /// `out = M^T v`, `M` row-major `rows x cols`, `v` length `rows`.
    MatTVec { m: NodeId, v: NodeId, rows: usize, cols: usize },
    /// `out = sum_i coeff_i * x_i`, evaluated in term order.
    AddScaled { terms: Vec<(NodeId, f64)> },
    /// `out[i, j] = u[i] * v[j]`, flattened row-major.
    Outer { u: NodeId, v: NodeId },
    /// Concatenation of vectors.
    Concat { xs: Vec<NodeId> },
    Softmax { x: NodeId },
    LogSoftmax { x: NodeId },
    Ln { x: NodeId },
    /// `(1 - damping) * new + damping * old`.
    Blend { new: NodeId, old: NodeId, damping: f64 },
    /// Scalar `-x[index]`.
    NegPick { x: NodeId, index: usize },
    /// Scalar `<a, b>`. Built only by the unit tests today, but matched
    /// like any other op.
    #[allow(dead_code)]
    Dot { a: NodeId, b: NodeId },
    /// Scalar sum of scalar nodes.
    SumAll { xs: Vec<NodeId> },
}

pub(crate) struct Tape {
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self { values: Vec::new(), ops: Vec::new() }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id].len(), 1);
        self.values[id][0]
    }

    pub fn leaf(&mut self, values: Vec<f64>) -> NodeId {
        self.values.push(values);
        self.ops.push(Op::Leaf);
        self.values.len() - 1
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        let value = self.eval(&op);
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    fn eval(&self, op: &Op) -> Vec<f64> {
        match op {
            Op::Leaf => unreachable!("leaves are pushed with explicit values"),
            Op::Affine { w, b, x, out_dim, in_dim } => {
                let (w, b, x) = (&self.values[*w], &self.values[*b], &self.values[*x]);
                let mut y = b.clone();
                for i in 0..*out_dim {
                    let row = &w[i * in_dim..(i + 1) * in_dim];
                    let mut acc = y[i];
                    for (wv, xv) in row.iter().zip(x) {
                        acc += wv * xv;
                    }
                    y[i] = acc;
                }
                y
            }
            Op::Relu { x } => self.values[*x].iter().map(|v| v.max(0.0)).collect(),
            Op::MulMask { x, mask } => {
                self.values[*x].iter().zip(mask).map(|(v, m)| v * m).collect()
            }
            Op::LowRank { left, right, rows, cols, rank } => {
                crate::energy::low_rank_product(
                    &self.values[*left],
                    &self.values[*right],
                    *rows,
                    *cols,
                    *rank,
                )
            }
            Op::MatVec { m, v, rows, cols } => {
                let (m, v) = (&self.values[*m], &self.values[*v]);
                let mut out = vec![0.0; *rows];
                for i in 0..*rows {
                    let row = &m[i * cols..(i + 1) * cols];
                    let mut acc = 0.0;
                    for (mv, vv) in row.iter().zip(v) {
                        acc += mv * vv;
                    }
                    out[i] = acc;
                }
                out
            }
            Op::MatTVec { m, v, rows, cols } => {
                let (m, v) = (&self.values[*m], &self.values[*v]);
                let mut out = vec![0.0; *cols];
                for i in 0..*rows {
                    let row = &m[i * cols..(i + 1) * cols];
                    for (j, mv) in row.iter().enumerate() {
                        out[j] += mv * v[i];
                    }
                }
                out
            }
            Op::AddScaled { terms } => {
                let len = self.values[terms[0].0].len();
                let mut out = vec![0.0; len];
                for (id, c) in terms {
                    for (o, v) in out.iter_mut().zip(&self.values[*id]) {
                        *o += c * v;
                    }
                }
                out
            }
            Op::Outer { u, v } => {
                let (u, v) = (&self.values[*u], &self.values[*v]);
                let mut out = Vec::with_capacity(u.len() * v.len());
                for uv in u {
                    for vv in v {
                        out.push(uv * vv);
                    }
                }
                out
            }
            Op::Concat { xs } => {
                let mut out = Vec::new();
                for id in xs {
                    out.extend_from_slice(&self.values[*id]);
                }
                out
            }
            Op::Softmax { x } => crate::numeric::softmax(&self.values[*x]),
            Op::LogSoftmax { x } => crate::numeric::log_softmax(&self.values[*x]),
            Op::Ln { x } => self.values[*x].iter().map(|v| v.ln()).collect(),
            Op::Blend { new, old, damping } => self.values[*new]
                .iter()
                .zip(&self.values[*old])
                .map(|(n, o)| (1.0 - damping) * n + damping * o)
                .collect(),
            Op::NegPick { x, index } => vec![-self.values[*x][*index]],
            Op::Dot { a, b } => {
                let mut acc = 0.0;
                for (x, y) in self.values[*a].iter().zip(&self.values[*b]) {
                    acc += x * y;
                }
                vec![acc]
            }
            Op::SumAll { xs } => {
                let mut acc = 0.0;
                for id in xs {
                    acc += self.values[*id][0];
                }
                vec![acc]
            }
        }
    }

    /// Reverse pass from a scalar root; returns one gradient vector per node.
    pub fn backward(&self, root: NodeId) -> Vec<Vec<f64>> {
        debug_assert_eq!(self.values[root].len(), 1, "backward root must be scalar");
        let mut grads: Vec<Vec<f64>> =
            self.values.iter().map(|v| vec![0.0; v.len()]).collect();
        grads[root][0] = 1.0;
        for id in (0..self.ops.len()).rev() {
            // Split off this node's gradient so upstream entries stay mutable.
            let dy = std::mem::take(&mut grads[id]);
            match &self.ops[id] {
                // A leaf has nothing upstream; hand its gradient back so
                // callers can read it.
                Op::Leaf => grads[id] = dy,
                Op::Affine { w, b, x, out_dim, in_dim } => {
                    let xv = self.values[*x].clone();
                    let wv = self.values[*w].clone();
                    {
                        let gw = &mut grads[*w];
                        for i in 0..*out_dim {
                            for j in 0..*in_dim {
                                gw[i * in_dim + j] += dy[i] * xv[j];
                            }
                        }
                    }
                    {
                        let gb = &mut grads[*b];
                        for i in 0..*out_dim {
                            gb[i] += dy[i];
                        }
                    }
                    {
                        let gx = &mut grads[*x];
                        for i in 0..*out_dim {
                            let row = &wv[i * in_dim..(i + 1) * in_dim];
                            for (j, wv) in row.iter().enumerate() {
                                gx[j] += wv * dy[i];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = &self.values[*x];
                    let gx = &mut grads[*x];
                    for (i, v) in xv.iter().enumerate() {
                        if *v > 0.0 {
                            gx[i] += dy[i];
                        }
                    }
                }
                Op::MulMask { x, mask } => {
                    let gx = &mut grads[*x];
                    for (i, m) in mask.iter().enumerate() {
                        gx[i] += dy[i] * m;
                    }
                }
                Op::LowRank { left, right, rows, cols, rank } => {
                    let lv = self.values[*left].clone();
                    let rv = self.values[*right].clone();
                    {
                        let gl = &mut grads[*left];
                        for y in 0..*rows {
                            for y2 in 0..*cols {
                                let d = dy[y * cols + y2];
                                for r in 0..*rank {
                                    gl[y * rank + r] += d * rv[y2 * rank + r];
                                }
                            }
                        }
                    }
                    {
                        let gr = &mut grads[*right];
                        for y in 0..*rows {
                            for y2 in 0..*cols {
                                let d = dy[y * cols + y2];
                                for r in 0..*rank {
                                    gr[y2 * rank + r] += d * lv[y * rank + r];
                                }
                            }
                        }
                    }
                }
                Op::MatVec { m, v, rows, cols } => {
                    let mv = self.values[*m].clone();
                    let vv = self.values[*v].clone();
                    {
                        let gm = &mut grads[*m];
                        for i in 0..*rows {
                            for j in 0..*cols {
                                gm[i * cols + j] += dy[i] * vv[j];
                            }
                        }
                    }
                    {
                        let gv = &mut grads[*v];
                        for i in 0..*rows {
                            let row = &mv[i * cols..(i + 1) * cols];
                            for (j, m) in row.iter().enumerate() {
                                gv[j] += m * dy[i];
                            }
                        }
                    }
                }
                Op::MatTVec { m, v, rows, cols } => {
                    let mv = self.values[*m].clone();
                    let vv = self.values[*v].clone();
                    {
                        let gm = &mut grads[*m];
                        for i in 0..*rows {
                            for j in 0..*cols {
                                gm[i * cols + j] += vv[i] * dy[j];
                            }
                        }
                    }
                    {
                        let gv = &mut grads[*v];
                        for i in 0..*rows {
                            let row = &mv[i * cols..(i + 1) * cols];
                            let mut acc = 0.0;
                            for (j, m) in row.iter().enumerate() {
                                acc += m * dy[j];
                            }
                            gv[i] += acc;
                        }
                    }
                }
                Op::AddScaled { terms } => {
                    for (tid, c) in terms {
                        let gt = &mut grads[*tid];
                        for (g, d) in gt.iter_mut().zip(&dy) {
                            *g += c * d;
                        }
                    }
                }
                Op::Outer { u, v } => {
                    let uv = self.values[*u].clone();
                    let vv = self.values[*v].clone();
                    {
                        let gu = &mut grads[*u];
                        for i in 0..uv.len() {
                            let mut acc = 0.0;
                            for (j, v) in vv.iter().enumerate() {
                                acc += dy[i * vv.len() + j] * v;
                            }
                            gu[i] += acc;
                        }
                    }
                    {
                        let gv = &mut grads[*v];
                        for j in 0..vv.len() {
                            let mut acc = 0.0;
                            for (i, u) in uv.iter().enumerate() {
                                acc += dy[i * vv.len() + j] * u;
                            }
                            gv[j] += acc;
                        }
                    }
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for id in xs {
                        let len = self.values[*id].len();
                        let gx = &mut grads[*id];
                        for (g, d) in gx.iter_mut().zip(&dy[offset..offset + len]) {
                            *g += d;
                        }
                        offset += len;
                    }
                }
                Op::Softmax { x } => {
                    // ds = q * (dq - <q, dq>)
                    let q = &self.values[id];
                    let dot: f64 = q.iter().zip(&dy).map(|(a, b)| a * b).sum();
                    let gx = &mut grads[*x];
                    for (i, qv) in q.iter().enumerate() {
                        gx[i] += qv * (dy[i] - dot);
                    }
                }
                Op::LogSoftmax { x } => {
                    // ds = dy - softmax(s) * sum(dy); softmax(s) = exp(output)
                    let sum: f64 = dy.iter().sum();
                    let out = &self.values[id];
                    let gx = &mut grads[*x];
                    for (i, o) in out.iter().enumerate() {
                        gx[i] += dy[i] - o.exp() * sum;
                    }
                }
                Op::Ln { x } => {
                    let xv = &self.values[*x];
                    let gx = &mut grads[*x];
                    for (i, v) in xv.iter().enumerate() {
                        gx[i] += dy[i] / v;
                    }
                }
                Op::Blend { new, old, damping } => {
                    {
                        let gn = &mut grads[*new];
                        for (g, d) in gn.iter_mut().zip(&dy) {
                            *g += (1.0 - damping) * d;
                        }
                    }
                    {
                        let go = &mut grads[*old];
                        for (g, d) in go.iter_mut().zip(&dy) {
                            *g += damping * d;
                        }
                    }
                }
                Op::NegPick { x, index } => {
                    grads[*x][*index] -= dy[0];
                }
                Op::Dot { a, b } => {
                    let av = self.values[*a].clone();
                    let bv = self.values[*b].clone();
                    {
                        let ga = &mut grads[*a];
                        for (g, v) in ga.iter_mut().zip(&bv) {
                            *g += dy[0] * v;
                        }
                    }
                    {
                        let gb = &mut grads[*b];
                        for (g, v) in gb.iter_mut().zip(&av) {
                            *g += dy[0] * v;
                        }
                    }
                }
                Op::SumAll { xs } => {
                    for id in xs {
                        grads[*id][0] += dy[0];
                    }
                }
            }
        }
        grads
    }
}
