//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in append order.
//! Parameter leaves borrow their values from a [`ParamStore`]; all other
//! nodes own a row-major `[rows, cols]` buffer. [`Tape::backward`] walks the
//! nodes in exact reverse append order and returns dense gradients for every
//! parameter.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{ParamId, ParamStore, ShapeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    /// Rows of `table` selected by `rows`.
    Gather { table: NodeId, rows: Vec<usize> },
    /// `x · w[row_start..row_start + in, :] + b`.
    Affine { x: NodeId, w: NodeId, b: Option<NodeId>, row_start: usize },
    /// Matrix plus a row vector broadcast over its rows.
    AddRow { m: NodeId, v: NodeId },
    /// `out[i] = a[i, :] · b[i, :]` as a row vector.
    RowDot { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddConst { src: NodeId },
    Scale { src: NodeId, s: f64 },
    /// Output rows are `[h_t, c_t]`. `gates` holds post-activation `[i, f, g, o]`
    /// and `tanh_c` holds `tanh(c_t)`.
    LstmCell {
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        b: NodeId,
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    Row { src: NodeId, row: usize },
    /// Row vectors concatenated along columns.
    Concat { parts: Vec<NodeId> },
    /// Row vectors stacked into a matrix.
    StackRows { rows: Vec<NodeId> },
    MeanRows { src: NodeId },
    LogSoftmax { src: NodeId },
    LogSumExp { src: NodeId },
    /// `Σ_i src[i, cols[i]]`.
    PickSum { src: NodeId, cols: Vec<usize> },
    WeightedSum { src: NodeId, weights: Vec<f64> },
    Sum { src: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Dense gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            grads: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(
            self.grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>(),
        )
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_slice()))
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        self.grads
            .iter()
            .zip(&other.grads)
            .flat_map(|(a, b)| a.iter().zip(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> ShapeError {
    ShapeError {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        match n.op {
            Op::Param(p) => self.params.get(p).data(),
            _ => &n.value,
        }
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let t = self.params.get(id);
        let (r, c) = (t.rows(), t.cols());
        self.push(r, c, Vec::new(), Op::Param(id))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<NodeId, ShapeError> {
        if value.len() != rows * cols {
            return Err(shape_err("constant", (rows, cols), (1, value.len())));
        }
        Ok(self.push(rows, cols, value, Op::Constant))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Constant)
    }

    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let (tr, tc) = self.shape(table);
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * tc);
        for &r in rows {
            assert!(r < tr, "gather row {r} out of range for {tr} rows");
            out.extend_from_slice(&src[r * tc..(r + 1) * tc]);
        }
        self.push(
            rows.len(),
            tc,
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, ShapeError> {
        let (_, xin) = self.shape(x);
        let (wr, _) = self.shape(w);
        if xin != wr {
            return Err(shape_err("affine", self.shape(x), self.shape(w)));
        }
        self.affine_rows(x, w, 0, b)
    }

    /// Like [`Tape::affine`] but uses only rows `row_start..row_start + in` of `w`.
    pub fn affine_rows(
        &mut self,
        x: NodeId,
        w: NodeId,
        row_start: usize,
        b: Option<NodeId>,
    ) -> Result<NodeId, ShapeError> {
        let (n, xin) = self.shape(x);
        let (wr, out) = self.shape(w);
        if row_start + xin > wr {
            return Err(shape_err("affine", (n, xin), (wr, out)));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.0 * bs.1 != out {
                return Err(shape_err("affine bias", (wr, out), bs));
            }
        }
        let xv = self.value(x);
        let wv = &self.value(w)[row_start * out..(row_start + xin) * out];
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let yi = &mut y[i * out..(i + 1) * out];
            if let Some(b) = b {
                yi.copy_from_slice(self.value(b));
            }
            for k in 0..xin {
                let a = xv[i * xin + k];
                if a != 0.0 {
                    axpy(a, &wv[k * out..(k + 1) * out], yi);
                }
            }
        }
        Ok(self.push(
            n,
            out,
            y,
            Op::Affine {
                x,
                w,
                b,
                row_start,
            },
        ))
    }

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, ShapeError> {
        let (r, c) = self.shape(m);
        let vs = self.shape(v);
        if vs.0 * vs.1 != c {
            return Err(shape_err("add_row", (r, c), vs));
        }
        let vv = self.value(v);
        let mut out = self.value(m).to_vec();
        for row in out.chunks_mut(c) {
            for (o, x) in row.iter_mut().zip(vv) {
                *o += x;
            }
        }
        Ok(self.push(r, c, out, Op::AddRow { m, v }))
    }

    /// Row-wise dot products of two equally shaped matrices, as `[1, rows]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("row_dot", self.shape(a), self.shape(b)));
        }
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .zip(self.value(b).chunks(c))
            .map(|(x, y)| dot(x, y))
            .collect();
        Ok(self.push(1, r, out, Op::RowDot { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add { a, b }))
    }

    pub fn add_const(&mut self, src: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(src);
        let out = self.value(src).iter().map(|x| x + k).collect();
        self.push(r, c, out, Op::AddConst { src })
    }

    pub fn scale(&mut self, src: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(src);
        let out = self.value(src).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale { src, s })
    }

    /// One LSTM step without peepholes, gate layout `[i, f, g, o]`.
    ///
    /// `x: [1, d_in]`, `h, c: [1, d_h]`, `w_x: [d_in, 4 d_h]`, `w_h: [d_h, 4 d_h]`,
    /// `b: [4 d_h]`. Returns nodes for `h_t` and `c_t`.
    pub fn lstm_cell(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        b: NodeId,
    ) -> Result<(NodeId, NodeId), ShapeError> {
        let (_, d_in) = self.shape(x);
        let (_, d_h) = self.shape(h);
        let g4 = 4 * d_h;
        if self.shape(x).0 != 1 || self.shape(h).0 != 1 || self.shape(c) != (1, d_h) {
            return Err(shape_err("lstm_cell state", self.shape(h), self.shape(c)));
        }
        if self.shape(w_x) != (d_in, g4) {
            return Err(shape_err("lstm_cell w_x", (d_in, g4), self.shape(w_x)));
        }
        if self.shape(w_h) != (d_h, g4) {
            return Err(shape_err("lstm_cell w_h", (d_h, g4), self.shape(w_h)));
        }
        let bs = self.shape(b);
        if bs.0 * bs.1 != g4 {
            return Err(shape_err("lstm_cell b", (1, g4), bs));
        }
        let mut gates = self.value(b).to_vec();
        let (xv, hv, wx, wh) = (self.value(x), self.value(h), self.value(w_x), self.value(w_h));
        for k in 0..d_in {
            if xv[k] != 0.0 {
                axpy(xv[k], &wx[k * g4..(k + 1) * g4], &mut gates);
            }
        }
        for k in 0..d_h {
            if hv[k] != 0.0 {
                axpy(hv[k], &wh[k * g4..(k + 1) * g4], &mut gates);
            }
        }
        let cv = self.value(c);
        let mut out = vec![0.0; 2 * d_h];
        let mut tanh_c = vec![0.0; d_h];
        for j in 0..d_h {
            let i = math::sigmoid(gates[j]);
            let f = math::sigmoid(gates[d_h + j]);
            let g = math::tanh(gates[2 * d_h + j]);
            let o = math::sigmoid(gates[3 * d_h + j]);
            gates[j] = i;
            gates[d_h + j] = f;
            gates[2 * d_h + j] = g;
            gates[3 * d_h + j] = o;
            let cn = f * cv[j] + i * g;
            let tc = math::tanh(cn);
            tanh_c[j] = tc;
            out[j] = o * tc;
            out[d_h + j] = cn;
        }
        let cell = self.push(
            2,
            d_h,
            out,
            Op::LstmCell {
                x,
                h,
                c,
                w_x,
                w_h,
                b,
                gates,
                tanh_c,
            },
        );
        Ok((self.row(cell, 0), self.row(cell, 1)))
    }

    pub fn row(&mut self, src: NodeId, row: usize) -> NodeId {
        let (r, c) = self.shape(src);
        assert!(row < r, "row {row} out of range for {r} rows");
        let out = self.value(src)[row * c..(row + 1) * c].to_vec();
        self.push(1, c, out, Op::Row { src, row })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, ShapeError> {
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).0 != 1 {
                return Err(shape_err("concat", self.shape(p), (1, 0)));
            }
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        Ok(self.push(
            1,
            n,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, ShapeError> {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let c = self.shape(rows[0]).1;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.shape(r) != (1, c) {
                return Err(shape_err("stack_rows", (1, c), self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.push(
            rows.len(),
            c,
            out,
            Op::StackRows {
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn mean_rows(&mut self, src: NodeId) -> NodeId {
        let (r, c) = self.shape(src);
        let mut out = vec![0.0; c];
        for row in self.value(src).chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        self.push(1, c, out, Op::MeanRows { src })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, src: NodeId) -> NodeId {
        let (r, c) = self.shape(src);
        let mut out = vec![0.0; r * c];
        for (o, row) in out.chunks_mut(c).zip(self.value(src).chunks(c)) {
            math::log_softmax_into(row, o);
        }
        self.push(r, c, out, Op::LogSoftmax { src })
    }

    /// Log-sum-exp over every element; returns a scalar node.
    pub fn log_sum_exp(&mut self, src: NodeId) -> NodeId {
        let v = math::log_sum_exp(self.value(src));
        self.push(1, 1, vec![v], Op::LogSumExp { src })
    }

    /// `Σ_i src[i, cols[i]]`, one column per row.
    pub fn pick_sum(&mut self, src: NodeId, cols: &[usize]) -> NodeId {
        let (r, c) = self.shape(src);
        assert_eq!(cols.len(), r, "pick_sum needs one column per row");
        let v = self.value(src);
        let mut s = 0.0;
        for (i, &j) in cols.iter().enumerate() {
            assert!(j < c, "pick_sum column {j} out of range for {c}");
            s += v[i * c + j];
        }
        self.push(
            1,
            1,
            vec![s],
            Op::PickSum {
                src,
                cols: cols.to_vec(),
            },
        )
    }

    /// Single element of a row vector as a scalar node.
    pub fn pick(&mut self, src: NodeId, col: usize) -> NodeId {
        self.pick_sum(src, &[col])
    }

    /// `Σ_i w_i src_i` with constant weights.
    pub fn weighted_sum(&mut self, src: NodeId, weights: &[f64]) -> Result<NodeId, ShapeError> {
        let (r, c) = self.shape(src);
        if weights.len() != r * c {
            return Err(shape_err("weighted_sum", (r, c), (1, weights.len())));
        }
        let s = self
            .value(src)
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(
            1,
            1,
            vec![s],
            Op::WeightedSum {
                src,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, src: NodeId) -> NodeId {
        let s = self.value(src).iter().sum();
        self.push(1, 1, vec![s], Op::Sum { src })
    }

    /// Gradients of the scalar `root` with respect to every parameter.
    pub fn backward(&self, root: NodeId) -> Gradients {
        self.backward_traced(root).0
    }

    /// Like [`Tape::backward`], also returning the node indices in visit order.
    pub fn backward_traced(&self, root: NodeId) -> (Gradients, Vec<usize>) {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut out = Gradients::zeros(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut visited = Vec::with_capacity(root.0 + 1);

        for idx in (0..=root.0).rev() {
            visited.push(idx);
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(p) => {
                    for (a, b) in out.grads[p.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Constant => {}
                Op::Gather { table, rows } => {
                    let c = node.cols;
                    let tl = self.nodes[table.0].rows * c;
                    let gt = slot(&mut grads, *table, tl);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in gt[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *a += b;
                        }
                    }
                }
                Op::Affine { x, w, b, row_start } => {
                    let (n, out_dim) = (node.rows, node.cols);
                    let xin = self.nodes[x.0].cols;
                    let xv = self.value(*x);
                    let wfull = self.value(*w);
                    let wv = &wfull[row_start * out_dim..(row_start + xin) * out_dim];
                    {
                        let gx = slot(&mut grads, *x, n * xin);
                        for i in 0..n {
                            let gi = &g[i * out_dim..(i + 1) * out_dim];
                            for k in 0..xin {
                                gx[i * xin + k] += dot(gi, &wv[k * out_dim..(k + 1) * out_dim]);
                            }
                        }
                    }
                    {
                        let wl = wfull.len();
                        let gw = slot(&mut grads, *w, wl);
                        let gw = &mut gw[row_start * out_dim..(row_start + xin) * out_dim];
                        for i in 0..n {
                            let gi = &g[i * out_dim..(i + 1) * out_dim];
                            for k in 0..xin {
                                let a = xv[i * xin + k];
                                if a != 0.0 {
                                    axpy(a, gi, &mut gw[k * out_dim..(k + 1) * out_dim]);
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = slot(&mut grads, *b, out_dim);
                        for row in g.chunks(out_dim) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::AddRow { m, v } => {
                    let c = node.cols;
                    {
                        let gm = slot(&mut grads, *m, g.len());
                        for (a, b) in gm.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    let gv = slot(&mut grads, *v, c);
                    for row in g.chunks(c) {
                        for (a, b) in gv.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                Op::RowDot { a, b } => {
                    let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    for (dst, other) in [(*a, *b), (*b, *a)] {
                        let ov = self.value(other);
                        let gd = slot(&mut grads, dst, r * c);
                        for i in 0..r {
                            axpy(g[i], &ov[i * c..(i + 1) * c], &mut gd[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for t in [a, b] {
                        let gt = slot(&mut grads, *t, g.len());
                        for (x, y) in gt.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::AddConst { src } => {
                    let gs = slot(&mut grads, *src, g.len());
                    for (x, y) in gs.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Scale { src, s } => {
                    let gs = slot(&mut grads, *src, g.len());
                    for (x, y) in gs.iter_mut().zip(&g) {
                        *x += s * y;
                    }
                }
                Op::LstmCell {
                    x,
                    h,
                    c,
                    w_x,
                    w_h,
                    b,
                    gates,
                    tanh_c,
                } => {
                    let d_h = node.cols;
                    let g4 = 4 * d_h;
                    let (dh, dc_out) = g.split_at(d_h);
                    let c_prev = self.value(*c);
                    let mut dpre = vec![0.0; g4];
                    let mut dc_prev = vec![0.0; d_h];
                    for j in 0..d_h {
                        let (i, f, gg, o) = (gates[j], gates[d_h + j], gates[2 * d_h + j], gates[3 * d_h + j]);
                        let tc = tanh_c[j];
                        let d_o = dh[j] * tc;
                        let dc = dc_out[j] + dh[j] * o * (1.0 - tc * tc);
                        dpre[j] = dc * gg * i * (1.0 - i);
                        dpre[d_h + j] = dc * c_prev[j] * f * (1.0 - f);
                        dpre[2 * d_h + j] = dc * i * (1.0 - gg * gg);
                        dpre[3 * d_h + j] = d_o * o * (1.0 - o);
                        dc_prev[j] = dc * f;
                    }
                    {
                        let gc = slot(&mut grads, *c, d_h);
                        for (a, v) in gc.iter_mut().zip(&dc_prev) {
                            *a += v;
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, g4);
                        for (a, v) in gb.iter_mut().zip(&dpre) {
                            *a += v;
                        }
                    }
                    for (inp, w) in [(*x, *w_x), (*h, *w_h)] {
                        let d_in = self.nodes[inp.0].cols;
                        let iv = self.value(inp);
                        let wv = self.value(w);
                        {
                            let gi = slot(&mut grads, inp, d_in);
                            for k in 0..d_in {
                                gi[k] += dot(&dpre, &wv[k * g4..(k + 1) * g4]);
                            }
                        }
                        let gw = slot(&mut grads, w, d_in * g4);
                        for k in 0..d_in {
                            if iv[k] != 0.0 {
                                axpy(iv[k], &dpre, &mut gw[k * g4..(k + 1) * g4]);
                            }
                        }
                    }
                }
                Op::Row { src, row } => {
                    let (r, c) = (self.nodes[src.0].rows, self.nodes[src.0].cols);
                    let gs = slot(&mut grads, *src, r * c);
                    for (a, b) in gs[row * c..(row + 1) * c].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].cols;
                        let gp = slot(&mut grads, p, len);
                        for (a, b) in gp.iter_mut().zip(&g[off..off + len]) {
                            *a += b;
                        }
                        off += len;
                    }
                }
                Op::StackRows { rows } => {
                    let c = node.cols;
                    for (i, &r) in rows.iter().enumerate() {
                        let gr = slot(&mut grads, r, c);
                        for (a, b) in gr.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *a += b;
                        }
                    }
                }
                Op::MeanRows { src } => {
                    let (r, c) = (self.nodes[src.0].rows, self.nodes[src.0].cols);
                    let inv = 1.0 / r as f64;
                    let gs = slot(&mut grads, *src, r * c);
                    for row in gs.chunks_mut(c) {
                        for (a, b) in row.iter_mut().zip(&g) {
                            *a += inv * b;
                        }
                    }
                }
                Op::LogSoftmax { src } => {
                    let c = node.cols;
                    let gs = slot(&mut grads, *src, g.len());
                    for ((gsr, gr), yr) in gs.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((a, &gi), &yi) in gsr.iter_mut().zip(gr).zip(yr) {
                            *a += gi - math::exp(yi) * total;
                        }
                    }
                }
                Op::LogSumExp { src } => {
                    let out_v = node.value[0];
                    let sv = self.value(*src);
                    let n = sv.len();
                    let w: Vec<f64> = sv.iter().map(|&x| math::exp(x - out_v)).collect();
                    let gs = slot(&mut grads, *src, n);
                    for (a, wi) in gs.iter_mut().zip(w) {
                        *a += g[0] * wi;
                    }
                }
                Op::PickSum { src, cols } => {
                    let (r, c) = (self.nodes[src.0].rows, self.nodes[src.0].cols);
                    let gs = slot(&mut grads, *src, r * c);
                    for (i, &j) in cols.iter().enumerate() {
                        gs[i * c + j] += g[0];
                    }
                }
                Op::WeightedSum { src, weights } => {
                    let gs = slot(&mut grads, *src, weights.len());
                    for (a, w) in gs.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
                Op::Sum { src } => {
                    let n = self.nodes[src.0].rows * self.nodes[src.0].cols;
                    let gs = slot(&mut grads, *src, n);
                    gs.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
        (out, visited)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn affine_identity_and_bias() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = s.add("b", Tensor::vector(vec![0.0, 0.0]));
        let b2 = s.add("b2", Tensor::vector(vec![3.0, 4.0]));
        let mut t = Tape::new(&s);
        let (wn, bn, b2n) = (t.param(w), t.param(b), t.param(b2));
        let x = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let y = t.affine(x, wn, Some(bn)).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);
        let z = t.zeros(1, 2);
        let y2 = t.affine(z, wn, Some(b2n)).unwrap();
        assert_eq!(t.value(y2), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_error_reports_both() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::zeros(&[3, 2]));
        let mut t = Tape::new(&s);
        let wn = t.param(w);
        let x = t.zeros(1, 2);
        let err = t.affine(x, wn, None).unwrap_err();
        assert_eq!(err.left, vec![1, 2]);
        assert_eq!(err.right, vec![3, 2]);
    }

    #[test]
    fn lstm_zero_weights_zero_state() {
        let mut s = ParamStore::new();
        let wx = s.add("wx", Tensor::zeros(&[2, 12]));
        let wh = s.add("wh", Tensor::zeros(&[3, 12]));
        let b = s.add("b", Tensor::zeros(&[12]));
        let mut t = Tape::new(&s);
        let (wx, wh, b) = (t.param(wx), t.param(wh), t.param(b));
        let x = t.constant(1, 2, vec![0.3, -0.7]).unwrap();
        let h0 = t.zeros(1, 3);
        let c0 = t.zeros(1, 3);
        let (h, c) = t.lstm_cell(x, h0, c0, wx, wh, b).unwrap();
        assert!(t.value(h).iter().all(|&v| v == 0.0));
        assert!(t.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_forget_gate_only() {
        let d = 3;
        let mut s = ParamStore::new();
        let wx = s.add("wx", Tensor::zeros(&[2, 4 * d]));
        let wh = s.add("wh", Tensor::zeros(&[d, 4 * d]));
        let mut bias = vec![0.0; 4 * d];
        bias[d..2 * d].iter_mut().for_each(|x| *x = 1.0);
        let b = s.add("b", Tensor::vector(bias));
        let mut t = Tape::new(&s);
        let (wx, wh, b) = (t.param(wx), t.param(wh), t.param(b));
        let x = t.zeros(1, 2);
        let h0 = t.zeros(1, d);
        let c0 = t.constant(1, d, vec![1.0; d]).unwrap();
        let (_, c) = t.lstm_cell(x, h0, c0, wx, wh, b).unwrap();
        for &v in t.value(c) {
            assert!((v - math::sigmoid(1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_visits_reverse_order_once() {
        let mut s = ParamStore::new();
        let p = s.add("p", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let mut t = Tape::new(&s);
        let pn = t.param(p);
        let ls = t.log_softmax(pn);
        let r = t.log_sum_exp(ls);
        let (_, order) = t.backward_traced(r);
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn log_softmax_probabilities() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let v = t
            .constant(1, 3, vec![math::ln(1.0), math::ln(2.0), math::ln(3.0)])
            .unwrap();
        let ls = t.log_softmax(v);
        let p: Vec<f64> = t.value(ls).iter().map(|&x| math::exp(x)).collect();
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
