//! Minimal reverse-mode tape over `f64` matrices.
//!
//! The connector's forward pass is built from a handful of matrix ops plus
//! three domain ops (3x3 convolution over a flattened grid, bilinear grid
//! warp with precomputed taps, per-cell temporal attention). Values are
//! computed eagerly; `backward` walks the tape once in reverse. Row-vector
//! convention throughout: `y = x · W`.

use ndarray::Array2;
use std::sync::Arc;

pub type Var = usize;

/// Precomputed bilinear sampling taps for one rigid grid warp. Taps are a
/// pure function of the two anchor poses, so no gradient flows into them.
#[derive(Clone, Debug)]
pub struct WarpTaps {
    /// Per output row: up to four (source row, weight) taps.
    pub taps: Vec<[(u32, f64); 4]>,
    pub n_src_rows: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · b^T
    MatMulBT(Var, Var),
    Add(Var, Var),
    /// (n x m) + broadcast (1 x m)
    AddRow(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Tanh(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Row lookup into an embedding table; backward scatter-adds.
    GatherRows(Var, Vec<usize>),
    Conv3x3 {
        input: Var,
        kernel: Var,
        bias: Var,
        h: usize,
        w: usize,
    },
    Warp {
        input: Var,
        taps: Arc<WarpTaps>,
    },
    TemporalAttn {
        slots: Vec<Var>,
        wq: Var,
        wk: Var,
        wv: Var,
        query_slot: usize,
    },
    BceWithLogits {
        logit: Var,
        label: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softmax_row_inplace(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v].value.dim(), (1, 1));
        self.nodes[v].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tape value");
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// a · b^T without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a].value.mapv(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a].value.clone();
        for mut row in v.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().unwrap());
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let n = x.nrows() as f64;
        let mut v = Array2::zeros((1, x.ncols()));
        for row in x.rows() {
            for (j, val) in row.iter().enumerate() {
                v[(0, j)] += val;
            }
        }
        v.mapv_inplace(|e| e / n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0]].value.ncols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let x = &self.nodes[p].value;
            assert_eq!(x.ncols(), cols);
            v.slice_mut(ndarray::s![at..at + x.nrows(), ..]).assign(x);
            at += x.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0]].value.nrows();
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let x = &self.nodes[p].value;
            assert_eq!(x.nrows(), rows);
            v.slice_mut(ndarray::s![.., at..at + x.ncols()]).assign(x);
            at += x.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(v, Op::GatherRows(table, ids.to_vec()))
    }

    /// 3x3 convolution, stride 1, zero padding, over a grid flattened to
    /// (h·w, c_in). Kernel is (9·c_in, c_out) with tap index major; bias is
    /// (1, c_out).
    pub fn conv3x3(&mut self, input: Var, kernel: Var, bias: Var, h: usize, w: usize) -> Var {
        let x = &self.nodes[input].value;
        let k = &self.nodes[kernel].value;
        let b = &self.nodes[bias].value;
        let cin = x.ncols();
        let cout = k.ncols();
        assert_eq!(x.nrows(), h * w);
        assert_eq!(k.nrows(), 9 * cin);
        assert_eq!(b.dim(), (1, cout));
        let xs = x.as_slice().unwrap();
        let ks = k.as_slice().unwrap();
        let mut out = Array2::zeros((h * w, cout));
        {
            let os = out.as_slice_mut().unwrap();
            for ix in 0..h {
                for iy in 0..w {
                    let r = ix * w + iy;
                    for (tap, (dx, dy)) in tap_offsets().into_iter().enumerate() {
                        let jx = ix as isize + dx;
                        let jy = iy as isize + dy;
                        if jx < 0 || jy < 0 || jx >= h as isize || jy >= w as isize {
                            continue;
                        }
                        let src = (jx as usize * w + jy as usize) * cin;
                        let kbase = tap * cin;
                        for ci in 0..cin {
                            let xv = xs[src + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = (kbase + ci) * cout;
                            for co in 0..cout {
                                os[r * cout + co] += xv * ks[krow + co];
                            }
                        }
                    }
                }
            }
            for r in 0..h * w {
                for co in 0..cout {
                    os[r * cout + co] += b[(0, co)];
                }
            }
        }
        self.push(
            out,
            Op::Conv3x3 {
                input,
                kernel,
                bias,
                h,
                w,
            },
        )
    }

    /// Bilinear resample with fixed taps; gradients flow through the tap
    /// weights into the input.
    pub fn warp(&mut self, input: Var, taps: Arc<WarpTaps>) -> Var {
        let x = &self.nodes[input].value;
        assert_eq!(x.nrows(), taps.n_src_rows);
        let c = x.ncols();
        let xs = x.as_slice().unwrap();
        let mut out = Array2::zeros((taps.taps.len(), c));
        {
            let os = out.as_slice_mut().unwrap();
            for (r, t4) in taps.taps.iter().enumerate() {
                for &(src, wgt) in t4 {
                    if wgt == 0.0 {
                        continue;
                    }
                    let sbase = src as usize * c;
                    for ch in 0..c {
                        os[r * c + ch] += wgt * xs[sbase + ch];
                    }
                }
            }
        }
        self.push(out, Op::Warp { input, taps })
    }

    /// Per-cell attention over time slots: for each row, the query is the
    /// `query_slot` value and keys/values come from every slot. Scores are
    /// scaled by 1/sqrt(c).
    pub fn temporal_attn(
        &mut self,
        slots: &[Var],
        wq: Var,
        wk: Var,
        wv: Var,
        query_slot: usize,
    ) -> Var {
        assert!(!slots.is_empty());
        assert!(query_slot < slots.len());
        let (n, c) = self.nodes[slots[0]].value.dim();
        for &s in slots {
            assert_eq!(self.nodes[s].value.dim(), (n, c));
        }
        assert_eq!(self.nodes[wq].value.dim(), (c, c));
        assert_eq!(self.nodes[wk].value.dim(), (c, c));
        assert_eq!(self.nodes[wv].value.dim(), (c, c));
        let ns = slots.len();
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = Array2::zeros((n, c));
        let mut q = vec![0.0; c];
        let mut k = vec![0.0; c * ns];
        let mut v = vec![0.0; c * ns];
        let mut scores = vec![0.0; ns];
        for r in 0..n {
            self.attn_row(slots, wq, wk, wv, query_slot, r, &mut q, &mut k, &mut v);
            for t in 0..ns {
                let mut s = 0.0;
                for j in 0..c {
                    s += q[j] * k[t * c + j];
                }
                scores[t] = s * scale;
            }
            softmax_row_inplace(&mut scores);
            for t in 0..ns {
                let a = scores[t];
                for j in 0..c {
                    out[(r, j)] += a * v[t * c + j];
                }
            }
        }
        self.push(
            out,
            Op::TemporalAttn {
                slots: slots.to_vec(),
                wq,
                wk,
                wv,
                query_slot,
            },
        )
    }

    /// Recompute q, k, v vectors for one cell row (shared with backward).
    #[allow(clippy::too_many_arguments)]
    fn attn_row(
        &self,
        slots: &[Var],
        wq: Var,
        wk: Var,
        wv: Var,
        query_slot: usize,
        r: usize,
        q: &mut [f64],
        k: &mut [f64],
        v: &mut [f64],
    ) {
        let c = q.len();
        let wq_v = &self.nodes[wq].value;
        let wk_v = &self.nodes[wk].value;
        let wv_v = &self.nodes[wv].value;
        let xq = self.nodes[slots[query_slot]].value.row(r);
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..c {
                acc += xq[i] * wq_v[(i, j)];
            }
            q[j] = acc;
        }
        for (t, &s) in slots.iter().enumerate() {
            let x = self.nodes[s].value.row(r);
            for j in 0..c {
                let mut ak = 0.0;
                let mut av = 0.0;
                for i in 0..c {
                    ak += x[i] * wk_v[(i, j)];
                    av += x[i] * wv_v[(i, j)];
                }
                k[t * c + j] = ak;
                v[t * c + j] = av;
            }
        }
    }

    /// Binary cross entropy with logits; label in {0, 1}. Produces a 1x1
    /// loss node.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Var {
        let z = self.scalar(logit);
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::BceWithLogits { logit, label },
        )
    }

    /// Reverse pass from a 1x1 output node. Returns one gradient buffer per
    /// tape node (None where no gradient flowed).
    pub fn backward(&self, out: Var) -> Vec<Option<Array2<f64>>> {
        assert_eq!(self.nodes[out].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=out).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate(
        grads: &mut [Option<Array2<f64>>],
        var: Var,
        shape: (usize, usize),
        f: impl FnOnce(&mut Array2<f64>),
    ) {
        let slot = grads[var].get_or_insert_with(|| Array2::zeros(shape));
        f(slot);
    }

    fn propagate(&self, idx: Var, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = g.dot(&bv.t());
                let db = av.t().dot(g);
                Self::accumulate(grads, *a, av.dim(), |s| *s += &da);
                Self::accumulate(grads, *b, bv.dim(), |s| *s += &db);
            }
            Op::MatMulBT(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = g.dot(bv);
                let db = g.t().dot(av);
                Self::accumulate(grads, *a, av.dim(), |s| *s += &da);
                Self::accumulate(grads, *b, bv.dim(), |s| *s += &db);
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.dim(), |s| *s += g);
                Self::accumulate(grads, *b, g.dim(), |s| *s += g);
            }
            Op::AddRow(a, row) => {
                Self::accumulate(grads, *a, g.dim(), |s| *s += g);
                let cols = g.ncols();
                Self::accumulate(grads, *row, (1, cols), |s| {
                    for gr in g.rows() {
                        for (j, v) in gr.iter().enumerate() {
                            s[(0, j)] += v;
                        }
                    }
                });
            }
            Op::Scale(a, k) => {
                let da = g.mapv(|x| x * k);
                Self::accumulate(grads, *a, g.dim(), |s| *s += &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut da = Array2::zeros(g.dim());
                for r in 0..g.nrows() {
                    let mut dot = 0.0;
                    for j in 0..g.ncols() {
                        dot += g[(r, j)] * y[(r, j)];
                    }
                    for j in 0..g.ncols() {
                        da[(r, j)] = y[(r, j)] * (g[(r, j)] - dot);
                    }
                }
                Self::accumulate(grads, *a, g.dim(), |s| *s += &da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = ndarray::Zip::from(g).and(y).map_collect(|&gv, &yv| gv * (1.0 - yv * yv));
                Self::accumulate(grads, *a, g.dim(), |s| *s += &da);
            }
            Op::MeanRows(a) => {
                let n = self.nodes[*a].value.nrows();
                let inv = 1.0 / n as f64;
                let dim = self.nodes[*a].value.dim();
                Self::accumulate(grads, *a, dim, |s| {
                    for r in 0..dim.0 {
                        for j in 0..dim.1 {
                            s[(r, j)] += g[(0, j)] * inv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    let gp = g.slice(ndarray::s![at..at + rows, ..]);
                    Self::accumulate(grads, p, self.nodes[p].value.dim(), |s| *s += &gp);
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    let gp = g.slice(ndarray::s![.., at..at + cols]);
                    Self::accumulate(grads, p, self.nodes[p].value.dim(), |s| *s += &gp);
                    at += cols;
                }
            }
            Op::SliceRows(a, start, len) => {
                let dim = self.nodes[*a].value.dim();
                let (start, len) = (*start, *len);
                Self::accumulate(grads, *a, dim, |s| {
                    let mut view = s.slice_mut(ndarray::s![start..start + len, ..]);
                    view += g;
                });
            }
            Op::SliceCols(a, start, len) => {
                let dim = self.nodes[*a].value.dim();
                let (start, len) = (*start, *len);
                Self::accumulate(grads, *a, dim, |s| {
                    let mut view = s.slice_mut(ndarray::s![.., start..start + len]);
                    view += g;
                });
            }
            Op::GatherRows(table, ids) => {
                let dim = self.nodes[*table].value.dim();
                Self::accumulate(grads, *table, dim, |s| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..dim.1 {
                            s[(id, j)] += g[(i, j)];
                        }
                    }
                });
            }
            Op::Conv3x3 {
                input,
                kernel,
                bias,
                h,
                w,
            } => {
                let (h, w) = (*h, *w);
                let x = &self.nodes[*input].value;
                let k = &self.nodes[*kernel].value;
                let cin = x.ncols();
                let cout = k.ncols();
                let xs = x.as_slice().unwrap();
                let ks = k.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = Array2::zeros(x.dim());
                let mut dk = Array2::zeros(k.dim());
                {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dks = dk.as_slice_mut().unwrap();
                    for ix in 0..h {
                        for iy in 0..w {
                            let r = ix * w + iy;
                            for (tap, (dxo, dyo)) in tap_offsets().into_iter().enumerate() {
                                let jx = ix as isize + dxo;
                                let jy = iy as isize + dyo;
                                if jx < 0 || jy < 0 || jx >= h as isize || jy >= w as isize {
                                    continue;
                                }
                                let src = (jx as usize * w + jy as usize) * cin;
                                let kbase = tap * cin;
                                for ci in 0..cin {
                                    let xv = xs[src + ci];
                                    let krow = (kbase + ci) * cout;
                                    let mut acc = 0.0;
                                    for co in 0..cout {
                                        let gv = gs[r * cout + co];
                                        acc += gv * ks[krow + co];
                                        dks[krow + co] += gv * xv;
                                    }
                                    dxs[src + ci] += acc;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, x.dim(), |s| *s += &dx);
                Self::accumulate(grads, *kernel, k.dim(), |s| *s += &dk);
                Self::accumulate(grads, *bias, (1, cout), |s| {
                    for r in 0..h * w {
                        for co in 0..cout {
                            s[(0, co)] += gs[r * cout + co];
                        }
                    }
                });
            }
            Op::Warp { input, taps } => {
                let dim = self.nodes[*input].value.dim();
                let c = dim.1;
                let gs = g.as_slice().unwrap();
                Self::accumulate(grads, *input, dim, |s| {
                    let ss = s.as_slice_mut().unwrap();
                    for (r, t4) in taps.taps.iter().enumerate() {
                        for &(src, wgt) in t4 {
                            if wgt == 0.0 {
                                continue;
                            }
                            let sbase = src as usize * c;
                            for ch in 0..c {
                                ss[sbase + ch] += wgt * gs[r * c + ch];
                            }
                        }
                    }
                });
            }
            Op::TemporalAttn {
                slots,
                wq,
                wk,
                wv,
                query_slot,
            } => {
                let (n, c) = self.nodes[slots[0]].value.dim();
                let ns = slots.len();
                let scale = 1.0 / (c as f64).sqrt();
                let mut q = vec![0.0; c];
                let mut kbuf = vec![0.0; c * ns];
                let mut vbuf = vec![0.0; c * ns];
                let mut scores = vec![0.0; ns];
                let mut dwq = Array2::<f64>::zeros((c, c));
                let mut dwk = Array2::<f64>::zeros((c, c));
                let mut dwv = Array2::<f64>::zeros((c, c));
                let mut dslots = vec![Array2::<f64>::zeros((n, c)); ns];
                let mut dq = vec![0.0; c];
                let mut dk = vec![0.0; c];
                let mut dv = vec![0.0; c];
                for r in 0..n {
                    self.attn_row(slots, *wq, *wk, *wv, *query_slot, r, &mut q, &mut kbuf, &mut vbuf);
                    for t in 0..ns {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += q[j] * kbuf[t * c + j];
                        }
                        scores[t] = s * scale;
                    }
                    softmax_row_inplace(&mut scores);
                    // da_t = g · v_t ; softmax backward; then fan out.
                    let grow = g.row(r);
                    let mut da = vec![0.0; ns];
                    for t in 0..ns {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += grow[j] * vbuf[t * c + j];
                        }
                        da[t] = acc;
                    }
                    let dot: f64 = (0..ns).map(|t| scores[t] * da[t]).sum();
                    dq.iter_mut().for_each(|x| *x = 0.0);
                    let wq_v = &self.nodes[*wq].value;
                    let wk_v = &self.nodes[*wk].value;
                    let wv_v = &self.nodes[*wv].value;
                    let xq = self.nodes[slots[*query_slot]].value.row(r);
                    for t in 0..ns {
                        let ds = scores[t] * (da[t] - dot) * scale;
                        let a = scores[t];
                        for j in 0..c {
                            dv[j] = a * grow[j];
                            dk[j] = ds * q[j];
                            dq[j] += ds * kbuf[t * c + j];
                        }
                        let xt = self.nodes[slots[t]].value.row(r);
                        let drow = &mut dslots[t];
                        for i in 0..c {
                            let xi = xt[i];
                            let mut dxi = 0.0;
                            for j in 0..c {
                                dwv[(i, j)] += xi * dv[j];
                                dwk[(i, j)] += xi * dk[j];
                                dxi += dv[j] * wv_v[(i, j)] + dk[j] * wk_v[(i, j)];
                            }
                            drow[(r, i)] += dxi;
                        }
                    }
                    let dq_slot = &mut dslots[*query_slot];
                    for i in 0..c {
                        let xi = xq[i];
                        let mut dxi = 0.0;
                        for j in 0..c {
                            dwq[(i, j)] += xi * dq[j];
                            dxi += dq[j] * wq_v[(i, j)];
                        }
                        dq_slot[(r, i)] += dxi;
                    }
                }
                for (t, ds) in dslots.into_iter().enumerate() {
                    Self::accumulate(grads, slots[t], (n, c), |s| *s += &ds);
                }
                Self::accumulate(grads, *wq, (c, c), |s| *s += &dwq);
                Self::accumulate(grads, *wk, (c, c), |s| *s += &dwk);
                Self::accumulate(grads, *wv, (c, c), |s| *s += &dwv);
            }
            Op::BceWithLogits { logit, label } => {
                let z = self.nodes[*logit].value[(0, 0)];
                let sigma = 1.0 / (1.0 + (-z).exp());
                let dz = (sigma - label) * g[(0, 0)];
                Self::accumulate(grads, *logit, (1, 1), |s| s[(0, 0)] += dz);
            }
        }
    }
}

fn tap_offsets() -> [(isize, isize); 9] {
    [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 0),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    /// Central finite differences against the tape for an arbitrary graph.
    fn check_grads(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[Array2<f64>],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (i, x) in inputs.iter().enumerate() {
            let g = grads[vars[i]]
                .clone()
                .unwrap_or_else(|| Array2::zeros(x.dim()));
            for r in 0..x.nrows() {
                for c in 0..x.ncols() {
                    let eval = |delta: f64| {
                        let mut tape = Tape::new();
                        let vars: Vec<Var> = inputs
                            .iter()
                            .enumerate()
                            .map(|(k, v)| {
                                let mut v = v.clone();
                                if k == i {
                                    v[(r, c)] += delta;
                                }
                                tape.leaf(v)
                            })
                            .collect();
                        let out = build(&mut tape, &vars);
                        tape.scalar(out)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let ad = g[(r, c)];
                    let denom = ad.abs().max(fd.abs()).max(1e-4);
                    assert!(
                        (ad - fd).abs() / denom < tol,
                        "input {i} ({r},{c}): ad {ad} vs fd {fd}"
                    );
                }
            }
        }
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seeded::stream(seed, "test-randn", &[]);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_chain_grads() {
        check_grads(
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let s = t.tanh(m);
                let p = t.mean_rows(s);
                let q = t.matmul_bt(p, v[2]);
                let sm = t.softmax_rows(q);
                let picked = t.slice_cols(sm, 0, 1);
                t.bce_with_logits(picked, 1.0)
            },
            &[randn(3, 4, 1), randn(4, 5, 2), randn(2, 5, 3)],
            1e-5,
        );
    }

    #[test]
    fn concat_slice_gather_grads() {
        check_grads(
            |t, v| {
                let g = t.gather_rows(v[0], &[0, 2, 2]);
                let cat = t.concat_rows(&[g, v[1]]);
                let cc = t.concat_cols(&[cat, cat]);
                let sl = t.slice_rows(cc, 1, 3);
                let m = t.mean_rows(sl);
                let m2 = t.slice_cols(m, 2, 1);
                t.bce_with_logits(m2, 0.0)
            },
            &[randn(4, 3, 4), randn(2, 3, 5)],
            1e-5,
        );
    }

    #[test]
    fn conv3x3_matches_finite_differences() {
        let (h, w, cin, cout) = (4, 3, 2, 2);
        check_grads(
            |t, v| {
                let c = t.conv3x3(v[0], v[1], v[2], h, w);
                let m = t.mean_rows(c);
                let s = t.slice_cols(m, 0, 1);
                t.bce_with_logits(s, 1.0)
            },
            &[
                randn(h * w, cin, 6),
                randn(9 * cin, cout, 7),
                randn(1, cout, 8),
            ],
            1e-5,
        );
    }

    #[test]
    fn conv3x3_matches_quadruple_loop_oracle() {
        let (h, w, cin, cout) = (5, 5, 3, 2);
        let x = randn(h * w, cin, 10);
        let k = randn(9 * cin, cout, 11);
        let b = randn(1, cout, 12);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.leaf(k.clone());
        let bv = tape.leaf(b.clone());
        let out = tape.conv3x3(xv, kv, bv, h, w);
        // Independent naive implementation.
        let mut want = Array2::zeros((h * w, cout));
        for ix in 0..h as isize {
            for iy in 0..w as isize {
                for co in 0..cout {
                    let mut acc = b[(0, co)];
                    for tap in 0..9 {
                        let (dx, dy) = tap_offsets()[tap];
                        let (jx, jy) = (ix + dx, iy + dy);
                        if jx < 0 || jy < 0 || jx >= h as isize || jy >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[((jx * w as isize + jy) as usize, ci)]
                                * k[(tap * cin + ci, co)];
                        }
                    }
                    want[((ix * w as isize + iy) as usize, co)] = acc;
                }
            }
        }
        let got = tape.value(out);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_grads_flow_through_taps() {
        let taps = Arc::new(WarpTaps {
            taps: vec![
                [(0, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)],
                [(1, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)],
                [(2, 0.5), (3, 0.5), (0, 0.0), (0, 0.0)],
            ],
            n_src_rows: 4,
        });
        check_grads(
            |t, v| {
                let wp = t.warp(v[0], taps.clone());
                let m = t.mean_rows(wp);
                let s = t.slice_cols(m, 1, 1);
                t.bce_with_logits(s, 0.0)
            },
            &[randn(4, 2, 13)],
            1e-5,
        );
    }

    #[test]
    fn temporal_attn_grads() {
        let c = 3;
        check_grads(
            |t, v| {
                let out = t.temporal_attn(&[v[0], v[1], v[2]], v[3], v[4], v[5], 1);
                let m = t.mean_rows(out);
                let s = t.slice_cols(m, 0, 1);
                t.bce_with_logits(s, 1.0)
            },
            &[
                randn(4, c, 20),
                randn(4, c, 21),
                randn(4, c, 22),
                randn(c, c, 23),
                randn(c, c, 24),
                randn(c, c, 25),
            ],
            1e-5,
        );
    }

    #[test]
    fn temporal_attn_single_slot_identity_with_unit_wv() {
        // One slot: softmax over one score is 1, so out = x · Wv; with
        // Wv = I the op is the identity.
        let x = randn(6, 3, 30);
        let eye = Array2::eye(3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wq = tape.leaf(randn(3, 3, 31));
        let wk = tape.leaf(randn(3, 3, 32));
        let wv = tape.leaf(eye);
        let out = tape.temporal_attn(&[xv], wq, wk, wv, 0);
        for (a, b) in tape.value(out).iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_slots_collapse_to_value_projection() {
        let x = randn(5, 3, 33);
        let mut tape = Tape::new();
        let s0 = tape.leaf(x.clone());
        let s1 = tape.leaf(x.clone());
        let s2 = tape.leaf(x.clone());
        let wq = tape.leaf(randn(3, 3, 34));
        let wk = tape.leaf(randn(3, 3, 35));
        let wv_m = randn(3, 3, 36);
        let wv = tape.leaf(wv_m.clone());
        let out = tape.temporal_attn(&[s0, s1, s2], wq, wk, wv, 1);
        let want = x.dot(&wv_m);
        for (a, b) in tape.value(out).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randn(7, 9, 40).mapv(|v| v * 50.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let sm = tape.softmax_rows(xv);
        for row in tape.value(sm).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.leaf(arr2(&[[0.0]]));
        let l0 = tape.bce_with_logits(z, 0.0);
        let l1 = tape.bce_with_logits(z, 1.0);
        assert!((tape.scalar(l0) - 2.0f64.ln()).abs() < 1e-15);
        assert!((tape.scalar(l1) - 2.0f64.ln()).abs() < 1e-15);
    }
}
