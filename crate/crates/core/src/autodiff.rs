//! A minimal tape-based reverse-mode differentiation engine over dense
//! `f64` matrices, with just the operations the encoder-decoder needs.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 × d` row over every row of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// tanh-approximated GELU
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    /// Row `b` of the output is the mean of input rows with `group[i] == b`.
    MeanPool {
        x: Var,
        group: Vec<usize>,
        counts: Vec<usize>,
    },
    /// Row `t` is `log softmax(logits[t])[target[t]]`.
    GoldLogProb {
        logits: Var,
        targets: Vec<u32>,
        probs: Mat,
    },
    Sum(Var),
}

struct Node {
    op: Op,
    value: Option<Mat>,
}

/// Records a forward computation so it can be differentiated.
pub struct Tape<'p> {
    params: &'p [Mat],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Mat>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => self.params[i].view(),
            _ => node.value.as_ref().expect("node without value").view(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(Op::Input, Some(m))
    }

    /// Parameter `i`; repeated calls return the same node.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.push(Op::Param(i), None);
        self.param_vars[i] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.dim(), bv.dim())));
        }
        let out = av.dot(&bv);
        Ok(self.push(Op::MatMul(a, b), Some(out)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::shape("matmul_t", format!("{:?} x {:?}ᵀ", av.dim(), bv.dim())));
        }
        let out = av.dot(&bv.t());
        Ok(self.push(Op::MatMulT(a, b), Some(out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.dim(), bv.dim())));
        }
        let out = &av + &bv;
        Ok(self.push(Op::Add(a, b), Some(out)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", av.dim(), rv.dim())));
        }
        let out = &av + &rv;
        Ok(self.push(Op::AddRow(a, row), Some(out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.dim(), bv.dim())));
        }
        let out = &av * &bv;
        Ok(self.push(Op::Mul(a, b), Some(out)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        self.push(Op::Scale(a, k), Some(out))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 0.5 * x * (1.0 + gelu_tanh(x)));
        self.push(Op::Gelu(a), Some(out))
    }

    /// Row-wise softmax with max subtraction. Entries equal to `-inf` get
    /// probability zero (used for causal masking).
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), Some(out))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let d = xv.ncols();
        if gv.dim() != (1, d) || bv.dim() != (1, d) {
            return Err(Error::shape("layer_norm", format!("{:?} with gain {:?}", xv.dim(), gv.dim())));
        }
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * &gv + bv;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Some(out),
        ))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Mat::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= tv.nrows() {
                return Err(Error::shape("gather", format!("id {id} >= {} rows", tv.nrows())));
            }
            out.row_mut(r).assign(&tv.row(id));
        }
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Some(out),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.ncols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {}", xv.ncols())));
        }
        let out = xv.slice(s![.., start..end]).to_owned();
        Ok(self.push(Op::SliceCols { x, start }, Some(out)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Some(out)))
    }

    /// Averages the rows of `x` into `n_groups` rows by `group[i]`.
    pub fn mean_pool(&mut self, x: Var, group: &[usize], n_groups: usize) -> Result<Var> {
        let xv = self.value(x);
        if group.len() != xv.nrows() {
            return Err(Error::shape("mean_pool", format!("{} groups for {} rows", group.len(), xv.nrows())));
        }
        let out = mean_pool_rows(xv, group, n_groups)?;
        let mut counts = vec![0usize; n_groups];
        for &g in group {
            counts[g] += 1;
        }
        Ok(self.push(
            Op::MeanPool {
                x,
                group: group.to_vec(),
                counts,
            },
            Some(out),
        ))
    }

    /// Per-row log-probability of the gold target, `[T × 1]`.
    pub fn gold_log_prob(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != targets.len() {
            return Err(Error::shape("gold_log_prob", format!("{} rows, {} targets", lv.nrows(), targets.len())));
        }
        let probs = softmax_rows(lv);
        let mut out = Mat::zeros((targets.len(), 1));
        for (t, &y) in targets.iter().enumerate() {
            let y = y as usize;
            if y >= lv.ncols() {
                return Err(Error::shape("gold_log_prob", format!("target {y} >= vocab {}", lv.ncols())));
            }
            let row = lv.row(t);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out[[t, 0]] = row[y] - lse;
        }
        Ok(self.push(
            Op::GoldLogProb {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Some(out),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), Some(out))
    }

    /// Reverse sweep from the `1 × 1` node `root`, seeded with `seed`.
    pub fn backward(&self, root: Var, seed: f64) -> Result<Gradients> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::shape("backward", "root must be 1 x 1"));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), seed));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(&self.value(*b));
                    let db = g.t().dot(&self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.value(*b);
                    let db = &g * &self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, g.mapv(|v| v * k));
                }
                Op::Gelu(a) => {
                    let mut da = g.clone();
                    Zip::from(&mut da).and(&self.value(*a)).for_each(|d, &x| {
                        let t = gelu_tanh(x);
                        let inner = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner;
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut da = &g * y;
                    for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|d, &p| *d -= p * dot);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = xhat.ncols() as f64;
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gv;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &h| *o = is / d * (d * a - sum_dh - h * sum_dh_xh));
                    }
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id as usize);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::MeanPool { x, group, counts } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (r, &b) in group.iter().enumerate() {
                        let inv = 1.0 / counts[b] as f64;
                        Zip::from(dx.row_mut(r))
                            .and(&g.row(b))
                            .for_each(|o, &v| *o = v * inv);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GoldLogProb {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut dl = probs.clone();
                    for (t, &y) in targets.iter().enumerate() {
                        let gt = g[[t, 0]];
                        dl.row_mut(t).mapv_inplace(|p| -p * gt);
                        dl[[t, y as usize]] += gt;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    accumulate(&mut grads, *a, Mat::from_elem(self.value(*a).dim(), k));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_index: self.param_vars.clone(),
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_K * x * x * x)).tanh()
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

pub(crate) fn softmax_rows(x: ArrayView2<'_, f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub(crate) fn mean_pool_rows(x: ArrayView2<'_, f64>, group: &[usize], n_groups: usize) -> Result<Mat> {
    let mut out = Mat::zeros((n_groups, x.ncols()));
    let mut counts = vec![0usize; n_groups];
    for (r, &b) in group.iter().enumerate() {
        if b >= n_groups {
            return Err(Error::shape("mean_pool", format!("group {b} >= {n_groups}")));
        }
        let mut row = out.row_mut(b);
        if counts[b] == 0 {
            row.assign(&x.row(r));
        } else {
            row += &x.row(r);
        }
        counts[b] += 1;
    }
    for (b, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::shape("mean_pool", format!("group {b} is empty")));
        }
        if c > 1 {
            let inv = c as f64;
            out.row_mut(b).mapv_inplace(|v| v / inv);
        }
    }
    Ok(out)
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    param_index: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for parameter `i`, `None` if the parameter was unused.
    pub fn param(&self, i: usize) -> Option<&Mat> {
        self.param_index[i].and_then(|v| self.get(v))
    }
}
