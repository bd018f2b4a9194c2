use crate::error::{Error, Result};
use crate::numerics::{
    batch_variance, column_means, cosine_similarity_matrix, logsumexp, pairwise_sq_dists,
    row_norms, Matrix, NORM_FLOOR,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powi(Var, i32),
    Floor(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    RowSum(Var),
    LogSumExpRows(Var),
    RowSoftmax(Var),
    Diag(Var),
    Element(Var, usize, usize),
    SliceRows(Var, usize),
    ConcatRows(Var, Var),
    PairwiseSqDist(Var, Var),
    CosineSim(Var, Var),
    BatchVariance(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Records matrix operations for one forward pass; [`Tape::backward`]
/// then propagates adjoints in reverse insertion order.
///
/// Node indices only ever point backwards, so the graph is acyclic by
/// construction. Shape errors surface when a node is added, never during
/// the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pair_evals: u64,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    /// Number of row-pair evaluations performed by the pairwise distance and
    /// similarity nodes recorded so far (kernel evaluations).
    pub fn pair_evaluations(&self) -> u64 {
        self.pair_evals
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Input node: a parameter or a constant. Constants simply never have
    /// their gradient read.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A copy of `v`'s current value with no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product of equal-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Adds a `1 x n` row to every row of an `m x n` node (bias add).
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(mismatch("add_row", mv, rv));
        }
        let mut value = mv.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(m, row), value))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn check_scalar(&self, s: Var, op: &'static str) -> Result<f64> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(mismatch(op, sv, sv));
        }
        Ok(sv.item())
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar(s, "mul_scalar")?;
        let value = self.value(a).scale(c);
        Ok(self.push(Op::MulScalar(a, s), value))
    }

    /// Divides every entry of `a` by the 1x1 node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.check_scalar(s, "div_scalar")?;
        let value = self.value(a).map(|x| x / c);
        Ok(self.push(Op::DivScalar(a, s), value))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn powi(&mut self, a: Var, p: i32) -> Var {
        let value = self.value(a).map(|x| x.powi(p));
        self.push(Op::Powi(a, p), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powi(a, 2)
    }

    /// `max(x, floor)`; no gradient flows through floored entries.
    pub fn floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(Op::Floor(a, floor), value)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `m x n -> m x 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_parts(
            av.rows(),
            1,
            av.row_iter().map(|r| r.iter().sum()).collect(),
        );
        self.push(Op::RowSum(a), value)
    }

    /// `m x n -> m x 1` stable log-sum-exp per row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_parts(av.rows(), 1, av.row_iter().map(logsumexp).collect());
        self.push(Op::LogSumExpRows(a), value)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.push(Op::RowSoftmax(a), value)
    }

    /// Diagonal of a square node as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != av.cols() {
            return Err(mismatch("diag", av, av));
        }
        let value = Matrix::from_parts(av.rows(), 1, (0..av.rows()).map(|i| av[(i, i)]).collect());
        Ok(self.push(Op::Diag(a), value))
    }

    pub fn element(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let av = self.value(a);
        if i >= av.rows() || j >= av.cols() {
            return Err(Error::ShapeMismatch {
                op: "element",
                left: av.shape(),
                right: (i, j),
            });
        }
        let value = Matrix::scalar(av[(i, j)]);
        Ok(self.push(Op::Element(a, i, j), value))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: av.shape(),
                right: (start, end),
            });
        }
        let value = av.slice_rows(start, end);
        Ok(self.push(Op::SliceRows(a, start), value))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("concat_rows", av, bv));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Matrix::from_parts(av.rows() + bv.rows(), av.cols(), data);
        Ok(self.push(Op::ConcatRows(a, b), value))
    }

    /// `D[i][j] = ||a_i - b_j||^2`.
    pub fn pairwise_sq_dists(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = pairwise_sq_dists(self.value(a), self.value(b))?;
        self.pair_evals += value.len() as u64;
        Ok(self.push(Op::PairwiseSqDist(a, b), value))
    }

    /// Cosine similarity matrix with norm floor.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = cosine_similarity_matrix(self.value(a), self.value(b))?;
        self.pair_evals += value.len() as u64;
        Ok(self.push(Op::CosineSim(a, b), value))
    }

    /// Bessel-corrected spread of the rows, as a 1x1 node.
    pub fn batch_variance(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(batch_variance(self.value(a))?);
        Ok(self.push(Op::BatchVariance(a), value))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be 1x1)",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        for g in adj.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        adj: &mut [Option<Matrix>],
    ) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(&b).transpose())?;
                let gb = val(&a).transpose().matmul(g)?;
                accumulate(&mut adj[a.0], ga);
                accumulate(&mut adj[b.0], gb);
            }
            Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(&mut adj[a.0], g.zip_map(val(&b), |x, y| x * y)?);
                accumulate(&mut adj[b.0], g.zip_map(val(&a), |x, y| x * y)?);
            }
            Op::AddRow(m, row) => {
                let mut gr = Matrix::zeros(1, g.cols());
                for r in g.row_iter() {
                    for (acc, x) in gr.data_mut().iter_mut().zip(r) {
                        *acc += x;
                    }
                }
                accumulate(&mut adj[m.0], g.clone());
                accumulate(&mut adj[row.0], gr);
            }
            Op::AddConst(a) => accumulate(&mut adj[a.0], g.clone()),
            Op::Scale(a, c) => accumulate(&mut adj[a.0], g.scale(c)),
            Op::MulScalar(a, s) => {
                let c = val(&s).item();
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(val(&a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                accumulate(&mut adj[a.0], g.scale(c));
                accumulate(&mut adj[s.0], Matrix::scalar(gs));
            }
            Op::DivScalar(a, s) => {
                let c = val(&s).item();
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(val(&a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                accumulate(&mut adj[a.0], g.scale(1.0 / c));
                accumulate(&mut adj[s.0], Matrix::scalar(-gs / (c * c)));
            }
            Op::Tanh(a) => accumulate(&mut adj[a.0], g.zip_map(out, |x, y| x * (1.0 - y * y))?),
            Op::Relu(a) => accumulate(
                &mut adj[a.0],
                g.zip_map(val(&a), |x, y| if y > 0.0 { x } else { 0.0 })?,
            ),
            Op::Exp(a) => accumulate(&mut adj[a.0], g.zip_map(out, |x, y| x * y)?),
            Op::Log(a) => accumulate(&mut adj[a.0], g.zip_map(val(&a), |x, y| x / y)?),
            Op::Powi(a, p) => accumulate(
                &mut adj[a.0],
                g.zip_map(val(&a), |x, y| x * p as f64 * y.powi(p - 1))?,
            ),
            Op::Floor(a, floor) => accumulate(
                &mut adj[a.0],
                g.zip_map(val(&a), |x, y| if y > floor { x } else { 0.0 })?,
            ),
            Op::Clamp(a, lo, hi) => accumulate(
                &mut adj[a.0],
                g.zip_map(val(&a), |x, y| if (lo..=hi).contains(&y) { x } else { 0.0 })?,
            ),
            Op::Sum(a) => {
                let (r, c) = val(&a).shape();
                accumulate(&mut adj[a.0], Matrix::filled(r, c, g.item()));
            }
            Op::RowSum(a) => {
                let (r, c) = val(&a).shape();
                accumulate(&mut adj[a.0], Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::LogSumExpRows(a) => {
                let av = val(&a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |i, j| {
                    g[(i, 0)] * (av[(i, j)] - out[(i, 0)]).exp()
                });
                accumulate(&mut adj[a.0], ga);
            }
            Op::RowSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, gi) = (out.row(i), g.row(i));
                    let inner: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for (o, (yy, gg)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(gi)) {
                        *o = yy * (gg - inner);
                    }
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::Diag(a) => {
                let n = g.rows();
                accumulate(
                    &mut adj[a.0],
                    Matrix::from_fn(n, n, |i, j| if i == j { g[(i, 0)] } else { 0.0 }),
                );
            }
            Op::Element(a, i0, j0) => {
                let (r, c) = val(&a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga[(i0, j0)] = g.item();
                accumulate(&mut adj[a.0], ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(&a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(&mut adj[a.0], ga);
            }
            Op::ConcatRows(a, b) => {
                let ra = val(&a).rows();
                accumulate(&mut adj[a.0], g.slice_rows(0, ra));
                accumulate(&mut adj[b.0], g.slice_rows(ra, g.rows()));
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (val(&a), val(&b));
                // dA_i = 2 (rowsum(G)_i a_i - (G B)_i),  dB_j = 2 (colsum(G)_j b_j - (G^T A)_j)
                let gb = g.matmul(bv)?;
                let gta = g.transpose().matmul(av)?;
                let ga = Matrix::from_fn(av.rows(), av.cols(), |i, k| {
                    let rs: f64 = g.row(i).iter().sum();
                    2.0 * (rs * av[(i, k)] - gb[(i, k)])
                });
                let colsum: Vec<f64> = (0..g.cols())
                    .map(|j| (0..g.rows()).map(|i| g[(i, j)]).sum())
                    .collect();
                let gbm = Matrix::from_fn(bv.rows(), bv.cols(), |j, k| {
                    2.0 * (colsum[j] * bv[(j, k)] - gta[(j, k)])
                });
                accumulate(&mut adj[a.0], ga);
                accumulate(&mut adj[b.0], gbm);
            }
            Op::CosineSim(a, b) => {
                let (av, bv) = (val(&a), val(&b));
                let (na, nb) = (row_norms(av), row_norms(bv));
                let ahat = Matrix::from_fn(av.rows(), av.cols(), |i, k| av[(i, k)] / na[i]);
                let bhat = Matrix::from_fn(bv.rows(), bv.cols(), |j, k| bv[(j, k)] / nb[j]);
                let gahat = g.matmul(&bhat)?;
                let gbhat = g.transpose().matmul(&ahat)?;
                accumulate(&mut adj[a.0], normalize_backward(av, &ahat, &na, &gahat));
                accumulate(&mut adj[b.0], normalize_backward(bv, &bhat, &nb, &gbhat));
            }
            Op::BatchVariance(a) => {
                let av = val(&a);
                let mean = column_means(av);
                let c = 2.0 * g.item() / (av.rows() - 1) as f64;
                accumulate(
                    &mut adj[a.0],
                    Matrix::from_fn(av.rows(), av.cols(), |i, k| c * (av[(i, k)] - mean[k])),
                );
            }
        }
        Ok(())
    }
}

/// Backward through `x_hat = x / max(|x|, floor)` row by row.
fn normalize_backward(x: &Matrix, xhat: &Matrix, norms: &[f64], gxhat: &Matrix) -> Matrix {
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    for (i, &n) in norms.iter().enumerate().take(x.rows()) {
        let (xh, gh) = (xhat.row(i), gxhat.row(i));
        let floored = n <= NORM_FLOOR;
        let proj: f64 = xh.iter().zip(gh).map(|(a, b)| a * b).sum();
        for (o, (h, gg)) in gx.row_mut(i).iter_mut().zip(xh.iter().zip(gh)) {
            *o = if floored { gg / n } else { (gg - h * proj) / n };
        }
    }
    gx
}
