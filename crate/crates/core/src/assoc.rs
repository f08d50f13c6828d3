//! The cycle-association objective.
//!
//! Two sets of unit-norm embeddings are matched forward and backward through
//! soft row-wise assignments of their cosine affinity matrix; the product of
//! the two assignments is the cycle matrix, whose deviation from the identity
//! supervises training. Two loss variants are provided: a mean-L1 penalty
//! against the identity, and a margin-relaxed variant that only asks each
//! diagonal entry to dominate its row and column competitors. Both come with
//! exact hand-derived gradients. A Hungarian solver provides the discrete
//! assignment oracle used for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{
    matmul, matmul_backward, row_softmax, row_softmax_backward, GradientPair, Matrix,
};

/// Tolerance for the unit-norm invariant of embedding columns.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A `D x K` matrix whose columns are unit-norm embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    /// Wraps a matrix, requiring every column norm to be 1 within
    /// [`UNIT_NORM_TOL`].
    pub fn new(m: Matrix) -> Result<Self> {
        for j in 0..m.cols() {
            let norm: f64 = (0..m.rows()).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidParam(format!(
                    "embedding column {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self(m))
    }

    /// Normalizes the columns of `m` and wraps the result.
    pub fn from_unnormalized(m: &Matrix) -> Result<Self> {
        Ok(Self(crate::matrix::l2_normalize_columns(m)?))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn count(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Pairwise cosine similarities between two embedding sets, `K1 x K2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix(Matrix);

impl AffinityMatrix {
    /// Wraps a matrix of cosines; entries must lie in `[-1, 1]` up to a 1e-9
    /// slack for accumulated rounding.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.data().iter().any(|&v| !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::InvalidParam("affinity entry outside cosine range".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn transposed(&self) -> AffinityMatrix {
        AffinityMatrix(self.0.transpose())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentKind {
    Soft,
    Hard,
}

/// A forward (`K1 x K2`) or backward (`K2 x K1`) assignment.
///
/// Soft assignments are row-stochastic; hard ones are 0/1 with at most one 1
/// per row and per column.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    matrix: Matrix,
    kind: AssignmentKind,
}

impl AssignmentMatrix {
    pub fn soft(m: Matrix) -> Result<Self> {
        for i in 0..m.rows() {
            let sum: f64 = m.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-12 || m.row(i).iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidParam(format!(
                    "soft assignment row {i} is not stochastic (sum {sum})"
                )));
            }
        }
        Ok(Self { matrix: m, kind: AssignmentKind::Soft })
    }

    pub fn hard(m: Matrix) -> Result<Self> {
        let mut col_used = vec![false; m.cols()];
        for i in 0..m.rows() {
            let mut row_ones = 0;
            for j in 0..m.cols() {
                let v = m.get(i, j);
                if v == 1.0 {
                    row_ones += 1;
                    if col_used[j] {
                        return Err(Error::InvalidParam(format!(
                            "hard assignment column {j} used twice"
                        )));
                    }
                    col_used[j] = true;
                } else if v != 0.0 {
                    return Err(Error::InvalidParam("hard assignment entry not in {0,1}".into()));
                }
            }
            if row_ones > 1 {
                return Err(Error::InvalidParam(format!("hard assignment row {i} has {row_ones} ones")));
            }
        }
        Ok(Self { matrix: m, kind: AssignmentKind::Hard })
    }

    pub fn kind(&self) -> AssignmentKind {
        self.kind
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// For each row, the assigned column (hard: the position of its 1;
    /// soft: the row argmax).
    pub fn row_targets(&self) -> Vec<Option<usize>> {
        (0..self.matrix.rows())
            .map(|i| {
                match self.kind {
                    AssignmentKind::Hard => {
                        (0..self.matrix.cols()).find(|&j| self.matrix.get(i, j) == 1.0)
                    }
                    AssignmentKind::Soft => {
                        let row = self.matrix.row(i);
                        let mut best = 0;
                        for j in 1..row.len() {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        Some(best)
                    }
                }
            })
            .collect()
    }
}

/// Product of a forward and a backward assignment, `K1 x K1` row-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleMatrix(Matrix);

impl CycleMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Shape(format!("cycle matrix must be square, got {}x{}", m.rows(), m.cols())));
        }
        for i in 0..m.rows() {
            let sum: f64 = m.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-12 || m.row(i).iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidParam(format!("cycle matrix row {i} is not stochastic (sum {sum})")));
            }
        }
        Ok(Self(m))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Hyper-parameters of the size-adaptive softmax temperature; both live in
/// the open interval (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub epsilon: f64,
    pub delta: f64,
}

impl TemperatureConfig {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidParam(format!("epsilon must be in (0,1), got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParam(format!("delta must be in (0,1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, delta: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Symmetric,
    Asymmetric,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Symmetric => "symmetric",
            LossKind::Asymmetric => "asymmetric",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub temperature: TemperatureConfig,
}

impl LossConfig {
    pub fn new(kind: LossKind, margin: f64, temperature: TemperatureConfig) -> Result<Self> {
        if !(margin > 0.0 && margin < 1.0) {
            return Err(Error::InvalidParam(format!("margin must be in (0,1), got {margin}")));
        }
        Ok(Self { kind, margin, temperature })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Asymmetric, margin: 0.65, temperature: TemperatureConfig::default() }
    }
}

/// Cosine affinity `S = X1^T X2`.
pub fn affinity(x1: &EmbeddingMatrix, x2: &EmbeddingMatrix) -> Result<AffinityMatrix> {
    if x1.dim() != x2.dim() {
        return Err(Error::Shape(format!(
            "affinity: embedding dims {} vs {}",
            x1.dim(),
            x2.dim()
        )));
    }
    let s = matmul(&x1.matrix().transpose(), x2.matrix())?;
    AffinityMatrix::new(s)
}

/// Size-adaptive softmax temperature
/// `T = (1/epsilon) * ln((delta*(K-1) + 1) / (1 - delta))`.
///
/// With `delta = 0.5` this reduces to `(1/epsilon) * ln(K+1)`. Row length is
/// what drives the softening, so the forward pass uses the length of A's rows
/// (K2) and the backward pass recomputes with K1.
pub fn adaptive_temperature(k: usize, cfg: &TemperatureConfig) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParam("temperature needs K >= 1".into()));
    }
    let k = k as f64;
    Ok((1.0 / cfg.epsilon) * ((cfg.delta * (k - 1.0) + 1.0) / (1.0 - cfg.delta)).ln())
}

/// Differentiable assignment: row-wise softmax of the scaled affinity, the
/// one-to-one constraint removed.
pub fn soft_assign(s: &AffinityMatrix, temp: f64) -> Result<AssignmentMatrix> {
    AssignmentMatrix::soft(row_softmax(s.matrix(), temp)?)
}

/// Cycle matrix `C = A A'`.
pub fn cycle(a: &AssignmentMatrix, a_back: &AssignmentMatrix) -> Result<CycleMatrix> {
    if a.matrix().rows() != a_back.matrix().cols() {
        return Err(Error::Shape(format!(
            "cycle: {}x{} times {}x{} does not close",
            a.matrix().rows(),
            a.matrix().cols(),
            a_back.matrix().rows(),
            a_back.matrix().cols()
        )));
    }
    let c = matmul(a.matrix(), a_back.matrix())?;
    CycleMatrix::new(c)
}

/// Mean L1 distance between the cycle matrix and the identity.
pub fn loss_symmetric(c: &CycleMatrix) -> f64 {
    loss_symmetric_matrix(c.matrix())
}

fn loss_symmetric_matrix(c: &Matrix) -> f64 {
    let k = c.rows();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            total += (c.get(i, j) - target).abs();
        }
    }
    total / (k * k) as f64
}

/// Margin-relaxed loss: each diagonal entry must dominate its row and column
/// competitors by `margin`, hinged. A 1x1 cycle matrix has no competitors and
/// scores 0.
pub fn loss_asymmetric(c: &CycleMatrix, margin: f64) -> Result<f64> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::InvalidParam(format!("margin must be in (0,1), got {margin}")));
    }
    Ok(loss_asymmetric_matrix(c.matrix(), margin))
}

fn loss_asymmetric_matrix(c: &Matrix, margin: f64) -> f64 {
    let k = c.rows();
    if k == 1 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        let diag = c.get(i, i);
        let row_max = max_excluding(c, i, true).0;
        let col_max = max_excluding(c, i, false).0;
        total += (row_max - diag + margin).max(0.0);
        total += (col_max - diag + margin).max(0.0);
    }
    total / k as f64
}

/// Largest off-diagonal entry of row (or column) `i`, with the index of the
/// first maximizer in scan order.
fn max_excluding(c: &Matrix, i: usize, row: bool) -> (f64, usize) {
    let k = c.rows();
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = usize::MAX;
    for t in 0..k {
        if t == i {
            continue;
        }
        let v = if row { c.get(i, t) } else { c.get(t, i) };
        if v > best {
            best = v;
            best_idx = t;
        }
    }
    (best, best_idx)
}

/// Everything the backward pass needs, retained from a forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    loss: f64,
    swapped: bool,
    kind: LossKind,
    margin: f64,
    x1: Matrix,
    x2: Matrix,
    affinity: Matrix,
    assign_fwd: Matrix,
    assign_bwd: Matrix,
    cycle: Matrix,
    temp_fwd: f64,
    temp_bwd: f64,
}

impl ForwardPass {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// True when the inputs were exchanged to keep K1 <= K2.
    pub fn swapped(&self) -> bool {
        self.swapped
    }

    /// Post-swap affinity matrix (K1 x K2 with K1 <= K2).
    pub fn affinity(&self) -> &Matrix {
        &self.affinity
    }

    pub fn cycle(&self) -> &Matrix {
        &self.cycle
    }

    pub fn temperatures(&self) -> (f64, f64) {
        (self.temp_fwd, self.temp_bwd)
    }

    /// A single-instance batch carries no association signal: the
    /// margin-relaxed loss is identically 0 there.
    pub fn degenerate_single_instance(&self) -> bool {
        self.cycle.rows() == 1 && self.kind == LossKind::Asymmetric
    }

    /// Whether the margin hinges sit within `tol` of a kink or of a tied
    /// argmax, where the loss is not differentiable. Gradient checks resample
    /// such inputs. The mean-L1 loss has no crossable kinks on the interior
    /// of the stochastic polytope, so it never rejects.
    pub fn near_hinge_tie(&self, tol: f64) -> bool {
        if self.kind == LossKind::Symmetric {
            return false;
        }
        let c = &self.cycle;
        let k = c.rows();
        if k < 2 {
            return false;
        }
        for i in 0..k {
            let diag = c.get(i, i);
            for row in [true, false] {
                let (max1, idx) = max_excluding(c, i, row);
                // runner-up to the max
                let mut max2 = f64::NEG_INFINITY;
                for t in 0..k {
                    if t == i || t == idx {
                        continue;
                    }
                    let v = if row { c.get(i, t) } else { c.get(t, i) };
                    max2 = max2.max(v);
                }
                if k > 2 && (max1 - max2).abs() < tol {
                    return true;
                }
                if (max1 - diag + self.margin).abs() < tol {
                    return true;
                }
            }
        }
        false
    }
}

/// Full differentiable pipeline on typed unit-norm embeddings.
///
/// Applies the swap rule (inputs exchanged when K1 > K2), computes the
/// affinity, both adaptive temperatures, both soft assignments, the cycle
/// matrix and the configured loss, returning the tape for [`backward`].
pub fn forward(
    x1: &EmbeddingMatrix,
    x2: &EmbeddingMatrix,
    cfg: &LossConfig,
) -> Result<ForwardPass> {
    if x1.dim() != x2.dim() {
        return Err(Error::Shape(format!("forward: embedding dims {} vs {}", x1.dim(), x2.dim())));
    }
    forward_raw(x1.matrix(), x2.matrix(), cfg)
}

/// Same pipeline on raw matrices, without the unit-norm check.
///
/// Gradient checks need this: finite-difference probes perturb the inputs
/// off the unit sphere, and the loss is defined (and differentiated) as an
/// unconstrained function of the matrices.
pub fn forward_raw(x1: &Matrix, x2: &Matrix, cfg: &LossConfig) -> Result<ForwardPass> {
    if x1.rows() != x2.rows() {
        return Err(Error::Shape(format!("forward: embedding dims {} vs {}", x1.rows(), x2.rows())));
    }
    let swapped = x1.cols() > x2.cols();
    let (x1, x2) = if swapped { (x2.clone(), x1.clone()) } else { (x1.clone(), x2.clone()) };

    let s = matmul(&x1.transpose(), &x2)?;
    let temp_fwd = adaptive_temperature(s.cols(), &cfg.temperature)?;
    let temp_bwd = adaptive_temperature(s.rows(), &cfg.temperature)?;
    let a = row_softmax(&s, temp_fwd)?;
    let a_back = row_softmax(&s.transpose(), temp_bwd)?;
    let c = matmul(&a, &a_back)?;
    let loss = match cfg.kind {
        LossKind::Symmetric => loss_symmetric_matrix(&c),
        LossKind::Asymmetric => loss_asymmetric_matrix(&c, cfg.margin),
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("cycle association loss".into()));
    }
    Ok(ForwardPass {
        loss,
        swapped,
        kind: cfg.kind,
        margin: cfg.margin,
        x1,
        x2,
        affinity: s,
        assign_fwd: a,
        assign_bwd: a_back,
        cycle: c,
        temp_fwd,
        temp_bwd,
    })
}

/// Exact gradient of the recorded loss with respect to the original (pre-swap)
/// inputs, assembled by chain rule through the loss, the cycle product, both
/// softmaxes and the affinity product.
///
/// At a tied argmax in the margin terms the full subgradient goes to the
/// first maximizer in row-major scan order.
pub fn backward(tape: &ForwardPass) -> GradientPair {
    let g_cycle = match tape.kind {
        LossKind::Symmetric => grad_loss_symmetric(&tape.cycle),
        LossKind::Asymmetric => grad_loss_asymmetric(&tape.cycle, tape.margin),
    };

    // tape shapes are consistent by construction
    let (g_a, g_aback) = matmul_backward(&g_cycle, &tape.assign_fwd, &tape.assign_bwd)
        .expect("cycle backward shapes");
    let g_s_fwd = row_softmax_backward(&tape.assign_fwd, &g_a, tape.temp_fwd)
        .expect("forward softmax backward shapes");
    let g_st_bwd = row_softmax_backward(&tape.assign_bwd, &g_aback, tape.temp_bwd)
        .expect("backward softmax backward shapes");
    let g_s = g_s_fwd.add(&g_st_bwd.transpose()).expect("affinity gradient shapes");

    // S = X1^T X2
    let d_x1 = matmul(&tape.x2, &g_s.transpose()).expect("dX1 shapes");
    let d_x2 = matmul(&tape.x1, &g_s).expect("dX2 shapes");

    if tape.swapped {
        GradientPair { d_x1: d_x2, d_x2: d_x1 }
    } else {
        GradientPair { d_x1, d_x2 }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn grad_loss_symmetric(c: &Matrix) -> Matrix {
    let k = c.rows();
    let scale = 1.0 / (k * k) as f64;
    Matrix::from_fn(k, k, |i, j| {
        let target = if i == j { 1.0 } else { 0.0 };
        scale * sign(c.get(i, j) - target)
    })
}

fn grad_loss_asymmetric(c: &Matrix, margin: f64) -> Matrix {
    let k = c.rows();
    let mut g = Matrix::zeros(k, k);
    if k == 1 {
        return g;
    }
    let scale = 1.0 / k as f64;
    for i in 0..k {
        let diag = c.get(i, i);
        let (row_max, row_idx) = max_excluding(c, i, true);
        if row_max - diag + margin > 0.0 {
            g.set(i, row_idx, g.get(i, row_idx) + scale);
            g.set(i, i, g.get(i, i) - scale);
        }
        let (col_max, col_idx) = max_excluding(c, i, false);
        if col_max - diag + margin > 0.0 {
            g.set(col_idx, i, g.get(col_idx, i) + scale);
            g.set(i, i, g.get(i, i) - scale);
        }
    }
    g
}

/// Optimal hard assignment maximizing total similarity.
///
/// Requires `K1 <= K2` (apply the swap rule first); every row is assigned and
/// `K2 - K1` columns stay free. Deterministic: on slack ties the solver
/// prefers lower column indices.
pub fn hungarian(s: &AffinityMatrix) -> Result<AssignmentMatrix> {
    let m = s.matrix();
    if m.rows() > m.cols() {
        return Err(Error::Shape(format!(
            "hungarian: {} rows > {} cols, swap inputs first",
            m.rows(),
            m.cols()
        )));
    }
    let targets = assign_max(m);
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (i, t) in targets.iter().enumerate() {
        let j = t.expect("rows <= cols leaves every row assigned");
        out.set(i, j, 1.0);
    }
    AssignmentMatrix::hard(out)
}

/// Runs the discrete matching forward on `S` and backward on `S^T` and
/// returns the fraction of the K1 row instances that come back to themselves.
pub fn hard_cycle_consistency(s: &AffinityMatrix) -> f64 {
    let forward_map = assign_max(s.matrix());
    let backward_map = assign_max(&s.matrix().transpose());
    let k1 = s.matrix().rows();
    let consistent = forward_map
        .iter()
        .enumerate()
        .filter(|(i, t)| t.is_some_and(|j| backward_map[j] == Some(*i)))
        .count();
    consistent as f64 / k1 as f64
}

/// Row-to-column assignment maximizing total similarity on an arbitrary
/// rectangular matrix; exactly `min(rows, cols)` rows are matched.
fn assign_max(s: &Matrix) -> Vec<Option<usize>> {
    if s.rows() <= s.cols() {
        potentials_assign(s).into_iter().map(Some).collect()
    } else {
        let col_to_row = potentials_assign(&s.transpose());
        let mut row_to_col = vec![None; s.rows()];
        for (c, r) in col_to_row.into_iter().enumerate() {
            row_to_col[r] = Some(c);
        }
        row_to_col
    }
}

/// O(n^3) assignment via potentials (Jonker-style shortest augmenting paths),
/// minimizing the negated similarity. Requires rows <= cols. Columns are
/// scanned in ascending order and slack comparisons are strict, so ties
/// resolve toward lower column indices.
fn potentials_assign(s: &Matrix) -> Vec<usize> {
    let n = s.rows();
    let m = s.cols();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = 1-based row matched to column j; 0 = free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = -s.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(row_to_col.iter().all(|&c| c != usize::MAX));
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::finite_difference_check;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn unit_columns(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Matrix {
        let raw = Matrix::from_fn(d, k, |_, _| rng.gen_range(-1.0..1.0));
        crate::matrix::l2_normalize_columns(&raw).unwrap()
    }

    fn embedding(rng: &mut ChaCha8Rng, d: usize, k: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(unit_columns(rng, d, k)).unwrap()
    }

    // ------------------------------------------------------------------
    // independent straight-line re-implementation, used as the oracle for
    // the composed pipeline; plain loops, no shared code with the library
    // ------------------------------------------------------------------
    fn oracle_loss(x1: &Matrix, x2: &Matrix, cfg: &LossConfig) -> f64 {
        let (d, mut k1, mut k2) = (x1.rows(), x1.cols(), x2.cols());
        let (x1, x2) = if k1 > k2 {
            std::mem::swap(&mut k1, &mut k2);
            (x2, x1)
        } else {
            (x1, x2)
        };
        let mut s = vec![vec![0.0f64; k2]; k1];
        for i in 0..k1 {
            for j in 0..k2 {
                for r in 0..d {
                    s[i][j] += x1.get(r, i) * x2.get(r, j);
                }
            }
        }
        let eps = cfg.temperature.epsilon;
        let del = cfg.temperature.delta;
        let t_fwd = ((del * (k2 as f64 - 1.0) + 1.0) / (1.0 - del)).ln() / eps;
        let t_bwd = ((del * (k1 as f64 - 1.0) + 1.0) / (1.0 - del)).ln() / eps;
        let softmax_row = |vals: Vec<f64>, t: f64| -> Vec<f64> {
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(t * b));
            let exps: Vec<f64> = vals.iter().map(|&v| (t * v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        };
        let a: Vec<Vec<f64>> = (0..k1).map(|i| softmax_row(s[i].clone(), t_fwd)).collect();
        let ab: Vec<Vec<f64>> = (0..k2)
            .map(|j| softmax_row((0..k1).map(|i| s[i][j]).collect(), t_bwd))
            .collect();
        let mut c = vec![vec![0.0f64; k1]; k1];
        for i in 0..k1 {
            for j in 0..k1 {
                for r in 0..k2 {
                    c[i][j] += a[i][r] * ab[r][j];
                }
            }
        }
        match cfg.kind {
            LossKind::Symmetric => {
                let mut tot = 0.0;
                for i in 0..k1 {
                    for j in 0..k1 {
                        tot += (c[i][j] - if i == j { 1.0 } else { 0.0 }).abs();
                    }
                }
                tot / (k1 * k1) as f64
            }
            LossKind::Asymmetric => {
                if k1 == 1 {
                    return 0.0;
                }
                let mut tot = 0.0;
                for i in 0..k1 {
                    let mut row_max = f64::NEG_INFINITY;
                    let mut col_max = f64::NEG_INFINITY;
                    for t in 0..k1 {
                        if t != i {
                            row_max = row_max.max(c[i][t]);
                            col_max = col_max.max(c[t][i]);
                        }
                    }
                    tot += (row_max - c[i][i] + cfg.margin).max(0.0);
                    tot += (col_max - c[i][i] + cfg.margin).max(0.0);
                }
                tot / k1 as f64
            }
        }
    }

    #[test]
    fn affinity_of_orthonormal_columns_is_identity() {
        let x = EmbeddingMatrix::new(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let s = affinity(&x, &x).unwrap();
        assert_eq!(s.matrix(), &Matrix::identity(2));
    }

    #[test]
    fn affinity_is_the_dot_product() {
        let x1 = EmbeddingMatrix::new(Matrix::new(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        let x2 = EmbeddingMatrix::new(Matrix::new(2, 1, vec![0.6, 0.8]).unwrap()).unwrap();
        let s = affinity(&x1, &x2).unwrap();
        assert!(approx(s.matrix().get(0, 0), 0.6, 1e-12));
    }

    #[test]
    fn perfect_affinity_shifts_to_permutation() {
        // cosine +1 on matched pairs, -1 elsewhere: (S+1)/2 is a permutation
        let s = Matrix::new(3, 3, vec![-1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0]).unwrap();
        let shifted = Matrix::from_fn(3, 3, |i, j| (s.get(i, j) + 1.0) / 2.0);
        AssignmentMatrix::hard(shifted.clone()).unwrap();
        assert_eq!(matmul(&shifted, &shifted.transpose()).unwrap(), Matrix::identity(3));
    }

    #[test]
    fn temperature_reduces_at_half_delta() {
        let cfg = TemperatureConfig::default();
        for k in 1..=1000usize {
            let t = adaptive_temperature(k, &cfg).unwrap();
            let reduced = (1.0 / cfg.epsilon) * ((k as f64) + 1.0).ln();
            assert!(
                (t - reduced).abs() <= 1e-15 * reduced.abs().max(1.0),
                "K={k}: {t} vs {reduced}"
            );
        }
    }

    #[test]
    fn temperature_single_instance_value() {
        let cfg = TemperatureConfig::new(0.1, 0.5).unwrap();
        let t = adaptive_temperature(1, &cfg).unwrap();
        assert!(approx(t, 10.0 * std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn canonical_gap_input_hits_target_probability() {
        // one entry exceeds K-1 equal entries by exactly epsilon; under T(K)
        // the max probability lands on delta + (1-delta)/K
        let cfg = TemperatureConfig::default();
        for k in [2usize, 5, 10, 50] {
            let t = adaptive_temperature(k, &cfg).unwrap();
            let mut row = vec![0.3; k];
            row[0] += cfg.epsilon;
            let m = Matrix::new(1, k, row).unwrap();
            let p = row_softmax(&m, t).unwrap();
            let expected = (k as f64 + 1.0) / (2.0 * k as f64);
            assert!(approx(p.get(0, 0), expected, 1e-9), "K={k}: {} vs {expected}", p.get(0, 0));
        }
    }

    #[test]
    fn soft_assign_limits() {
        let s = AffinityMatrix::new(Matrix::identity(2)).unwrap();
        let sharp = soft_assign(&s, 500.0).unwrap();
        assert!(sharp.matrix().max_abs_diff(&Matrix::identity(2)) < 1e-12);

        let nearly_flat = soft_assign(&s, 1e-9).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(approx(nearly_flat.matrix().get(i, j), 0.5, 1e-6));
            }
        }
    }

    #[test]
    fn soft_assign_worked_row() {
        let s = AffinityMatrix::new(Matrix::new(1, 2, vec![1.0, 0.5]).unwrap()).unwrap();
        let a = soft_assign(&s, 1.0).unwrap();
        assert!(approx(a.matrix().get(0, 0), 0.62, 5e-3));
        assert!(approx(a.matrix().get(0, 1), 0.38, 5e-3));
    }

    #[test]
    fn cycle_of_permutations_is_identity() {
        let id = AssignmentMatrix::hard(Matrix::identity(3)).unwrap();
        let c = cycle(&id, &id).unwrap();
        assert_eq!(c.matrix(), &Matrix::identity(3));

        let p_mat = Matrix::new(3, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = AssignmentMatrix::hard(p_mat.clone()).unwrap();
        let pt = AssignmentMatrix::hard(p_mat.transpose()).unwrap();
        let c = cycle(&p, &pt).unwrap();
        assert_eq!(c.matrix(), &Matrix::identity(3));
    }

    #[test]
    fn cycle_of_uniform_is_uniform() {
        let u = AssignmentMatrix::soft(Matrix::from_fn(3, 3, |_, _| 1.0 / 3.0)).unwrap();
        let c = cycle(&u, &u).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(approx(c.matrix().get(i, j), 1.0 / 3.0, 1e-12));
            }
        }
    }

    #[test]
    fn loss_fixtures() {
        let id = CycleMatrix::new(Matrix::identity(2)).unwrap();
        assert_eq!(loss_symmetric(&id), 0.0);
        assert_eq!(loss_asymmetric(&id, 0.5).unwrap(), 0.0);

        let uniform = CycleMatrix::new(Matrix::from_fn(2, 2, |_, _| 0.5)).unwrap();
        assert_eq!(loss_symmetric(&uniform), 0.5);
        assert_eq!(loss_asymmetric(&uniform, 0.5).unwrap(), 1.0);

        let anti = CycleMatrix::new(Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(loss_symmetric(&anti), 1.0);

        let dominant =
            CycleMatrix::new(Matrix::new(2, 2, vec![0.9, 0.1, 0.1, 0.9]).unwrap()).unwrap();
        assert_eq!(loss_asymmetric(&dominant, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn forward_on_shared_orthonormal_embeddings_has_zero_margin_loss() {
        let x = EmbeddingMatrix::new(Matrix::identity(4)).unwrap();
        let cfg = LossConfig::default();
        let pass = forward(&x, &x, &cfg).unwrap();
        // the diagonal of C dominates by construction here
        assert_eq!(pass.loss(), 0.0);
    }

    #[test]
    fn forward_applies_swap_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = embedding(&mut rng, 4, 3);
        let x2 = embedding(&mut rng, 4, 2);
        let pass = forward(&x1, &x2, &LossConfig::default()).unwrap();
        assert!(pass.swapped());
        assert_eq!(pass.cycle().rows(), 2);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in [LossKind::Symmetric, LossKind::Asymmetric] {
            for _ in 0..25 {
                let d = rng.gen_range(2..10);
                let k1 = rng.gen_range(1..7);
                let k2 = rng.gen_range(1..7);
                let x1 = unit_columns(&mut rng, d, k1);
                let x2 = unit_columns(&mut rng, d, k2);
                let cfg = LossConfig { kind, ..LossConfig::default() };
                let pass = forward_raw(&x1, &x2, &cfg).unwrap();
                let want = oracle_loss(&x1, &x2, &cfg);
                assert!(approx(pass.loss(), want, 1e-12), "{kind:?}: {} vs {want}", pass.loss());
            }
        }
    }

    #[test]
    fn backward_is_zero_on_satisfied_margins() {
        let x = EmbeddingMatrix::new(Matrix::identity(4)).unwrap();
        let pass = forward(&x, &x, &LossConfig::default()).unwrap();
        assert_eq!(pass.loss(), 0.0);
        let g = backward(&pass);
        assert!(g.d_x1.data().iter().all(|&v| v == 0.0));
        assert!(g.d_x2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_swap_case_returns_original_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x1 = embedding(&mut rng, 6, 5);
        let x2 = embedding(&mut rng, 6, 3);
        let pass = forward(&x1, &x2, &LossConfig::default()).unwrap();
        assert!(pass.swapped());
        let g = backward(&pass);
        assert_eq!((g.d_x1.rows(), g.d_x1.cols()), (6, 5));
        assert_eq!((g.d_x2.rows(), g.d_x2.cols()), (6, 3));
    }

    fn fd_check_pair(x1: &Matrix, x2: &Matrix, cfg: &LossConfig) -> (f64, f64) {
        let pass = forward_raw(x1, x2, cfg).unwrap();
        let g = backward(&pass);
        let err1 = finite_difference_check(
            |m| forward_raw(m, x2, cfg).unwrap().loss(),
            x1,
            &g.d_x1,
            1e-6,
        )
        .unwrap();
        let err2 = finite_difference_check(
            |m| forward_raw(x1, m, cfg).unwrap().loss(),
            x2,
            &g.d_x2,
            1e-6,
        )
        .unwrap();
        (err1, err2)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kind in [LossKind::Symmetric, LossKind::Asymmetric] {
            let cfg = LossConfig { kind, ..LossConfig::default() };
            let mut checked = 0;
            while checked < 10 {
                let x1 = unit_columns(&mut rng, 8, 4);
                let x2 = unit_columns(&mut rng, 8, 6);
                let pass = forward_raw(&x1, &x2, &cfg).unwrap();
                if pass.near_hinge_tie(1e-4) {
                    continue;
                }
                let (e1, e2) = fd_check_pair(&x1, &x2, &cfg);
                assert!(e1 < 1e-5 && e2 < 1e-5, "{kind:?}: rel errs {e1} {e2}");
                checked += 1;
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_in_swap_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let cfg = LossConfig::default();
        let mut checked = 0;
        while checked < 5 {
            let x1 = unit_columns(&mut rng, 8, 5);
            let x2 = unit_columns(&mut rng, 8, 3);
            let pass = forward_raw(&x1, &x2, &cfg).unwrap();
            assert!(pass.swapped());
            if pass.near_hinge_tie(1e-4) {
                continue;
            }
            let (e1, e2) = fd_check_pair(&x1, &x2, &cfg);
            assert!(e1 < 1e-5 && e2 < 1e-5, "rel errs {e1} {e2}");
            checked += 1;
        }
    }

    // brute force over all injective row->column maps
    fn brute_force_best(s: &Matrix) -> f64 {
        fn rec(s: &Matrix, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == s.rows() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..s.cols() {
                if used[j] {
                    continue;
                }
                used[j] = true;
                let v = s.get(row, j) + rec(s, row + 1, used);
                used[j] = false;
                best = best.max(v);
            }
            best
        }
        rec(s, 0, &mut vec![false; s.cols()])
    }

    fn assignment_total(s: &Matrix, a: &AssignmentMatrix) -> f64 {
        a.row_targets()
            .iter()
            .enumerate()
            .map(|(i, t)| s.get(i, t.unwrap()))
            .sum()
    }

    #[test]
    fn hungarian_identity_and_hand_cases() {
        let s = AffinityMatrix::new(Matrix::identity(3)).unwrap();
        let a = hungarian(&s).unwrap();
        assert_eq!(a.matrix(), &Matrix::identity(3));

        let s = AffinityMatrix::new(Matrix::new(2, 2, vec![0.9, 0.1, 0.8, 0.2]).unwrap()).unwrap();
        let a = hungarian(&s).unwrap();
        assert_eq!(a.row_targets(), vec![Some(0), Some(1)]);
        assert!(approx(assignment_total(s.matrix(), &a), 1.1, 1e-12));

        let s = AffinityMatrix::new(Matrix::new(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap()).unwrap();
        let a = hungarian(&s).unwrap();
        assert_eq!(a.row_targets(), vec![Some(1), Some(0)]);
        assert!(approx(assignment_total(s.matrix(), &a), 0.0, 1e-12));
    }

    #[test]
    fn hungarian_matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let k1 = rng.gen_range(1..=4);
            let k2 = rng.gen_range(k1..=4);
            let m = Matrix::from_fn(k1, k2, |_, _| rng.gen_range(-1.0..1.0));
            let s = AffinityMatrix::new(m.clone()).unwrap();
            let a = hungarian(&s).unwrap();
            let total = assignment_total(&m, &a);
            let best = brute_force_best(&m);
            assert!(approx(total, best, 1e-9), "total {total} vs brute {best}");
        }
    }

    #[test]
    fn hungarian_rejects_more_rows_than_columns() {
        let s = AffinityMatrix::new(Matrix::zeros(3, 2)).unwrap();
        assert!(hungarian(&s).is_err());
    }

    #[test]
    fn hard_cycle_consistency_cases() {
        let id = AffinityMatrix::new(Matrix::identity(3)).unwrap();
        assert_eq!(hard_cycle_consistency(&id), 1.0);

        // permuted but consistent
        let anti = AffinityMatrix::new(Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(hard_cycle_consistency(&anti), 1.0);

        // uniform zero: lowest-index tie-breaking picks the identity both ways
        let zero = AffinityMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert_eq!(hard_cycle_consistency(&zero), 1.0);
    }

    fn random_row_stochastic(rng: &mut ChaCha8Rng, k: usize) -> Matrix {
        let mut m = Matrix::from_fn(k, k, |_, _| rng.gen_range(0.01..1.0));
        for i in 0..k {
            let sum: f64 = m.row(i).iter().sum();
            for j in 0..k {
                m.set(i, j, m.get(i, j) / sum);
            }
        }
        // renormalize exactly enough for the 1e-12 gate
        for i in 0..k {
            let sum: f64 = m.row(i).iter().sum();
            m.set(i, 0, m.get(i, 0) + (1.0 - sum));
        }
        m
    }

    proptest! {
        #[test]
        fn cycle_rows_stay_stochastic(
            d in 2usize..8,
            k1 in 2usize..6,
            k2 in 2usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = unit_columns(&mut rng, d, k1);
            let x2 = unit_columns(&mut rng, d, k2);
            let pass = forward_raw(&x1, &x2, &LossConfig::default()).unwrap();
            let c = pass.cycle();
            for i in 0..c.rows() {
                let sum: f64 = c.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_bounds_hold_on_row_stochastic_inputs(
            k in 1usize..8,
            margin in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CycleMatrix::new(random_row_stochastic(&mut rng, k)).unwrap();
            let sym = loss_symmetric(&c);
            let asym = loss_asymmetric(&c, margin).unwrap();
            prop_assert!((0.0..=2.0).contains(&sym));
            prop_assert!((0.0..=2.0 * (1.0 + margin)).contains(&asym));
        }

        #[test]
        fn zero_asymmetric_loss_iff_margins_hold(
            k in 2usize..7,
            margin in 0.05f64..0.6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CycleMatrix::new(random_row_stochastic(&mut rng, k)).unwrap();
            let loss = loss_asymmetric(&c, margin).unwrap();
            let m = c.matrix();
            let mut margins_hold = true;
            for i in 0..k {
                for t in 0..k {
                    if t == i { continue; }
                    if m.get(i, i) < m.get(i, t) + margin || m.get(i, i) < m.get(t, i) + margin {
                        margins_hold = false;
                    }
                }
            }
            prop_assert_eq!(loss == 0.0, margins_hold);
        }

        #[test]
        fn permutations_are_fixed_points_of_the_symmetric_loss(
            k in 2usize..7,
            seed in any::<u64>(),
        ) {
            // includes trivial cyclic shifts; the engine must not exclude them
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let p = Matrix::from_fn(k, k, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
            let a = AssignmentMatrix::hard(p.clone()).unwrap();
            let a_back = AssignmentMatrix::hard(p.transpose()).unwrap();
            let c = cycle(&a, &a_back).unwrap();
            prop_assert_eq!(loss_symmetric(&c), 0.0);
        }

        #[test]
        fn soft_assignment_argmax_agrees_with_hungarian_on_separated_rows(
            k in 2usize..7,
            seed in any::<u64>(),
        ) {
            // rows whose max sits on a permutation and clears the runner-up
            // by at least 0.2
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let m = Matrix::from_fn(k, k, |i, j| {
                if perm[i] == j { rng.gen_range(0.65..0.95) } else { rng.gen_range(-0.6..0.4) }
            });
            let s = AffinityMatrix::new(m).unwrap();
            let hard = hungarian(&s).unwrap();
            let temp = adaptive_temperature(k, &TemperatureConfig::default()).unwrap();
            let soft = soft_assign(&s, temp).unwrap();
            prop_assert_eq!(soft.row_targets(), hard.row_targets());
        }

        #[test]
        fn hungarian_total_is_optimal(
            k1 in 1usize..5,
            extra in 0usize..3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k2 = (k1 + extra).min(4).max(k1);
            let m = Matrix::from_fn(k1, k2, |_, _| rng.gen_range(-1.0..1.0));
            let s = AffinityMatrix::new(m.clone()).unwrap();
            let a = hungarian(&s).unwrap();
            let total = assignment_total(&m, &a);
            prop_assert!((total - brute_force_best(&m)).abs() < 1e-9);
        }
    }
}
