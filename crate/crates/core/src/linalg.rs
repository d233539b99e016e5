//! Sparse matrix plumbing: CSR operators for the spatial forms and a sparse
//! direct LU (faer) for the coupling-window systems.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result, SolverError};

pub type Csr = CsrMatrix<f64>;

pub fn csr_from_dense(m: &DMatrix<f64>) -> Csr {
    let mut coo = CooMatrix::new(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if v != 0.0 {
                coo.push(i, j, v);
            }
        }
    }
    Csr::from(&coo)
}

pub fn csr_to_dense(m: &Csr) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in m.triplet_iter() {
        out[(i, j)] += *v;
    }
    out
}

pub fn csr_zeros(nrows: usize, ncols: usize) -> Csr {
    Csr::zeros(nrows, ncols)
}

pub fn matvec(m: &Csr, x: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    for (i, row) in m.row_iter().enumerate() {
        out[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, v)| v * x[j])
            .sum();
    }
    out
}

/// `xᵀ M y`.
pub fn bilinear(m: &Csr, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&matvec(m, y))
}

/// `‖A - Aᵀ‖_max / ‖A‖_max`, zero for the zero matrix.
pub fn asymmetry(m: &Csr) -> f64 {
    let d = csr_to_dense(m);
    let scale = d.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (&d - d.transpose()).amax() / scale
}

/// Symmetric positive definiteness via a dense Cholesky; empty matrices pass.
pub fn is_spd(m: &Csr) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    asymmetry(m) <= 1e-12 && csr_to_dense(m).cholesky().is_some()
}

/// Triplet accumulator for assembling a square sparse system.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push(Triplet::new(row, col, value));
        }
    }

    /// Adds `scale * block` with its top-left corner at `(row, col)`.
    pub fn add_csr(&mut self, row: usize, col: usize, scale: f64, block: &Csr) {
        if scale == 0.0 {
            return;
        }
        for (i, j, v) in block.triplet_iter() {
            self.push(row + i, col + j, scale * v);
        }
    }

    pub fn add_identity(&mut self, row: usize, col: usize, n: usize, scale: f64) {
        for k in 0..n {
            self.push(row + k, col + k, scale);
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for t in &self.entries {
            out[(t.row, t.col)] += t.val;
        }
        out
    }

    pub fn build(&self) -> Result<SparseSystemMatrix> {
        let matrix = SparseColMat::<usize, f64>::try_new_from_triplets(self.nrows, self.ncols, &self.entries)
            .map_err(|e| Error::Structure(format!("sparse assembly failed: {e:?}")))?;
        Ok(SparseSystemMatrix { matrix })
    }
}

/// Assembled square system matrix in compressed-column form.
#[derive(Debug, Clone)]
pub struct SparseSystemMatrix {
    matrix: SparseColMat<usize, f64>,
}

impl SparseSystemMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.matrix.nrows());
        let m = self.matrix.as_ref();
        for j in 0..m.ncols() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, v) in m.row_idx_of_col(j).zip(m.val_of_col(j)) {
                out[i] += v * xj;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.matrix.to_dense();
        DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)])
    }

    /// Sparse LU with partial pivoting.
    pub fn factorize(&self) -> Result<SparseLu, SolverError> {
        if self.matrix.nrows() != self.matrix.ncols() {
            return Err(SolverError {
                message: "system matrix is not square".into(),
                pivot: None,
                residual: f64::NAN,
            });
        }
        let lu = self.matrix.sp_lu().map_err(|e| match e {
            LuError::SymbolicSingular { index } => SolverError {
                message: "structurally singular system".into(),
                pivot: Some(index),
                residual: f64::NAN,
            },
            LuError::Generic(e) => SolverError {
                message: format!("factorization failed: {e:?}"),
                pivot: None,
                residual: f64::NAN,
            },
        })?;
        Ok(SparseLu {
            lu,
            matrix: self.clone(),
        })
    }
}

/// Factorized system; solves are checked against the stored matrix.
pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    matrix: SparseSystemMatrix,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu")
            .field("dimension", &self.matrix.nrows())
            .finish()
    }
}

/// Accepted relative residual of a direct solve.
pub const DIRECT_RESIDUAL_TOLERANCE: f64 = 1e-10;

impl SparseLu {
    /// Solves `A x = b` and returns `x` with the relative residual `‖Ax - b‖ / ‖b‖`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64), SolverError> {
        let n = rhs.len();
        let mut b = faer::Mat::<f64>::from_fn(n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        let x = DVector::from_fn(n, |i, _| b[(i, 0)]);
        let r = self.matrix.apply(&x) - rhs;
        let bnorm = rhs.norm();
        let residual = if bnorm > 0.0 { r.norm() / bnorm } else { r.norm() };
        if !residual.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(SolverError {
                message: "numerically singular system (non-finite solution)".into(),
                pivot: None,
                residual,
            });
        }
        if residual > DIRECT_RESIDUAL_TOLERANCE {
            return Err(SolverError {
                message: "direct solve residual above tolerance".into(),
                pivot: None,
                residual,
            });
        }
        Ok((x, residual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let mut b = TripletBuilder::new(3, 3);
        b.push(0, 0, 4.0);
        b.push(0, 1, 1.0);
        b.push(1, 0, 1.0);
        b.push(1, 1, 3.0);
        b.push(2, 2, 2.0);
        b.push(2, 2, 1.0);
        let m = b.build().unwrap();
        let lu = m.factorize().unwrap();
        let rhs = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (x, res) = lu.solve(&rhs).unwrap();
        assert!(res < 1e-14);
        assert!((m.apply(&x) - rhs).norm() < 1e-14);
        assert_eq!(x[2], 1.0);
    }

    #[test]
    fn structurally_singular_system_reports_pivot() {
        let mut b = TripletBuilder::new(2, 2);
        b.push(0, 0, 1.0);
        b.push(1, 0, 1.0);
        let err = b.build().unwrap().factorize().unwrap_err();
        assert!(err.pivot.is_some(), "{err}");
    }

    #[test]
    fn spd_detection() {
        let m = csr_from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        assert!(is_spd(&m));
        let m = csr_from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(!is_spd(&m));
        let m = csr_from_dense(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]));
        assert!(!is_spd(&m));
    }
}
