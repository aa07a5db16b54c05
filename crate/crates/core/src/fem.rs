//! P1 finite-element assembly: stiffness, (weighted) mass and the
//! state-dependent stiffness of `-div(kappa e^u grad u)`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::error::{Error, Result};
use crate::field::ScalarCellField;
use crate::grid::FineGrid;
use crate::scalar::Scalar;

/// Largest state magnitude accepted by the exponential coefficient.
pub const EXP_STATE_LIMIT: f64 = 700.0;

/// Symmetric sparse matrix over fine nodes. Stored in CSC; for a symmetric
/// matrix the layout coincides with CSR.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix<T> {
    csc: CscMatrix<T>,
}

impl<T: Scalar> SparseSymMatrix<T> {
    pub fn from_csc(csc: CscMatrix<T>) -> Self {
        Self { csc }
    }

    pub fn dim(&self) -> usize {
        self.csc.nrows()
    }

    pub fn csc(&self) -> &CscMatrix<T> {
        &self.csc
    }

    pub fn nnz(&self) -> usize {
        self.csc.nnz()
    }

    pub fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        let mut y = DVector::zeros(self.dim());
        for (col, lane) in self.csc.col_iter().enumerate() {
            let xc = x[col];
            for (&row, &v) in lane.row_indices().iter().zip(lane.values()) {
                y[row] += v * xc;
            }
        }
        y
    }

    pub fn mul_dense(&self, x: &DMatrix<T>) -> DMatrix<T> {
        &self.csc * x
    }

    pub fn bilinear(&self, u: &DVector<T>, v: &DVector<T>) -> T {
        self.mul_vec(v).dot(u)
    }

    pub fn quad_form(&self, u: &DVector<T>) -> T {
        self.bilinear(u, u)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut d = DMatrix::zeros(self.dim(), self.dim());
        for (col, lane) in self.csc.col_iter().enumerate() {
            for (&row, &v) in lane.row_indices().iter().zip(lane.values()) {
                d[(row, col)] += v;
            }
        }
        d
    }

    pub fn scaled(&self, c: T) -> Self {
        let mut out = self.clone();
        out.csc.values_mut().iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `a * self + b * other`; both matrices must share a sparsity pattern.
    pub fn combine(&self, a: T, other: &Self, b: T) -> Result<Self> {
        if self.csc.pattern() != other.csc.pattern() {
            return Err(Error::invalid("combine requires identical sparsity patterns"));
        }
        let mut out = self.clone();
        for (v, &w) in out.csc.values_mut().iter_mut().zip(other.csc.values()) {
            *v = a * *v + b * w;
        }
        Ok(out)
    }

    /// Principal submatrix on `indices` (in the given order), kept sparse.
    pub fn principal_submatrix(&self, indices: &[usize]) -> Self {
        let mut local = vec![usize::MAX; self.dim()];
        for (k, &i) in indices.iter().enumerate() {
            local[i] = k;
        }
        let mut coo = CooMatrix::new(indices.len(), indices.len());
        for (kc, &col) in indices.iter().enumerate() {
            let lane = self.csc.col(col);
            for (&row, &v) in lane.row_indices().iter().zip(lane.values()) {
                let kr = local[row];
                if kr != usize::MAX {
                    coo.push(kr, kc, v);
                }
            }
        }
        Self {
            csc: CscMatrix::from(&coo),
        }
    }

    /// Dense principal submatrix on `indices`.
    pub fn dense_submatrix(&self, indices: &[usize]) -> DMatrix<T> {
        self.principal_submatrix(indices).to_dense()
    }

    /// Largest relative asymmetry `|a_ij - a_ji| / max|a|`.
    pub fn asymmetry(&self) -> T {
        let d = self.to_dense();
        let scale = d.amax().max(T::lit(f64::MIN_POSITIVE));
        (&d - d.transpose()).amax() / scale
    }
}

/// Gradients of the three barycentric hat functions on a triangle.
pub fn p1_gradients<T: Scalar>(v: &[[T; 2]; 3]) -> [[T; 2]; 3] {
    let two_area = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
    let mut g = [[T::zero(); 2]; 3];
    for i in 0..3 {
        let a = v[(i + 1) % 3];
        let b = v[(i + 2) % 3];
        // rotate the opposite edge by -90 degrees
        g[i] = [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area];
    }
    g
}

fn triangle_area<T: Scalar>(v: &[[T; 2]; 3]) -> T {
    ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1])).abs()
        * T::lit(0.5)
}

pub fn local_stiffness<T: Scalar>(v: &[[T; 2]; 3], coef: T) -> [[T; 3]; 3] {
    let g = p1_gradients(v);
    let area = triangle_area(v);
    let mut k = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k[i][j] = coef * area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
        }
    }
    k
}

pub fn local_mass<T: Scalar>(v: &[[T; 2]; 3], weight: T) -> [[T; 3]; 3] {
    let s = weight * triangle_area(v) / T::lit(12.0);
    let mut m = [[s; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = s + s;
    }
    m
}

/// Reusable assembler: the sparsity pattern and the scatter map from local
/// element entries to CSC value slots are computed once per grid.
#[derive(Debug, Clone)]
pub struct Assembler<T> {
    grid: FineGrid<T>,
    pattern: CscMatrix<T>,
    scatter: Vec<[usize; 9]>,
}

impl<T: Scalar> Assembler<T> {
    pub fn new(grid: &FineGrid<T>) -> Self {
        let n = grid.node_count();
        let mut coo = CooMatrix::new(n, n);
        for tri in grid.triangles() {
            for &r in tri {
                for &c in tri {
                    coo.push(r, c, T::zero());
                }
            }
        }
        let pattern = CscMatrix::from(&coo);
        let offsets = pattern.col_offsets();
        let rows = pattern.row_indices();
        let scatter = grid
            .triangles()
            .iter()
            .map(|tri| {
                let mut slots = [0usize; 9];
                for (a, &r) in tri.iter().enumerate() {
                    for (b, &c) in tri.iter().enumerate() {
                        let lane = &rows[offsets[c]..offsets[c + 1]];
                        let pos = lane.binary_search(&r).expect("entry present in pattern");
                        slots[3 * a + b] = offsets[c] + pos;
                    }
                }
                slots
            })
            .collect();
        Self {
            grid: grid.clone(),
            pattern,
            scatter,
        }
    }

    pub fn grid(&self) -> &FineGrid<T> {
        &self.grid
    }

    /// Assembles `sum_T local(T)` into the shared pattern.
    pub fn assemble(&self, local: impl Fn(usize, &[[T; 2]; 3]) -> [[T; 3]; 3]) -> SparseSymMatrix<T> {
        let mut csc = self.pattern.clone();
        let values = csc.values_mut();
        for (t, slots) in self.scatter.iter().enumerate() {
            let k = local(t, &self.grid.vertices(t));
            for a in 0..3 {
                for b in 0..3 {
                    values[slots[3 * a + b]] += k[a][b];
                }
            }
        }
        SparseSymMatrix { csc }
    }

    pub fn stiffness(&self, kappa: &ScalarCellField<T>) -> Result<SparseSymMatrix<T>> {
        kappa.check_grid(&self.grid)?;
        let k = kappa.values();
        Ok(self.assemble(|t, v| local_stiffness(v, k[t])))
    }

    pub fn mass(&self, weight: Option<&ScalarCellField<T>>) -> Result<SparseSymMatrix<T>> {
        match weight {
            Some(w) => {
                w.check_grid(&self.grid)?;
                let w = w.values();
                Ok(self.assemble(|t, v| local_mass(v, w[t])))
            }
            None => Ok(self.assemble(|_, v| local_mass(v, T::one()))),
        }
    }

    /// Stiffness of `kappa * exp(u)` with `u` averaged over each triangle's vertices.
    pub fn nonlinear_stiffness(&self, kappa: &ScalarCellField<T>, state: &DVector<T>) -> Result<SparseSymMatrix<T>> {
        kappa.check_grid(&self.grid)?;
        if state.len() != self.grid.node_count() {
            return Err(Error::DimensionMismatch {
                context: "nonlinear stiffness state",
                expected: self.grid.node_count(),
                actual: state.len(),
            });
        }
        let limit = T::lit(EXP_STATE_LIMIT);
        for (i, &u) in state.iter().enumerate() {
            if !u.is_finite() {
                return Err(Error::NonFinite(format!("state entry {i}")));
            }
            if u.abs() > limit {
                return Err(Error::invalid(format!(
                    "state entry {i} = {u} exceeds the exponential guard {EXP_STATE_LIMIT}"
                )));
            }
        }
        let k = kappa.values();
        let third = T::lit(1.0 / 3.0);
        let tris = self.grid.triangles();
        Ok(self.assemble(|t, v| {
            let [a, b, c] = tris[t];
            let mean = (state[a] + state[b] + state[c]) * third;
            local_stiffness(v, k[t] * mean.exp())
        }))
    }
}

pub fn assemble_stiffness<T: Scalar>(grid: &FineGrid<T>, kappa: &ScalarCellField<T>) -> Result<SparseSymMatrix<T>> {
    Assembler::new(grid).stiffness(kappa)
}

pub fn assemble_mass<T: Scalar>(grid: &FineGrid<T>, weight: Option<&ScalarCellField<T>>) -> Result<SparseSymMatrix<T>> {
    Assembler::new(grid).mass(weight)
}

pub fn assemble_nonlinear_stiffness<T: Scalar>(
    grid: &FineGrid<T>,
    kappa: &ScalarCellField<T>,
    state: &DVector<T>,
) -> Result<SparseSymMatrix<T>> {
    Assembler::new(grid).nonlinear_stiffness(kappa, state)
}

/// Galerkin projection `R^T A R`, symmetrized.
pub fn restrict<T: Scalar>(matrix: &SparseSymMatrix<T>, basis: &DMatrix<T>) -> Result<DMatrix<T>> {
    let mut out = restrict_pair(matrix, basis, basis)?;
    let t = out.transpose();
    out += t;
    out *= T::lit(0.5);
    Ok(out)
}

/// Cross block `R_a^T A R_b`.
pub fn restrict_pair<T: Scalar>(matrix: &SparseSymMatrix<T>, left: &DMatrix<T>, right: &DMatrix<T>) -> Result<DMatrix<T>> {
    for r in [left, right] {
        if r.nrows() != matrix.dim() {
            return Err(Error::DimensionMismatch {
                context: "restriction basis rows",
                expected: matrix.dim(),
                actual: r.nrows(),
            });
        }
    }
    Ok(left.tr_mul(&matrix.mul_dense(right)))
}

/// Coarse load `R^T g`.
pub fn coarse_load<T: Scalar>(load: &DVector<T>, basis: &DMatrix<T>) -> Result<DVector<T>> {
    if load.len() != basis.nrows() {
        return Err(Error::DimensionMismatch {
            context: "coarse load",
            expected: basis.nrows(),
            actual: load.len(),
        });
    }
    Ok(basis.tr_mul(load))
}
