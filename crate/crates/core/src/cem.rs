//! Constraint energy minimizing multiscale spaces.
//!
//! `V_{H,1}` is spanned by energy-minimizing functions `phi` on oversampled
//! regions subject to moment constraints against local spectral functions
//! `psi`. `V_{H,2}` is spanned by functions `zeta` that are `s`-orthogonal to
//! all `psi` and match the `L^2` moments of a second family of local
//! eigenfunctions `xi` taken from the kernel of the projection onto the `psi`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{Assembler, SparseSymMatrix};
use crate::field::ScalarCellField;
use crate::grid::{CoarseDecomposition, FineGrid, PartitionOfUnity};
use crate::io::{BinReader, BinWriter};
use crate::linalg::{cholesky, generalized_eigen, orthogonal_complement, SparseCholesky};
use crate::scalar::Scalar;

const SPACES_MAGIC: &[u8; 4] = b"PEXS";

/// Choice of the weight `kappa~` in the auxiliary inner product `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `kappa * H^-2`
    #[default]
    InverseCoarseSquare,
    /// `kappa * sum_i |grad chi_i|^2` over the coarse partition of unity.
    PartitionGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceConfig {
    /// Auxiliary eigenfunctions per coarse element (`L_i`).
    pub aux_per_element: usize,
    /// Second-type eigenfunctions per coarse element (`J_i`).
    pub second_per_element: usize,
    pub weight_rule: WeightRule,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            aux_per_element: 3,
            second_per_element: 1,
            weight_rule: WeightRule::InverseCoarseSquare,
        }
    }
}

/// Local eigenpairs on one coarse element, supported on its interior nodes.
#[derive(Debug, Clone)]
pub struct LocalEigenpairs<T> {
    pub element: usize,
    pub dofs: Vec<usize>,
    pub eigenvalues: DVector<T>,
    /// `dofs.len() x count` coefficient matrix.
    pub vectors: DMatrix<T>,
}

impl<T: Scalar> LocalEigenpairs<T> {
    pub fn count(&self) -> usize {
        self.vectors.ncols()
    }

    /// Column `j` extended by zero to all fine nodes.
    pub fn full_vector(&self, j: usize, node_count: usize) -> DVector<T> {
        let mut v = DVector::zeros(node_count);
        for (k, &d) in self.dofs.iter().enumerate() {
            v[d] = self.vectors[(k, j)];
        }
        v
    }
}

/// Family of local eigenfunctions over all coarse elements, with global
/// column numbering `offsets[i] + j`.
#[derive(Debug, Clone)]
pub struct LocalSpectralSpace<T> {
    pub elements: Vec<LocalEigenpairs<T>>,
    pub offsets: Vec<usize>,
}

impl<T: Scalar> LocalSpectralSpace<T> {
    fn from_elements(elements: Vec<LocalEigenpairs<T>>) -> Self {
        let mut offsets = Vec::with_capacity(elements.len() + 1);
        let mut acc = 0;
        for e in &elements {
            offsets.push(acc);
            acc += e.count();
        }
        offsets.push(acc);
        Self { elements, offsets }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// All functions as columns of a `node_count x total` matrix.
    pub fn global_matrix(&self, node_count: usize) -> DMatrix<T> {
        let mut b = DMatrix::zeros(node_count, self.total());
        for (e, off) in self.elements.iter().zip(&self.offsets) {
            for j in 0..e.count() {
                for (k, &d) in e.dofs.iter().enumerate() {
                    b[(d, off + j)] = e.vectors[(k, j)];
                }
            }
        }
        b
    }

    /// Global column indices belonging to the given elements.
    pub fn columns_of(&self, elements: &[usize]) -> Vec<usize> {
        elements
            .iter()
            .flat_map(|&e| self.offsets[e]..self.offsets[e + 1])
            .collect()
    }
}

/// `s`-orthogonal projection onto the auxiliary space.
#[derive(Debug, Clone)]
pub struct AuxProjection<T> {
    basis: DMatrix<T>,
    weighted: DMatrix<T>,
}

impl<T: Scalar> AuxProjection<T> {
    /// `Pi u = sum s(u, psi) psi`, valid because the `psi` are `s`-orthonormal
    /// within each element and have disjoint supports across elements.
    pub fn new(aux: &LocalSpectralSpace<T>, s: &SparseSymMatrix<T>) -> Self {
        let basis = aux.global_matrix(s.dim());
        let weighted = s.mul_dense(&basis);
        Self { basis, weighted }
    }

    pub fn moments(&self, u: &DVector<T>) -> DVector<T> {
        self.weighted.tr_mul(u)
    }

    pub fn apply(&self, u: &DVector<T>) -> DVector<T> {
        &self.basis * self.moments(u)
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    /// `S B`, the `s`-moment functionals of the auxiliary basis.
    pub fn weighted_basis(&self) -> &DMatrix<T> {
        &self.weighted
    }
}

/// Metadata for one multiscale basis column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMeta {
    pub element: usize,
    /// Fine nodes where the column may be nonzero (interior of `K_i^+`).
    pub support: Vec<usize>,
}

/// Coefficient matrices of the two multiscale subspaces over fine nodes.
#[derive(Debug, Clone)]
pub struct MultiscaleSpaces<T> {
    pub r1: DMatrix<T>,
    pub r2: DMatrix<T>,
    pub meta1: Vec<ColumnMeta>,
    pub meta2: Vec<ColumnMeta>,
}

impl<T: Scalar> MultiscaleSpaces<T> {
    pub fn node_count(&self) -> usize {
        self.r1.nrows()
    }

    pub fn dim1(&self) -> usize {
        self.r1.ncols()
    }

    pub fn dim2(&self) -> usize {
        self.r2.ncols()
    }

    /// `[R1, R2]`.
    pub fn combined(&self) -> DMatrix<T> {
        let mut r = DMatrix::zeros(self.node_count(), self.dim1() + self.dim2());
        r.columns_mut(0, self.dim1()).copy_from(&self.r1);
        r.columns_mut(self.dim1(), self.dim2()).copy_from(&self.r2);
        r
    }

    /// Fine-node function `R1 c1 + R2 c2`.
    pub fn lift(&self, c1: &DVector<T>, c2: &DVector<T>) -> DVector<T> {
        &self.r1 * c1 + &self.r2 * c2
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path, SPACES_MAGIC)?;
        w.u64(self.node_count())?;
        w.u64(self.dim1())?;
        w.u64(self.dim2())?;
        w.matrix(&self.r1)?;
        w.matrix(&self.r2)?;
        for meta in self.meta1.iter().chain(&self.meta2) {
            w.u64(meta.element)?;
            w.u64(meta.support.len())?;
            for &s in &meta.support {
                w.u64(s)?;
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path, SPACES_MAGIC)?;
        let nodes = r.u64()?;
        let dim1 = r.u64()?;
        let dim2 = r.u64()?;
        let r1 = r.matrix(nodes, dim1)?;
        let r2 = r.matrix(nodes, dim2)?;
        let mut metas = Vec::with_capacity(dim1 + dim2);
        for _ in 0..dim1 + dim2 {
            let element = r.u64()?;
            let len = r.count(8)?;
            let support = (0..len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            if support.iter().any(|&s| s >= nodes) {
                return Err(r.malformed("support index out of range"));
            }
            metas.push(ColumnMeta { element, support });
        }
        r.expect_end()?;
        let meta2 = metas.split_off(dim1);
        Ok(Self {
            r1,
            r2,
            meta1: metas,
            meta2,
        })
    }
}

/// Everything produced while building the spaces.
#[derive(Debug, Clone)]
pub struct SpaceConstruction<T> {
    pub aux: LocalSpectralSpace<T>,
    pub second: LocalSpectralSpace<T>,
    pub spaces: MultiscaleSpaces<T>,
}

/// Solution of a constrained energy minimization on one oversampled region.
#[derive(Debug, Clone)]
pub struct ConstrainedSolution<T> {
    /// Region dofs (interior nodes of `K_i^+`).
    pub dofs: Vec<usize>,
    /// `dofs.len() x k` minimizers.
    pub functions: DMatrix<T>,
    /// `m x k` multiplier coefficients.
    pub multipliers: DMatrix<T>,
}

/// Solves `[A C; C^T 0] [x; mu] = [0; d]` for every column of `rhs` through the
/// Schur complement of the SPD block `A`.
pub fn solve_saddle_point<T: Scalar>(
    a: &SparseSymMatrix<T>,
    constraints: &DMatrix<T>,
    rhs: &DMatrix<T>,
    element: usize,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if constraints.nrows() != a.dim() || rhs.nrows() != constraints.ncols() {
        return Err(Error::DimensionMismatch {
            context: "saddle-point blocks",
            expected: constraints.ncols(),
            actual: rhs.nrows(),
        });
    }
    let chol = SparseCholesky::new(a, "local energy block").map_err(|_| Error::SingularSystem { element })?;
    let x = chol.solve_matrix(constraints);
    let schur = constraints.tr_mul(&x);
    let schur = (&schur + schur.transpose()) * T::lit(0.5);
    let sc = cholesky(&schur, "Schur complement").map_err(|_| Error::SingularSystem { element })?;
    let lambda = sc.solve(rhs);
    let functions = &x * &lambda;
    Ok((functions, -lambda))
}

/// Builder holding the global fine matrices for one coefficient field.
#[derive(Debug, Clone)]
pub struct SpaceBuilder<T: Scalar> {
    pub grid: FineGrid<T>,
    pub dec: CoarseDecomposition,
    pub config: SpaceConfig,
    /// `a(u, v) = int kappa grad u . grad v`
    pub stiffness: SparseSymMatrix<T>,
    /// `s(u, v) = int kappa~ u v`
    pub weighted_mass: SparseSymMatrix<T>,
    /// `(u, v)`
    pub mass: SparseSymMatrix<T>,
}

impl<T: Scalar> SpaceBuilder<T> {
    pub fn new(grid: &FineGrid<T>, dec: &CoarseDecomposition, kappa: &ScalarCellField<T>, config: SpaceConfig) -> Result<Self> {
        if config.aux_per_element == 0 {
            return Err(Error::invalid("at least one auxiliary function per element is required"));
        }
        let asm = Assembler::new(grid);
        let stiffness = asm.stiffness(kappa)?;
        let mass = asm.mass(None)?;
        let weight = match config.weight_rule {
            WeightRule::InverseCoarseSquare => {
                let h: T = dec.coarse_size();
                kappa.scaled(T::one() / (h * h))?
            }
            WeightRule::PartitionGradient => {
                let pu = PartitionOfUnity::new(grid, dec);
                kappa.weighted(&pu.gradient_energy(grid))?
            }
        };
        let weighted_mass = asm.mass(Some(&weight))?;
        Ok(Self {
            grid: grid.clone(),
            dec: dec.clone(),
            config,
            stiffness,
            weighted_mass,
            mass,
        })
    }

    fn element_dofs(&self, element: usize) -> Result<&[usize]> {
        self.dec
            .blocks()
            .get(element)
            .map(|b| b.element.interior_nodes.as_slice())
            .ok_or_else(|| Error::invalid(format!("no coarse element {element}")))
    }

    /// Smallest `L_i` eigenpairs of `a_i(psi, v) = lambda s_i(psi, v)` on `V(K_i)`.
    pub fn solve_aux_eigen(&self, element: usize) -> Result<LocalEigenpairs<T>> {
        let dofs = self.element_dofs(element)?.to_vec();
        let count = self.config.aux_per_element;
        if count > dofs.len() {
            return Err(Error::LocalProblem {
                element,
                message: format!("{count} auxiliary functions requested but only {} local dofs", dofs.len()),
            });
        }
        let a = self.stiffness.dense_submatrix(&dofs);
        let s = self.weighted_mass.dense_submatrix(&dofs);
        let (values, vectors) = generalized_eigen(&a, &s, "local weighted mass").map_err(|e| Error::LocalProblem {
            element,
            message: e.to_string(),
        })?;
        Ok(LocalEigenpairs {
            element,
            dofs,
            eigenvalues: values.rows(0, count).into_owned(),
            vectors: vectors.columns(0, count).into_owned(),
        })
    }

    pub fn aux_space(&self) -> Result<LocalSpectralSpace<T>> {
        let elements = (0..self.dec.block_count())
            .into_par_iter()
            .map(|i| self.solve_aux_eigen(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalSpectralSpace::from_elements(elements))
    }

    pub fn projection(&self, aux: &LocalSpectralSpace<T>) -> AuxProjection<T> {
        AuxProjection::new(aux, &self.weighted_mass)
    }

    fn oversampled(&self, element: usize) -> (&[usize], &[usize]) {
        let b = &self.dec.blocks()[element];
        (&b.oversampled.interior_nodes, &b.neighborhood)
    }

    /// CEM basis functions `phi_j^{(i)}`, `j = 0..L_i`, of one element.
    pub fn solve_cem_basis(&self, element: usize, aux: &LocalSpectralSpace<T>, proj: &AuxProjection<T>) -> Result<ConstrainedSolution<T>> {
        let (dofs, neighbors) = self.oversampled(element);
        let cols = aux.columns_of(neighbors);
        let c = select(proj.weighted_basis(), dofs, &cols);
        let own = &aux.elements[element];
        let psi = DMatrix::from_fn(dofs.len(), own.count(), |r, j| proj.basis()[(dofs[r], aux.offsets[element] + j)]);
        let rhs = c.tr_mul(&psi);
        let a_plus = self.stiffness.principal_submatrix(dofs);
        let (functions, multipliers) = solve_saddle_point(&a_plus, &c, &rhs, element)?;
        Ok(ConstrainedSolution {
            dofs: dofs.to_vec(),
            functions,
            multipliers,
        })
    }

    /// Smallest `J_i` eigenpairs of the element stiffness against the `L^2`
    /// mass on `V(K_i) ∩ ker(Pi)`.
    pub fn solve_second_eigen(&self, element: usize, aux: &LocalSpectralSpace<T>, proj: &AuxProjection<T>) -> Result<LocalEigenpairs<T>> {
        let dofs = self.element_dofs(element)?.to_vec();
        let count = self.config.second_per_element;
        let cols: Vec<usize> = (aux.offsets[element]..aux.offsets[element + 1]).collect();
        let moments = select(proj.weighted_basis(), &dofs, &cols);
        let z = orthogonal_complement(&moments);
        if count > z.ncols() {
            return Err(Error::LocalProblem {
                element,
                message: format!("{count} second-type functions requested but the constrained space has dimension {}", z.ncols()),
            });
        }
        let a = z.tr_mul(&(self.stiffness.dense_submatrix(&dofs) * &z));
        let m = z.tr_mul(&(self.mass.dense_submatrix(&dofs) * &z));
        let (values, y) = generalized_eigen(&a, &m, "constrained local mass").map_err(|e| Error::LocalProblem {
            element,
            message: e.to_string(),
        })?;
        let mut vectors = &z * y.columns(0, count);
        crate::linalg::normalize_signs(&mut vectors);
        Ok(LocalEigenpairs {
            element,
            dofs,
            eigenvalues: values.rows(0, count).into_owned(),
            vectors,
        })
    }

    pub fn second_space(&self, aux: &LocalSpectralSpace<T>, proj: &AuxProjection<T>) -> Result<LocalSpectralSpace<T>> {
        let elements = (0..self.dec.block_count())
            .into_par_iter()
            .map(|i| self.solve_second_eigen(i, aux, proj))
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalSpectralSpace::from_elements(elements))
    }

    /// Second-type basis functions `zeta_j^{(i)}` of one element.
    pub fn solve_second_basis(
        &self,
        element: usize,
        aux: &LocalSpectralSpace<T>,
        proj: &AuxProjection<T>,
        second: &LocalSpectralSpace<T>,
        second_mass: &DMatrix<T>,
    ) -> Result<ConstrainedSolution<T>> {
        let (dofs, neighbors) = self.oversampled(element);
        let c1 = select(proj.weighted_basis(), dofs, &aux.columns_of(neighbors));
        let c2 = select(second_mass, dofs, &second.columns_of(neighbors));
        let (m1, m2) = (c1.ncols(), c2.ncols());
        let mut c = DMatrix::zeros(dofs.len(), m1 + m2);
        c.columns_mut(0, m1).copy_from(&c1);
        c.columns_mut(m1, m2).copy_from(&c2);
        let own = &second.elements[element];
        let mut local_pos = vec![usize::MAX; self.grid.node_count()];
        for (k, &d) in dofs.iter().enumerate() {
            local_pos[d] = k;
        }
        let mut xi = DMatrix::zeros(dofs.len(), own.count());
        for (k, &d) in own.dofs.iter().enumerate() {
            for j in 0..own.count() {
                xi[(local_pos[d], j)] = own.vectors[(k, j)];
            }
        }
        let mut rhs = DMatrix::zeros(m1 + m2, own.count());
        rhs.rows_mut(m1, m2).copy_from(&c2.tr_mul(&xi));
        let a_plus = self.stiffness.principal_submatrix(dofs);
        let (functions, multipliers) = solve_saddle_point(&a_plus, &c, &rhs, element)?;
        Ok(ConstrainedSolution {
            dofs: dofs.to_vec(),
            functions,
            multipliers,
        })
    }

    pub fn build(&self) -> Result<SpaceConstruction<T>> {
        let nodes = self.grid.node_count();
        let aux = self.aux_space()?;
        let proj = self.projection(&aux);
        let phis = (0..self.dec.block_count())
            .into_par_iter()
            .map(|i| self.solve_cem_basis(i, &aux, &proj))
            .collect::<Result<Vec<_>>>()?;

        let second = if self.config.second_per_element > 0 {
            self.second_space(&aux, &proj)?
        } else {
            LocalSpectralSpace::from_elements(
                (0..self.dec.block_count())
                    .map(|i| LocalEigenpairs {
                        element: i,
                        dofs: Vec::new(),
                        eigenvalues: DVector::zeros(0),
                        vectors: DMatrix::zeros(0, 0),
                    })
                    .collect(),
            )
        };
        let second_mass = self.mass.mul_dense(&second.global_matrix(nodes));
        let zetas = if self.config.second_per_element > 0 {
            (0..self.dec.block_count())
                .into_par_iter()
                .map(|i| self.solve_second_basis(i, &aux, &proj, &second, &second_mass))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let (r1, meta1) = scatter_columns(nodes, &phis);
        let (r2, meta2) = scatter_columns(nodes, &zetas);
        Ok(SpaceConstruction {
            aux,
            second,
            spaces: MultiscaleSpaces { r1, r2, meta1, meta2 },
        })
    }
}

/// Builds both multiscale spaces for the given field.
pub fn assemble_spaces<T: Scalar>(
    grid: &FineGrid<T>,
    dec: &CoarseDecomposition,
    kappa: &ScalarCellField<T>,
    config: SpaceConfig,
) -> Result<MultiscaleSpaces<T>> {
    Ok(SpaceBuilder::new(grid, dec, kappa, config)?.build()?.spaces)
}

fn select<T: Scalar>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn scatter_columns<T: Scalar>(nodes: usize, sols: &[ConstrainedSolution<T>]) -> (DMatrix<T>, Vec<ColumnMeta>) {
    let total: usize = sols.iter().map(|s| s.functions.ncols()).sum();
    let mut r = DMatrix::zeros(nodes, total);
    let mut meta = Vec::with_capacity(total);
    let mut col = 0;
    for (element, sol) in sols.iter().enumerate() {
        for j in 0..sol.functions.ncols() {
            for (k, &d) in sol.dofs.iter().enumerate() {
                r[(d, col)] = sol.functions[(k, j)];
            }
            meta.push(ColumnMeta {
                element,
                support: sol.dofs.clone(),
            });
            col += 1;
        }
    }
    (r, meta)
}
