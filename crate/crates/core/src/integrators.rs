//! Time integration: fine-grid backward Euler reference, the implicit first
//! coarse step, and the partially explicit splitting (implicit in `V_{H,1}`,
//! explicit in `V_{H,2}`).

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::cem::MultiscaleSpaces;
use crate::error::{Error, Result};
use crate::fem::{restrict, Assembler, SparseSymMatrix};
use crate::field::ScalarCellField;
use crate::grid::FineGrid;
use crate::io::{BinReader, BinWriter};
use crate::linalg::{cholesky, SparseCholesky};
use crate::scalar::Scalar;
use crate::stability::{stability_report, StabilityReport};

const TRAJECTORY_MAGIC: &[u8; 4] = b"PEXT";

/// Time-dependent forcing `g(x, t) = sum_b a_b(t) f_b(x)` with fixed spatial
/// shapes `f_b`; implementors supply the amplitudes.
pub trait Forcing<T>: Sync {
    fn amplitudes(&self, t: T) -> Vec<T>;
}

/// No forcing.
pub struct Unforced;

impl<T> Forcing<T> for Unforced {
    fn amplitudes(&self, _t: T) -> Vec<T> {
        Vec::new()
    }
}

impl<T, F: Fn(T) -> Vec<T> + Sync> Forcing<T> for F {
    fn amplitudes(&self, t: T) -> Vec<T> {
        self(t)
    }
}

/// Fine load vectors of the spatial shapes `f_b`.
#[derive(Debug, Clone, Default)]
pub struct LoadShapes<T> {
    pub fine: Vec<DVector<T>>,
}

impl<T: Scalar> LoadShapes<T> {
    pub fn new(fine: Vec<DVector<T>>) -> Self {
        Self { fine }
    }

    /// `sum_b a_b f_b`.
    pub fn combine(&self, amplitudes: &[T], dim: usize) -> Result<DVector<T>> {
        combine_shapes(&self.fine, amplitudes, dim)
    }
}

fn combine_shapes<T: Scalar>(shapes: &[DVector<T>], amplitudes: &[T], dim: usize) -> Result<DVector<T>> {
    if amplitudes.len() > shapes.len() {
        return Err(Error::DimensionMismatch {
            context: "forcing amplitudes vs load shapes",
            expected: shapes.len(),
            actual: amplitudes.len(),
        });
    }
    let mut out = DVector::zeros(dim);
    for (shape, &a) in shapes.iter().zip(amplitudes) {
        out.axpy(a, shape, T::one());
    }
    Ok(out)
}

/// How the nonlinear diffusion term is advanced in time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NonlinearMode {
    /// Coefficient frozen at the current state, one linear solve per step.
    #[default]
    SemiImplicit,
    /// Fixed-point iteration on the coefficient until the relative change
    /// drops below `tol`.
    Picard { tol: f64, max_iter: usize },
}

impl NonlinearMode {
    pub fn picard() -> Self {
        NonlinearMode::Picard { tol: 1e-8, max_iter: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Physics {
    /// `f(u) = -div(kappa grad u)`
    #[default]
    Linear,
    /// `f(u) = -div(kappa e^u grad u)`
    Nonlinear(NonlinearMode),
}

impl Physics {
    pub fn is_linear(&self) -> bool {
        matches!(self, Physics::Linear)
    }
}

/// Coefficient history of one run. For coarse runs `coeffs1[n]`/`coeffs2[n]`
/// are the `R1`/`R2` coordinates at `t^n`; fine runs store the nodal vector
/// in `coeffs1` and leave `coeffs2` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub dt: T,
    pub coeffs1: Vec<DVector<T>>,
    pub coeffs2: Vec<DVector<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.coeffs1.len().saturating_sub(1)
    }

    pub fn dim1(&self) -> usize {
        self.coeffs1.first().map_or(0, |c| c.len())
    }

    pub fn dim2(&self) -> usize {
        self.coeffs2.first().map_or(0, |c| c.len())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs1
            .iter()
            .chain(&self.coeffs2)
            .all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Fine-node states `R1 c1 + R2 c2` for every step.
    pub fn lift(&self, spaces: &MultiscaleSpaces<T>) -> Vec<DVector<T>> {
        self.coeffs1
            .iter()
            .zip(&self.coeffs2)
            .map(|(c1, c2)| spaces.lift(c1, c2))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path, TRAJECTORY_MAGIC)?;
        w.u64(self.steps())?;
        w.u64(self.dim1())?;
        w.u64(self.dim2())?;
        w.f64(self.dt.as_f64())?;
        for (c1, c2) in self.coeffs1.iter().zip(&self.coeffs2) {
            w.reals(c1.iter().copied())?;
            w.reals(c2.iter().copied())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path, TRAJECTORY_MAGIC)?;
        let steps = r.u64()?;
        let dim1 = r.u64()?;
        let dim2 = r.u64()?;
        let dt = T::lit(r.f64()?);
        let expected = steps
            .checked_add(1)
            .and_then(|s| s.checked_mul(dim1 + dim2))
            .and_then(|v| v.checked_mul(8));
        if expected != Some(r.remaining()) {
            return Err(r.malformed("payload size does not match header"));
        }
        let mut coeffs1 = Vec::with_capacity(steps + 1);
        let mut coeffs2 = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            coeffs1.push(r.vector(dim1)?);
            coeffs2.push(r.vector(dim2)?);
        }
        Ok(Self { dt, coeffs1, coeffs2 })
    }
}

/// Galerkin blocks `X_ij = R_i^T X R_j` of a fine operator.
#[derive(Debug, Clone)]
pub struct BlockPair<T> {
    pub b11: DMatrix<T>,
    pub b12: DMatrix<T>,
    pub b22: DMatrix<T>,
}

impl<T: Scalar> BlockPair<T> {
    fn from_combined(full: &DMatrix<T>, dim1: usize) -> Self {
        let dim2 = full.ncols() - dim1;
        Self {
            b11: full.view((0, 0), (dim1, dim1)).into_owned(),
            b12: full.view((0, dim1), (dim1, dim2)).into_owned(),
            b22: full.view((dim1, dim1), (dim2, dim2)).into_owned(),
        }
    }

    pub fn b21(&self) -> DMatrix<T> {
        self.b12.transpose()
    }

    /// Quadratic form of `R1 c1 + R2 c2`.
    pub fn energy(&self, c1: &DVector<T>, c2: &DVector<T>) -> T {
        c1.dot(&(&self.b11 * c1)) + T::lit(2.0) * c1.dot(&(&self.b12 * c2)) + c2.dot(&(&self.b22 * c2))
    }
}

/// Coarse operators of the split space plus the factorizations reused by
/// every step of every trajectory.
#[derive(Debug, Clone)]
pub struct CoarseSystem<T: Scalar> {
    pub spaces: MultiscaleSpaces<T>,
    pub combined: DMatrix<T>,
    pub mass: BlockPair<T>,
    pub stiffness: BlockPair<T>,
    pub dt: T,
    pub physics: Physics,
    kappa: ScalarCellField<T>,
    assembler: Assembler<T>,
    fine_mass: SparseSymMatrix<T>,
    shapes1: Vec<DVector<T>>,
    shapes2: Vec<DVector<T>>,
    shapes_combined: Vec<DVector<T>>,
    gram: Cholesky<T, Dyn>,
    m22: Cholesky<T, Dyn>,
    implicit1: Cholesky<T, Dyn>,
    implicit_full: Cholesky<T, Dyn>,
    report: StabilityReport<T>,
}

impl<T: Scalar> CoarseSystem<T> {
    pub fn new(
        grid: &FineGrid<T>,
        kappa: &ScalarCellField<T>,
        spaces: &MultiscaleSpaces<T>,
        shapes: &LoadShapes<T>,
        dt: T,
        physics: Physics,
    ) -> Result<Self> {
        if dt <= T::zero() {
            return Err(Error::invalid("time step must be positive"));
        }
        if spaces.node_count() != grid.node_count() {
            return Err(Error::DimensionMismatch {
                context: "spaces vs grid nodes",
                expected: grid.node_count(),
                actual: spaces.node_count(),
            });
        }
        let assembler = Assembler::new(grid);
        let fine_mass = assembler.mass(None)?;
        let fine_stiff = assembler.stiffness(kappa)?;
        let combined = spaces.combined();
        let dim1 = spaces.dim1();
        let m_full = restrict(&fine_mass, &combined)?;
        let a_full = restrict(&fine_stiff, &combined)?;
        let mass = BlockPair::from_combined(&m_full, dim1);
        let stiffness = BlockPair::from_combined(&a_full, dim1);
        let gram = cholesky(&m_full, "combined coarse Gram matrix")?;
        let m22 = if spaces.dim2() > 0 {
            cholesky(&mass.b22, "V_{H,2} Gram matrix")?
        } else {
            Cholesky::new(DMatrix::zeros(0, 0)).expect("empty Cholesky")
        };
        let inv_dt = T::one() / dt;
        let implicit1 = cholesky(&(&mass.b11 * inv_dt + &stiffness.b11), "V_{H,1} implicit operator")?;
        let implicit_full = cholesky(&(&m_full * inv_dt + &a_full), "combined implicit operator")?;
        let shapes1 = shapes.fine.iter().map(|f| spaces.r1.tr_mul(f)).collect();
        let shapes2 = shapes.fine.iter().map(|f| spaces.r2.tr_mul(f)).collect();
        let shapes_combined = shapes.fine.iter().map(|f| combined.tr_mul(f)).collect();
        let report = stability_report(&mass, &stiffness, dt, physics)?;
        Ok(Self {
            spaces: spaces.clone(),
            combined,
            mass,
            stiffness,
            dt,
            physics,
            kappa: kappa.clone(),
            assembler,
            fine_mass,
            shapes1,
            shapes2,
            shapes_combined,
            gram,
            m22,
            implicit1,
            implicit_full,
            report,
        })
    }

    pub fn dim1(&self) -> usize {
        self.spaces.dim1()
    }

    pub fn dim2(&self) -> usize {
        self.spaces.dim2()
    }

    pub fn stability(&self) -> &StabilityReport<T> {
        &self.report
    }

    pub fn fine_mass(&self) -> &SparseSymMatrix<T> {
        &self.fine_mass
    }

    pub fn time(&self, n: usize) -> T {
        self.dt * T::from_count(n)
    }

    fn split(&self, c: &DVector<T>) -> (DVector<T>, DVector<T>) {
        (c.rows(0, self.dim1()).into_owned(), c.rows(self.dim1(), self.dim2()).into_owned())
    }

    /// `M`-orthogonal projection of a fine function onto `span[R1, R2]`,
    /// split into its two coordinate blocks.
    pub fn project_initial(&self, u0: &DVector<T>) -> Result<(DVector<T>, DVector<T>)> {
        if u0.len() != self.spaces.node_count() {
            return Err(Error::DimensionMismatch {
                context: "initial state",
                expected: self.spaces.node_count(),
                actual: u0.len(),
            });
        }
        let rhs = self.combined.tr_mul(&self.fine_mass.mul_vec(u0));
        Ok(self.split(&self.gram.solve(&rhs)))
    }

    fn load1(&self, amps: &[T]) -> Result<DVector<T>> {
        combine_shapes(&self.shapes1, amps, self.dim1())
    }

    fn load2(&self, amps: &[T]) -> Result<DVector<T>> {
        combine_shapes(&self.shapes2, amps, self.dim2())
    }

    /// Stiffness blocks of `kappa e^u` at the fine state `u`.
    pub fn stiffness_at(&self, state: &DVector<T>) -> Result<BlockPair<T>> {
        let a = self.assembler.nonlinear_stiffness(&self.kappa, state)?;
        Ok(BlockPair::from_combined(&restrict(&a, &self.combined)?, self.dim1()))
    }

    fn combined_stiffness_at(&self, state: &DVector<T>) -> Result<DMatrix<T>> {
        let a = self.assembler.nonlinear_stiffness(&self.kappa, state)?;
        restrict(&a, &self.combined)
    }

    /// One backward Euler step in the combined space from `(c1^0, c2^0)`,
    /// forced at `t^1`.
    pub fn first_coarse_step(&self, c1: &DVector<T>, c2: &DVector<T>, forcing: &dyn Forcing<T>) -> Result<(DVector<T>, DVector<T>)> {
        let mut c0 = DVector::zeros(self.dim1() + self.dim2());
        c0.rows_mut(0, self.dim1()).copy_from(c1);
        c0.rows_mut(self.dim1(), self.dim2()).copy_from(c2);
        let inv_dt = T::one() / self.dt;
        let m_full = self.combined_mass();
        let rhs = &m_full * &c0 * inv_dt
            + combine_shapes(&self.shapes_combined, &forcing.amplitudes(self.time(1)), c0.len())?;
        let next = match self.physics {
            Physics::Linear => self.implicit_full.solve(&rhs),
            Physics::Nonlinear(mode) => {
                let solve_at = |c: &DVector<T>| -> Result<DVector<T>> {
                    let a = self.combined_stiffness_at(&(&self.combined * c))?;
                    let k = cholesky(&(&m_full * inv_dt + a), "combined implicit operator")?;
                    Ok(k.solve(&rhs))
                };
                match mode {
                    NonlinearMode::SemiImplicit => solve_at(&c0)?,
                    NonlinearMode::Picard { tol, max_iter } => picard(c0, solve_at, tol, max_iter, 1)?,
                }
            }
        };
        Ok(self.split(&next))
    }

    fn combined_mass(&self) -> DMatrix<T> {
        let (d1, d2) = (self.dim1(), self.dim2());
        let mut m = DMatrix::zeros(d1 + d2, d1 + d2);
        m.view_mut((0, 0), (d1, d1)).copy_from(&self.mass.b11);
        m.view_mut((0, d1), (d1, d2)).copy_from(&self.mass.b12);
        m.view_mut((d1, 0), (d2, d1)).copy_from(&self.mass.b12.transpose());
        m.view_mut((d1, d1), (d2, d2)).copy_from(&self.mass.b22);
        m
    }

    /// Right-hand side of the implicit `V_{H,1}` equation, excluding the
    /// `A11 c1^{n+1}` term.
    fn implicit_rhs(&self, state: &StepState<'_, T>, a: &BlockPair<T>, load1: &DVector<T>) -> DVector<T> {
        let inv_dt = T::one() / self.dt;
        let dc2 = state.c2 - state.c2_prev;
        &self.mass.b11 * state.c1 * inv_dt - &self.mass.b12 * dc2 * inv_dt - &a.b12 * state.c2 + load1
    }

    /// Implicit solve for `c1^{n+1}` with the given stiffness blocks.
    fn solve_implicit(&self, state: &StepState<'_, T>, a: Option<&BlockPair<T>>, load1: &DVector<T>) -> Result<DVector<T>> {
        match a {
            None => Ok(self.implicit1.solve(&self.implicit_rhs(state, &self.stiffness, load1))),
            Some(a) => {
                let k = cholesky(&(&self.mass.b11 / self.dt + &a.b11), "V_{H,1} implicit operator")?;
                Ok(k.solve(&self.implicit_rhs(state, a, load1)))
            }
        }
    }

    /// Explicit `V_{H,2}` update given `c1^{n-1}, c1^n, c1^{n+1}` and `c2^n`.
    pub fn explicit_update(
        &self,
        c1_prev: &DVector<T>,
        c1: &DVector<T>,
        c1_next: &DVector<T>,
        c2: &DVector<T>,
        a: &BlockPair<T>,
        load2: &DVector<T>,
    ) -> DVector<T> {
        if self.dim2() == 0 {
            return DVector::zeros(0);
        }
        let rhs = &self.mass.b22 * c2 - self.mass.b12.tr_mul(&(c1 - c1_prev))
            - (a.b12.tr_mul(c1_next) + &a.b22 * c2) * self.dt
            + load2 * self.dt;
        self.m22.solve(&rhs)
    }

    /// Stiffness blocks that evaluate `f(u1^{n+1} + u2^n)` in the explicit
    /// equation: the frozen state for the semi-implicit mode, the new state
    /// for the Picard mode.
    pub fn explicit_stiffness(&self, c1: &DVector<T>, c1_next: &DVector<T>, c2: &DVector<T>) -> Result<Option<BlockPair<T>>> {
        match self.physics {
            Physics::Linear => Ok(None),
            Physics::Nonlinear(NonlinearMode::SemiImplicit) => Ok(Some(self.stiffness_at(&self.spaces.lift(c1, c2))?)),
            Physics::Nonlinear(NonlinearMode::Picard { .. }) => Ok(Some(self.stiffness_at(&self.spaces.lift(c1_next, c2))?)),
        }
    }

    /// One partially explicit step from `n` to `n + 1` forced at `t^n`.
    pub fn partially_explicit_step(&self, state: &StepState<'_, T>, forcing: &dyn Forcing<T>) -> Result<(DVector<T>, DVector<T>)> {
        let amps = forcing.amplitudes(self.time(state.n));
        let load1 = self.load1(&amps)?;
        let load2 = self.load2(&amps)?;
        let (c1_next, a) = match self.physics {
            Physics::Linear => (self.solve_implicit(state, None, &load1)?, None),
            Physics::Nonlinear(NonlinearMode::SemiImplicit) => {
                let a = self.stiffness_at(&self.spaces.lift(state.c1, state.c2))?;
                (self.solve_implicit(state, Some(&a), &load1)?, Some(a))
            }
            Physics::Nonlinear(NonlinearMode::Picard { tol, max_iter }) => {
                let solve_at = |c1: &DVector<T>| -> Result<DVector<T>> {
                    let a = self.stiffness_at(&self.spaces.lift(c1, state.c2))?;
                    self.solve_implicit(state, Some(&a), &load1)
                };
                let c1_next = picard(state.c1.clone(), solve_at, tol, max_iter, state.n + 1)?;
                let a = self.stiffness_at(&self.spaces.lift(&c1_next, state.c2))?;
                (c1_next, Some(a))
            }
        };
        let a = a.as_ref().unwrap_or(&self.stiffness);
        let c2_next = self.explicit_update(state.c1_prev, state.c1, &c1_next, state.c2, a, &load2);
        Ok((c1_next, c2_next))
    }

    fn warn_cfl(&self) {
        if !self.report.satisfied {
            log::warn!(
                "time step {:e} exceeds the stability bound {:e} (gamma = {:.4})",
                self.dt.as_f64(),
                self.report.dt_limit().as_f64(),
                self.report.gamma.as_f64()
            );
        }
    }

    /// Full run: implicit first step, then `steps - 1` partially explicit steps.
    pub fn run(&self, u0: &DVector<T>, forcing: &dyn Forcing<T>, steps: usize) -> Result<Trajectory<T>> {
        if steps == 0 {
            return Err(Error::invalid("at least one time step is required"));
        }
        self.warn_cfl();
        let (c1, c2) = self.project_initial(u0)?;
        let (c1_1, c2_1) = self.first_coarse_step(&c1, &c2, forcing)?;
        let mut coeffs1 = vec![c1, c1_1];
        let mut coeffs2 = vec![c2, c2_1];
        for n in 1..steps {
            let state = StepState {
                n,
                c1_prev: &coeffs1[n - 1],
                c1: &coeffs1[n],
                c2_prev: &coeffs2[n - 1],
                c2: &coeffs2[n],
            };
            let (c1_next, c2_next) = self.partially_explicit_step(&state, forcing)?;
            if !(c1_next.iter().chain(c2_next.iter()).all(|v| v.is_finite())) {
                return Err(Error::NonFinite(format!("coarse state at step {}", n + 1)));
            }
            coeffs1.push(c1_next);
            coeffs2.push(c2_next);
        }
        Ok(Trajectory {
            dt: self.dt,
            coeffs1,
            coeffs2,
        })
    }

    /// Completes a run whose `V_{H,1}` coordinates for `n = 2..=N` are supplied
    /// (e.g. predicted), computing `V_{H,2}` from the explicit equation only.
    ///
    /// With [`History::Predicted`] every `u1` entering the explicit update is
    /// taken from `predicted`; with [`History::Reference`] the `u1^n - u1^{n-1}`
    /// history comes from `reference` instead.
    pub fn complete_from_u1(
        &self,
        u0: &DVector<T>,
        forcing: &dyn Forcing<T>,
        predicted: &[DVector<T>],
        history: History<'_, T>,
    ) -> Result<Trajectory<T>> {
        let (c1, c2) = self.project_initial(u0)?;
        let (c1_1, c2_1) = self.first_coarse_step(&c1, &c2, forcing)?;
        let mut coeffs1 = vec![c1, c1_1];
        let mut coeffs2 = vec![c2, c2_1];
        for p in predicted {
            if p.len() != self.dim1() {
                return Err(Error::DimensionMismatch {
                    context: "predicted V_{H,1} coordinates",
                    expected: self.dim1(),
                    actual: p.len(),
                });
            }
            coeffs1.push(p.clone());
        }
        for n in 1..coeffs1.len() - 1 {
            let (h_prev, h_cur) = match history {
                History::Predicted => (&coeffs1[n - 1], &coeffs1[n]),
                History::Reference(r) => (&r.coeffs1[n - 1], &r.coeffs1[n]),
            };
            let amps = forcing.amplitudes(self.time(n));
            let a = self.explicit_stiffness(h_cur, &coeffs1[n + 1], &coeffs2[n])?;
            let a = a.as_ref().unwrap_or(&self.stiffness);
            let c2_next = self.explicit_update(h_prev, h_cur, &coeffs1[n + 1], &coeffs2[n], a, &self.load2(&amps)?);
            coeffs2.push(c2_next);
        }
        Ok(Trajectory {
            dt: self.dt,
            coeffs1,
            coeffs2,
        })
    }

    /// Relative residuals of the implicit and explicit equations for the step
    /// `n -> n + 1` of a computed trajectory, tested against all basis columns.
    pub fn step_residuals(&self, traj: &Trajectory<T>, n: usize, forcing: &dyn Forcing<T>) -> Result<(T, T)> {
        let inv_dt = T::one() / self.dt;
        let (c1p, c1, c1n) = (&traj.coeffs1[n - 1], &traj.coeffs1[n], &traj.coeffs1[n + 1]);
        let (c2p, c2, c2n) = (&traj.coeffs2[n - 1], &traj.coeffs2[n], &traj.coeffs2[n + 1]);
        let amps = forcing.amplitudes(self.time(n));
        let (a_impl, a_expl) = match self.physics {
            Physics::Linear => (self.stiffness.clone(), self.stiffness.clone()),
            Physics::Nonlinear(NonlinearMode::SemiImplicit) => {
                let a = self.stiffness_at(&self.spaces.lift(c1, c2))?;
                (a.clone(), a)
            }
            Physics::Nonlinear(NonlinearMode::Picard { .. }) => {
                let a = self.stiffness_at(&self.spaces.lift(c1n, c2))?;
                (a.clone(), a)
            }
        };
        let load1 = self.load1(&amps)?;
        let load2 = self.load2(&amps)?;
        let terms1 = [
            &self.mass.b11 * (c1n - c1) * inv_dt,
            &self.mass.b12 * (c2 - c2p) * inv_dt,
            &a_impl.b11 * c1n + &a_impl.b12 * c2,
        ];
        let r1 = terms1.iter().fold(-load1.clone(), |acc, t| acc + t);
        let s1 = terms1.iter().map(|t| t.norm()).fold(load1.norm(), |a, b| a.max(b));
        let terms2 = [
            self.mass.b12.tr_mul(&(c1 - c1p)) * inv_dt,
            &self.mass.b22 * (c2n - c2) * inv_dt,
            a_expl.b12.tr_mul(c1n) + &a_expl.b22 * c2,
        ];
        let r2 = terms2.iter().fold(-load2.clone(), |acc, t| acc + t);
        let s2 = terms2.iter().map(|t| t.norm()).fold(load2.norm(), |a, b| a.max(b));
        let rel = |r: T, s: T| if s > T::zero() { r / s } else { r };
        Ok((rel(r1.norm(), s1), rel(r2.norm(), s2)))
    }
}

/// Source of the `u1` history used by [`CoarseSystem::complete_from_u1`].
#[derive(Debug, Clone, Copy)]
pub enum History<'a, T> {
    Predicted,
    Reference(&'a Trajectory<T>),
}

/// The two previous states entering a partially explicit step.
#[derive(Debug, Clone, Copy)]
pub struct StepState<'a, T> {
    pub n: usize,
    pub c1_prev: &'a DVector<T>,
    pub c1: &'a DVector<T>,
    pub c2_prev: &'a DVector<T>,
    pub c2: &'a DVector<T>,
}

fn picard<T: Scalar>(
    start: DVector<T>,
    mut solve_at: impl FnMut(&DVector<T>) -> Result<DVector<T>>,
    tol: f64,
    max_iter: usize,
    step: usize,
) -> Result<DVector<T>> {
    let mut current = start;
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let next = solve_at(&current)?;
        let scale = next.norm().max(T::lit(f64::MIN_POSITIVE));
        change = ((&next - &current).norm() / scale).as_f64();
        current = next;
        if change <= tol {
            return Ok(current);
        }
    }
    Err(Error::PicardNotConverged {
        step,
        iterations: max_iter,
        change,
    })
}

/// Backward Euler on the full fine space, forced at `t^{n+1}`.
#[derive(Debug, Clone)]
pub struct FineSolver<T: Scalar> {
    pub dt: T,
    pub physics: Physics,
    kappa: ScalarCellField<T>,
    assembler: Assembler<T>,
    mass: SparseSymMatrix<T>,
    stiffness: SparseSymMatrix<T>,
    shapes: LoadShapes<T>,
}

impl<T: Scalar> FineSolver<T> {
    pub fn new(grid: &FineGrid<T>, kappa: &ScalarCellField<T>, shapes: &LoadShapes<T>, dt: T, physics: Physics) -> Result<Self> {
        if dt <= T::zero() {
            return Err(Error::invalid("time step must be positive"));
        }
        let assembler = Assembler::new(grid);
        Ok(Self {
            dt,
            physics,
            mass: assembler.mass(None)?,
            stiffness: assembler.stiffness(kappa)?,
            kappa: kappa.clone(),
            assembler,
            shapes: shapes.clone(),
        })
    }

    pub fn mass(&self) -> &SparseSymMatrix<T> {
        &self.mass
    }

    pub fn run(&self, u0: &DVector<T>, forcing: &dyn Forcing<T>, steps: usize) -> Result<Trajectory<T>> {
        let dim = self.mass.dim();
        if u0.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "fine initial state",
                expected: dim,
                actual: u0.len(),
            });
        }
        let inv_dt = T::one() / self.dt;
        let mut solver = SparseCholesky::new(&self.mass.combine(inv_dt, &self.stiffness, T::one())?, "fine implicit operator")?;
        let mut states = vec![u0.clone()];
        for n in 0..steps {
            let t_next = self.dt * T::from_count(n + 1);
            let rhs = self.mass.mul_vec(&states[n]) * inv_dt + self.shapes.combine(&forcing.amplitudes(t_next), dim)?;
            let next = match self.physics {
                Physics::Linear => solver.solve(&rhs),
                Physics::Nonlinear(mode) => {
                    let mut solve_at = |u: &DVector<T>| -> Result<DVector<T>> {
                        let a = self.assembler.nonlinear_stiffness(&self.kappa, u)?;
                        solver.refactor(&self.mass.combine(inv_dt, &a, T::one())?, "fine implicit operator")?;
                        Ok(solver.solve(&rhs))
                    };
                    match mode {
                        NonlinearMode::SemiImplicit => solve_at(&states[n])?,
                        NonlinearMode::Picard { tol, max_iter } => picard(states[n].clone(), solve_at, tol, max_iter, n + 1)?,
                    }
                }
            };
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("fine state at step {}", n + 1)));
            }
            states.push(next);
        }
        Ok(Trajectory {
            dt: self.dt,
            coeffs2: vec![DVector::zeros(0); states.len()],
            coeffs1: states,
        })
    }
}
