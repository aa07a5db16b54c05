//! Strengthened Cauchy–Schwarz constant between the two coarse spaces, the
//! time-step restriction of the partially explicit scheme, and a numerical
//! check of the source-to-solution continuity estimate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::{restrict, restrict_pair, SparseSymMatrix};
use crate::integrators::{BlockPair, Physics, Trajectory};
use crate::linalg::{cholesky, generalized_eigen, spectral_norm};
use crate::scalar::Scalar;

/// Extra reduction of the admissible step for nonlinear runs, whose
/// coefficient `kappa e^u` is not covered by the linear analysis.
pub const NONLINEAR_SAFETY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport<T> {
    pub gamma: T,
    /// `sup ||v2||_a^2 / ||v2||^2` over the second space.
    pub sup_ratio: T,
    /// `(1 - gamma) / sup_ratio`
    pub dt_max: T,
    pub dt_used: T,
    /// Multiplier applied to `dt_max` before comparing with `dt_used`.
    pub safety: T,
    pub satisfied: bool,
}

impl<T: Scalar> StabilityReport<T> {
    pub fn dt_limit(&self) -> T {
        self.dt_max * self.safety
    }

    /// Plain `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "gamma={:e}\nsup_ratio={:e}\ndt_max={:e}\ndt_used={:e}\nsatisfied={}\n",
            self.gamma.as_f64(),
            self.sup_ratio.as_f64(),
            self.dt_max.as_f64(),
            self.dt_used.as_f64(),
            self.satisfied
        )
    }
}

/// `gamma` from the Gram blocks of the mass matrix: the largest singular
/// value of `L1^{-1} M12 L2^{-T}`.
pub fn gamma_from_blocks<T: Scalar>(m11: &DMatrix<T>, m12: &DMatrix<T>, m22: &DMatrix<T>) -> Result<T> {
    if m11.is_empty() || m22.is_empty() {
        return Ok(T::zero());
    }
    let l1 = cholesky(m11, "V_{H,1} Gram matrix")?.unpack();
    let l2 = cholesky(m22, "V_{H,2} Gram matrix")?.unpack();
    let left = l1
        .solve_lower_triangular(m12)
        .ok_or_else(|| Error::NotPositiveDefinite("V_{H,1} Gram matrix".into()))?;
    // (L1^{-1} M12) L2^{-T} = (L2^{-1} (L1^{-1} M12)^T)^T
    let k = l2
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("V_{H,2} Gram matrix".into()))?;
    let gamma = spectral_norm(&k);
    if gamma == T::zero() {
        log::warn!("the two coarse spaces are mass-orthogonal (gamma = 0)");
    }
    Ok(gamma)
}

pub fn estimate_gamma<T: Scalar>(mass: &SparseSymMatrix<T>, r1: &DMatrix<T>, r2: &DMatrix<T>) -> Result<T> {
    gamma_from_blocks(&restrict(mass, r1)?, &restrict_pair(mass, r1, r2)?, &restrict(mass, r2)?)
}

/// Largest generalized eigenvalue of `A22 x = lambda M22 x`.
pub fn sup_ratio_from_blocks<T: Scalar>(a22: &DMatrix<T>, m22: &DMatrix<T>) -> Result<T> {
    if m22.is_empty() {
        return Ok(T::zero());
    }
    let (values, _) = generalized_eigen(a22, m22, "V_{H,2} stiffness/mass pencil")?;
    Ok(values.iter().fold(T::zero(), |acc, &v| acc.max(v)))
}

/// `(sup_ratio, dt_max)`; `dt_max` is infinite when the second space is empty
/// or carries no energy.
pub fn cfl_bound<T: Scalar>(stiffness: &SparseSymMatrix<T>, mass: &SparseSymMatrix<T>, r2: &DMatrix<T>, gamma: T) -> Result<(T, T)> {
    let sup = sup_ratio_from_blocks(&restrict(stiffness, r2)?, &restrict(mass, r2)?)?;
    Ok((sup, dt_max(gamma, sup)))
}

fn dt_max<T: Scalar>(gamma: T, sup: T) -> T {
    if sup > T::zero() {
        (T::one() - gamma) / sup
    } else {
        T::lit(f64::INFINITY)
    }
}

/// Report for the Galerkin blocks of the (linear) mass and stiffness forms.
pub fn stability_report<T: Scalar>(mass: &BlockPair<T>, stiffness: &BlockPair<T>, dt: T, physics: Physics) -> Result<StabilityReport<T>> {
    let gamma = gamma_from_blocks(&mass.b11, &mass.b12, &mass.b22)?;
    let sup_ratio = sup_ratio_from_blocks(&stiffness.b22, &mass.b22)?;
    let dt_max = dt_max(gamma, sup_ratio);
    let safety = if physics.is_linear() { T::one() } else { T::lit(NONLINEAR_SAFETY) };
    Ok(StabilityReport {
        gamma,
        sup_ratio,
        dt_max,
        dt_used: dt,
        safety,
        satisfied: gamma < T::one() && dt <= dt_max * safety,
    })
}

/// Left and right sides of one inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck<T> {
    pub lhs: T,
    pub rhs: T,
}

impl<T: Scalar> BoundCheck<T> {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }

    pub fn margin(&self) -> T {
        self.rhs - self.lhs
    }
}

/// Outcome of [`verify_continuity_bound`].
#[derive(Debug, Clone)]
pub struct ContinuityCheck<T> {
    /// The first (fully implicit) step estimate.
    pub first_step: BoundCheck<T>,
    /// `sum_i ||r_i^{n+1}||^2` bound for `n + 1 = 2..=N`.
    pub l2: Vec<BoundCheck<T>>,
    /// `||r^{n+1}||_a^2` bound for `n + 1 = 2..=N`.
    pub energy: Vec<BoundCheck<T>>,
}

impl<T: Scalar> ContinuityCheck<T> {
    pub fn holds(&self) -> bool {
        self.first_step.holds() && self.l2.iter().chain(&self.energy).all(|c| c.holds())
    }

    /// Smallest `rhs / lhs` over all checks (infinite when every lhs is zero).
    pub fn worst_ratio(&self) -> f64 {
        std::iter::once(&self.first_step)
            .chain(&self.l2)
            .chain(&self.energy)
            .filter(|c| c.lhs > T::zero())
            .map(|c| (c.rhs / c.lhs).as_f64())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates both sides of the difference estimates for two linear runs that
/// share spaces, initial data and time step but differ in the source.
///
/// `source_diff_sq[k]` is `||g_1(t^k) - g_2(t^k)||^2_{L^2}` for `k = 0..=N`.
pub fn verify_continuity_bound<T: Scalar>(
    mass: &BlockPair<T>,
    stiffness: &BlockPair<T>,
    gamma: T,
    first: &Trajectory<T>,
    second: &Trajectory<T>,
    source_diff_sq: &[T],
) -> Result<ContinuityCheck<T>> {
    let steps = first.steps();
    if second.steps() != steps || first.dim1() != second.dim1() || first.dim2() != second.dim2() {
        return Err(Error::invalid("trajectories have different shapes"));
    }
    if first.dt != second.dt {
        return Err(Error::invalid("trajectories use different time steps"));
    }
    if source_diff_sq.len() != steps + 1 {
        return Err(Error::DimensionMismatch {
            context: "source difference norms",
            expected: steps + 1,
            actual: source_diff_sq.len(),
        });
    }
    if !(gamma < T::one()) {
        return Err(Error::invalid("gamma must be below one"));
    }
    if steps == 0 {
        return Err(Error::invalid("at least one time step is required"));
    }
    let dt = first.dt;
    let t_final = dt * T::from_count(steps);
    let one_minus = T::one() - gamma;
    let two = T::lit(2.0);
    let diff = |n: usize| -> (DVector<T>, DVector<T>) {
        (&first.coeffs1[n] - &second.coeffs1[n], &first.coeffs2[n] - &second.coeffs2[n])
    };
    let split_l2 = |r1: &DVector<T>, r2: &DVector<T>| r1.dot(&(&mass.b11 * r1)) + r2.dot(&(&mass.b22 * r2));

    let g1 = source_diff_sq[1];
    let (r1, r2) = diff(1);
    let first_step = BoundCheck {
        lhs: one_minus / (two * dt) * split_l2(&r1, &r2) + stiffness.energy(&r1, &r2),
        rhs: dt / two * g1,
    };
    let gmax = source_diff_sq[1..steps].iter().fold(T::zero(), |acc, &g| acc.max(g));
    let l2_rhs = two * t_final * dt / one_minus * g1 + T::lit(4.0) * gamma * t_final * t_final / one_minus * gmax;
    let a_rhs = gamma * dt / one_minus * g1 + two * gamma * gamma * t_final / one_minus * gmax;
    let mut l2 = Vec::with_capacity(steps - 1);
    let mut energy = Vec::with_capacity(steps - 1);
    for n in 2..=steps {
        let (r1, r2) = diff(n);
        l2.push(BoundCheck {
            lhs: split_l2(&r1, &r2),
            rhs: l2_rhs,
        });
        energy.push(BoundCheck {
            lhs: stiffness.energy(&r1, &r2),
            rhs: a_rhs,
        });
    }
    Ok(ContinuityCheck { first_step, l2, energy })
}

/// `E^n = gamma/(2 dt) sum_i ||c_i^n - c_i^{n-1}||^2 + ||u^n||_a^2 / 2` for
/// `n = 1..=N`; without forcing and under the step restriction this sequence
/// does not increase for `n >= 1`.
pub fn splitting_energy<T: Scalar>(mass: &BlockPair<T>, stiffness: &BlockPair<T>, gamma: T, traj: &Trajectory<T>) -> Vec<T> {
    let half = T::lit(0.5);
    (1..=traj.steps())
        .map(|n| {
            let d1 = &traj.coeffs1[n] - &traj.coeffs1[n - 1];
            let d2 = &traj.coeffs2[n] - &traj.coeffs2[n - 1];
            let jump = d1.dot(&(&mass.b11 * &d1)) + d2.dot(&(&mass.b22 * &d2));
            gamma * half / traj.dt * jump + half * stiffness.energy(&traj.coeffs1[n], &traj.coeffs2[n])
        })
        .collect()
}
