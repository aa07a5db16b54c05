//! Proper orthogonal decomposition of the `V_{H,1}` snapshots.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrators::Trajectory;
use crate::io::{BinReader, BinWriter};
use crate::linalg::{cholesky, sorted_symmetric_eigen};
use crate::scalar::Scalar;

const POD_MAGIC: &[u8; 4] = b"PEXP";

/// First time level stored as a snapshot; earlier levels come from the
/// initial data and the implicit first step.
pub const FIRST_SNAPSHOT_STEP: usize = 2;

/// Columns `c1^n`, `n = 2..=N`, sample after sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix<T: Scalar> {
    pub data: DMatrix<T>,
    pub samples: usize,
    pub steps: usize,
}

impl<T: Scalar> SnapshotMatrix<T> {
    pub fn from_trajectories(trajectories: &[Trajectory<T>]) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| Error::invalid("no trajectories"))?;
        let (steps, dim) = (first.steps(), first.dim1());
        if steps < FIRST_SNAPSHOT_STEP {
            return Err(Error::invalid("trajectories need at least two steps"));
        }
        let per = steps + 1 - FIRST_SNAPSHOT_STEP;
        let mut data = DMatrix::zeros(dim, per * trajectories.len());
        for (m, traj) in trajectories.iter().enumerate() {
            if traj.steps() != steps || traj.dim1() != dim {
                return Err(Error::invalid(format!("trajectory {m} does not match the first trajectory's shape")));
            }
            for (k, c) in traj.coeffs1[FIRST_SNAPSHOT_STEP..].iter().enumerate() {
                if !c.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("snapshot of trajectory {m} at step {}", k + FIRST_SNAPSHOT_STEP)));
                }
                data.set_column(m * per + k, c);
            }
        }
        Ok(Self {
            data,
            samples: trajectories.len(),
            steps,
        })
    }

    pub fn snapshots_per_sample(&self) -> usize {
        self.steps + 1 - FIRST_SNAPSHOT_STEP
    }
}

/// How many modes to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeRule {
    Count(usize),
    /// Smallest `l` whose discarded energy fraction is at most the tolerance.
    Energy(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis<T: Scalar> {
    /// `dim(V_{H,1}) x l`, orthonormal columns.
    pub basis: DMatrix<T>,
    /// All singular values of the snapshot matrix, nonincreasing.
    pub singular_values: DVector<T>,
}

impl<T: Scalar> PodBasis<T> {
    /// Leading left singular vectors of `s`, obtained from the eigenvectors of
    /// the smaller of the two Gram matrices.
    pub fn compute(s: &DMatrix<T>, rule: ModeRule) -> Result<Self> {
        if s.is_empty() || s.iter().all(|v| *v == T::zero()) {
            return Err(Error::invalid("snapshot matrix is zero"));
        }
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("snapshot matrix".into()));
        }
        let (rows, cols) = s.shape();
        let row_side = rows <= cols;
        let gram = if row_side { s * s.transpose() } else { s.transpose() * s };
        let (values, vectors) = sorted_symmetric_eigen(gram);
        // descending, clipped at zero
        let k = rows.min(cols);
        let lambdas: Vec<T> = (0..k).map(|i| values[values.len() - 1 - i].max(T::zero())).collect();
        let singular_values = DVector::from_iterator(k, lambdas.iter().map(|l| l.sqrt()));
        let rank = numerical_rank(&lambdas, rows.max(cols));
        let wanted = match rule {
            ModeRule::Count(l) => {
                if l == 0 {
                    return Err(Error::invalid("at least one POD mode is required"));
                }
                l
            }
            ModeRule::Energy(tol) => energy_count(&lambdas, tol)?,
        };
        let l = if wanted > rank {
            log::warn!("requested {wanted} POD modes but the snapshot rank is {rank}; keeping {rank}");
            rank
        } else {
            wanted
        };
        let n = vectors.ncols();
        let basis = if row_side {
            DMatrix::from_fn(rows, l, |r, c| vectors[(r, n - 1 - c)])
        } else {
            let mut u = DMatrix::zeros(rows, l);
            for c in 0..l {
                let v = vectors.column(n - 1 - c);
                u.set_column(c, &(s * v / singular_values[c]));
            }
            u
        };
        let mut basis = basis;
        crate::linalg::normalize_signs(&mut basis);
        Ok(Self { basis, singular_values })
    }

    pub fn modes(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `sum_{i > l} sigma_i^2 / sum_i sigma_i^2` for the retained `l`.
    pub fn discarded_energy(&self) -> T {
        let total = self.singular_values.norm_squared();
        let kept: T = self.singular_values.iter().take(self.modes()).map(|s| *s * *s).fold(T::zero(), |a, b| a + b);
        (total - kept).max(T::zero()) / total
    }

    /// Reduced coordinates `(P^T P)^{-1} P^T u`.
    pub fn project(&self, u: &DVector<T>) -> Result<DVector<T>> {
        self.check_full(u.len())?;
        let gram = self.basis.tr_mul(&self.basis);
        Ok(cholesky(&gram, "POD Gram matrix")?.solve(&self.basis.tr_mul(u)))
    }

    /// `P z`
    pub fn lift(&self, z: &DVector<T>) -> Result<DVector<T>> {
        if z.len() != self.modes() {
            return Err(Error::DimensionMismatch {
                context: "reduced coordinates",
                expected: self.modes(),
                actual: z.len(),
            });
        }
        Ok(&self.basis * z)
    }

    fn check_full(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "V_{H,1} coordinates",
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path, POD_MAGIC)?;
        w.u64(self.dim())?;
        w.u64(self.modes())?;
        w.matrix(&self.basis)?;
        w.reals(self.singular_values.iter().copied())?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path, POD_MAGIC)?;
        let rows = r.u64()?;
        let l = r.u64()?;
        let basis = r.matrix(rows, l)?;
        if r.remaining() % 8 != 0 {
            return Err(r.malformed("singular value block is not a whole number of reals"));
        }
        let count = r.remaining() / 8;
        if count < l {
            return Err(r.malformed(format!("{count} singular values for {l} modes")));
        }
        let singular_values = r.vector(count)?;
        r.expect_end()?;
        Ok(Self { basis, singular_values })
    }
}

fn numerical_rank<T: Scalar>(lambdas: &[T], size: usize) -> usize {
    let top = lambdas.first().copied().unwrap_or(T::zero());
    // eigenvalues of the Gram matrix carry absolute error ~ eps * lambda_max
    let cutoff = top * T::from_count(size) * T::lit(f64::EPSILON) * T::lit(10.0);
    lambdas.iter().filter(|&&l| l > cutoff).count()
}

fn energy_count<T: Scalar>(lambdas: &[T], tol: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&tol) {
        return Err(Error::invalid(format!("energy tolerance {tol} must lie in [0, 1)")));
    }
    let total = lambdas.iter().fold(T::zero(), |a, &b| a + b);
    let target = total * T::lit(1.0 - tol);
    let mut cum = T::zero();
    for (i, &l) in lambdas.iter().enumerate() {
        cum += l;
        if cum >= target {
            return Ok(i + 1);
        }
    }
    Ok(lambdas.len())
}
