//! Relative L2 errors between learned, computed and fine solutions.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;

use crate::cem::MultiscaleSpaces;
use crate::error::{Error, Result};
use crate::fem::SparseSymMatrix;
use crate::integrators::Trajectory;
use crate::pod::FIRST_SNAPSHOT_STEP;

/// `e1..e4` in percent at one step; `None` where the reference norm is zero.
pub type StepErrors = [Option<f64>; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub step: usize,
    pub t: f64,
    pub e: StepErrors,
}

/// Per-step errors, averaged over test samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorSeries {
    pub rows: Vec<ErrorRow>,
}

fn relative(mass: &SparseSymMatrix<f64>, num: &DVector<f64>, den: &DVector<f64>) -> Option<f64> {
    let d = mass.quad_form(den).max(0.0).sqrt();
    if d > 0.0 {
        Some(100.0 * mass.quad_form(num).max(0.0).sqrt() / d)
    } else {
        None
    }
}

/// Errors of one test sample for `n = 2..=N`.
///
/// `fine` holds nodal vectors; `learned` and `computed` hold coarse
/// coordinates. Without a fine reference `e1`, `e2` are `None`.
pub fn sample_errors(
    mass: &SparseSymMatrix<f64>,
    spaces: &MultiscaleSpaces<f64>,
    learned: &Trajectory<f64>,
    computed: &Trajectory<f64>,
    fine: Option<&Trajectory<f64>>,
) -> Result<Vec<StepErrors>> {
    let steps = computed.steps();
    if learned.steps() != steps || fine.is_some_and(|f| f.steps() != steps) {
        return Err(Error::invalid("trajectories have different step counts"));
    }
    let zero2 = DVector::zeros(spaces.dim2());
    (FIRST_SNAPSHOT_STEP..=steps)
        .map(|n| {
            let ul = spaces.lift(&learned.coeffs1[n], &learned.coeffs2[n]);
            let uc = spaces.lift(&computed.coeffs1[n], &computed.coeffs2[n]);
            let ul1 = spaces.lift(&learned.coeffs1[n], &zero2);
            let uc1 = spaces.lift(&computed.coeffs1[n], &zero2);
            let (e1, e2) = match fine {
                Some(f) => {
                    let uf = &f.coeffs1[n];
                    if uf.len() != ul.len() {
                        return Err(Error::DimensionMismatch {
                            context: "fine reference state",
                            expected: ul.len(),
                            actual: uf.len(),
                        });
                    }
                    (relative(mass, &(&ul - uf), uf), relative(mass, &(&uc - uf), uf))
                }
                None => (None, None),
            };
            Ok([e1, e2, relative(mass, &(&ul1 - &uc1), &uc1), relative(mass, &(&ul - &uc), &uc)])
        })
        .collect()
}

impl ErrorSeries {
    /// Mean over samples of every defined value, step by step.
    pub fn average(per_sample: &[Vec<StepErrors>], dt: f64) -> Result<Self> {
        let Some(first) = per_sample.first() else {
            return Err(Error::invalid("no samples to average"));
        };
        let len = first.len();
        if per_sample.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("samples have different step counts"));
        }
        let rows = (0..len)
            .map(|i| {
                let mut e = [None; 4];
                for (k, slot) in e.iter_mut().enumerate() {
                    let vals: Vec<f64> = per_sample.iter().filter_map(|s| s[i][k]).collect();
                    if !vals.is_empty() {
                        *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
                    }
                }
                let step = i + FIRST_SNAPSHOT_STEP;
                ErrorRow { step, t: step as f64 * dt, e }
            })
            .collect();
        Ok(Self { rows })
    }

    /// Time average of error `k` (0-based) over the steps where it is defined.
    pub fn time_average(&self, k: usize) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.e[k]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Time average of `|e1 - e2|` over steps where both are defined.
    pub fn mean_gap_e1_e2(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| Some((r.e[0]? - r.e[1]?).abs()))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// CSV `step,t,e1,e2,e3,e4`; undefined values are left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,t,e1,e2,e3,e4")?;
        for r in &self.rows {
            let cells: Vec<String> = r.e.iter().map(|v| v.map_or(String::new(), |x| format!("{x:e}"))).collect();
            writeln!(f, "{},{:e},{}", r.step, r.t, cells.join(","))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let bad = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut lines = text.lines();
        if lines.next() != Some("step,t,e1,e2,e3,e4") {
            return Err(bad("missing header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(bad(format!("line {} has {} fields", i + 2, cells.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
            let mut e = [None; 4];
            for k in 0..4 {
                if !cells[2 + k].is_empty() {
                    e[k] = Some(num(cells[2 + k])?);
                }
            }
            let step = cells[0].parse::<usize>().map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            rows.push(ErrorRow { step, t: num(cells[1])?, e });
        }
        Ok(Self { rows })
    }
}
