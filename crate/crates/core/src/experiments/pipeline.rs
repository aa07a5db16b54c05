//! Stage-by-stage experiment driver. Every stage persists its artifacts in
//! the output directory and later stages reload them, so an interrupted run
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, HistoryMode};
use super::errors::{sample_errors, ErrorRow, ErrorSeries};
use super::source::{well_load_shapes, ExampleId, SourceSpec};
use crate::cem::{assemble_spaces, MultiscaleSpaces};
use crate::error::{Error, Result};
use crate::field::{default_channels, generate_channel_field, ScalarCellField};
use crate::grid::{CoarseDecomposition, FineGrid};
use crate::integrators::{CoarseSystem, FineSolver, History, LoadShapes, Trajectory};
use crate::pod::{PodBasis, SnapshotMatrix, FIRST_SNAPSHOT_STEP};
use crate::stability::StabilityReport;
use crate::surrogate::{train, write_loss_csv, Dataset, InputScaling, Mlp, ParameterSampler, Surrogate};

pub const FIELD_FILE: &str = "field.pexf";
pub const SPACES_FILE: &str = "spaces.pexs";
pub const STABILITY_FILE: &str = "stability.txt";
pub const POD_FILE: &str = "pod.pexp";
pub const MODEL_FILE: &str = "model.pexm";
pub const LOSS_FILE: &str = "loss.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.csv";
pub const SIMULATE_DIR: &str = "simulate";

/// Initial state of every experiment.
pub fn initial_condition(grid: &FineGrid<f64>) -> DVector<f64> {
    grid.interpolate(|x, y| (PI * x).sin() * (PI * y).sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Seeds derived from the master seed, one per random stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub train_samples: u64,
    pub test_samples: u64,
    pub training: u64,
}

impl StageSeeds {
    pub fn derive(master: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(master);
            rng.set_stream(k);
            rng.next_u64()
        };
        Self {
            train_samples: stream(1),
            test_samples: stream(2),
            training: stream(3),
        }
    }

    fn for_split(&self, split: Split) -> u64 {
        match split {
            Split::Train => self.train_samples,
            Split::Test => self.test_samples,
        }
    }
}

/// Parameters and computed coarse trajectories of one split.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub params: Vec<DVector<f64>>,
    pub trajectories: Vec<Trajectory<f64>>,
}

/// Source of the `V_{H,1}` coordinates at `n = 2..=N` for one test sample.
pub trait U1Predictor: Sync {
    fn predict(&self, w: &DVector<f64>, computed: &Trajectory<f64>) -> Result<Vec<DVector<f64>>>;
}

/// Trained network composed with the POD lift.
pub struct SurrogatePredictor<'a> {
    pub surrogate: &'a Surrogate<f64>,
    pub pod: &'a PodBasis<f64>,
}

impl U1Predictor for SurrogatePredictor<'_> {
    fn predict(&self, w: &DVector<f64>, _computed: &Trajectory<f64>) -> Result<Vec<DVector<f64>>> {
        self.surrogate.predict_trajectory(self.pod, w)
    }
}

/// Exact POD truncation of the computed solution; isolates the POD error.
pub struct PodOracle<'a> {
    pub pod: &'a PodBasis<f64>,
}

impl U1Predictor for PodOracle<'_> {
    fn predict(&self, _w: &DVector<f64>, computed: &Trajectory<f64>) -> Result<Vec<DVector<f64>>> {
        computed.coeffs1[FIRST_SNAPSHOT_STEP..]
            .iter()
            .map(|c| self.pod.lift(&self.pod.project(c)?))
            .collect()
    }
}

/// Time-averaged errors of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub series: ErrorSeries,
    pub mean: [Option<f64>; 4],
    pub mean_gap_e1_e2: Option<f64>,
}

impl EvalSummary {
    fn from_series(series: ErrorSeries) -> Self {
        let mean = [0, 1, 2, 3].map(|k| series.time_average(k));
        let mean_gap_e1_e2 = series.mean_gap_e1_e2();
        Self {
            series,
            mean,
            mean_gap_e1_e2,
        }
    }

    pub fn to_key_values(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:e}"));
        let mut s = String::new();
        for (k, v) in self.mean.iter().enumerate() {
            s.push_str(&format!("mean_e{}={}\n", k + 1, fmt(*v)));
        }
        s.push_str(&format!("mean_abs_e1_minus_e2={}\n", fmt(self.mean_gap_e1_e2)));
        s
    }
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seeds: StageSeeds,
    grid: FineGrid<f64>,
    shapes: LoadShapes<f64>,
    field: OnceLock<ScalarCellField<f64>>,
    spaces: OnceLock<MultiscaleSpaces<f64>>,
    system: OnceLock<CoarseSystem<f64>>,
}

fn cached<V>(cell: &OnceLock<V>, make: impl FnOnce() -> Result<V>) -> Result<&V> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = make()?;
    Ok(cell.get_or_init(|| v))
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(out)?;
        let grid = FineGrid::new(config.grid.n)?;
        let shapes = well_load_shapes(&grid, config.example_id());
        let seeds = StageSeeds::derive(config.seed);
        let p = Self {
            config,
            out: out.to_path_buf(),
            seeds,
            grid,
            shapes,
            field: OnceLock::new(),
            spaces: OnceLock::new(),
            system: OnceLock::new(),
        };
        p.record(&[
            ("example", p.config.example.id.to_string()),
            ("seed", p.config.seed.to_string()),
            ("seed.train_samples", seeds.train_samples.to_string()),
            ("seed.test_samples", seeds.test_samples.to_string()),
            ("seed.training", seeds.training.to_string()),
            ("grid.n", p.config.grid.n.to_string()),
            ("grid.Nc", p.config.grid.nc.to_string()),
            ("time.N", p.config.steps().to_string()),
            ("time.T", format!("{:e}", p.config.t_final())),
        ])?;
        Ok(p)
    }

    pub fn grid(&self) -> &FineGrid<f64> {
        &self.grid
    }

    pub fn example(&self) -> ExampleId {
        self.config.example_id()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Merges `entries` into the manifest.
    fn record(&self, entries: &[(&str, String)]) -> Result<()> {
        let path = self.path(MANIFEST_FILE);
        let mut map = BTreeMap::new();
        if let Ok(text) = std::fs::read_to_string(&path) {
            for line in text.lines() {
                if let Some((k, v)) = line.split_once('=') {
                    map.insert(k.to_string(), v.to_string());
                }
            }
        }
        for (k, v) in entries {
            map.insert(k.to_string(), v.clone());
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for (k, v) in map {
            writeln!(f, "{k}={v}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn source(&self, w: &DVector<f64>) -> Result<SourceSpec> {
        SourceSpec::new(self.example(), w.iter().copied().collect(), self.config.t_final())
    }

    pub fn initial_condition(&self) -> DVector<f64> {
        initial_condition(&self.grid)
    }

    /// Loads `field.path`, or the field of a previous run, or generates one.
    pub fn field(&self) -> Result<&ScalarCellField<f64>> {
        cached(&self.field, || {
            let stored = self.path(FIELD_FILE);
            let field = if let Some(p) = &self.config.field.path {
                ScalarCellField::load_for(p, &self.grid)?
            } else if stored.exists() {
                ScalarCellField::load_for(&stored, &self.grid)?
            } else {
                generate_channel_field(&self.grid, self.config.field.background, self.config.field.contrast, &default_channels())?
            };
            if !stored.exists() {
                field.save(&stored)?;
            }
            Ok(field)
        })
        .map_err(|e| e.in_stage("field"))
    }

    pub fn spaces(&self) -> Result<&MultiscaleSpaces<f64>> {
        cached(&self.spaces, || {
            let path = self.path(SPACES_FILE);
            if path.exists() {
                let s = MultiscaleSpaces::load(&path)?;
                if s.node_count() != self.grid.node_count() {
                    return Err(Error::Config(format!("{} was built for another grid", path.display())));
                }
                return Ok(s);
            }
            let kappa = self.field()?;
            let dec = CoarseDecomposition::new(&self.grid, self.config.grid.nc, self.config.spaces.layers)?;
            let s = assemble_spaces(&self.grid, &dec, kappa, self.config.spaces.space_config())?;
            s.save(&path)?;
            self.record(&[("dim1", s.dim1().to_string()), ("dim2", s.dim2().to_string())])?;
            log::info!("spaces: dim V_H1 = {}, dim V_H2 = {}", s.dim1(), s.dim2());
            Ok(s)
        })
        .map_err(|e| e.in_stage("spaces"))
    }

    pub fn system(&self) -> Result<&CoarseSystem<f64>> {
        cached(&self.system, || {
            CoarseSystem::new(&self.grid, self.field()?, self.spaces()?, &self.shapes, self.config.dt(), self.config.physics())
        })
        .map_err(|e| e.in_stage("system"))
    }

    /// Stability report for the configured time step; also written to disk.
    pub fn stability(&self) -> Result<StabilityReport<f64>> {
        let report = *self.system()?.stability();
        std::fs::write(self.path(STABILITY_FILE), report.to_key_values()).map_err(|e| Error::from(e).in_stage("gamma"))?;
        Ok(report)
    }

    pub fn fine_solver(&self) -> Result<FineSolver<f64>> {
        FineSolver::new(&self.grid, self.field()?, &self.shapes, self.config.dt(), self.config.reference_physics())
    }

    fn run_coarse(&self, w: &DVector<f64>) -> Result<Trajectory<f64>> {
        let spec = self.source(w)?;
        self.system()?.run(&self.initial_condition(), &spec, self.config.steps())
    }

    /// Samples parameters and computes coarse trajectories for one split,
    /// or reloads them.
    pub fn samples(&self, split: Split) -> Result<SampleSet> {
        let stage = "dataset";
        let dir = self.path(split.dir());
        let count = match split {
            Split::Train => self.config.samples.train,
            Split::Test => self.config.samples.test,
        };
        if dir.join(PARAMS_FILE).exists() {
            return self.load_samples(split, count).map_err(|e| e.in_stage(stage));
        }
        let (lower, upper) = self.example().bounds();
        let mut sampler = ParameterSampler::new(self.example().parameter_count(), lower, upper, self.seeds.for_split(split))?;
        let params: Vec<DVector<f64>> = sampler.sample_many(count);
        // force construction outside the parallel region
        self.system().map_err(|e| e.in_stage(stage))?;
        let trajectories: Vec<Trajectory<f64>> = params
            .par_iter()
            .map(|w| self.run_coarse(w))
            .collect::<Result<_>>()
            .map_err(|e| e.in_stage(stage))?;
        std::fs::create_dir_all(&dir)?;
        for (i, t) in trajectories.iter().enumerate() {
            t.save(&dir.join(format!("{i:06}.pext"))).map_err(|e| e.in_stage(stage))?;
        }
        write_params(&dir.join(PARAMS_FILE), &params)?;
        self.record(&[(&format!("samples.{}", split.dir()), count.to_string())])?;
        Ok(SampleSet { params, trajectories })
    }

    fn load_samples(&self, split: Split, count: usize) -> Result<SampleSet> {
        let dir = self.path(split.dir());
        let params = read_params(&dir.join(PARAMS_FILE), self.example().parameter_count())?;
        if params.len() != count {
            return Err(Error::Config(format!(
                "{} holds {} samples but the config asks for {count}",
                dir.display(),
                params.len()
            )));
        }
        let trajectories = (0..count)
            .map(|i| Trajectory::load(&dir.join(format!("{i:06}.pext"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = trajectories.iter().find(|t| t.steps() != self.config.steps()) {
            return Err(Error::Config(format!("stored trajectories have {} steps, config has {}", t.steps(), self.config.steps())));
        }
        Ok(SampleSet { params, trajectories })
    }

    pub fn dataset(&self) -> Result<(SampleSet, SampleSet)> {
        Ok((self.samples(Split::Train)?, self.samples(Split::Test)?))
    }

    pub fn pod(&self) -> Result<PodBasis<f64>> {
        let path = self.path(POD_FILE);
        if path.exists() {
            return PodBasis::load(&path).map_err(|e| e.in_stage("pod"));
        }
        let train = self.samples(Split::Train)?;
        let build = || -> Result<PodBasis<f64>> {
            let s = SnapshotMatrix::from_trajectories(&train.trajectories)?;
            let pod = PodBasis::compute(&s.data, self.config.mode_rule())?;
            pod.save(&path)?;
            self.record(&[("pod.l", pod.modes().to_string())])?;
            log::info!("pod: kept {} modes, discarded energy {:e}", pod.modes(), pod.discarded_energy());
            Ok(pod)
        };
        build().map_err(|e| e.in_stage("pod"))
    }

    pub fn input_scaling(&self) -> Result<InputScaling> {
        let (l, u) = self.example().bounds();
        InputScaling::new(l, u)
    }

    /// Network inputs and time-major reduced targets of a split.
    pub fn training_data(&self, set: &SampleSet, pod: &PodBasis<f64>) -> Result<Dataset<f64>> {
        let k = self.example().parameter_count();
        let per = self.config.steps() + 1 - FIRST_SNAPSHOT_STEP;
        let l = pod.modes();
        let inputs = DMatrix::from_fn(k, set.params.len(), |r, c| set.params[c][r]);
        let mut targets = DMatrix::zeros(l * per, set.params.len());
        for (m, traj) in set.trajectories.iter().enumerate() {
            for (j, c) in traj.coeffs1[FIRST_SNAPSHOT_STEP..].iter().enumerate() {
                targets.view_mut((j * l, m), (l, 1)).copy_from(&pod.project(c)?);
            }
        }
        Dataset::new(inputs, targets)
    }

    pub fn train(&self) -> Result<Surrogate<f64>> {
        let scaling = self.input_scaling()?;
        let path = self.path(MODEL_FILE);
        if path.exists() {
            let model = Mlp::load(&path).map_err(|e| e.in_stage("train"))?;
            return Ok(Surrogate { model, scaling });
        }
        let pod = self.pod()?;
        let set = self.samples(Split::Train)?;
        let run = || -> Result<Surrogate<f64>> {
            let data = self.training_data(&set, &pod)?;
            let outcome = train(&data, &self.config.train, scaling, self.seeds.training)?;
            outcome.surrogate.model.save(&path)?;
            write_loss_csv(&self.path(LOSS_FILE), &outcome.losses)?;
            if let Some(last) = outcome.losses.last() {
                log::info!("train: final loss {last:e}");
                self.record(&[("train.final_loss", format!("{last:e}"))])?;
            }
            Ok(outcome.surrogate)
        };
        run().map_err(|e| e.in_stage("train"))
    }

    /// Learned solution for one sample: `u1` from the predictor, `u2` from
    /// the explicit equation.
    pub fn learned_trajectory(&self, predictor: &dyn U1Predictor, w: &DVector<f64>, computed: &Trajectory<f64>) -> Result<Trajectory<f64>> {
        let predicted = predictor.predict(w, computed)?;
        let history = match self.config.learned.history {
            HistoryMode::Predicted => History::Predicted,
            HistoryMode::Mixed => History::Reference(computed),
        };
        self.system()?.complete_from_u1(&self.initial_condition(), &self.source(w)?, &predicted, history)
    }

    /// Errors over the test split for any predictor; `with_fine` adds the
    /// fine reference runs needed for `e1`, `e2`.
    pub fn evaluate_with(&self, predictor: &dyn U1Predictor, with_fine: bool) -> Result<EvalSummary> {
        let test = self.samples(Split::Test)?;
        let run = || -> Result<EvalSummary> {
            let system = self.system()?;
            let fine = if with_fine { Some(self.fine_solver()?) } else { None };
            let u0 = self.initial_condition();
            let per_sample = test
                .params
                .par_iter()
                .zip(&test.trajectories)
                .map(|(w, computed)| {
                    let learned = self.learned_trajectory(predictor, w, computed)?;
                    let reference = match &fine {
                        Some(f) => Some(f.run(&u0, &self.source(w)?, self.config.steps())?),
                        None => None,
                    };
                    sample_errors(system.fine_mass(), &system.spaces, &learned, computed, reference.as_ref())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalSummary::from_series(ErrorSeries::average(&per_sample, self.config.dt())?))
        };
        run().map_err(|e| e.in_stage("eval"))
    }

    /// Evaluates the trained surrogate and writes the errors CSV and summary.
    pub fn evaluate(&self) -> Result<EvalSummary> {
        let pod = self.pod()?;
        let surrogate = self.train()?;
        let summary = self.evaluate_with(&SurrogatePredictor { surrogate: &surrogate, pod: &pod }, true)?;
        let write = || -> Result<()> {
            summary.series.write_csv(&self.path(ERRORS_FILE))?;
            std::fs::write(self.path(SUMMARY_FILE), summary.to_key_values())?;
            Ok(())
        };
        write().map_err(|e| e.in_stage("eval"))?;
        Ok(summary)
    }

    /// One coarse and one fine run at the centre of the parameter box; the
    /// errors CSV carries only `e2`.
    pub fn simulate(&self) -> Result<ErrorSeries> {
        let run = || -> Result<ErrorSeries> {
            let (l, u) = self.example().bounds();
            let w = DVector::from_element(self.example().parameter_count(), 0.5 * (l + u));
            let spec = self.source(&w)?;
            let coarse = self.run_coarse(&w)?;
            let fine = self.fine_solver()?.run(&self.initial_condition(), &spec, self.config.steps())?;
            let dir = self.path(SIMULATE_DIR);
            std::fs::create_dir_all(&dir)?;
            coarse.save(&dir.join("coarse.pext"))?;
            fine.save(&dir.join("fine.pext"))?;
            let system = self.system()?;
            let errors = sample_errors(system.fine_mass(), &system.spaces, &coarse, &coarse, Some(&fine))?;
            let rows = errors
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let step = i + FIRST_SNAPSHOT_STEP;
                    ErrorRow {
                        step,
                        t: step as f64 * self.config.dt(),
                        e: [None, e[1], None, None],
                    }
                })
                .collect();
            let series = ErrorSeries { rows };
            series.write_csv(&dir.join(ERRORS_FILE))?;
            Ok(series)
        };
        run().map_err(|e| e.in_stage("simulate"))
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<EvalSummary> {
        self.spaces()?;
        self.stability()?;
        self.dataset()?;
        self.evaluate()
    }
}

fn write_params(path: &Path, params: &[DVector<f64>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let k = params.first().map_or(0, |p| p.len());
    let header: Vec<String> = (1..=k).map(|i| format!("w{i}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for p in params {
        // `{:?}` keeps every bit so reloaded parameters are identical
        let cells: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn read_params(path: &Path, k: usize) -> Result<Vec<DVector<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    if header.split(',').count() != k {
        return Err(bad(format!("expected {k} parameter columns")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let vals = line
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != k {
                return Err(bad(format!("line {} has {} values", i + 2, vals.len())));
            }
            Ok(DVector::from_vec(vals))
        })
        .collect()
}
