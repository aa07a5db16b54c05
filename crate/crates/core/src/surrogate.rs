//! Fully connected SELU network mapping source parameters to the POD
//! coordinates of the implicit component at every time level, trained with
//! Adam on the mean squared error.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::pod::PodBasis;
use crate::scalar::Scalar;

const MODEL_MAGIC: &[u8; 4] = b"PEXM";

pub const SELU_ALPHA: f64 = 1.6732632423543772;
pub const SELU_LAMBDA: f64 = 1.0507009873554805;

pub fn selu<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SELU_LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        lambda * T::lit(SELU_ALPHA) * (x.exp() - T::one())
    }
}

pub fn selu_derivative<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SELU_LAMBDA);
    if x > T::zero() {
        lambda
    } else {
        lambda * T::lit(SELU_ALPHA) * x.exp()
    }
}

/// `y = phi(x W + b)` for a row vector `x`; `w` is `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar> {
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: DMatrix::zeros(inputs, outputs),
            b: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    /// Pre-activations for a batch stored column-wise (`features x batch`).
    fn affine(&self, a: &DMatrix<T>) -> DMatrix<T> {
        let mut z = self.w.tr_mul(a);
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

/// SELU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

/// Gradients with the same layout as the model.
pub type Gradients<T> = Vec<Layer<T>>;

impl<T: Scalar> Mlp<T> {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|s| Layer::zeros(s[0], s[1])).collect(),
        })
    }

    /// LeCun-normal weights (`N(0, 1 / fan_in)`) and zero biases.
    pub fn lecun_normal(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        for layer in &mut model.layers {
            let normal = Normal::new(0.0, (1.0 / layer.inputs() as f64).sqrt()).expect("positive deviation");
            for v in layer.w.iter_mut() {
                *v = T::lit(normal.sample(rng));
            }
        }
        Ok(model)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass for a batch stored column-wise (`inputs x batch`).
    pub fn forward_batch(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: x.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.affine(&a);
            if i < last {
                a.apply(|v| *v = selu(*v));
            }
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(a)
    }

    pub fn forward(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// Mean squared error over all batch entries and outputs.
    pub fn loss(&self, x: &DMatrix<T>, y: &DMatrix<T>) -> Result<T> {
        let out = self.forward_batch(x)?;
        check_targets(&out, y)?;
        Ok((out - y).norm_squared() / T::from_count(y.len()))
    }

    /// Loss and its gradient with respect to every weight and bias.
    pub fn gradients(&self, x: &DMatrix<T>, y: &DMatrix<T>) -> Result<(T, Gradients<T>)> {
        if x.ncols() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: x.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        // activations[i] feeds layer i; pre[i] is its pre-activation
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&activations[i]);
            let a = if i < last { z.map(selu) } else { z.clone() };
            pre.push(z);
            activations.push(a);
        }
        let out = &activations[self.layers.len()];
        check_targets(out, y)?;
        let count = T::from_count(y.len());
        let diff = out - y;
        let loss = diff.norm_squared() / count;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut delta = diff * (T::lit(2.0) / count);
        let mut grads: Gradients<T> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                delta.zip_apply(&pre[i], |d, z| *d *= selu_derivative(z));
            }
            let dw = &activations[i] * delta.transpose();
            let db = delta.column_sum();
            let next = if i > 0 { Some(&self.layers[i].w * &delta) } else { None };
            grads.push(Layer { w: dw, b: db });
            if let Some(n) = next {
                delta = n;
            }
        }
        grads.reverse();
        Ok((loss, grads))
    }

    /// All parameters, layer by layer, weights (column-major) before biases.
    pub fn flat_params(&self) -> Vec<T> {
        flatten(&self.layers)
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path, MODEL_MAGIC)?;
        w.u64(self.layers.len())?;
        for layer in &self.layers {
            w.u64(layer.inputs())?;
            w.u64(layer.outputs())?;
            w.matrix(&layer.w)?;
            w.reals(layer.b.iter().copied())?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path, MODEL_MAGIC)?;
        let count = r.count(16)?;
        if count == 0 {
            return Err(r.malformed("model has no layers"));
        }
        let mut layers: Vec<Layer<T>> = Vec::with_capacity(count);
        for i in 0..count {
            let rows = r.u64()?;
            let cols = r.u64()?;
            if let Some(prev) = layers.last() {
                if prev.outputs() != rows {
                    return Err(r.malformed(format!("layer {i} takes {rows} inputs, previous layer gives {}", prev.outputs())));
                }
            }
            let w = r.matrix(rows, cols)?;
            let b = r.vector(cols)?;
            layers.push(Layer { w, b });
        }
        r.expect_end()?;
        Ok(Self { layers })
    }
}

/// Flattened parameters or gradients, in [`Mlp::flat_params`] order.
pub fn flatten<T: Scalar>(layers: &[Layer<T>]) -> Vec<T> {
    layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

fn check_targets<T: Scalar>(out: &DMatrix<T>, y: &DMatrix<T>) -> Result<()> {
    if out.shape() != y.shape() {
        return Err(Error::DimensionMismatch {
            context: "training targets",
            expected: out.len(),
            actual: y.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); params],
            v: vec![T::zero(); params],
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, model: &mut Mlp<T>, grads: &Gradients<T>) -> Result<()> {
        let g = flatten(grads);
        if g.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "Adam gradient",
                expected: self.m.len(),
                actual: g.len(),
            });
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let corr1 = T::one() - T::lit(c.beta1.powi(self.step));
        let corr2 = T::one() - T::lit(c.beta2.powi(self.step));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.epsilon));
        let mut params = model.flat_params();
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        model.set_flat_params(&params)
    }
}

/// Affine map of `[lower, upper]^k` onto `[0, 1]^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputScaling {
    pub lower: f64,
    pub upper: f64,
}

impl InputScaling {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::invalid(format!("parameter bounds [{lower}, {upper}] are not an interval")));
        }
        Ok(Self { lower, upper })
    }

    pub fn apply<T: Scalar>(&self, w: &DVector<T>) -> DVector<T> {
        let (l, width) = (T::lit(self.lower), T::lit(self.upper - self.lower));
        w.map(|v| (v - l) / width)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_layers: usize,
    pub width: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 4,
            width: 64,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 500,
        }
    }
}

impl TrainConfig {
    pub fn layer_sizes(&self, inputs: usize, outputs: usize) -> Vec<usize> {
        let mut s = vec![inputs];
        s.extend(std::iter::repeat_n(self.width, self.hidden_layers));
        s.push(outputs);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.width == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("width, batch size and epochs must be positive"));
        }
        if !(a.learning_rate > 0.0 && a.epsilon > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::invalid("learning rate and epsilon must be positive, betas in [0, 1)"));
        }
        Ok(())
    }
}

/// Raw parameters (one per column) and targets (one per column).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub inputs: DMatrix<T>,
    pub targets: DMatrix<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: DMatrix<T>, targets: DMatrix<T>) -> Result<Self> {
        if inputs.ncols() != targets.ncols() || inputs.ncols() == 0 {
            return Err(Error::invalid(format!(
                "{} inputs and {} targets",
                inputs.ncols(),
                targets.ncols()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trained network together with the input scaling it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate<T: Scalar> {
    pub model: Mlp<T>,
    pub scaling: InputScaling,
}

impl<T: Scalar> Surrogate<T> {
    pub fn predict(&self, w: &DVector<T>) -> Result<DVector<T>> {
        self.model.forward(&self.scaling.apply(w))
    }

    /// Mean squared error on raw parameters and targets.
    pub fn mse(&self, data: &Dataset<T>) -> Result<T> {
        let x = normalized_inputs(&data.inputs, self.scaling);
        self.model.loss(&x, &data.targets)
    }

    /// Predicted `V_{H,1}` coordinates for `n = 2..=N`.
    pub fn predict_trajectory(&self, pod: &PodBasis<T>, w: &DVector<T>) -> Result<Vec<DVector<T>>> {
        reduced_to_trajectory(pod, &self.predict(w)?)
    }
}

/// Splits a time-major vector of `l` coordinates per step and lifts each step.
pub fn reduced_to_trajectory<T: Scalar>(pod: &PodBasis<T>, reduced: &DVector<T>) -> Result<Vec<DVector<T>>> {
    let l = pod.modes();
    if l == 0 || !reduced.len().is_multiple_of(l) {
        return Err(Error::DimensionMismatch {
            context: "network output vs POD modes",
            expected: l,
            actual: reduced.len(),
        });
    }
    reduced
        .as_slice()
        .chunks(l)
        .map(|c| pod.lift(&DVector::from_column_slice(c)))
        .collect()
}

fn normalized_inputs<T: Scalar>(inputs: &DMatrix<T>, scaling: InputScaling) -> DMatrix<T> {
    let (l, width) = (T::lit(scaling.lower), T::lit(scaling.upper - scaling.lower));
    inputs.map(|v| (v - l) / width)
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<T: Scalar> {
    pub surrogate: Surrogate<T>,
    /// Mean training loss per epoch in target units.
    pub losses: Vec<T>,
}

/// Minibatch Adam on standardized targets. Targets are centered per output
/// and divided by one global scale while training; both are folded back into
/// the output layer so the returned model predicts raw targets.
pub fn train<T: Scalar>(data: &Dataset<T>, config: &TrainConfig, scaling: InputScaling, seed: u64) -> Result<TrainingOutcome<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normalized_inputs(&data.inputs, scaling);
    let mean = data.targets.column_mean();
    let mut y = data.targets.clone();
    for mut col in y.column_iter_mut() {
        col -= &mean;
    }
    let spread = (y.norm_squared() / T::from_count(y.len())).sqrt();
    let scale = if spread > T::zero() { spread } else { T::one() };
    y /= scale;

    let sizes = config.layer_sizes(x.nrows(), y.nrows());
    let mut model = Mlp::lecun_normal(&sizes, &mut rng)?;
    let mut adam = Adam::new(config.adam, model.param_count());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = T::zero();
        for batch in order.chunks(config.batch_size) {
            let bx = x.select_columns(batch);
            let by = y.select_columns(batch);
            let (loss, grads) = match model.gradients(&bx, &by) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            total += loss * T::from_count(batch.len());
            adam.update(&mut model, &grads)?;
        }
        let epoch_loss = total / T::from_count(data.len()) * scale * scale;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss.as_f64(),
            });
        }
        if epoch % 50 == 0 || epoch + 1 == config.epochs {
            log::debug!("epoch {epoch}: loss {:e}", epoch_loss.as_f64());
        }
        losses.push(epoch_loss);
    }
    let last = model.layers.last_mut().expect("at least one layer");
    last.w *= scale;
    last.b = &last.b * scale + mean;
    Ok(TrainingOutcome {
        surrogate: Surrogate { model, scaling },
        losses,
    })
}

/// CSV with header `epoch,loss`.
pub fn write_loss_csv<T: Scalar>(path: &Path, losses: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{},{:e}", i + 1, l.as_f64())?;
    }
    f.flush()?;
    Ok(())
}

/// Uniform samples from `[lower, upper]^k`.
#[derive(Debug, Clone)]
pub struct ParameterSampler {
    pub k: usize,
    pub lower: f64,
    pub upper: f64,
    rng: ChaCha8Rng,
}

impl ParameterSampler {
    pub fn new(k: usize, lower: f64, upper: f64, seed: u64) -> Result<Self> {
        InputScaling::new(lower, upper)?;
        Ok(Self {
            k,
            lower,
            upper,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample<T: Scalar>(&mut self) -> DVector<T> {
        DVector::from_fn(self.k, |_, _| T::lit(self.rng.random_range(self.lower..=self.upper)))
    }

    pub fn sample_many<T: Scalar>(&mut self, count: usize) -> Vec<DVector<T>> {
        (0..count).map(|_| self.sample()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_branches() {
        assert_eq!(selu(0.0f64), 0.0);
        assert!((selu(2.0f64) - 2.0 * SELU_LAMBDA).abs() < 1e-15);
        assert!((selu(-1e3f64) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
        let h = 1e-6;
        for x in [-1.3f64, -0.2, 0.4, 2.0] {
            let fd = (selu(x + h) - selu(x - h)) / (2.0 * h);
            assert!((fd - selu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = Mlp::<f64>::zeros(&[3, 4, 4, 2]).unwrap();
        let out = m.forward(&DVector::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(out, DVector::zeros(2));
    }

    #[test]
    fn single_hidden_unit() {
        let mut m = Mlp::<f64>::zeros(&[1, 1, 1]).unwrap();
        m.layers[0].w[(0, 0)] = 1.0;
        m.layers[1].w[(0, 0)] = 1.0;
        let out = m.forward(&DVector::from_vec(vec![0.7])).unwrap();
        assert!((out[0] - SELU_LAMBDA * 0.7).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_without_momentum() {
        let mut m = Mlp::<f64>::zeros(&[1, 1]).unwrap();
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 1e-8,
        };
        let mut adam = Adam::new(cfg, m.param_count());
        let g = vec![Layer {
            w: DMatrix::from_element(1, 1, 0.5),
            b: DVector::from_element(1, -2.0),
        }];
        adam.update(&mut m, &g).unwrap();
        assert!((m.layers[0].w[(0, 0)] + 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((m.layers[0].b[0] - 0.1 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        let before = m.clone();
        adam.update(&mut m, &vec![Layer::zeros(1, 1)]).unwrap();
        // with beta1 = 0 the zero gradient gives a zero step
        assert_eq!(m, before);
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mlp::<f64>::lecun_normal(&[2, 5, 3], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        m.save(&p).unwrap();
        assert_eq!(Mlp::<f64>::load(&p).unwrap(), m);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(Mlp::<f64>::load(&p).is_err());
    }

    #[test]
    fn memorizes_single_sample() {
        let data = Dataset::new(DMatrix::from_column_slice(2, 1, &[3.0, 7.0]), DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5])).unwrap();
        let cfg = TrainConfig {
            hidden_layers: 2,
            width: 8,
            epochs: 200,
            ..TrainConfig::default()
        };
        let out = train(&data, &cfg, InputScaling::new(1.0, 10.0).unwrap(), 5).unwrap();
        assert!(out.surrogate.mse(&data).unwrap() < 1e-6);
    }

    #[test]
    fn sampler_respects_bounds_and_seed() {
        let mut a = ParameterSampler::new(4, 1.0, 10.0, 9).unwrap();
        let mut b = ParameterSampler::new(4, 1.0, 10.0, 9).unwrap();
        let xs: Vec<DVector<f64>> = a.sample_many(50);
        assert_eq!(xs, b.sample_many::<f64>(50));
        assert!(xs.iter().flat_map(|x| x.iter()).all(|&v| (1.0..=10.0).contains(&v)));
    }
}
