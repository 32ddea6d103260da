//! Feed-forward acoustic model: tanh hidden layers, linear output, trained
//! with plain minibatch SGD on half the per-frame squared error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{mlpg, AcousticStreams, NormKind, NormalizationStats, StreamLayout, LF0_UNVOICED, VUV_THRESHOLD};
use crate::binio::Reader;
use crate::error::{Error, Result};

pub const HIDDEN_LAYERS: usize = 6;
pub const HIDDEN_UNITS: usize = 1024;

const MAGIC: &[u8; 4] = b"MLPM";
const VERSION: u32 = 1;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// fan_in x fan_out
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Affine layers with tanh between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Argument(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.bias.len()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().bias.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Argument(format!(
                "input width {} does not match model input {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let mut out = Array2::zeros((batch.nrows(), self.output_dim()));
        for start in (0..batch.nrows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(batch.nrows());
            let acts = self.activations(batch.slice(s![start..end, ..]));
            out.slice_mut(s![start..end, ..]).assign(acts.last().unwrap());
        }
        Ok(out)
    }

    /// Input followed by each layer's output.
    fn activations(&self, batch: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    /// `0.5 * mean over rows of the summed squared error`, and its gradient.
    pub fn backward(&self, batch: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        self.check_input(&batch)?;
        if targets.dim() != (batch.nrows(), self.output_dim()) {
            return Err(Error::Argument(format!(
                "targets shape {:?} does not match ({}, {})",
                targets.dim(),
                batch.nrows(),
                self.output_dim()
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let b = batch.nrows() as f64;
        let acts = self.activations(batch);
        let mut delta = &acts[self.layers.len()] - &targets;
        let loss = 0.5 * delta.iter().map(|v| v * v).sum::<f64>() / b;
        delta /= b;

        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let weights = acts[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut next = delta.dot(&self.layers[i].weights.t());
                next.zip_mut_with(&acts[i], |d, &a| *d *= 1.0 - a * a);
                delta = next;
            }
            grads.push(Layer { weights, bias });
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    pub fn loss(&self, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
        let pred = self.forward(inputs)?;
        if pred.dim() != targets.dim() {
            return Err(Error::Argument("target shape mismatch".into()));
        }
        let n = inputs.nrows().max(1) as f64;
        Ok(0.5 * (&pred - &targets).iter().map(|v| v * v).sum::<f64>() / n)
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.layer_sizes();
        let mut out = Vec::with_capacity(16 + 8 * (sizes.len() + self.n_params()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sizes.len() as u64).to_le_bytes());
        for s in &sizes {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u64()? as usize;
        let sizes = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.len() < 2 {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let weights = Array2::from_shape_vec((w[0], w[1]), r.f64_vec(w[0] * w[1])?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let bias = Array1::from(r.f64_vec(w[1])?);
            layers.push(Layer { weights, bias });
        }
        r.finish()?;
        Ok(Self { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Layer sizes `[input, hidden x n, output]`.
pub fn architecture(input_dim: usize, hidden_layers: usize, hidden_units: usize, output_dim: usize) -> Vec<usize> {
    let mut sizes = vec![input_dim];
    sizes.extend(std::iter::repeat_n(hidden_units, hidden_layers));
    sizes.push(output_dim);
    sizes
}

/// Default acoustic model: six 1024-unit tanh layers and a 199-wide output.
pub fn init_model(input_dim: usize, seed: u64) -> Result<MlpModel> {
    MlpModel::init(
        &architecture(input_dim, HIDDEN_LAYERS, HIDDEN_UNITS, StreamLayout::default().width()),
        seed,
    )
}

/// Same shapes as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    /// Multiplicative learning-rate factor per epoch after warm-up.
    pub decay: f64,
    pub batch_size: usize,
    /// Post-warm-up epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            max_epochs: 25,
            warmup_epochs: 10,
            base_lr: 0.002,
            decay: 0.5,
            batch_size: 256,
            patience: 5,
            seed: 1234,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "warm-up epochs ({}) must be fewer than max epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            self.base_lr
        } else {
            self.base_lr * self.decay.powi((epoch - self.warmup_epochs) as i32)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub valid_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best_valid(&self) -> f64 {
        self.epochs
            .iter()
            .map(|r| r.valid_mse)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_mse,valid_mse\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.lr, r.train_mse, r.valid_mse);
        }
        out
    }
}

/// Input/target pair of row-aligned matrices.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
}

impl<'a> Dataset<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, targets: ArrayView2<'a, f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Data(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite(v: f64, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::TrainingDiverged { epoch })
    }
}

/// Minibatch SGD with warm-up, exponential decay and early stopping.
/// Returns the parameters of the best validation epoch.
pub fn train(
    mut model: MlpModel,
    train_set: Dataset<'_>,
    valid_set: Dataset<'_>,
    schedule: &TrainingSchedule,
) -> Result<(MlpModel, TrainingHistory)> {
    schedule.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = TrainingHistory::default();
    let initial_valid = check_finite(model.loss(valid_set.inputs, valid_set.targets)?, 0)?;
    let initial_train = check_finite(model.loss(train_set.inputs, train_set.targets)?, 0)?;
    history.epochs.push(EpochRecord {
        epoch: 0,
        lr: 0.0,
        train_mse: initial_train,
        valid_mse: initial_valid,
    });
    let mut best = (initial_valid, 0usize, model.clone());
    let mut stale = 0;

    let out_dim = model.output_dim();
    let in_dim = model.input_dim();
    for epoch in 1..=schedule.max_epochs {
        let lr = schedule.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut sum_loss = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let mut xb = Array2::zeros((chunk.len(), in_dim));
            let mut yb = Array2::zeros((chunk.len(), out_dim));
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&train_set.inputs.row(i));
                yb.row_mut(r).assign(&train_set.targets.row(i));
            }
            let (loss, grads) = model.backward(xb.view(), yb.view())?;
            check_finite(loss, epoch)?;
            sum_loss += loss * chunk.len() as f64;
            model.sgd_step(&grads, lr);
        }
        let train_mse = check_finite(sum_loss / train_set.len() as f64, epoch)?;
        let valid_mse = check_finite(model.loss(valid_set.inputs, valid_set.targets)?, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_mse,
            valid_mse,
        });
        if valid_mse < best.0 {
            best = (valid_mse, epoch, model.clone());
            stale = 0;
        } else if epoch > schedule.warmup_epochs {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
    }
    history.best_epoch = best.1;
    Ok((best.2, history))
}

/// Generated parameters for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Trajectories smoothed by maximum-likelihood parameter generation.
    pub mlpg: AcousticStreams,
    /// Static columns of the denormalized network output.
    pub raw: AcousticStreams,
    pub vuv: Array1<f64>,
    /// Denormalized network output, before stream splitting.
    pub denormalized: Array2<f64>,
}

/// Forward pass, denormalization, stream split, MLPG and voicing decision.
pub fn predict_utterance(
    model: &MlpModel,
    inputs: ArrayView2<f64>,
    output_stats: &NormalizationStats,
    layout: StreamLayout,
    frame_shift: f64,
) -> Result<Prediction> {
    if output_stats.kind != NormKind::MeanVariance {
        return Err(Error::Argument("output statistics must be mean-variance".into()));
    }
    if output_stats.width() != layout.width() || model.output_dim() != layout.width() {
        return Err(Error::Argument(format!(
            "model output {} / statistics {} / layout {} widths disagree",
            model.output_dim(),
            output_stats.width(),
            layout.width()
        )));
    }
    let normalized = model.forward(inputs)?;
    let out = output_stats.invert(normalized.view())?;
    let variances = output_stats.variances()?;

    let vuv = out.column(layout.vuv()).mapv(|v| if v > VUV_THRESHOLD { 1.0 } else { 0.0 });
    let smooth = |range: std::ops::Range<usize>| mlpg(out.slice(s![.., range.clone()]), variances.slice(s![range]));
    let statics = |range: std::ops::Range<usize>, w: usize| out.slice(s![.., range.start..range.start + w]).to_owned();

    let mask_lf0 = |lf0: Array2<f64>| {
        let mut lf0 = lf0.column(0).to_owned();
        lf0.zip_mut_with(&vuv, |v, &flag| {
            if flag == 0.0 {
                *v = LF0_UNVOICED
            }
        });
        lf0
    };

    let mlpg_streams = AcousticStreams::new(
        smooth(layout.mgc())?,
        smooth(layout.bap())?,
        mask_lf0(smooth(layout.lf0())?),
        frame_shift,
    )?;
    let raw_streams = AcousticStreams::new(
        statics(layout.mgc(), layout.mgc_dim),
        statics(layout.bap(), layout.bap_dim),
        mask_lf0(statics(layout.lf0(), 1)),
        frame_shift,
    )?;
    Ok(Prediction {
        mlpg: mlpg_streams,
        raw: raw_streams,
        vuv,
        denormalized: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zero_model(sizes: &[usize]) -> MlpModel {
        let mut m = MlpModel::init(sizes, 0).unwrap();
        for l in &mut m.layers {
            l.weights.fill(0.0);
        }
        m
    }

    #[test]
    fn default_architecture() {
        let m = init_model(10, 1).unwrap();
        assert_eq!(m.layer_sizes(), vec![10, 1024, 1024, 1024, 1024, 1024, 1024, 199]);
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(&[5, 8, 3], 42).unwrap();
        let b = MlpModel::init(&[5, 8, 3], 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = MlpModel::init(&[5, 8, 3], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = zero_model(&[4, 6, 6, 3]);
        let out = m.forward(Array2::from_elem((2, 4), 0.7).view()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_unit() {
        let mut m = MlpModel::init(&[1, 1], 0).unwrap();
        m.layers[0].weights[[0, 0]] = 1.0;
        let out = m.forward(array![[0.0]].view()).unwrap();
        assert_eq!(out[[0, 0]], 0.0f64.tanh());
    }

    #[test]
    fn width_mismatch() {
        let m = MlpModel::init(&[3, 4, 2], 0).unwrap();
        assert!(matches!(m.forward(Array2::zeros((1, 2)).view()), Err(Error::Argument(_))));
        assert!(matches!(
            m.backward(Array2::zeros((1, 3)).view(), Array2::zeros((1, 3)).view()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_gradient_at_target() {
        let m = MlpModel::init(&[3, 5, 2], 9).unwrap();
        let x = array![[0.1, -0.2, 0.3], [0.5, 0.0, -1.0]];
        let y = m.forward(x.view()).unwrap();
        let (loss, g) = m.backward(x.view(), y.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| *v == 0.0)));
    }

    #[test]
    fn duplicated_batch_same_gradient() {
        let m = MlpModel::init(&[3, 5, 2], 9).unwrap();
        let x = array![[0.1, -0.2, 0.3], [0.5, 0.0, -1.0]];
        let y = array![[1.0, 0.0], [0.0, -1.0]];
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y2 = ndarray::concatenate(Axis(0), &[y.view(), y.view()]).unwrap();
        let (l1, g1) = m.backward(x.view(), y.view()).unwrap();
        let (l2, g2) = m.backward(x2.view(), y2.view()).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (u, v) in a.weights.iter().zip(b.weights.iter()) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn schedule_defaults_and_lr() {
        let s = TrainingSchedule::default();
        assert_eq!((s.max_epochs, s.warmup_epochs, s.batch_size), (25, 10, 256));
        assert_eq!(s.base_lr, 0.002);
        assert_eq!(s.learning_rate(10), 0.002);
        assert_eq!(s.learning_rate(11), 0.001);
        assert_eq!(s.learning_rate(12), 0.0005);
        let bad = TrainingSchedule {
            warmup_epochs: 25,
            ..TrainingSchedule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_sets_rejected() {
        let m = MlpModel::init(&[2, 2], 0).unwrap();
        let x = Array2::<f64>::zeros((0, 2));
        let d = Dataset::new(x.view(), x.view()).unwrap();
        let full = Array2::<f64>::zeros((3, 2));
        let f = Dataset::new(full.view(), full.view()).unwrap();
        assert!(matches!(train(m.clone(), d, f, &TrainingSchedule::default()), Err(Error::Data(_))));
        assert!(matches!(train(m, f, d, &TrainingSchedule::default()), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_detected() {
        let m = MlpModel::init(&[2, 4, 2], 0).unwrap();
        let x = Array2::from_elem((8, 2), 1.0);
        let y = Array2::from_elem((8, 2), 1e300);
        let d = Dataset::new(x.view(), y.view()).unwrap();
        let err = train(m, d, d, &TrainingSchedule::default()).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MlpModel::init(&[3, 4, 2], 5).unwrap();
        assert_eq!(MlpModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn vuv_threshold_rule() {
        let layout = StreamLayout::new(1, 1);
        let w = layout.width();
        let mut model = zero_model(&[2, 3, w]);
        // bias-only output, identity statistics
        model.layers[1].bias[layout.vuv()] = 0.49;
        let stats = NormalizationStats {
            kind: NormKind::MeanVariance,
            a: Array1::zeros(w),
            b: Array1::ones(w),
            constant: vec![false; w],
        };
        let p = predict_utterance(&model, Array2::zeros((2, 2)).view(), &stats, layout, 0.005).unwrap();
        assert_eq!(p.vuv.to_vec(), vec![0.0, 0.0]);
        assert!(p.mlpg.lf0.iter().all(|v| *v == LF0_UNVOICED));
        model.layers[1].bias[layout.vuv()] = 0.51;
        let p = predict_utterance(&model, Array2::zeros((2, 2)).view(), &stats, layout, 0.005).unwrap();
        assert_eq!(p.vuv.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn minmax_output_stats_rejected() {
        let layout = StreamLayout::new(1, 1);
        let w = layout.width();
        let model = MlpModel::init(&[2, w], 0).unwrap();
        let stats = NormalizationStats::fit(Array2::from_shape_fn((3, w), |(i, j)| (i * j) as f64).view(), NormKind::MinMax).unwrap();
        assert!(matches!(
            predict_utterance(&model, Array2::zeros((1, 2)).view(), &stats, layout, 0.005),
            Err(Error::Argument(_))
        ));
    }
}
