//! Mini-batch training with Adam, gradient clipping, a plateau learning-rate
//! schedule and interleaving of the forward and reversed-path tasks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdv::CdvStore;
use crate::corpus::Document;
use crate::decode::{greedy_decode, DecodeConfig, ModelScorer};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::neural::{model_rng, ModelConfig, ModelParams, ModelRng};
use crate::taxonomy::{ClassId, Direction, LabelPath, Taxonomy};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Top-to-bottom label paths.
    #[default]
    Main,
    /// Bottom-to-top label paths.
    Aux,
}

impl Task {
    pub fn direction(self) -> Direction {
        match self {
            Task::Main => Direction::Forward,
            Task::Aux => Direction::Reversed,
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::Main => Task::Aux,
            Task::Aux => Task::Main,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale every gradient by the global L2 norm.
    #[default]
    Norm,
    /// Clamp each entry to `[-clip, clip]`.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_units: usize,
    /// Must equal the dimension of the word vectors.
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub dropout: f64,
    pub grad_clip: f64,
    pub clip_mode: ClipMode,
    pub max_epochs: usize,
    pub aux_interleave_period: usize,
    pub aux_start_task: Task,
    pub pnc_enabled: bool,
    pub aux_enabled: bool,
    pub seed: u64,
    /// Include elapsed seconds in the epoch log. Off gives byte-identical
    /// logs across runs.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_units: 300,
            embedding_dim: 300,
            batch_size: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            learning_rate: 0.001,
            lr_decay_factor: 10.0,
            lr_patience_epochs: 4,
            dropout: 0.3,
            grad_clip: 0.5,
            clip_mode: ClipMode::Norm,
            max_epochs: 30,
            aux_interleave_period: 2,
            aux_start_task: Task::Main,
            pnc_enabled: false,
            aux_enabled: false,
            seed: 0,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_units", self.hidden_units),
            ("embedding_dim", self.embedding_dim),
            ("batch_size", self.batch_size),
            ("lr_patience_epochs", self.lr_patience_epochs),
            ("aux_interleave_period", self.aux_interleave_period),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        let reals = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("grad_clip", self.grad_clip),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 1.0) {
            return Err(Error::Config("lr_decay_factor must exceed 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig::new(self.embedding_dim, self.hidden_units, num_classes)
            .with_pnc(self.pnc_enabled)
            .with_dropout(self.dropout)
    }

    /// Training task for a zero-based epoch.
    pub fn task_for_epoch(&self, epoch: usize) -> Task {
        if !self.aux_enabled {
            return Task::Main;
        }
        if (epoch / self.aux_interleave_period.max(1)).is_multiple_of(2) {
            self.aux_start_task
        } else {
            self.aux_start_task.other()
        }
    }
}

/// Seed for an independent random stream derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Freshly initialised parameters for `num_classes` classes.
pub fn initial_model(config: &TrainConfig, num_classes: usize) -> ModelParams {
    ModelParams::init(
        config.model_config(num_classes),
        &mut model_rng(derive_seed(config.seed, STREAM_INIT)),
    )
}

/// Adam with bias correction over a list of flat buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lengths: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(params: &ModelParams, config: &TrainConfig) -> Self {
        let lengths: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self::new(&lengths, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape("optimizer state does not match the parameters".into()));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn update_model(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.data).collect();
        self.update(&mut params.slices_mut(), &g, lr)
    }
}

/// Clips in place and returns the global L2 norm before and after.
pub fn clip_slices(grads: &mut [&mut [f64]], max: f64, mode: ClipMode) -> (f64, f64) {
    let norm = |g: &[&mut [f64]]| g.iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let before = norm(grads);
    match mode {
        ClipMode::Norm => {
            if before > max {
                let factor = max / before;
                grads.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v *= factor));
            }
        }
        ClipMode::Value => grads
            .iter_mut()
            .for_each(|s| s.iter_mut().for_each(|v| *v = v.clamp(-max, max))),
    }
    (before, norm(grads))
}

pub fn clip_gradients(grads: &mut ModelParams, max: f64, mode: ClipMode) -> (f64, f64) {
    clip_slices(&mut grads.slices_mut(), max, mode)
}

/// Mutable run state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub decay_count: u32,
    pub learning_rate: f64,
    pub best_accuracy: Option<f64>,
    pub epochs_since_improvement: usize,
    pub task: Task,
    pub optimizer: Adam,
    pub rng: ModelRng,
}

impl TrainState {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            decay_count: 0,
            learning_rate: config.learning_rate,
            best_accuracy: None,
            epochs_since_improvement: 0,
            task: config.task_for_epoch(0),
            optimizer: Adam::for_model(params, config),
            rng: model_rng(derive_seed(config.seed, STREAM_DROPOUT)),
        }
    }
}

/// Outcome of feeding one validation accuracy to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub decayed: bool,
}

pub fn update_lr_schedule(state: &mut TrainState, accuracy: f64, config: &TrainConfig) -> ScheduleStep {
    let improved = state.best_accuracy.is_none_or(|best| accuracy > best);
    let mut decayed = false;
    if improved {
        state.best_accuracy = Some(accuracy);
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
        if state.epochs_since_improvement >= config.lr_patience_epochs {
            state.decay_count += 1;
            state.learning_rate = config.learning_rate / config.lr_decay_factor.powi(state.decay_count as i32);
            state.epochs_since_improvement = 0;
            decayed = true;
        }
    }
    ScheduleStep { improved, decayed }
}

/// Read-only inputs shared by training and validation.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub taxonomy: &'a Taxonomy,
    pub table: &'a EmbeddingTable,
    pub cdv: Option<&'a CdvStore>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean of the per-batch mean losses.
    pub mean_loss: f64,
    pub batches: usize,
    pub max_norm_before_clip: f64,
    pub max_norm_after_clip: f64,
}

/// One pass over `documents` in the given order.
pub fn train_epoch(
    params: &mut ModelParams,
    documents: &[&Document],
    task: Task,
    ctx: &TrainContext<'_>,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochStats> {
    let cdv = if config.pnc_enabled { ctx.cdv } else { None };
    let direction = task.direction();
    let mut stats = EpochStats {
        mean_loss: 0.0,
        batches: 0,
        max_norm_before_clip: 0.0,
        max_norm_after_clip: 0.0,
    };
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for batch in documents.chunks(config.batch_size) {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for doc in batch {
            let (loss, cache) =
                params.forward_loss_doc(doc, ctx.table, ctx.taxonomy, direction, cdv, Some(&mut state.rng))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} on document {} at epoch {} ({task:?} task)",
                    doc.id,
                    state.epoch + 1
                )));
            }
            params.backward(&cache, &mut grads);
            batch_loss += loss;
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at epoch {} batch {}",
                state.epoch + 1,
                stats.batches + 1
            )));
        }
        let (before, after) = clip_gradients(&mut grads, config.grad_clip, config.clip_mode);
        stats.max_norm_before_clip = stats.max_norm_before_clip.max(before);
        stats.max_norm_after_clip = stats.max_norm_after_clip.max(after);
        state.optimizer.update_model(params, &grads, state.learning_rate)?;
        total += batch_loss / n;
        stats.batches += 1;
    }
    if stats.batches > 0 {
        stats.mean_loss = total / stats.batches as f64;
    }
    Ok(stats)
}

/// Greedy main-task evaluation, parallel over documents.
pub fn evaluate_greedy(
    params: &ModelParams,
    documents: &[Document],
    ctx: &TrainContext<'_>,
    pnc_enabled: bool,
) -> Result<EvalReport> {
    let cfg = DecodeConfig {
        pnc_enabled,
        ..DecodeConfig::default()
    };
    let predictions = documents
        .par_iter()
        .map(|doc| {
            let scorer = ModelScorer::from_tokens(params, &doc.tokens, ctx.table)?;
            let hyp = greedy_decode(&scorer, ctx.taxonomy, ctx.cdv, &cfg)?;
            Ok(hyp.classes(ctx.taxonomy))
        })
        .collect::<Result<Vec<Vec<ClassId>>>>()?;
    let gold: Vec<LabelPath> = documents.iter().map(|d| d.labels.clone()).collect();
    evaluate(ctx.taxonomy, &predictions, &gold)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub task: Task,
    pub train_loss: f64,
    pub val_level_accuracy: Vec<f64>,
    pub val_path_accuracy: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub max_clipped_grad_norm: f64,
    pub improved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: ModelParams,
    /// One-based epoch of the best checkpoint, `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_accuracy: Option<f64>,
    pub last: ModelParams,
    pub log: Vec<EpochRecord>,
}

impl FitOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn check_inputs(params: &ModelParams, train: &[Document], ctx: &TrainContext<'_>, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if ctx.table.dim() != config.embedding_dim {
        return Err(Error::Config(format!(
            "embedding_dim is {} but the word vectors have dimension {}",
            config.embedding_dim,
            ctx.table.dim()
        )));
    }
    if params.config.num_classes != ctx.taxonomy.num_classes() {
        return Err(Error::Config(
            "model and taxonomy disagree on the number of classes".into(),
        ));
    }
    if params.config.pnc != config.pnc_enabled {
        return Err(Error::Config(
            "model and training config disagree on conditioning".into(),
        ));
    }
    if config.pnc_enabled {
        let store = ctx
            .cdv
            .ok_or_else(|| Error::Config("pnc_enabled needs class definition vectors".into()))?;
        if store.dim() != config.embedding_dim || store.len() != ctx.taxonomy.num_classes() {
            return Err(Error::Config("CDV store does not match the model".into()));
        }
    }
    Ok(())
}

/// Trains for up to `max_epochs`, scoring each epoch with `validate`, and
/// keeps the parameters with the best validation path accuracy.
pub fn fit_with_validator<F>(
    initial: ModelParams,
    train: &[Document],
    ctx: &TrainContext<'_>,
    config: &TrainConfig,
    mut validate: F,
) -> Result<FitOutcome>
where
    F: FnMut(usize, &ModelParams) -> Result<EvalReport>,
{
    check_inputs(&initial, train, ctx, config)?;
    let mut params = initial;
    let mut state = TrainState::new(&params, config);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut log = Vec::with_capacity(config.max_epochs);
    let start = Instant::now();
    for epoch in 0..config.max_epochs {
        state.epoch = epoch;
        state.task = config.task_for_epoch(epoch);
        let mut order: Vec<&Document> = train.iter().collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE + epoch as u64));
        order.shuffle(&mut shuffle);
        let lr = state.learning_rate;
        let stats = train_epoch(&mut params, &order, state.task, ctx, config, &mut state)?;
        let report = validate(epoch, &params)?;
        let accuracy = report.path_accuracy();
        let step = update_lr_schedule(&mut state, accuracy, config);
        if step.improved {
            best = params.clone();
            best_epoch = Some(epoch + 1);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            task: state.task,
            train_loss: stats.mean_loss,
            val_level_accuracy: report.level_accuracies(),
            val_path_accuracy: accuracy,
            learning_rate: lr,
            max_grad_norm: stats.max_norm_before_clip,
            max_clipped_grad_norm: stats.max_norm_after_clip,
            improved: step.improved,
            wall_clock_seconds: config.record_wall_clock.then(|| start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {} {:?} loss {:.5} val path {:.4} lr {}",
            record.epoch,
            record.task,
            record.train_loss,
            accuracy,
            lr
        );
        log.push(record);
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        best_accuracy: state.best_accuracy,
        last: params,
        log,
    })
}

/// [`fit_with_validator`] with greedy forward-path validation on `validation`.
pub fn fit(
    initial: ModelParams,
    train: &[Document],
    validation: &[Document],
    ctx: &TrainContext<'_>,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    if validation.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    fit_with_validator(initial, train, ctx, config, |_, params| {
        evaluate_greedy(params, validation, ctx, config.pnc_enabled)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_single_step_by_hand() {
        // f(x) = x², x = 1, g = 2.
        let mut adam = Adam::new(&[1], 0.9, 0.98, 1e-9);
        let mut x = [1.0];
        adam.update(&mut [&mut x[..]], &[&[2.0][..]], 0.001).unwrap();
        // m = 0.2, v = 0.08, m̂ = 2, v̂ = 4, step = 0.001 * 2 / (2 + 1e-9).
        let expected = 1.0 - 0.001 * 2.0 / (2.0 + 1e-9);
        assert!((x[0] - expected).abs() < 1e-15, "{}", x[0]);

        // Second step from x₁ with g = 2x₁.
        let g = 2.0 * x[0];
        let m = 0.9 * 0.2 + 0.1 * g;
        let v = 0.98 * 0.08 + 0.02 * g * g;
        let step = 0.001 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.98f64 * 0.98)).sqrt() + 1e-9);
        let x1 = x[0];
        adam.update(&mut [&mut x[..]], &[&[g][..]], 0.001).unwrap();
        assert!((x[0] - (x1 - step)).abs() < 1e-15);
    }

    #[test]
    fn clipping_examples() {
        let mut g = [3.0, 4.0];
        let (before, after) = clip_slices(&mut [&mut g[..]], 0.5, ClipMode::Norm);
        assert_eq!(before, 5.0);
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
        assert!(after <= 0.5 + 1e-9);

        let mut g = [0.18, 0.24];
        clip_slices(&mut [&mut g[..]], 0.5, ClipMode::Norm);
        assert_eq!(g, [0.18, 0.24]);

        let mut g = [0.0; 3];
        let (b, a) = clip_slices(&mut [&mut g[..]], 0.5, ClipMode::Norm);
        assert_eq!((b, a, g), (0.0, 0.0, [0.0; 3]));

        let mut g = [3.0, -0.1, -4.0];
        clip_slices(&mut [&mut g[..]], 0.5, ClipMode::Value);
        assert_eq!(g, [0.5, -0.1, -0.5]);
    }

    fn state(config: &TrainConfig) -> TrainState {
        TrainState::new(&ModelParams::zeros(ModelConfig::new(1, 1, 2)), config)
    }

    #[test]
    fn plateau_divides_by_ten() {
        let config = TrainConfig::default();
        let mut s = state(&config);
        let steps: Vec<_> = [0.5; 5]
            .iter()
            .map(|&a| update_lr_schedule(&mut s, a, &config))
            .collect();
        assert!(steps[0].improved);
        assert_eq!(steps.iter().filter(|s| s.decayed).count(), 1);
        assert!(steps[4].decayed);
        assert_eq!(s.learning_rate, 0.0001);

        let mut s = state(&config);
        for a in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6] {
            update_lr_schedule(&mut s, a, &config);
        }
        assert_eq!(s.learning_rate, 0.001);

        let mut s = state(&config);
        for _ in 0..9 {
            update_lr_schedule(&mut s, 0.5, &config);
        }
        assert_eq!(s.decay_count, 2);
        assert_eq!(s.learning_rate, 1e-5);
    }

    #[test]
    fn task_schedule() {
        let mut config = TrainConfig {
            aux_enabled: true,
            ..Default::default()
        };
        let tasks: Vec<_> = (0..8).map(|e| config.task_for_epoch(e)).collect();
        use Task::*;
        assert_eq!(tasks, vec![Main, Main, Aux, Aux, Main, Main, Aux, Aux]);
        config.aux_start_task = Aux;
        assert_eq!(config.task_for_epoch(0), Aux);
        assert_eq!(config.task_for_epoch(2), Main);
        config.aux_enabled = false;
        assert!((0..30).all(|e| config.task_for_epoch(e) == Main));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            aux_interleave_period: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay_factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }
}
