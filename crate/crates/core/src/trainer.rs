//! Training loop: Adam with linear warmup, a held-out evaluation split,
//! early stopping on evaluation loss, plus multi-pair and transfer runs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::data::{group_directional, Record};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{mse_loss, Architecture, LabelScaler, ModelInput, QEModel};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Learning rate and epochs raised so a randomly initialized desk-scale
    /// encoder actually learns.
    Desk,
    /// Batch 8, lr 2e-5, 3 epochs: the settings used for fine-tuning a large
    /// pretrained encoder.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub eval_every_n_steps: usize,
    pub early_stop_patience: usize,
    pub eval_holdout_fraction: f64,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => TrainingConfig { learning_rate: 5e-4, epochs: 5, ..Self::paper() },
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn paper() -> Self {
        TrainingConfig {
            batch_size: 8,
            learning_rate: 2e-5,
            epochs: 3,
            warmup_fraction: 0.1,
            eval_every_n_steps: 50,
            early_stop_patience: 10,
            eval_holdout_fraction: 0.2,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TrainingConfig { seed, ..self }
    }

    pub fn with_epochs(self, epochs: usize) -> Self {
        TrainingConfig { epochs, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every_n_steps == 0 {
            return fail("batch_size, epochs and eval_every_n_steps must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail("warmup_fraction must lie in (0, 1)");
        }
        if !(self.eval_holdout_fraction > 0.0 && self.eval_holdout_fraction < 0.5) {
            return fail("eval_holdout_fraction must lie in (0, 0.5)");
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1");
        }
        Ok(())
    }

    pub fn total_steps(&self, train_size: usize) -> usize {
        self.epochs * train_size.div_ceil(self.batch_size)
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        // The small slack keeps e.g. 0.1 × 1000 from rounding up to 101.
        ((self.warmup_fraction * total_steps as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Learning rate for optimizer step `step` (0-based): linear warmup from 0,
/// then constant.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainingConfig) -> f64 {
    let warmup = cfg.warmup_steps(total_steps);
    if step >= warmup {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / warmup as f64
    }
}

/// Adam moments for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, computed per element in `f64`.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape { op: "adam_step", lhs: p.shape().to_vec(), rhs: vec![g.len()] });
        }
    }
    if lr < 0.0 {
        return Err(Error::Contract("negative learning rate".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.to_f64();
            let m1 = BETA1 * mi.to_f64() + (1.0 - BETA1) * gi;
            let v1 = BETA2 * vi.to_f64() + (1.0 - BETA2) * gi * gi;
            *mi = T::from_f64(m1);
            *vi = T::from_f64(v1);
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + ADAM_EPS);
            *x = T::from_f64(x.to_f64() - update);
        }
    }
    Ok(())
}

/// Seeded shuffle, then the last `eval_holdout_fraction` of rows become the
/// evaluation split.
pub fn split_train_eval<R: Clone>(data: &[R], cfg: &TrainingConfig) -> Result<(Vec<R>, Vec<R>)> {
    if data.len() < 5 {
        return Err(Error::Empty(format!("need at least 5 rows to split, got {}", data.len())));
    }
    let mut rows = data.to_vec();
    rows.shuffle(&mut Pcg64Mcg::seed_from_u64(cfg.seed));
    let n_eval = ((data.len() as f64 * cfg.eval_holdout_fraction) + 1e-9).floor().max(1.0) as usize;
    let eval = rows.split_off(data.len() - n_eval);
    Ok((rows, eval))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    /// Transfer with no target data: the base model is returned as is.
    NoTrainingData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the steps since the previous evaluation
    /// (`None` for the evaluation before the first step).
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub preset: Option<Preset>,
    pub config: TrainingConfig,
    pub train_size: usize,
    pub eval_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub steps_completed: usize,
    pub history: Vec<EvalRecord>,
    pub stop_reason: StopReason,
    pub best_step: usize,
    pub best_eval_loss: f64,
    /// Seconds spent training. Not serialized, so reports of identical runs
    /// stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainingReport {
    fn zero_shot(cfg: &TrainingConfig) -> Self {
        TrainingReport {
            preset: None,
            config: *cfg,
            train_size: 0,
            eval_size: 0,
            total_steps: 0,
            warmup_steps: 0,
            steps_completed: 0,
            history: Vec::new(),
            stop_reason: StopReason::NoTrainingData,
            best_step: 0,
            best_eval_loss: f64::NAN,
            wall_time_secs: 0.0,
        }
    }

    /// One JSON object per evaluation.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for rec in &self.history {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Everything except the per-evaluation history.
    pub fn summary_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("history");
            obj.insert("evaluations".into(), self.history.len().into());
        }
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }

    /// Mean seconds per optimizer step.
    pub fn seconds_per_step(&self) -> f64 {
        self.wall_time_secs / self.steps_completed.max(1) as f64
    }
}

fn prepare_all(model: &QEModel, records: &[Record]) -> Result<Vec<ModelInput>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| model.prepare(&r.source, &r.target).map_err(|e| Error::at_record(i, e)))
        .collect()
}

/// Mean squared error in the scaled label space, without gradients.
pub fn eval_loss(model: &QEModel, inputs: &[ModelInput], targets: &[f64]) -> Result<f64> {
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let scores = model.raw_scores(&refs)?;
    let se: f64 = scores.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(se / inputs.len().max(1) as f64)
}

/// Forward and backward pass over one batch; returns the loss and one
/// gradient per parameter (zeros for parameters the batch did not touch).
pub fn batch_gradients(model: &QEModel, batch: &[&ModelInput], targets: &[f32]) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let preds = model.forward(&mut g, &bound, batch)?;
    let loss = mse_loss(&mut g, preds, targets)?;
    g.backward(loss)?;
    let value = f64::from(g.data(loss)[0]);
    let grads = bound
        .vars()
        .into_iter()
        .map(|v| g.grad_data(v).map_or_else(|| vec![0.0; g.data(v).len()], <[f32]>::to_vec))
        .collect();
    Ok((value, grads))
}

/// Trains `model` on `data`, holding out an evaluation split.
///
/// A Siamese model that has never been trained gets a label scaler fitted on
/// the training split; models that were trained before (transfer) keep
/// theirs. Returns the weights with the lowest evaluation loss seen,
/// including the untrained starting point.
pub fn train(model: &QEModel, data: &[Record], cfg: &TrainingConfig) -> Result<(QEModel, TrainingReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no training data".into()));
    }
    let (train_rows, eval_rows) = split_train_eval(data, cfg)?;
    train_with_eval(model, &train_rows, &eval_rows, cfg)
}

/// [`train`] with an explicit evaluation set; `eval_rows` may overlap
/// `train_rows` (e.g. to select on training loss when overfitting).
pub fn train_with_eval(
    model: &QEModel,
    train_rows: &[Record],
    eval_rows: &[Record],
    cfg: &TrainingConfig,
) -> Result<(QEModel, TrainingReport)> {
    cfg.validate()?;
    if train_rows.is_empty() || eval_rows.is_empty() {
        return Err(Error::Empty("training and evaluation sets must be non-empty".into()));
    }
    let started = Instant::now();
    let mut model = model.clone();
    if model.architecture() == Architecture::Siamese && model.meta.steps_completed == 0 {
        let labels: Vec<f64> = train_rows.iter().map(|r| r.label).collect();
        model.scaler = LabelScaler::for_architecture(Architecture::Siamese, &labels)?;
    }
    let train_x = prepare_all(&model, train_rows)?;
    let train_y: Vec<f32> = train_rows.iter().map(|r| model.scaler.apply(r.label) as f32).collect();
    let eval_x = prepare_all(&model, eval_rows)?;
    let eval_y: Vec<f64> = eval_rows.iter().map(|r| model.scaler.apply(r.label)).collect();

    let total = cfg.total_steps(train_rows.len());
    let warmup = cfg.warmup_steps(total);
    let mut adam = AdamState::new(&model.tensors());
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut rng = Pcg64Mcg::seed_from_u64(cfg.seed.wrapping_add(1));

    let initial = eval_loss(&model, &eval_x, &eval_y)?;
    let mut history = vec![EvalRecord { step: 0, epoch: 0, train_loss: None, eval_loss: initial, lr: 0.0 }];
    let mut best = (initial, 0usize, snapshot(&model));
    let mut bad = 0;
    let mut step = 0;
    let mut since_eval = (0.0, 0usize);
    let mut stop = StopReason::Completed;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(step, total, cfg);
            let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &train_x[i]).collect();
            let targets: Vec<f32> = chunk.iter().map(|&i| train_y[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, &targets)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { step, lr, batch: b });
            }
            adam_step(&mut model.tensors_mut(), &grads, &mut adam, lr)?;
            step += 1;
            since_eval.0 += loss;
            since_eval.1 += 1;
            let last = epoch + 1 == cfg.epochs && (b + 1) * cfg.batch_size >= order.len();
            if step % cfg.eval_every_n_steps == 0 || last {
                let e = eval_loss(&model, &eval_x, &eval_y)?;
                history.push(EvalRecord {
                    step,
                    epoch,
                    train_loss: Some(since_eval.0 / since_eval.1 as f64),
                    eval_loss: e,
                    lr,
                });
                since_eval = (0.0, 0);
                if e < best.0 {
                    best = (e, step, snapshot(&model));
                    bad = 0;
                } else {
                    bad += 1;
                    if bad >= cfg.early_stop_patience {
                        stop = StopReason::EarlyStopped;
                        break 'epochs;
                    }
                }
            }
        }
    }

    let (best_loss, best_step, weights) = best;
    restore(&mut model, weights);
    model.meta.seed = cfg.seed;
    model.meta.steps_completed += step;
    model.meta.best_eval_loss = Some(best_loss);
    for r in train_rows.iter().chain(eval_rows) {
        if !model.meta.language_pairs.contains(&r.lang_pair) {
            model.meta.language_pairs.push(r.lang_pair.clone());
        }
    }
    model.meta.language_pairs.sort();
    let report = TrainingReport {
        preset: None,
        config: *cfg,
        train_size: train_rows.len(),
        eval_size: eval_rows.len(),
        total_steps: total,
        warmup_steps: warmup,
        steps_completed: step,
        history,
        stop_reason: stop,
        best_step,
        best_eval_loss: best_loss,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn snapshot(model: &QEModel) -> Vec<Tensor> {
    model.tensors().into_iter().cloned().collect()
}

fn restore(model: &mut QEModel, weights: Vec<Tensor>) {
    for (dst, src) in model.tensors_mut().into_iter().zip(weights) {
        *dst = src;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// One model for English-source pairs, one for English-target pairs.
    Directional,
    /// One model for everything.
    All,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "directional" => Ok(Grouping::Directional),
            "all" => Ok(Grouping::All),
            other => Err(Error::Config(format!("unknown grouping `{other}` (expected directional or all)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupModel {
    /// `all`, `en-source` or `en-target`.
    pub name: String,
    pub lang_pairs: Vec<String>,
    pub model: QEModel,
    pub report: TrainingReport,
}

/// Trains one model per group on the concatenated data of its pairs.
///
/// `model` is the common starting point. Concatenation is in tag order; the
/// seeded train/eval shuffle mixes the pairs.
pub fn train_multipair(
    model: &QEModel,
    datasets: &BTreeMap<String, Vec<Record>>,
    grouping: Grouping,
    cfg: &TrainingConfig,
) -> Result<Vec<GroupModel>> {
    if datasets.is_empty() {
        return Err(Error::Empty("no datasets".into()));
    }
    let tags: Vec<&str> = datasets.keys().map(String::as_str).collect();
    let groups: Vec<(String, Vec<String>)> = match grouping {
        Grouping::All => vec![("all".into(), tags.iter().map(|t| t.to_string()).collect())],
        Grouping::Directional => {
            let g = group_directional(tags)?;
            [("en-source", g.en_source), ("en-target", g.en_target)]
                .into_iter()
                .filter(|(_, members)| !members.is_empty())
                .map(|(n, m)| (n.to_string(), m))
                .collect()
        }
    };
    groups
        .into_iter()
        .map(|(name, lang_pairs)| {
            let data: Vec<Record> = lang_pairs.iter().flat_map(|t| datasets[t].iter().cloned()).collect();
            let (model, report) = train(model, &data, cfg)?;
            Ok(GroupModel { name, lang_pairs, model, report })
        })
        .collect()
}

/// Continues training a base model on (possibly no) target-pair data.
pub fn train_transfer(base: &QEModel, data: &[Record], cfg: &TrainingConfig) -> Result<(QEModel, TrainingReport)> {
    if data.is_empty() {
        cfg.validate()?;
        return Ok((base.clone(), TrainingReport::zero_shot(cfg)));
    }
    train(base, data, cfg)
}
