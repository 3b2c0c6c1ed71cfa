//! The two QE architectures: a cross-encoder regressor (Mono) and a tied
//! bi-encoder scored by cosine similarity (Siamese).

use std::collections::HashMap;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::encoder::{pool_packed, BoundEncoder, EncoderConfig, EncoderWeights, Pooling, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{cosine_parts, Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mono,
    Siamese,
}

impl Architecture {
    /// CLS for the cross-encoder, MEAN for the bi-encoder.
    pub fn default_pooling(self) -> Pooling {
        match self {
            Architecture::Mono => Pooling::Cls,
            Architecture::Siamese => Pooling::Mean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mono => "mono",
            Architecture::Siamese => "siamese",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mono" => Ok(Architecture::Mono),
            "siamese" | "siam" => Ok(Architecture::Siamese),
            other => Err(Error::Config(format!("unknown architecture `{other}` (expected mono or siamese)"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerKind {
    Identity,
    Affine,
}

/// Maps raw labels to the training target space, `y ↦ a·y + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub kind: ScalerKind,
    pub a: f64,
    pub b: f64,
}

/// Siamese targets are fitted into this range, inside cosine's [-1, 1].
pub const SIAMESE_TARGET_RANGE: (f64, f64) = (-0.9, 0.9);

impl LabelScaler {
    pub fn identity() -> Self {
        LabelScaler { kind: ScalerKind::Identity, a: 1.0, b: 0.0 }
    }

    /// Affine map sending `[min(labels), max(labels)]` onto `[lo, hi]`.
    ///
    /// A constant label set has no range to stretch; it is shifted onto the
    /// midpoint of `[lo, hi]` with unit slope.
    pub fn fit(labels: &[f64], lo: f64, hi: f64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("cannot fit a label scaler on zero labels".into()));
        }
        if !(lo < hi) || labels.iter().any(|y| !y.is_finite()) {
            return Err(Error::Contract("label scaler needs finite labels and lo < hi".into()));
        }
        let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = if max > min {
            let a = (hi - lo) / (max - min);
            (a, lo - a * min)
        } else {
            (1.0, (lo + hi) / 2.0 - min)
        };
        Ok(LabelScaler { kind: ScalerKind::Affine, a, b })
    }

    pub fn for_architecture(arch: Architecture, labels: &[f64]) -> Result<Self> {
        match arch {
            Architecture::Mono => Ok(Self::identity()),
            Architecture::Siamese => Self::fit(labels, SIAMESE_TARGET_RANGE.0, SIAMESE_TARGET_RANGE.1),
        }
    }

    pub fn apply(&self, y: f64) -> f64 {
        match self.kind {
            ScalerKind::Identity => y,
            ScalerKind::Affine => self.a * y + self.b,
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        match self.kind {
            ScalerKind::Identity => z,
            ScalerKind::Affine => (z - self.b) / self.a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub pooling: Pooling,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// Config with the architecture's default pooling.
    pub fn new(architecture: Architecture, encoder: EncoderConfig) -> Self {
        ModelConfig { architecture, pooling: architecture.default_pooling(), encoder }
    }

    pub fn with_pooling(self, pooling: Pooling) -> Self {
        ModelConfig { pooling, ..self }
    }

    /// Names and shapes of every weight in serialization order: the encoder's,
    /// then (Mono only) the regression head.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.encoder.weight_shapes();
        if self.architecture == Architecture::Mono {
            out.push(("head.weight".into(), vec![self.encoder.d_model, 1]));
            out.push(("head.bias".into(), vec![1]));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Bookkeeping carried along in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps_completed: usize,
    pub best_eval_loss: Option<f64>,
    pub language_pairs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Real = f32> {
    /// `[d_model × 1]`
    pub weight: Tensor<T>,
    /// `[1]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QEModel<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// One weight set; the Siamese model applies it to both sentences.
    pub encoder: EncoderWeights<T>,
    /// Present exactly when the architecture is Mono.
    pub head: Option<Head<T>>,
    pub scaler: LabelScaler,
    pub meta: TrainingMeta,
}

/// Inputs per packed forward pass when predicting in bulk.
const PREDICT_CHUNK: usize = 32;

/// One sentence (or sentence pair) as id and segment sequences, trimmed to
/// its real length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

/// Model-ready form of a (source, target) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelInput {
    Pair(Sequence),
    Separate(Sequence, Sequence),
}

impl ModelInput {
    /// Total number of encoder positions the input occupies.
    pub fn positions(&self) -> usize {
        match self {
            ModelInput::Pair(s) => s.ids.len(),
            ModelInput::Separate(a, b) => a.ids.len() + b.ids.len(),
        }
    }
}

fn trimmed(e: crate::vocab::EncodedPair) -> Sequence {
    let n = e.real_len();
    Sequence { ids: e.ids[..n].to_vec(), segments: e.segment_mask[..n].to_vec() }
}

impl<T: Real> QEModel<T> {
    /// Fresh model: encoder weights and then the head drawn from one PCG-64
    /// stream seeded with `seed`; the head bias starts at 0.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} does not match vocabulary size {}",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let encoder = EncoderWeights::init_from(&config.encoder, &mut rng)?;
        let head = (config.architecture == Architecture::Mono).then(|| {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            Head {
                weight: Tensor::from_fn(&[config.encoder.d_model, 1], |_| T::from_f64(normal.sample(&mut rng))),
                bias: Tensor::zeros(&[1]),
            }
        });
        let meta = TrainingMeta { seed, ..TrainingMeta::default() };
        Ok(QEModel { config, vocab, encoder, head, scaler: LabelScaler::identity(), meta })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn pooling(&self) -> Pooling {
        self.config.pooling
    }

    /// Every weight tensor in [`ModelConfig::weight_shapes`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = self.encoder.tensors();
        if let Some(h) = &self.head {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        if let Some(h) = &mut self.head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    /// Rebuilds a model from tensors in serialization order, validating shapes.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        mut tensors: Vec<Tensor<T>>,
        scaler: LabelScaler,
        meta: TrainingMeta,
    ) -> Result<Self> {
        config.encoder.validate()?;
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::Format(format!(
                "encoder vocab_size {} but embedded vocabulary has {} tokens",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let shapes = config.weight_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!("expected {} tensors, got {}", shapes.len(), tensors.len())));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { name: name.clone(), expected: shape.clone(), found: t.shape().to_vec() });
            }
        }
        let head = if config.architecture == Architecture::Mono {
            let bias = tensors.pop().expect("checked");
            let weight = tensors.pop().expect("checked");
            Some(Head { weight, bias })
        } else {
            None
        };
        let encoder = EncoderWeights::from_tensors(&config.encoder, tensors)?;
        Ok(QEModel { config, vocab, encoder, head, scaler, meta })
    }

    pub fn cast<U: Real>(&self) -> QEModel<U> {
        QEModel {
            config: self.config,
            vocab: self.vocab.clone(),
            encoder: self.encoder.cast(),
            head: self.head.as_ref().map(|h| Head { weight: h.weight.cast(), bias: h.bias.cast() }),
            scaler: self.scaler,
            meta: self.meta.clone(),
        }
    }

    /// Tokenizes and lays out a pair for this model's architecture.
    pub fn prepare(&self, source: &str, target: &str) -> Result<ModelInput> {
        let max = self.config.encoder.max_seq_len;
        Ok(match self.config.architecture {
            Architecture::Mono => ModelInput::Pair(trimmed(self.vocab.encode_pair(source, target, max)?)),
            Architecture::Siamese => ModelInput::Separate(
                trimmed(self.vocab.encode_single(source, max)?),
                trimmed(self.vocab.encode_single(target, max)?),
            ),
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> BoundModel {
        let encoder = self.encoder.bind(g);
        let head = self.head.as_ref().map(|h| (g.param(&h.weight), g.param(&h.bias)));
        BoundModel { encoder, head }
    }

    /// Raw model outputs (in scaled label space) for a batch, shape `[batch]`.
    ///
    /// The whole batch goes through the encoder as one packed pass.
    pub fn forward(&self, g: &mut Graph<'_, T>, bound: &BoundModel, inputs: &[&ModelInput]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Empty("forward over an empty batch".into()));
        }
        let arch = self.config.architecture;
        let mut seqs: Vec<(&[u32], &[u8])> = Vec::with_capacity(2 * inputs.len());
        let mut second: Vec<(&[u32], &[u8])> = Vec::new();
        for input in inputs {
            match (arch, input) {
                (Architecture::Mono, ModelInput::Pair(s)) => seqs.push((&s.ids, &s.segments)),
                (Architecture::Siamese, ModelInput::Separate(a, b)) => {
                    seqs.push((&a.ids, &a.segments));
                    second.push((&b.ids, &b.segments));
                }
                _ => return Err(Error::Contract(format!("input layout does not match a {arch} model"))),
            }
        }
        seqs.extend(second);
        let lens: Vec<usize> = seqs.iter().map(|(ids, _)| ids.len()).collect();
        let h = bound.encoder.forward_packed(g, &self.config.encoder, &seqs, None)?;
        let pooled = pool_packed(g, h, &lens, self.config.pooling)?;
        let b = inputs.len();
        match arch {
            Architecture::Mono => {
                let (w, bias) = bound.head.ok_or_else(|| Error::Contract("Mono model without a head".into()))?;
                let y = g.matmul(pooled, w)?;
                let y = g.add_row(y, bias)?;
                g.reshape(y, &[b])
            }
            Architecture::Siamese => {
                let idx: Vec<usize> = (0..2 * b).collect();
                let u = g.gather_rows(pooled, &idx[..b])?;
                let v = g.gather_rows(pooled, &idx[b..])?;
                g.cosine_rows(u, v)
            }
        }
    }

    /// Raw output for one prepared input, before un-scaling.
    pub fn raw_score(&self, input: &ModelInput) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let y = self.forward(&mut g, &bound, &[input])?;
        Ok(g.data(y)[0].to_f64())
    }

    /// Raw outputs for many inputs, encoded in packed chunks.
    ///
    /// Siamese inputs are scored from sentence embeddings, each distinct
    /// sentence encoded once; the values equal those of [`Self::forward`].
    pub fn raw_scores(&self, inputs: &[&ModelInput]) -> Result<Vec<f64>> {
        if self.config.architecture == Architecture::Siamese {
            return self.siamese_scores(inputs);
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g);
            let y = self.forward(&mut g, &bound, chunk)?;
            out.extend(g.data(y).iter().map(|v| v.to_f64()));
        }
        Ok(out)
    }

    /// Pooled encoder output for each sequence, `[n × d_model]`.
    pub fn embed(&self, seqs: &[&Sequence]) -> Result<Tensor<T>> {
        let d = self.config.encoder.d_model;
        let mut data = Vec::with_capacity(seqs.len() * d);
        for chunk in seqs.chunks(PREDICT_CHUNK) {
            let mut g = Graph::new();
            let bound = self.encoder.bind(&mut g);
            let packed: Vec<(&[u32], &[u8])> = chunk.iter().map(|s| (&s.ids[..], &s.segments[..])).collect();
            let lens: Vec<usize> = chunk.iter().map(|s| s.ids.len()).collect();
            let h = bound.forward_packed(&mut g, &self.config.encoder, &packed, None)?;
            let pooled = pool_packed(&mut g, h, &lens, self.config.pooling)?;
            data.extend_from_slice(g.data(pooled));
        }
        Tensor::new(vec![seqs.len(), d], data)
    }

    fn siamese_scores(&self, inputs: &[&ModelInput]) -> Result<Vec<f64>> {
        let mut index: HashMap<&[u32], usize> = HashMap::new();
        let mut unique: Vec<&Sequence> = Vec::new();
        let mut pairs = Vec::with_capacity(inputs.len());
        for input in inputs {
            let ModelInput::Separate(a, b) = input else {
                return Err(Error::Contract("input layout does not match a siamese model".into()));
            };
            let mut slot = |s| sentence_slot(&mut index, &mut unique, s);
            pairs.push((slot(a), slot(b)));
        }
        let emb = self.embed(&unique)?;
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let (c, ..) = cosine_parts(emb.row(a), emb.row(b))
                    .ok_or_else(|| Error::Degenerate(format!("cosine of a zero vector in row {i}")))?;
                Ok(T::from_f64(c).to_f64())
            })
            .collect()
    }

    /// Quality score in the original label space.
    pub fn predict_input(&self, input: &ModelInput) -> Result<f64> {
        Ok(self.scaler.invert(self.raw_score(input)?))
    }

    pub fn predict(&self, source: &str, target: &str) -> Result<f64> {
        self.predict_input(&self.prepare(source, target)?)
    }

    pub fn predict_mono(&self, source: &str, target: &str) -> Result<f64> {
        if self.architecture() != Architecture::Mono {
            return Err(Error::Contract("predict_mono called on a Siamese model".into()));
        }
        self.predict(source, target)
    }

    pub fn predict_siamese(&self, source: &str, target: &str) -> Result<f64> {
        if self.architecture() != Architecture::Siamese {
            return Err(Error::Contract("predict_siamese called on a Mono model".into()));
        }
        self.predict(source, target)
    }

    /// Scores many pairs; same results as calling [`predict`](Self::predict) on each.
    pub fn predict_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
        let inputs = pairs
            .iter()
            .enumerate()
            .map(|(i, (s, t))| self.prepare(s, t).map_err(|e| Error::at_record(i, e)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        Ok(self.raw_scores(&refs)?.into_iter().map(|z| self.scaler.invert(z)).collect())
    }
}

fn sentence_slot<'a>(index: &mut HashMap<&'a [u32], usize>, unique: &mut Vec<&'a Sequence>, s: &'a Sequence) -> usize {
    *index.entry(&s.ids[..]).or_insert_with(|| {
        unique.push(s);
        unique.len() - 1
    })
}

/// Graph handles of a bound [`QEModel`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub head: Option<(Var, Var)>,
}

impl BoundModel {
    /// Handles in the same order as [`QEModel::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        if let Some((w, b)) = self.head {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Mean squared error between a `[batch]` prediction node and constant labels.
pub fn mse_loss<T: Real>(g: &mut Graph<'_, T>, predictions: Var, labels: &[T]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("mse over an empty batch".into()));
    }
    if g.shape(predictions) != [labels.len()] {
        return Err(Error::Shape { op: "mse_loss", lhs: g.shape(predictions).to_vec(), rhs: vec![labels.len()] });
    }
    let y = g.constant(Tensor::vector(labels.to_vec()));
    let d = g.sub(predictions, y)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::from_f64(1.0 / labels.len() as f64)))
}

/// [`mse_loss`] over plain slices.
pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("mse over an empty batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape { op: "mse", lhs: vec![predictions.len()], rhs: vec![labels.len()] });
    }
    let s: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(s / predictions.len() as f64)
}
