//! Miniature pre-norm transformer encoder and the three pooling strategies.
//!
//! Each layer computes `x += MHA(LN(x))` followed by `x += FF(LN(x))`, with a
//! final layer norm on top. Inputs are the sum of learned token, absolute
//! position and segment embeddings. There is no dropout.
//!
//! Training and prediction run the encoder over the real (non-padding)
//! prefix of an input only. Padding is masked out of attention, so the
//! outputs at real positions are the same as for the padded input;
//! [`encode`] runs the full padded length and is the reference for that.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::EncodedPair;

/// Hard upper bound on sequence length.
pub const MAX_POSITIONS: usize = 512;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, width 128, 4 heads, FF width 512, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig { vocab_size, d_model: 128, n_heads: 4, n_layers: 4, d_ff: 512, max_seq_len: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.d_ff, self.max_seq_len];
        if positive.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len > MAX_POSITIONS {
            return Err(Error::Config(format!("max_seq_len {} exceeds {MAX_POSITIONS}", self.max_seq_len)));
        }
        if self.max_seq_len < 5 {
            return Err(Error::Config("max_seq_len must be at least 5".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every weight tensor name with its required shape, in serialization order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("token_embeddings".to_string(), vec![self.vocab_size, d]),
            ("position_embeddings".to_string(), vec![self.max_seq_len, d]),
            ("segment_embeddings".to_string(), vec![2, d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ff1", vec![d, f]),
                ("ff2", vec![f, d]),
                ("norm1.gain", vec![d]),
                ("norm1.bias", vec![d]),
                ("norm2.gain", vec![d]),
                ("norm2.bias", vec![d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("final_norm.gain".to_string(), vec![d]));
        out.push(("final_norm.bias".to_string(), vec![d]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.weight_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ff1: Tensor<T>,
    pub ff2: Tensor<T>,
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Real = f32> {
    pub token_embeddings: Tensor<T>,
    pub position_embeddings: Tensor<T>,
    pub segment_embeddings: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: Tensor<T>,
    pub final_norm_bias: Tensor<T>,
}

impl<T: Real> EncoderWeights<T> {
    /// Draws projections and embeddings from `Normal(0, 0.02²)` using PCG-64
    /// (MCG variant) seeded with `seed`; norm gains start at 1, biases at 0.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::init_from(config, &mut Pcg64Mcg::seed_from_u64(seed))
    }

    /// [`init`](Self::init) drawing from an existing generator.
    pub fn init_from(config: &EncoderConfig, rng: &mut Pcg64Mcg) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = config
            .weight_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    Tensor::full(&shape, T::ONE)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(rng)))
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Assembles weights from tensors in [`EncoderConfig::weight_shapes`] order.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = config.weight_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!("expected {} encoder tensors, got {}", shapes.len(), tensors.len())));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { name: name.clone(), expected: shape.clone(), found: t.shape().to_vec() });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embeddings = next();
        let position_embeddings = next();
        let segment_embeddings = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ff1: next(),
                ff2: next(),
                norm1_gain: next(),
                norm1_bias: next(),
                norm2_gain: next(),
                norm2_bias: next(),
            })
            .collect();
        let final_norm_gain = next();
        let final_norm_bias = next();
        Ok(EncoderWeights { token_embeddings, position_embeddings, segment_embeddings, layers, final_norm_gain, final_norm_bias })
    }

    /// All tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.token_embeddings, &self.position_embeddings, &self.segment_embeddings];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.wk, &l.wv, &l.wo, &l.ff1, &l.ff2, &l.norm1_gain, &l.norm1_bias, &l.norm2_gain, &l.norm2_bias,
            ]);
        }
        out.push(&self.final_norm_gain);
        out.push(&self.final_norm_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embeddings, &mut self.position_embeddings, &mut self.segment_embeddings];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ff1,
                &mut l.ff2,
                &mut l.norm1_gain,
                &mut l.norm1_bias,
                &mut l.norm2_gain,
                &mut l.norm2_bias,
            ]);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        let cast_layer = |l: &LayerWeights<T>| LayerWeights {
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            ff1: l.ff1.cast(),
            ff2: l.ff2.cast(),
            norm1_gain: l.norm1_gain.cast(),
            norm1_bias: l.norm1_bias.cast(),
            norm2_gain: l.norm2_gain.cast(),
            norm2_bias: l.norm2_bias.cast(),
        };
        EncoderWeights {
            token_embeddings: self.token_embeddings.cast(),
            position_embeddings: self.position_embeddings.cast(),
            segment_embeddings: self.segment_embeddings.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
        }
    }

    /// Attaches every weight to `g` as a trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> BoundEncoder {
        BoundEncoder {
            token: g.param(&self.token_embeddings),
            position: g.param(&self.position_embeddings),
            segment: g.param(&self.segment_embeddings),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    wq: g.param(&l.wq),
                    wk: g.param(&l.wk),
                    wv: g.param(&l.wv),
                    wo: g.param(&l.wo),
                    ff1: g.param(&l.ff1),
                    ff2: g.param(&l.ff2),
                    norm1: (g.param(&l.norm1_gain), g.param(&l.norm1_bias)),
                    norm2: (g.param(&l.norm2_gain), g.param(&l.norm2_bias)),
                })
                .collect(),
            final_norm: (g.param(&self.final_norm_gain), g.param(&self.final_norm_bias)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ff1: Var,
    ff2: Var,
    norm1: (Var, Var),
    norm2: (Var, Var),
}

/// Graph handles for one [`EncoderWeights`], in the same order as
/// [`EncoderWeights::tensors`].
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    token: Var,
    position: Var,
    segment: Var,
    layers: Vec<BoundLayer>,
    final_norm: (Var, Var),
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token, self.position, self.segment];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.ff1, l.ff2, l.norm1.0, l.norm1.1, l.norm2.0, l.norm2.1]);
        }
        out.push(self.final_norm.0);
        out.push(self.final_norm.1);
        out
    }

    /// Runs the encoder over `ids` and returns the `[len × d_model]` output.
    ///
    /// `key_mask` marks real (1) and padding (0) positions; padding keys are
    /// never attended to. `None` means every position is real.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        config: &EncoderConfig,
        ids: &[u32],
        segments: &[u8],
        key_mask: Option<&[u8]>,
    ) -> Result<Var> {
        if segments.len() != ids.len() || key_mask.is_some_and(|m| m.len() != ids.len()) {
            return Err(Error::Contract("ids, segments and mask lengths differ".into()));
        }
        self.forward_packed(g, config, &[(ids, segments)], key_mask)
    }

    /// Runs the encoder over several `(ids, segments)` sequences at once.
    ///
    /// The output stacks the `[len_i × d_model]` results in input order.
    /// Sequences never attend across each other, so each block equals what
    /// [`forward`](Self::forward) computes for that sequence alone.
    pub fn forward_packed<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        config: &EncoderConfig,
        seqs: &[(&[u32], &[u8])],
        key_mask: Option<&[u8]>,
    ) -> Result<Var> {
        let lens: Vec<usize> = seqs.iter().map(|(ids, _)| ids.len()).collect();
        if seqs.is_empty() {
            return Err(Error::Empty("no sequences to encode".into()));
        }
        let mut tok_ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut seg_ids = Vec::new();
        for (ids, segments) in seqs {
            let n = ids.len();
            if n == 0 || n > config.max_seq_len {
                return Err(Error::Contract(format!("sequence length {n} outside 1..={}", config.max_seq_len)));
            }
            if segments.len() != n {
                return Err(Error::Contract("ids and segments lengths differ".into()));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= config.vocab_size) {
                return Err(Error::Contract(format!("token id {bad} is outside the vocabulary of {}", config.vocab_size)));
            }
            tok_ids.extend(ids.iter().map(|&i| i as usize));
            pos_ids.extend(0..n);
            seg_ids.extend(segments.iter().map(|&s| usize::from(s.min(1))));
        }
        let tok = g.gather_rows(self.token, &tok_ids)?;
        let pos = g.gather_rows(self.position, &pos_ids)?;
        let seg = g.gather_rows(self.segment, &seg_ids)?;
        let x = g.add(tok, pos)?;
        let mut x = g.add(x, seg)?;
        let key_mask = key_mask.filter(|m| m.contains(&0));

        for layer in &self.layers {
            let h = g.layer_norm(x, layer.norm1.0, layer.norm1.1, LAYER_NORM_EPS)?;
            let q = g.matmul(h, layer.wq)?;
            let k = g.matmul(h, layer.wk)?;
            let v = g.matmul(h, layer.wv)?;
            let ctx = g.attention(q, k, v, &lens, config.n_heads, key_mask)?;
            let attn = g.matmul(ctx, layer.wo)?;
            x = g.add(x, attn)?;
            let h = g.layer_norm(x, layer.norm2.0, layer.norm2.1, LAYER_NORM_EPS)?;
            let f = g.matmul(h, layer.ff1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, layer.ff2)?;
            x = g.add(x, f)?;
        }
        g.layer_norm(x, self.final_norm.0, self.final_norm.1, LAYER_NORM_EPS)
    }
}

/// Reduction of per-token outputs to one sentence vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pooling {
    Cls,
    Mean,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Cls, Pooling::Mean, Pooling::Max];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling strategy `{other}` (expected cls, mean or max)"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Pools `[len × d]` token vectors over the positions where `mask` is 1.
/// Returns a `[d]` vector.
pub fn pool<T: Real>(g: &mut Graph<'_, T>, token_vectors: Var, mask: &[u8], strategy: Pooling) -> Result<Var> {
    let shape = g.shape(token_vectors).to_vec();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(Error::Contract(format!("pool: mask of length {} for outputs of shape {shape:?}", mask.len())));
    }
    let d = shape[1];
    let real: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(i, _)| i).collect();
    if real.is_empty() {
        return Err(Error::Degenerate("pooling over an all-padding sequence".into()));
    }
    match strategy {
        Pooling::Cls => {
            let row = g.gather_rows(token_vectors, &[0])?;
            g.reshape(row, &[d])
        }
        Pooling::Mean | Pooling::Max => {
            let rows = if real.len() == shape[0] { token_vectors } else { g.gather_rows(token_vectors, &real)? };
            if strategy == Pooling::Mean {
                g.mean_along(rows, 0)
            } else {
                g.max_along(rows, 0)
            }
        }
    }
}

/// Pools each sequence of a packed `[R × d]` output (see
/// [`BoundEncoder::forward_packed`]); every row counts as real.
/// Returns `[lens.len() × d]`.
pub fn pool_packed<T: Real>(g: &mut Graph<'_, T>, token_vectors: Var, lens: &[usize], strategy: Pooling) -> Result<Var> {
    match strategy {
        Pooling::Cls => {
            let firsts: Vec<usize> = lens.iter().scan(0, |start, &n| { let s = *start; *start += n; Some(s) }).collect();
            g.gather_rows(token_vectors, &firsts)
        }
        Pooling::Mean => g.segment_mean(token_vectors, lens),
        Pooling::Max => g.segment_max(token_vectors, lens),
    }
}

/// Full-length forward pass over a padded input without gradient tracking.
///
/// Returns `(token_vectors [len × d_model], cls_vector [d_model])`.
pub fn encode<T: Real>(
    weights: &EncoderWeights<T>,
    config: &EncoderConfig,
    input: &EncodedPair,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g);
    let out = bound.forward(&mut g, config, &input.ids, &input.segment_mask, Some(&input.attention_mask))?;
    let tokens = g.value(out);
    let cls = Tensor::vector(tokens.row(0).to_vec());
    Ok((tokens, cls))
}

/// [`pool`] over plain tensors.
pub fn pool_tensor<T: Real>(token_vectors: &Tensor<T>, mask: &[u8], strategy: Pooling) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(token_vectors.clone());
    let p = pool(&mut g, v, mask, strategy)?;
    Ok(g.value(p))
}
