//! Invariants checked over generated inputs, 256 deterministic cases each.
//!
//! Each property is a plain function so that both the `properties` test
//! target and the acceptance harness can run it.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use qe_core::data::{
    generate_synthetic_corpus, parse_tsv, ter, to_tsv, zscore_standardize, ColumnMap, Dataset, LabelKind, LoadMode, Record,
    SyntheticSpec, SyntheticTask,
};
use qe_core::encoder::{encode, pool_tensor, EncoderConfig, Pooling};
use qe_core::metrics::{errors, evaluate, pearson};
use qe_core::model::{Architecture, LabelScaler, ModelConfig, ModelInput, QEModel};
use qe_core::trainer::{adam_step, batch_gradients, eval_loss, lr_at, split_train_eval, train, AdamState, StopReason, TrainingConfig};
use qe_core::vocab::{tokenize, Vocabulary, UNK};
use qe_core::{checkpoint, Graph, Tensor};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

use super::fixtures::{quick_config, synthetic, tiny_model};
use super::gradcheck::{check_model, check_primitives, micro_batch, micro_model};

pub const CASES: u32 = 256;

pub type Property = fn() -> Result<(), String>;

fn run<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config { cases, failure_persistence: None, max_shrink_iters: 64, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

fn arch_of(b: bool) -> Architecture {
    if b {
        Architecture::Siamese
    } else {
        Architecture::Mono
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- autodiff

pub fn primitive_gradients() -> Result<(), String> {
    run(CASES, any::<u64>(), |seed| ok(check_primitives(seed)).map(drop))
}

pub fn softmax_is_a_distribution() -> Result<(), String> {
    let strategy = (1usize..6, 1usize..9, 0usize..2, any::<u64>(), 0.1f64..60.0);
    run(CASES, strategy, |(rows, cols, axis, seed, spread)| {
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(ok(Tensor::matrix(rows, cols, data))?);
        let y = ok(g.softmax(x, axis))?;
        let p = g.value(y);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
        for o in 0..outer {
            let total: f64 = (0..inner).map(|i| if axis == 1 { p.get(&[o, i]) } else { p.get(&[i, o]) }).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "slice {o} sums to {total}");
        }
        Ok(())
    })
}

pub fn forward_is_deterministic() -> Result<(), String> {
    run(CASES, (any::<bool>(), any::<u64>()), |(siamese, seed)| {
        let model = micro_model(arch_of(siamese), seed);
        let (inputs, _) = micro_batch(&model, seed);
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let a = ok(model.raw_scores(&refs))?;
        let b = ok(model.raw_scores(&refs))?;
        prop_assert_eq!(bits(&a), bits(&b));
        let single: Vec<f64> = ok(inputs.iter().map(|i| model.raw_score(i)).collect::<qe_core::Result<_>>())?;
        prop_assert_eq!(bits(&a), bits(&single));
        Ok(())
    })
}

pub fn cosine_is_bounded() -> Result<(), String> {
    let strategy = (1usize..40, any::<u64>(), -8i32..8, prop_oneof![Just(0.0), 1e-12f64..1e-3, 0.1f64..2.0], any::<bool>());
    run(CASES, strategy, |(n, seed, exponent, jitter, flip)| {
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let scale = 10f64.powi(exponent);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let sign = if flip { -1.0 } else { 1.0 };
        let y: Vec<f64> = x.iter().map(|v| sign * 3.0 * v + jitter * scale * rng.random_range(-1.0..1.0)).collect();
        prop_assume!(x.iter().any(|&v| v != 0.0) && y.iter().any(|&v| v != 0.0));
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(x.clone()));
        let b = g.constant(Tensor::vector(y.clone()));
        let c = ok(g.cosine(a, b))?;
        let c = g.data(c)[0];
        prop_assert!((-1.0..=1.0).contains(&c), "cosine {c}");
        let a = g.constant(ok(Tensor::matrix(1, n, x))?);
        let b = g.constant(ok(Tensor::matrix(1, n, y))?);
        let r = ok(g.cosine_rows(a, b))?;
        prop_assert!((-1.0..=1.0).contains(&g.data(r)[0]));
        Ok(())
    })
}

// ---------------------------------------------------------------- tokenizer

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-zA-Z]{1,5}", 0..30)
}

fn vocab_from(words: &[String]) -> Vocabulary {
    Vocabulary::build(std::iter::once(words.join(" ").as_str()), 1).expect("vocab")
}

fn in_vocab<'v>(vocab: &'v Vocabulary, text: &str) -> Vec<&'v str> {
    tokenize(text).map(|t| vocab.id(&t)).filter(|&i| i != UNK).filter_map(|i| vocab.token(i)).collect()
}

pub fn decode_inverts_encode() -> Result<(), String> {
    run(CASES, (words(), words(), words()), |(known, src, tgt)| {
        let vocab = vocab_from(&known);
        let (s, t) = (src.join(" "), tgt.join(" "));
        let single = ok(vocab.encode_single(&s, src.len() + 5))?;
        prop_assert_eq!(vocab.decode(&single.ids), in_vocab(&vocab, &s));
        let pair = ok(vocab.encode_pair(&s, &t, src.len() + tgt.len() + 5))?;
        let mut expected = in_vocab(&vocab, &s);
        expected.extend(in_vocab(&vocab, &t));
        prop_assert_eq!(vocab.decode(&pair.ids), expected);
        Ok(())
    })
}

pub fn encode_is_pure() -> Result<(), String> {
    run(CASES, (words(), words(), words(), 5usize..40), |(known, src, tgt, max)| {
        let vocab = vocab_from(&known);
        let copy = vocab.clone();
        let (s, t) = (src.join(" "), tgt.join(" "));
        prop_assert_eq!(ok(vocab.encode_pair(&s, &t, max))?, ok(vocab.encode_pair(&s, &t, max))?);
        prop_assert_eq!(ok(vocab.encode_pair(&s, &t, max))?, ok(copy.encode_pair(&s, &t, max))?);
        prop_assert_eq!(ok(vocab.encode_single(&s, max))?, ok(copy.encode_single(&s, max))?);
        prop_assert_eq!(vocab, copy);
        Ok(())
    })
}

pub fn encodings_fit_max_len() -> Result<(), String> {
    let strategy = (prop::collection::vec("[a-z]{1,3}", 0..300), prop::collection::vec("[a-z]{1,3}", 0..300), 5usize..64);
    run(CASES, strategy, |(src, tgt, max)| {
        let vocab = vocab_from(&[src.clone(), tgt.clone()].concat());
        let e = ok(vocab.encode_pair(&src.join(" "), &tgt.join(" "), max))?;
        prop_assert_eq!(e.ids.len(), max);
        prop_assert_eq!(e.segment_mask.len(), max);
        prop_assert_eq!(e.attention_mask.len(), max);
        prop_assert_eq!(e.real_len(), max.min(src.len() + tgt.len() + 3));
        let single = ok(vocab.encode_single(&src.join(" "), max))?;
        prop_assert_eq!(single.ids.len(), max);
        prop_assert_eq!(single.real_len(), max.min(src.len() + 2));
        Ok(())
    })
}

// ---------------------------------------------------------------- encoder

fn micro_sentence(rng: &mut Pcg64Mcg, n: usize) -> String {
    const W: [&str; 13] = ["a", "b", "c", "d", "e", "f", "g", "u", "v", "w", "x", "y", "z"];
    (0..n).map(|_| W[rng.random_range(0..W.len())]).collect::<Vec<_>>().join(" ")
}

pub fn padding_content_is_ignored() -> Result<(), String> {
    run(CASES, (any::<u64>(), 1usize..4, 1usize..4), |(seed, ns, nt)| {
        let model = micro_model(Architecture::Mono, seed);
        let cfg = &model.config.encoder;
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let (s, t) = (micro_sentence(&mut rng, ns), micro_sentence(&mut rng, nt));
        let clean = ok(model.vocab.encode_pair(&s, &t, cfg.max_seq_len))?;
        let real = clean.real_len();
        prop_assume!(real < cfg.max_seq_len);
        let mut dirty = clean.clone();
        for i in real..cfg.max_seq_len {
            dirty.ids[i] = rng.random_range(0..cfg.vocab_size as u32);
            dirty.segment_mask[i] = rng.random_range(0..2);
        }
        let (a, _) = ok(encode(&model.encoder, cfg, &clean))?;
        let (b, _) = ok(encode(&model.encoder, cfg, &dirty))?;
        prop_assert_eq!(bits(&a.data()[..real * cfg.d_model]), bits(&b.data()[..real * cfg.d_model]));
        for p in Pooling::ALL {
            let pa = ok(pool_tensor(&a, &clean.attention_mask, p))?;
            let pb = ok(pool_tensor(&b, &dirty.attention_mask, p))?;
            prop_assert_eq!(bits(pa.data()), bits(pb.data()));
        }
        Ok(())
    })
}

pub fn every_weight_gets_gradient() -> Result<(), String> {
    let pooling = prop_oneof![Just(Pooling::Cls), Just(Pooling::Mean), Just(Pooling::Max)];
    run(CASES, (any::<bool>(), pooling, any::<u64>()), |(siamese, pooling, seed)| {
        let vocab = super::gradcheck::micro_vocab();
        let enc = EncoderConfig { vocab_size: vocab.len(), d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, max_seq_len: 12 };
        let cfg = ModelConfig::new(arch_of(siamese), enc).with_pooling(pooling);
        let model = ok(QEModel::<f32>::new(cfg, vocab, seed))?;
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let inputs: Vec<ModelInput> = ok((0..4)
            .map(|_| {
                let (s, t) = (micro_sentence(&mut rng, 3), micro_sentence(&mut rng, 3));
                model.prepare(&s, &t)
            })
            .collect::<qe_core::Result<_>>())?;
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let targets: Vec<f32> = (0..4).map(|_| rng.random_range(-0.8..0.8)).collect();
        let (_, grads) = ok(batch_gradients(&model, &refs, &targets))?;
        for ((name, _), g) in model.config.weight_shapes().iter().zip(&grads) {
            prop_assert!(g.iter().any(|&v| v != 0.0), "{} has an all-zero gradient", name);
        }
        Ok(())
    })
}

pub fn encoder_is_order_sensitive() -> Result<(), String> {
    run(CASES, (any::<u64>(), 2usize..6), |(seed, n)| {
        let model = micro_model(Architecture::Mono, seed);
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let toks: Vec<String> = micro_sentence(&mut rng, n).split(' ').map(String::from).collect();
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        prop_assume!(toks[i] != toks[j]);
        let mut swapped = toks.clone();
        swapped.swap(i, j);
        let cfg = &model.config.encoder;
        let a = ok(model.vocab.encode_single(&toks.join(" "), cfg.max_seq_len))?;
        let b = ok(model.vocab.encode_single(&swapped.join(" "), cfg.max_seq_len))?;
        let (_, ca) = ok(encode(&model.encoder, cfg, &a))?;
        let (_, cb) = ok(encode(&model.encoder, cfg, &b))?;
        prop_assert_ne!(bits(ca.data()), bits(cb.data()));
        Ok(())
    })
}

pub fn sampled_model_gradients() -> Result<(), String> {
    run(CASES, (any::<bool>(), any::<u64>()), |(siamese, seed)| ok(check_model(arch_of(siamese), seed, Some(2))).map(drop))
}

// ---------------------------------------------------------------- models

pub fn default_pooling_per_architecture() -> Result<(), String> {
    run(CASES, (any::<bool>(), 1usize..4, 1usize..3, any::<u64>()), |(siamese, heads, layers, seed)| {
        let vocab = super::gradcheck::micro_vocab();
        let enc = EncoderConfig { vocab_size: vocab.len(), d_model: 4 * heads, n_heads: heads, n_layers: layers, d_ff: 8, max_seq_len: 8 };
        let arch = arch_of(siamese);
        let model = ok(QEModel::<f32>::new(ModelConfig::new(arch, enc), vocab, seed))?;
        let expected = if siamese { Pooling::Mean } else { Pooling::Cls };
        prop_assert_eq!(model.pooling(), expected);
        let back = ok(checkpoint::from_bytes(&ok(checkpoint::to_bytes(&model))?))?;
        prop_assert_eq!(back.pooling(), expected);
        Ok(())
    })
}

pub fn siamese_weights_are_shared() -> Result<(), String> {
    run(CASES, any::<u64>(), |seed| {
        let data = synthetic(12, seed, "ro-en");
        let mut model = tiny_model(Architecture::Siamese, &data.records, seed);
        prop_assert_eq!(model.tensors().len(), model.config.encoder.weight_shapes().len());
        prop_assert!(model.head.is_none());
        let inputs: Vec<ModelInput> =
            ok(data.records.iter().map(|r| model.prepare(&r.source, &r.target)).collect::<qe_core::Result<_>>())?;
        let check = |model: &QEModel| -> Result<(), TestCaseError> {
            for r in &data.records[..4] {
                let same = ok(model.raw_score(&ok(model.prepare(&r.target, &r.target))?))?;
                prop_assert!((same - 1.0).abs() <= 1e-12, "score(s, s) = {same}");
                let ab = ok(model.raw_score(&ok(model.prepare(&r.source, &r.target))?))?;
                let ba = ok(model.raw_score(&ok(model.prepare(&r.target, &r.source))?))?;
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
            }
            Ok(())
        };
        check(&model)?;
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let targets: Vec<f32> = data.records.iter().map(|r| (0.9 - 1.8 * r.label.min(1.0)) as f32).collect();
        let (_, grads) = ok(batch_gradients(&model, &refs, &targets))?;
        let mut adam = AdamState::new(&model.tensors());
        ok(adam_step(&mut model.tensors_mut(), &grads, &mut adam, 1e-2))?;
        check(&model)
    })
}

pub fn prediction_is_pure() -> Result<(), String> {
    run(CASES, (any::<bool>(), any::<u64>()), |(siamese, seed)| {
        let data = synthetic(10, seed, "en-de");
        let model = tiny_model(arch_of(siamese), &data.records, seed);
        let copy = model.clone();
        let pairs: Vec<(&str, &str)> = data.records.iter().map(|r| (r.source.as_str(), r.target.as_str())).collect();
        let batch = ok(model.predict_batch(&pairs))?;
        let single: Vec<f64> = ok(pairs.iter().map(|(s, t)| model.predict(s, t)).collect::<qe_core::Result<_>>())?;
        prop_assert_eq!(bits(&batch), bits(&single));
        prop_assert_eq!(bits(&batch), bits(&ok(model.predict_batch(&pairs))?));
        prop_assert!(model.tensors() == copy.tensors() && model.scaler == copy.scaler);
        Ok(())
    })
}

pub fn label_scaler_round_trips() -> Result<(), String> {
    run(CASES, (any::<u64>(), -3i32..4, -100.0f64..100.0), |(seed, exponent, offset)| {
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let scale = 10f64.powi(exponent);
        let labels: Vec<f64> = (0..1000).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
        let s = ok(LabelScaler::fit(&labels, -0.9, 0.9))?;
        for &y in &labels {
            let z = s.apply(y);
            prop_assert!((-0.9 - 1e-9..=0.9 + 1e-9).contains(&z), "{y} -> {z}");
            let back = s.invert(z);
            prop_assert!((back - y).abs() <= 1e-9 * y.abs().max(1.0), "{y} -> {z} -> {back}");
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- trainer

pub fn training_is_deterministic() -> Result<(), String> {
    run(CASES, (any::<bool>(), any::<u64>()), |(siamese, seed)| {
        let data = synthetic(16, seed, "ro-en");
        let model = tiny_model(arch_of(siamese), &data.records, seed);
        let cfg = TrainingConfig { epochs: 1, ..quick_config(seed) };
        let (a, ra) = ok(train(&model, &data.records, &cfg))?;
        let (b, rb) = ok(train(&model, &data.records, &cfg))?;
        prop_assert_eq!(ok(checkpoint::to_bytes(&a))?, ok(checkpoint::to_bytes(&b))?);
        prop_assert_eq!(ok(ra.summary_json())?, ok(rb.summary_json())?);
        prop_assert_eq!(ok(ra.to_jsonl())?, ok(rb.to_jsonl())?);
        Ok(())
    })
}

pub fn lr_schedule_is_warmup_then_constant() -> Result<(), String> {
    run(CASES, (1e-6f64..1e-1, 0.0f64..0.9, 1usize..3000), |(lr, warmup_fraction, total)| {
        let cfg = TrainingConfig { learning_rate: lr, warmup_fraction, ..TrainingConfig::desk() };
        let w = cfg.warmup_steps(total);
        prop_assert_eq!(lr_at(0, total, &cfg), if w == 0 { lr } else { 0.0 });
        let mut max = 0.0f64;
        for s in 0..total {
            let (a, b) = (lr_at(s, total, &cfg), lr_at(s + 1, total, &cfg));
            max = max.max(a);
            prop_assert!(a <= lr);
            if s + 1 < w {
                prop_assert!((b - a - lr / w as f64).abs() <= 1e-12 * lr, "non-linear warmup at {s}");
            } else if s >= w {
                prop_assert_eq!(a, lr);
            }
            prop_assert!(b >= a);
        }
        prop_assert_eq!(max, lr);
        Ok(())
    })
}

pub fn early_stopping_keeps_best_snapshot() -> Result<(), String> {
    run(CASES, (any::<bool>(), any::<u64>(), 1usize..4), |(siamese, seed, patience)| {
        let data = synthetic(20, seed, "en-zh");
        let model = tiny_model(arch_of(siamese), &data.records, seed);
        let cfg = TrainingConfig { epochs: 4, eval_every_n_steps: 1, early_stop_patience: patience, learning_rate: 5e-2, ..quick_config(seed) };
        let (trained, report) = ok(train(&model, &data.records, &cfg))?;
        let min = report.history.iter().map(|h| h.eval_loss).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(report.best_eval_loss, min);
        let first_best = report.history.iter().find(|h| h.eval_loss == min).map(|h| h.step);
        prop_assert_eq!(Some(report.best_step), first_best);
        let (_, eval_rows) = ok(split_train_eval(&data.records, &cfg))?;
        let inputs: Vec<ModelInput> =
            ok(eval_rows.iter().map(|r| trained.prepare(&r.source, &r.target)).collect::<qe_core::Result<_>>())?;
        let targets: Vec<f64> = eval_rows.iter().map(|r| trained.scaler.apply(r.label)).collect();
        prop_assert_eq!(ok(eval_loss(&trained, &inputs, &targets))?.to_bits(), min.to_bits());
        if report.stop_reason == StopReason::EarlyStopped {
            let after = report.history.iter().filter(|h| h.step > report.best_step).count();
            prop_assert_eq!(after, patience);
        }
        Ok(())
    })
}

/// Textbook Adam on a list of scalars.
fn reference_adam(theta: &mut [f64], grad: impl Fn(&[f64]) -> Vec<f64>, lr: f64, steps: usize) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    for t in 1..=steps {
        let g = grad(theta);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1.powi(t as i32));
            let v_hat = v[i] / (1.0 - b2.powi(t as i32));
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

pub fn adam_matches_reference() -> Result<(), String> {
    let strategy = (0.1f64..10.0, 0.1f64..10.0, -5.0f64..5.0, -5.0f64..5.0, 1e-4f64..1e-1, 1usize..60);
    run(CASES, strategy, |(a, b, x0, y0, lr, steps)| {
        // f(x, y) = a·x² + b·y²
        let grad = |p: &[f64]| vec![2.0 * a * p[0], 2.0 * b * p[1]];
        let mut expected = [x0, y0];
        reference_adam(&mut expected, grad, lr, steps);
        let mut params = [Tensor::<f64>::vector(vec![x0]), Tensor::<f64>::vector(vec![y0])];
        let mut state = AdamState::new(&params.iter().collect::<Vec<_>>());
        for _ in 0..steps {
            let g = grad(&[params[0].data()[0], params[1].data()[0]]);
            let grads = vec![vec![g[0]], vec![g[1]]];
            ok(adam_step(&mut params.iter_mut().collect::<Vec<_>>(), &grads, &mut state, lr))?;
        }
        for (p, e) in params.iter().zip(expected) {
            prop_assert!((p.data()[0] - e).abs() <= 1e-10, "{} vs {}", p.data()[0], e);
        }
        Ok(())
    })
}

pub fn split_is_a_partition() -> Result<(), String> {
    run(CASES, (5usize..500, any::<u64>(), 0.01f64..0.5), |(n, seed, frac)| {
        let cfg = TrainingConfig { eval_holdout_fraction: frac, ..TrainingConfig::desk() }.with_seed(seed);
        let rows: Vec<usize> = (0..n).collect();
        let (train_rows, eval_rows) = ok(split_train_eval(&rows, &cfg))?;
        prop_assert_eq!(eval_rows.len(), ((n as f64 * frac + 1e-9).floor() as usize).max(1));
        let mut all = [train_rows.clone(), eval_rows.clone()].concat();
        all.sort_unstable();
        prop_assert_eq!(all, rows.clone());
        prop_assert_eq!((train_rows, eval_rows), ok(split_train_eval(&rows, &cfg))?);
        Ok(())
    })
}

// ---------------------------------------------------------------- data

pub fn zscore_round_trips() -> Result<(), String> {
    run(CASES, prop::collection::vec(-1e4f64..1e4, 2..200), |labels| {
        prop_assume!(labels.iter().any(|&y| y != labels[0]));
        let (z, mean, std) = ok(zscore_standardize(&labels))?;
        for (zi, y) in z.iter().zip(&labels) {
            prop_assert!((zi * std + mean - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
        let mz = z.iter().sum::<f64>() / z.len() as f64;
        prop_assert!(mz.abs() < 1e-9);
        Ok(())
    })
}

pub fn ter_identity_and_nonnegative() -> Result<(), String> {
    let seq = || prop::collection::vec(0u8..6, 0..20);
    run(CASES, (seq(), seq()), |(h, r)| {
        prop_assume!(!r.is_empty());
        prop_assert_eq!(ok(ter(&r, &r))?, 0.0);
        let t = ok(ter(&h, &r))?;
        prop_assert!(t >= 0.0);
        prop_assert!(t <= h.len().max(r.len()) as f64 / r.len() as f64);
        Ok(())
    })
}

fn spec(seed: u64, n: usize, lo: f64, hi: f64, task: SyntheticTask) -> SyntheticSpec {
    SyntheticSpec { n_records: n, seed, vocab_size: 24, noise_rate_range: (lo, hi), task, ..SyntheticSpec::default() }
}

pub fn synthetic_is_deterministic() -> Result<(), String> {
    run(CASES, (any::<u64>(), 1usize..60, any::<bool>()), |(seed, n, da)| {
        let task = if da { SyntheticTask::Da } else { SyntheticTask::Hter };
        let s = spec(seed, n, 0.0, 0.6, task);
        let a = ok(generate_synthetic_corpus(&s, "et-en"))?;
        prop_assert_eq!(a.len(), n);
        prop_assert_eq!(&a, &ok(generate_synthetic_corpus(&s, "et-en"))?);
        Ok(())
    })
}

fn mean_label(d: &Dataset) -> f64 {
    d.labels().iter().sum::<f64>() / d.len() as f64
}

pub fn synthetic_noise_is_monotone() -> Result<(), String> {
    run(CASES, any::<u64>(), |base| {
        for k in 0..3u64 {
            let seed = base.wrapping_add(k);
            let mut prev_hter = -1.0;
            let mut prev_da = f64::INFINITY;
            for rate in [0.1, 0.3, 0.5] {
                let hter = mean_label(&ok(generate_synthetic_corpus(&spec(seed, 300, rate, rate, SyntheticTask::Hter), "ne-en"))?);
                let da = mean_label(&ok(generate_synthetic_corpus(&spec(seed, 300, rate, rate, SyntheticTask::Da), "ne-en"))?);
                prop_assert!(hter > prev_hter, "seed {seed}: HTER {hter} at rate {rate} after {prev_hter}");
                prop_assert!(da < prev_da);
                prev_hter = hter;
                prev_da = da;
            }
        }
        Ok(())
    })
}

pub fn tsv_round_trips() -> Result<(), String> {
    let text = || prop::collection::vec("[a-zA-Zà-ÿ0-9.,'!?-]{1,8}", 1..8).prop_map(|w| w.join(" "));
    let record = (text(), text(), prop::num::f64::NORMAL | prop::num::f64::ZERO, prop_oneof![Just("ro-en"), Just("en-de"), Just("si-en")]);
    run(CASES, prop::collection::vec(record, 1..20), |rows| {
        let records: Vec<Record> = rows.into_iter().map(|(s, t, y, p)| Record::new(s, t, y, p)).collect();
        let data = Dataset::new(records, LabelKind::DaRaw, "generated");
        let text = ok(to_tsv(&data))?;
        let loaded = ok(parse_tsv(text.as_bytes(), Path::new("mem.tsv"), &ColumnMap::default(), "xx-yy", LabelKind::DaRaw, LoadMode::Strict))?;
        prop_assert_eq!(loaded.dataset.records.len(), data.records.len());
        for (a, b) in loaded.dataset.records.iter().zip(&data.records) {
            prop_assert_eq!((&a.source, &a.target, &a.lang_pair), (&b.source, &b.target, &b.lang_pair));
            prop_assert_eq!(a.label.to_bits(), b.label.to_bits());
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- metrics

fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..50).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n)))
}

pub fn pearson_affine_invariance() -> Result<(), String> {
    let slope = prop_oneof![0.01f64..100.0, -100.0f64..-0.01];
    run(CASES, (series(), slope, -100.0f64..100.0), |((x, y), a, b)| {
        let r = ok(pearson(&x, &y))?;
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r2 = ok(pearson(&ax, &y))?;
        prop_assert!((r2 - a.signum() * r).abs() <= 1e-10, "{r2} vs {r}");
        Ok(())
    })
}

pub fn pearson_is_symmetric() -> Result<(), String> {
    run(CASES, series(), |(x, y)| {
        prop_assert_eq!(ok(pearson(&x, &y))?.to_bits(), ok(pearson(&y, &x))?.to_bits());
        Ok(())
    })
}

pub fn mae_at_most_rmse() -> Result<(), String> {
    run(CASES, series(), |(x, y)| {
        let (mse, mae, rmse) = ok(errors(&x, &y))?;
        prop_assert!(mae <= rmse * (1.0 + 1e-15));
        prop_assert!(mse >= 0.0 && (rmse * rmse - mse).abs() <= 1e-12 * mse.max(1.0));
        Ok(())
    })
}

pub fn evaluate_is_deterministic() -> Result<(), String> {
    run(CASES, (any::<bool>(), any::<u64>()), |(siamese, seed)| {
        let data = synthetic(12, seed, "ro-en");
        let model = tiny_model(arch_of(siamese), &data.records, seed);
        let a = ok(evaluate(&model, &data))?;
        let b = ok(evaluate(&model, &data))?;
        prop_assert_eq!(&a.predictions, &b.predictions);
        prop_assert_eq!(a.overall.pearson_r.to_bits(), b.overall.pearson_r.to_bits());
        prop_assert_eq!(a, b);
        Ok(())
    })
}

// ---------------------------------------------------------------- cli

pub fn qe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qe")).args(args).output().expect("spawn qe")
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).expect("read dir") {
        let e = e.expect("dir entry");
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("read"));
    }
    out
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("run.json")).expect("run.json")).expect("json")
}

const TINY: [&str; 8] = ["--d-model", "8", "--n-heads", "2", "--n-layers", "1", "--d-ff", "16"];

pub fn cli_artifacts_are_reproducible() -> Result<(), String> {
    run(CASES, (any::<u32>(), any::<bool>()), |(seed, siamese)| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let root = tmp.path();
        let seed = seed.to_string();
        let data = root.join("data");
        let o = qe(&["--seed", &seed, "--out-dir", data.to_str().unwrap(), "synth", "--n-records", "30", "--vocab-size", "20", "--test-size", "10"]);
        prop_assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let train = data.join("ro-en.train.tsv");
        let test = data.join("ro-en.test.tsv");
        let arch = if siamese { "siamese" } else { "mono" };
        let mut outs: Vec<PathBuf> = Vec::new();
        for k in 0..2 {
            let out = root.join(format!("run{k}"));
            let mut args = vec!["--seed", &seed, "--out-dir", out.to_str().unwrap(), "train", "--train", train.to_str().unwrap()];
            args.extend(["--test", test.to_str().unwrap(), "--arch", arch, "--epochs", "1", "--max-seq-len", "16"]);
            args.extend(TINY);
            let o = qe(&args);
            prop_assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            outs.push(out);
        }
        let (mut a, mut b) = (files(&outs[0]), files(&outs[1]));
        for f in [&mut a, &mut b] {
            prop_assert!(f.remove("timing.json").is_some());
            f.remove("run.json");
        }
        prop_assert_eq!(a.keys().collect::<Vec<_>>(), vec!["history.jsonl", "model.qef", "report.json", "results.tsv", "vocab.json"]);
        prop_assert!(a == b, "artifacts differ");
        let (mut ra, mut rb) = (run_json(&outs[0]), run_json(&outs[1]));
        ra.as_object_mut().unwrap().remove("out_dir");
        rb.as_object_mut().unwrap().remove("out_dir");
        prop_assert_eq!(ra, rb);
        Ok(())
    })
}

pub fn cli_records_run_before_work() -> Result<(), String> {
    let command = prop_oneof![Just("train"), Just("predict"), Just("evaluate"), Just("transfer"), Just("build-vocab")];
    run(CASES, (command, any::<u16>()), |(command, seed)| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let out = tmp.path().join("out");
        let missing = tmp.path().join("missing.tsv");
        let m = missing.to_str().unwrap();
        let seed = seed.to_string();
        let mut args = vec!["--seed", &seed, "--out-dir", out.to_str().unwrap(), command];
        args.extend(match command {
            "train" => vec!["--train", m],
            "predict" => vec!["--model", m, "--input", m],
            "evaluate" => vec!["--predictions", m],
            "transfer" => vec!["--base", m, "--train", m],
            _ => vec!["--input", m],
        });
        let o = qe(&args);
        prop_assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
        let record = run_json(&out);
        prop_assert_eq!(record["command"].as_str(), Some(command));
        prop_assert_eq!(record["seed"].as_u64(), seed.parse::<u64>().ok());
        prop_assert!(!out.join("timing.json").exists());
        Ok(())
    })
}

pub fn cli_exit_codes() -> Result<(), String> {
    run(CASES, (0usize..5, 2usize..20), |(case, n)| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let dir = tmp.path();
        let out = dir.join("out");
        let o = out.to_str().unwrap();
        let preds = dir.join("preds.tsv");
        let config = dir.join("run.conf");
        let (args, expected): (Vec<String>, i32) = match case {
            0 => {
                let n = n.to_string();
                (["--out-dir", o, "synth", "--n-records", &n, "--vocab-size", "20"].map(String::from).to_vec(), 0)
            }
            1 => {
                // Constant predictions have no correlation.
                let mut t = String::from("src\ttgt\tscore\tprediction\n");
                for i in 0..n {
                    t.push_str(&format!("a\tb\t{i}\t0.5\n"));
                }
                std::fs::write(&preds, t).unwrap();
                (["--out-dir", o, "evaluate", "--predictions", preds.to_str().unwrap()].map(String::from).to_vec(), 3)
            }
            2 => {
                std::fs::write(&config, format!("epochs = {n}\nno_such_key = 1\n")).unwrap();
                let args = ["--out-dir", o, "--config", config.to_str().unwrap(), "train", "--train", "x.tsv"];
                (args.map(String::from).to_vec(), 1)
            }
            3 => (["--out-dir", o, "train", "--bogus-flag"].map(String::from).to_vec(), 1),
            _ => (["--out-dir", o, "train", "--train", "x.tsv", "--lr=-1"].map(String::from).to_vec(), 1),
        };
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let result = qe(&refs);
        prop_assert_eq!(result.status.code(), Some(expected), "case {}: {}", case, String::from_utf8_lossy(&result.stderr));
        Ok(())
    })
}

pub const ALL: &[(&str, Property)] = &[
    ("primitive_gradients", primitive_gradients),
    ("softmax_is_a_distribution", softmax_is_a_distribution),
    ("forward_is_deterministic", forward_is_deterministic),
    ("cosine_is_bounded", cosine_is_bounded),
    ("decode_inverts_encode", decode_inverts_encode),
    ("encode_is_pure", encode_is_pure),
    ("encodings_fit_max_len", encodings_fit_max_len),
    ("padding_content_is_ignored", padding_content_is_ignored),
    ("every_weight_gets_gradient", every_weight_gets_gradient),
    ("encoder_is_order_sensitive", encoder_is_order_sensitive),
    ("sampled_model_gradients", sampled_model_gradients),
    ("default_pooling_per_architecture", default_pooling_per_architecture),
    ("siamese_weights_are_shared", siamese_weights_are_shared),
    ("prediction_is_pure", prediction_is_pure),
    ("label_scaler_round_trips", label_scaler_round_trips),
    ("training_is_deterministic", training_is_deterministic),
    ("lr_schedule_is_warmup_then_constant", lr_schedule_is_warmup_then_constant),
    ("early_stopping_keeps_best_snapshot", early_stopping_keeps_best_snapshot),
    ("adam_matches_reference", adam_matches_reference),
    ("split_is_a_partition", split_is_a_partition),
    ("zscore_round_trips", zscore_round_trips),
    ("ter_identity_and_nonnegative", ter_identity_and_nonnegative),
    ("synthetic_is_deterministic", synthetic_is_deterministic),
    ("synthetic_noise_is_monotone", synthetic_noise_is_monotone),
    ("tsv_round_trips", tsv_round_trips),
    ("pearson_affine_invariance", pearson_affine_invariance),
    ("pearson_is_symmetric", pearson_is_symmetric),
    ("mae_at_most_rmse", mae_at_most_rmse),
    ("evaluate_is_deterministic", evaluate_is_deterministic),
    ("cli_artifacts_are_reproducible", cli_artifacts_are_reproducible),
    ("cli_records_run_before_work", cli_records_run_before_work),
    ("cli_exit_codes", cli_exit_codes),
];
