//! Transfer to a low-resource pair: a base model trained on two pairs is
//! evaluated zero-shot on a third, then fine-tuned on growing subsets and
//! compared with models trained from scratch on the same subsets.
//!
//! cargo run --release --example transfer -- [mono|siamese]

use std::collections::BTreeMap;

use qe_core::data::{generate_synthetic_corpus, Record, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::metrics::evaluate;
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train_multipair, train_transfer, Grouping, TrainingConfig};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let arch: Architecture = std::env::args().nth(1).as_deref().unwrap_or("mono").parse()?;
    let cfg = TrainingConfig::desk();

    let mut base_data = BTreeMap::new();
    for (i, tag) in ["et-en", "ro-en"].into_iter().enumerate() {
        let spec = SyntheticSpec { n_records: 1500, seed: 10 + i as u64, ..SyntheticSpec::default() };
        base_data.insert(tag.to_string(), generate_synthetic_corpus(&spec, tag)?.records);
    }
    let low = generate_synthetic_corpus(&SyntheticSpec { n_records: 1500, seed: 30, ..SyntheticSpec::default() }, "ne-en")?;
    let (low_pool, low_test) = low.split_at(1000);

    // One vocabulary over every pair's text, so the base model already has
    // (untrained) rows for the new source language.
    let text = base_data.values().flatten().chain(&low_pool.records);
    let vocab = Vocabulary::build(text.flat_map(|r: &Record| [r.source.as_str(), r.target.as_str()]), 1)?;
    let init = QEModel::new(ModelConfig::new(arch, EncoderConfig::desk(vocab.len())), vocab, cfg.seed)?;

    let base = train_multipair(&init, &base_data, Grouping::All, &cfg)?.remove(0).model;
    let zero_shot = evaluate(&base, &low_test)?.overall.pearson_r;
    println!("zero-shot ne-en pearson {zero_shot:.4}");

    println!("{:>6}  {:>8}  {:>8}", "n", "transfer", "scratch");
    for n in [100, 250, 500, 1000] {
        let subset = &low_pool.records[..n];
        let (tl, _) = train_transfer(&base, subset, &cfg)?;
        let (scratch, _) = train_transfer(&init, subset, &cfg)?;
        let r_tl = evaluate(&tl, &low_test)?.overall.pearson_r;
        let r_scratch = evaluate(&scratch, &low_test)?.overall.pearson_r;
        println!("{n:>6}  {r_tl:>8.4}  {r_scratch:>8.4}");
    }
    Ok(())
}
