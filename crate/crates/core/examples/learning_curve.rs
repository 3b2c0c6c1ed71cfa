//! Learning curve on a new pair: Pearson r of fine-tuned and from-scratch
//! models at growing training sizes, written as TSV.
//!
//! cargo run --release --example learning_curve -- [sizes, e.g. 0,50,200]

use std::collections::BTreeMap;

use qe_core::data::{generate_synthetic_corpus, Record, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::metrics::evaluate;
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train_multipair, train_transfer, Grouping, TrainingConfig};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let sizes: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "0,50,200,400".into())
        .split(',')
        .map(|s| s.trim().parse().expect("size"))
        .collect();
    let cfg = TrainingConfig::desk();
    let spec = |seed| SyntheticSpec { n_records: 800, seed, ..SyntheticSpec::default() };

    let base_data = BTreeMap::from([("ro-en".to_string(), generate_synthetic_corpus(&spec(1), "ro-en")?.records)]);
    let (pool, test) = generate_synthetic_corpus(&spec(2), "si-en")?.split_at(600);
    let text = base_data.values().flatten().chain(&pool.records);
    let vocab = Vocabulary::build(text.flat_map(|r: &Record| [r.source.as_str(), r.target.as_str()]), 1)?;
    let encoder = EncoderConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, ..EncoderConfig::desk(vocab.len()) };
    let init = QEModel::new(ModelConfig::new(Architecture::Mono, encoder), vocab, cfg.seed)?;
    let base = train_multipair(&init, &base_data, Grouping::All, &cfg)?.remove(0).model;

    println!("size\tmode\tpearson");
    for n in sizes {
        let subset = &pool.records[..n];
        let (tl, _) = train_transfer(&base, subset, &cfg)?;
        println!("{n}\ttransfer\t{:.6}", evaluate(&tl, &test)?.overall.pearson_r);
        if n > 0 {
            let (scratch, _) = train_transfer(&init, subset, &cfg)?;
            println!("{n}\tscratch\t{:.6}", evaluate(&scratch, &test)?.overall.pearson_r);
        }
    }
    Ok(())
}
