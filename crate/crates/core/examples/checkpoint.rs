//! Trains a small model, saves it, reloads it and scores new pairs with both
//! copies.
//!
//! cargo run --release --example checkpoint -- [path]

use qe_core::checkpoint::{load_checkpoint, save_checkpoint};
use qe_core::data::{generate_synthetic_corpus, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train, TrainingConfig};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "model.qef".into());
    let data = generate_synthetic_corpus(&SyntheticSpec { n_records: 600, ..SyntheticSpec::default() }, "et-en")?;
    let (train_set, test) = data.split_at(500);
    let vocab = Vocabulary::build(train_set.records.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1)?;
    let encoder = EncoderConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, ..EncoderConfig::desk(vocab.len()) };
    let model = QEModel::new(ModelConfig::new(Architecture::Mono, encoder), vocab, 0)?;
    let (trained, report) = train(&model, &train_set.records, &TrainingConfig::desk())?;
    println!("{} steps, best eval loss {:.4} at step {}", report.steps_completed, report.best_eval_loss, report.best_step);

    save_checkpoint(&trained, path.as_ref())?;
    let loaded = load_checkpoint(path.as_ref())?;
    println!("saved {} ({} bytes)", path, std::fs::metadata(&path).map_or(0, |m| m.len()));

    for r in test.records.iter().take(5) {
        let (a, b) = (trained.predict(&r.source, &r.target)?, loaded.predict(&r.source, &r.target)?);
        assert_eq!(a.to_bits(), b.to_bits());
        println!("gold {:.3}  predicted {a:.3}", r.label);
    }
    Ok(())
}
