//! Trains a model on a synthetic corpus and reports test Pearson.
//!
//! cargo run --release --example train_synthetic -- [mono|siamese] [epochs] [lr]

use qe_core::data::{generate_synthetic_corpus, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::metrics::evaluate;
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train, TrainingConfig};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arch: Architecture = args.get(1).map_or("mono", String::as_str).parse()?;
    let mut cfg = TrainingConfig::desk();
    if let Some(e) = args.get(2) {
        cfg.epochs = e.parse().expect("epochs");
    }
    if let Some(lr) = args.get(3) {
        cfg.learning_rate = lr.parse().expect("lr");
    }

    let spec = SyntheticSpec { n_records: 2500, ..SyntheticSpec::default() };
    let data = generate_synthetic_corpus(&spec, "ro-en")?;
    let (train_set, test_set) = data.split_at(2000);

    let vocab = Vocabulary::build(train_set.records.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1)?;
    let config = ModelConfig::new(arch, EncoderConfig::desk(vocab.len()));
    let model = QEModel::new(config, vocab, 0)?;

    let (trained, report) = train(&model, &train_set.records, &cfg)?;
    let eval = evaluate(&trained, &test_set)?;
    println!(
        "{arch}: {} steps ({:?}), best eval loss {:.4} at step {}, {:.1}s ({:.0} ms/step)",
        report.steps_completed,
        report.stop_reason,
        report.best_eval_loss,
        report.best_step,
        report.wall_time_secs,
        1e3 * report.seconds_per_step()
    );
    println!("test pearson {:.4}  mse {:.4}", eval.overall.pearson_r, eval.overall.mse);
    Ok(())
}
