//! Scores a model per language pair and prints the results table next to a
//! baseline of constant-plus-noise guesses.
//!
//! cargo run --release --example evaluate

use qe_core::data::{generate_synthetic_corpus, Dataset, LabelKind, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::metrics::{evaluate, evaluate_predictions, results_table};
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train, TrainingConfig};
use qe_core::vocab::Vocabulary;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

fn main() -> qe_core::Result<()> {
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (i, tag) in ["en-de", "ro-en"].into_iter().enumerate() {
        let spec = SyntheticSpec { n_records: 600, seed: i as u64, ..SyntheticSpec::default() };
        let (tr, te) = generate_synthetic_corpus(&spec, tag)?.split_at(450);
        train_rows.extend(tr.records);
        test_rows.extend(te.records);
    }
    let test = Dataset::new(test_rows, LabelKind::Hter, "synthetic test");

    let vocab = Vocabulary::build(train_rows.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1)?;
    let encoder = EncoderConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, ..EncoderConfig::desk(vocab.len()) };
    let model = QEModel::new(ModelConfig::new(Architecture::Mono, encoder), vocab, 0)?;
    let (trained, _) = train(&model, &train_rows, &TrainingConfig::desk())?;
    let eval = evaluate(&trained, &test)?;

    let mut rng = Pcg64Mcg::seed_from_u64(1);
    let guesses: Vec<f64> = (0..test.len()).map(|_| 0.2 + rng.random_range(-0.05..0.05)).collect();
    let baseline = evaluate_predictions(&guesses, &test)?;

    let table = results_table(&eval.per_pair, Some(&baseline.per_pair));
    print!("{}", table.to_text());
    println!("overall r {:.4}, rmse {:.4}", eval.overall.pearson_r, eval.overall.rmse);
    Ok(())
}
