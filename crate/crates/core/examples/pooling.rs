//! Every pooling strategy on both architectures, on one small task.
//!
//! cargo run --release --example pooling

use qe_core::data::{generate_synthetic_corpus, SyntheticSpec};
use qe_core::encoder::{EncoderConfig, Pooling};
use qe_core::metrics::evaluate;
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train, TrainingConfig};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let data = generate_synthetic_corpus(&SyntheticSpec { n_records: 700, ..SyntheticSpec::default() }, "en-zh")?;
    let (train_set, test) = data.split_at(500);
    let vocab = Vocabulary::build(train_set.records.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1)?;
    let encoder = EncoderConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, ..EncoderConfig::desk(vocab.len()) };

    for arch in [Architecture::Mono, Architecture::Siamese] {
        for pooling in Pooling::ALL {
            let marker = if pooling == arch.default_pooling() { "*" } else { " " };
            let config = ModelConfig::new(arch, encoder).with_pooling(pooling);
            let model = QEModel::new(config, vocab.clone(), 0)?;
            let (trained, _) = train(&model, &train_set.records, &TrainingConfig::desk())?;
            let r = evaluate(&trained, &test)?.overall.pearson_r;
            println!("{:8} {:5}{marker} r = {r:.4}", arch.name(), pooling.name());
        }
    }
    println!("* default pooling");
    Ok(())
}
