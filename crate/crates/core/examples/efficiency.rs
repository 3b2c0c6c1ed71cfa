//! Compares training step time and inference time of the two architectures.
//!
//! cargo run --release --example efficiency -- [steps] [pairs]

use std::time::Instant;

use qe_core::data::{generate_synthetic_corpus, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::model::{Architecture, ModelConfig, ModelInput, QEModel};
use qe_core::trainer::batch_gradients;
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let steps = args.first().copied().unwrap_or(30);
    let n_pairs = args.get(1).copied().unwrap_or(1000);

    let spec = SyntheticSpec { n_records: n_pairs, ..SyntheticSpec::default() };
    let data = generate_synthetic_corpus(&spec, "ro-en")?;
    let vocab = Vocabulary::build(data.records.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1)?;
    let pairs: Vec<(&str, &str)> = data.records.iter().map(|r| (r.source.as_str(), r.target.as_str())).collect();

    for arch in [Architecture::Mono, Architecture::Siamese] {
        let model = QEModel::new(ModelConfig::new(arch, EncoderConfig::desk(vocab.len())), vocab.clone(), 0)?;
        let inputs = pairs.iter().map(|(s, t)| model.prepare(s, t)).collect::<qe_core::Result<Vec<_>>>()?;
        let targets: Vec<f32> = data.records.iter().map(|r| r.label as f32).collect();

        let start = Instant::now();
        for step in 0..steps {
            let lo = (step * 8) % (inputs.len() - 8);
            let batch: Vec<&ModelInput> = inputs[lo..lo + 8].iter().collect();
            batch_gradients(&model, &batch, &targets[lo..lo + 8])?;
        }
        let per_step = start.elapsed().as_secs_f64() / steps as f64;

        let start = Instant::now();
        model.predict_batch(&pairs)?;
        let infer = start.elapsed().as_secs_f64() * 1000.0 / pairs.len() as f64;
        println!("{arch:8} {:7.1} ms/step  {:6.2} s per 1000 pairs", 1e3 * per_step, infer);
    }
    Ok(())
}
