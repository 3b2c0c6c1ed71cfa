//! Generates synthetic HTER and DA corpora and writes them as TSV.
//!
//! cargo run --example synth -- [out-dir]

use std::path::PathBuf;

use qe_core::data::{export_tsv, generate_synthetic_corpus, NoisePool, SyntheticSpec, SyntheticTask};

fn main() -> qe_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-out".into()));
    std::fs::create_dir_all(&out).expect("create output directory");

    let hter = SyntheticSpec { n_records: 1000, ..SyntheticSpec::default() };
    let data = generate_synthetic_corpus(&hter, "en-de")?;
    for r in data.records.iter().take(3) {
        println!("{:.3}  {}  ->  {}", r.label, r.source, r.target);
    }
    let labels = data.labels();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let perfect = labels.iter().filter(|&&y| y == 0.0).count();
    println!("HTER mean {mean:.3}, {perfect} untouched translations");
    export_tsv(&data, &out.join("en-de.tsv"))?;

    // Wrong-but-valid words instead of out-of-lexicon junk make a harder task.
    let hard = SyntheticSpec { noise_pool: NoisePool::Lexicon, ..hter.clone() };
    export_tsv(&generate_synthetic_corpus(&hard, "en-de")?, &out.join("en-de.lexicon-noise.tsv"))?;

    let da = SyntheticSpec { task: SyntheticTask::Da, zscore: true, ..hter };
    let da_data = generate_synthetic_corpus(&da, "si-en")?;
    println!("DA z-scores, first three: {:?}", &da_data.labels()[..3]);
    export_tsv(&da_data, &out.join("si-en.da.tsv"))?;
    println!("wrote {}", out.display());
    Ok(())
}
