//! Multi-pair training: one model over three language pairs compared with
//! one model per pair.
//!
//! cargo run --release --example multipair -- [mono|siamese] [records-per-pair]

use std::collections::BTreeMap;

use qe_core::data::{generate_synthetic_corpus, Dataset, Record, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::metrics::{evaluate, ResultsTable};
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::{train, train_multipair, Grouping, TrainingConfig};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let arch: Architecture = args.next().as_deref().unwrap_or("mono").parse()?;
    let n: usize = args.next().map_or(1000, |a| a.parse().expect("record count"));
    let cfg = TrainingConfig::desk();

    let mut train_data: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    let mut test_data = Vec::new();
    for (i, tag) in ["en-de", "et-en", "ro-en"].into_iter().enumerate() {
        let spec = SyntheticSpec { n_records: n + 500, seed: 20 + i as u64, ..SyntheticSpec::default() };
        let (tr, te) = generate_synthetic_corpus(&spec, tag)?.split_at(n);
        train_data.insert(tag.to_string(), tr.records);
        test_data.extend(te.records);
    }
    let test = Dataset::new(test_data, qe_core::data::LabelKind::Hter, "synthetic test");

    let text = train_data.values().flatten();
    let vocab = Vocabulary::build(text.flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1)?;
    let init = QEModel::new(ModelConfig::new(arch, EncoderConfig::desk(vocab.len())), vocab, cfg.seed)?;

    let joint = train_multipair(&init, &train_data, Grouping::All, &cfg)?.remove(0);
    let joint_eval = evaluate(&joint.model, &test)?;

    let mut single = Vec::new();
    for (tag, records) in &train_data {
        let (model, _) = train(&init, records, &cfg)?;
        let pair_test = Dataset::new(test.by_lang_pair()[tag].iter().map(|r| (*r).clone()).collect(), test.label_kind, "");
        single.push(evaluate(&model, &pair_test)?.overall);
    }
    let table = ResultsTable::new().with_method("all", joint_eval.per_pair).with_method("single", single);
    print!("{}", table.to_text());
    Ok(())
}
