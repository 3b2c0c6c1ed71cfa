use qe_core::data::{generate_synthetic_corpus, lexicon, parse_lang_pair, Dataset, Record, SyntheticSpec};
use qe_core::encoder::EncoderConfig;
use qe_core::model::{Architecture, ModelConfig, QEModel};
use qe_core::trainer::TrainingConfig;
use qe_core::vocab::{tokenize, Vocabulary};

pub fn synthetic(n: usize, seed: u64, pair: &str) -> Dataset {
    let spec = SyntheticSpec { n_records: n, seed, vocab_size: 20, ..SyntheticSpec::default() };
    generate_synthetic_corpus(&spec, pair).expect("synthetic corpus")
}

pub fn vocab_of(records: &[Record]) -> Vocabulary {
    Vocabulary::build(records.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 1).expect("vocab")
}

pub fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig { vocab_size, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_seq_len: 24 }
}

pub fn tiny_model(arch: Architecture, records: &[Record], seed: u64) -> QEModel {
    let vocab = vocab_of(records);
    QEModel::new(ModelConfig::new(arch, tiny_encoder(vocab.len())), vocab, seed).expect("model")
}

/// Few steps and frequent evaluation, for properties that train many times.
pub fn quick_config(seed: u64) -> TrainingConfig {
    TrainingConfig { epochs: 2, eval_every_n_steps: 2, learning_rate: 1e-2, ..TrainingConfig::desk() }.with_seed(seed)
}

/// The word-by-word reference translation of a synthetic source sentence.
pub fn reference_of(record: &Record, vocab_size: usize) -> Vec<String> {
    let (src, tgt) = parse_lang_pair(&record.lang_pair).expect("tag");
    let src_words = lexicon(src, vocab_size);
    let tgt_words = lexicon(tgt, 2 * vocab_size);
    tokenize(&record.source)
        .map(|w| {
            let i = src_words.iter().position(|s| *s == w).expect("source word from the lexicon");
            tgt_words[i].clone()
        })
        .collect()
}
