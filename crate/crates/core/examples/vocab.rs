//! Builds a vocabulary over a synthetic corpus and shows how a pair is laid
//! out for the cross-encoder and for the Siamese encoder.
//!
//! cargo run --example vocab

use qe_core::data::{generate_synthetic_corpus, SyntheticSpec};
use qe_core::vocab::Vocabulary;

fn main() -> qe_core::Result<()> {
    let data = generate_synthetic_corpus(&SyntheticSpec { n_records: 200, ..SyntheticSpec::default() }, "ro-en")?;
    let vocab = Vocabulary::build(data.records.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]), 2)?;
    println!("{} tokens with frequency >= 2; most frequent: {:?}", vocab.len(), &vocab.tokens()[4..9]);

    let r = &data.records[0];
    let pair = vocab.encode_pair(&r.source, &r.target, 32)?;
    println!("source  {}\ntarget  {}", r.source, r.target);
    println!("ids      {:?}", pair.ids);
    println!("segments {:?}", pair.segment_mask);
    println!("decoded  {}", vocab.decode(&pair.ids).join(" "));

    // Longest side is cut first when the pair does not fit.
    let short = vocab.encode_pair(&r.source, &r.target, 10)?;
    println!("max_seq_len 10 keeps {} real positions: {:?}", short.real_len(), short.ids);

    let single = vocab.encode_single(&r.target, 32)?;
    println!("target alone: {:?}", &single.ids[..single.real_len()]);
    Ok(())
}
