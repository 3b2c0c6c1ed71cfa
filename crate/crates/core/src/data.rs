//! Sentence-pair datasets: TSV I/O, label standardization, a shift-free TER,
//! the synthetic corpus generator and language-pair grouping.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub source: String,
    pub target: String,
    pub label: f64,
    pub lang_pair: String,
}

impl Record {
    pub fn new(source: impl Into<String>, target: impl Into<String>, label: f64, lang_pair: impl Into<String>) -> Self {
        Record { source: source.into(), target: target.into(), label, lang_pair: lang_pair.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Hter,
    DaRaw,
    DaZ,
}

impl std::str::FromStr for LabelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hter" => Ok(LabelKind::Hter),
            "da" | "da_raw" => Ok(LabelKind::DaRaw),
            "da_z" | "z" => Ok(LabelKind::DaZ),
            other => Err(Error::Config(format!("unknown label kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub label_kind: LabelKind,
    /// Where the records came from, e.g. a file path or a generator spec.
    pub provenance: String,
}

impl Dataset {
    pub fn new(records: Vec<Record>, label_kind: LabelKind, provenance: impl Into<String>) -> Self {
        Dataset { records, label_kind, provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records split into `(first n, rest)`.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |recs: &[Record], tag: &str| Dataset {
            records: recs.to_vec(),
            label_kind: self.label_kind,
            provenance: format!("{} [{tag}]", self.provenance),
        };
        (part(&self.records[..n], "head"), part(&self.records[n..], "tail"))
    }

    /// Records grouped by language-pair tag.
    pub fn by_lang_pair(&self) -> BTreeMap<String, Vec<&Record>> {
        let mut out: BTreeMap<String, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.lang_pair.clone()).or_default().push(r);
        }
        out
    }
}

/// Header names to read each field from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub source: String,
    pub target: String,
    pub label: String,
    /// Optional per-row language-pair column; rows fall back to the default tag.
    pub lang_pair: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap { source: "src".into(), target: "tgt".into(), label: "score".into(), lang_pair: Some("lang_pair".into()) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any bad row is an error.
    #[default]
    Strict,
    /// Bad rows are skipped and counted.
    Lenient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    /// 1-based line numbers of skipped rows (lenient mode only).
    pub skipped: Vec<usize>,
    /// 1-based line numbers of rows with an empty source or target.
    pub empty_text: Vec<usize>,
}

/// Reads a header-first, tab-separated file.
///
/// Columns are located by name through `columns`; a lang-pair column that is
/// named but absent from the header is ignored and `lang_pair` is used.
pub fn load_tsv(path: &Path, columns: &ColumnMap, lang_pair: &str, label_kind: LabelKind, mode: LoadMode) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&bytes, path, columns, lang_pair, label_kind, mode)
}

pub fn parse_tsv(
    bytes: &[u8],
    path: &Path,
    columns: &ColumnMap,
    lang_pair: &str,
    label_kind: LabelKind,
    mode: LoadMode,
) -> Result<Loaded> {
    let mut lines = bytes.split(|&b| b == b'\n').enumerate().map(|(i, raw)| {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        std::str::from_utf8(raw).map(|s| (i + 1, s)).map_err(|_| Error::Utf8 { path: path.to_path_buf(), line: i + 1 })
    });
    let header = match lines.next() {
        Some(h) => h?.1,
        None => unreachable!("split yields at least one item"),
    };
    if header.trim().is_empty() {
        return Err(Error::Empty(format!("{}: file has no header row", path.display())));
    }
    let names: Vec<&str> = header.split('\t').collect();
    let find = |col: &str| -> Result<usize> {
        names.iter().position(|n| *n == col).ok_or_else(|| Error::MissingColumn { path: path.to_path_buf(), column: col.to_string() })
    };
    let (si, ti, li) = (find(&columns.source)?, find(&columns.target)?, find(&columns.label)?);
    let pi = columns.lang_pair.as_deref().and_then(|c| names.iter().position(|n| *n == c));
    let width = names.len();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut empty_text = Vec::new();
    for line in lines {
        let (no, text) = line?;
        if text.is_empty() {
            continue;
        }
        let parsed = (|| {
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != width {
                return Err(format!("expected {width} fields, found {}", fields.len()));
            }
            let raw = fields[li].trim();
            let label: f64 = raw.parse().map_err(|_| format!("unparseable label `{raw}`"))?;
            if !label.is_finite() {
                return Err(format!("non-finite label `{raw}`"));
            }
            let pair = pi.map_or(lang_pair, |i| fields[i]);
            Ok(Record::new(fields[si], fields[ti], label, pair))
        })();
        match parsed {
            Ok(r) => {
                if r.source.is_empty() || r.target.is_empty() {
                    empty_text.push(no);
                }
                records.push(r);
            }
            Err(message) => match mode {
                LoadMode::Strict => return Err(Error::Parse { path: path.to_path_buf(), line: no, message }),
                LoadMode::Lenient => skipped.push(no),
            },
        }
    }
    if records.is_empty() && skipped.is_empty() {
        return Err(Error::Empty(format!("{}: no data rows", path.display())));
    }
    let dataset = Dataset::new(records, label_kind, path.display().to_string());
    Ok(Loaded { dataset, skipped, empty_text })
}

/// Native TSV layout: `src  tgt  score  lang_pair`.
pub fn to_tsv(dataset: &Dataset) -> Result<String> {
    let mut out = String::from("src\ttgt\tscore\tlang_pair\n");
    for (i, r) in dataset.records.iter().enumerate() {
        for field in [&r.source, &r.target, &r.lang_pair] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::at_record(i, Error::Contract("text fields cannot contain tabs or newlines".into())));
            }
        }
        // `{}` prints the shortest representation that parses back exactly.
        writeln!(out, "{}\t{}\t{}\t{}", r.source, r.target, r.label, r.lang_pair).expect("write to String");
    }
    Ok(out)
}

pub fn export_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_tsv(dataset)?).map_err(|e| Error::io(path, e))
}

/// Standardizes labels with the population standard deviation.
/// Returns `(z, mean, std)`; `y = z·std + mean` inverts it.
pub fn zscore_standardize(labels: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    if labels.len() < 2 {
        return Err(Error::Empty("z-scoring needs at least two labels".into()));
    }
    let n = labels.len() as f64;
    let rough = labels.iter().sum::<f64>() / n;
    // One correction pass removes the rounding error of the plain sum, which
    // matters for tightly clustered labels far from zero.
    let mean = rough + labels.iter().map(|y| y - rough).sum::<f64>() / n;
    let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("cannot standardize constant labels".into()));
    }
    Ok((labels.iter().map(|y| (y - mean) / std).collect(), mean, std))
}

/// Word-level Levenshtein distance divided by the reference length.
/// There is no block-shift operation, so this upper-bounds true TER.
pub fn ter<S: PartialEq>(hypothesis: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("TER needs a non-empty reference".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(x != y));
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Splits an `xx-yy` tag into its two language codes.
pub fn parse_lang_pair(tag: &str) -> Result<(&str, &str)> {
    let ok = |s: &str| (2..=3).contains(&s.len()) && s.bytes().all(|b| b.is_ascii_lowercase());
    match tag.split_once('-') {
        Some((a, b)) if ok(a) && ok(b) => Ok((a, b)),
        _ => Err(Error::LangPair(tag.to_string())),
    }
}

/// Language-pair tags partitioned into English-source and English-target groups.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DirectionalGroups {
    pub en_source: Vec<String>,
    pub en_target: Vec<String>,
}

pub fn group_directional<'t>(tags: impl IntoIterator<Item = &'t str>) -> Result<DirectionalGroups> {
    let mut groups = DirectionalGroups::default();
    for tag in tags {
        match parse_lang_pair(tag)? {
            ("en", _) => groups.en_source.push(tag.to_string()),
            (_, "en") => groups.en_target.push(tag.to_string()),
            _ => return Err(Error::UnsupportedGrouping(tag.to_string())),
        }
    }
    groups.en_source.sort();
    groups.en_target.sort();
    Ok(groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Hter,
    Da,
}

/// Where corrupted target tokens are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePool {
    /// Target-language words that no source word translates to.
    Unmapped,
    /// The whole target lexicon, including wrong but valid translations.
    Lexicon,
}

/// Parameters of [`generate_synthetic_corpus`]; read from and written to
/// flat `key = value` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of concepts, i.e. source-language words.
    pub vocab_size: usize,
    pub n_records: usize,
    pub noise_rate_range: (f64, f64),
    pub seed: u64,
    pub task: SyntheticTask,
    /// DA only: z-score the `100·(1−noise)` labels.
    pub zscore: bool,
    pub noise_pool: NoisePool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 48,
            n_records: 2500,
            noise_rate_range: (0.0, 0.6),
            seed: 1,
            task: SyntheticTask::Hter,
            zscore: false,
            noise_pool: NoisePool::Unmapped,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.noise_rate_range;
        if self.vocab_size < 20 {
            return Err(Error::Config(format!("vocab_size must be at least 20, got {}", self.vocab_size)));
        }
        if self.n_records == 0 {
            return Err(Error::Config("n_records must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("noise_rate_range must satisfy 0 <= lo <= hi <= 1, got {lo},{hi}")));
        }
        if self.zscore && self.task == SyntheticTask::Hter {
            return Err(Error::Config("zscore applies to the DA task only".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse { path: PathBuf::from("<synthetic spec>"), line: i + 1, message: m };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || err(format!("invalid value `{value}` for `{key}`"));
            match key {
                "vocab_size" => spec.vocab_size = value.parse().map_err(|_| bad())?,
                "n_records" => spec.n_records = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                "zscore" => spec.zscore = value.parse().map_err(|_| bad())?,
                "noise_rate_range" => {
                    let (a, b) = value.split_once(',').ok_or_else(|| err(format!("expected lo,hi for `{key}`")))?;
                    spec.noise_rate_range = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                }
                "task" => {
                    spec.task = match value.to_ascii_lowercase().as_str() {
                        "hter" => SyntheticTask::Hter,
                        "da" => SyntheticTask::Da,
                        _ => return Err(err(format!("unknown task `{value}`"))),
                    }
                }
                "noise_pool" => {
                    spec.noise_pool = match value.to_ascii_lowercase().as_str() {
                        "unmapped" => NoisePool::Unmapped,
                        "lexicon" => NoisePool::Lexicon,
                        _ => return Err(err(format!("unknown noise_pool `{value}`"))),
                    }
                }
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let task = match self.task {
            SyntheticTask::Hter => "hter",
            SyntheticTask::Da => "da",
        };
        let pool = match self.noise_pool {
            NoisePool::Unmapped => "unmapped",
            NoisePool::Lexicon => "lexicon",
        };
        format!(
            "vocab_size = {}\nn_records = {}\nnoise_rate_range = {},{}\nseed = {}\ntask = {task}\nzscore = {}\nnoise_pool = {pool}\n",
            self.vocab_size, self.n_records, self.noise_rate_range.0, self.noise_rate_range.1, self.seed, self.zscore
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse { path: path.to_path_buf(), line, message },
            other => other,
        })
    }
}

/// Word classes of the toy grammar and the share of concepts in each.
const CLASS_SHARES: [f64; 5] = [0.15, 0.2, 0.35, 0.2, 0.1];
const DET: usize = 0;
const ADJ: usize = 1;
const NOUN: usize = 2;
const VERB: usize = 3;
const ADV: usize = 4;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// Concept ids by word class for a concept inventory of `v`.
fn concept_classes(v: usize) -> [Vec<usize>; 5] {
    let mut classes: [Vec<usize>; 5] = Default::default();
    let mut cut = 0.0;
    let bounds: Vec<usize> = CLASS_SHARES
        .iter()
        .map(|s| {
            cut += s;
            (cut * v as f64).round() as usize
        })
        .collect();
    for c in 0..v {
        let class = bounds.iter().position(|&b| c < b).unwrap_or(ADV);
        classes[class].push(c);
    }
    classes
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// The `size` pseudo-words of a language, fixed by its code alone so that
/// every corpus involving the language uses the same lexicon.
///
/// Words carry the language code as a prefix, so inventories of different
/// languages never overlap.
pub fn lexicon(lang: &str, size: usize) -> Vec<String> {
    let mut rng = Pcg64Mcg::seed_from_u64(fnv1a(lang));
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = rng.random_range(2..=3);
        let mut w = format!("{lang}_");
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(&mut rng).expect("non-empty"));
            w.push_str(NUCLEI.choose(&mut rng).expect("non-empty"));
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn sample_sentence(rng: &mut Pcg64Mcg, classes: &[Vec<usize>; 5]) -> Vec<usize> {
    let pick = |class: usize, rng: &mut Pcg64Mcg| *classes[class].choose(rng).expect("every class is populated");
    let noun_phrase = |rng: &mut Pcg64Mcg, out: &mut Vec<usize>| {
        out.push(pick(DET, rng));
        if rng.random_bool(0.5) {
            out.push(pick(ADJ, rng));
        }
        out.push(pick(NOUN, rng));
    };
    let mut s = Vec::with_capacity(8);
    noun_phrase(rng, &mut s);
    s.push(pick(VERB, rng));
    noun_phrase(rng, &mut s);
    if rng.random_bool(0.4) {
        s.push(pick(ADV, rng));
    }
    s
}

/// Synthetic QE corpus for `lang_pair`.
///
/// Source sentences come from a five-class toy grammar over `vocab_size`
/// concepts (`det (adj) noun verb det (adj) noun (adv)`). Each concept has
/// one word per language; the reference is the word-by-word translation.
/// The target language has a second set of `vocab_size` words that no
/// concept maps to. Each reference token is corrupted with the record's
/// noise rate by one of substitution, deletion or insertion, chosen
/// uniformly; substituted and inserted words come from `noise_pool`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, lang_pair: &str) -> Result<Dataset> {
    spec.validate()?;
    let (src_lang, tgt_lang) = parse_lang_pair(lang_pair)?;
    let v = spec.vocab_size;
    let src_words = lexicon(src_lang, v);
    let tgt_words = lexicon(tgt_lang, 2 * v);
    let classes = concept_classes(v);
    let mut rng = Pcg64Mcg::seed_from_u64(spec.seed ^ fnv1a(lang_pair));
    let (lo, hi) = spec.noise_rate_range;

    let mut records = Vec::with_capacity(spec.n_records);
    let mut noise_rates = Vec::with_capacity(spec.n_records);
    for _ in 0..spec.n_records {
        let concepts = sample_sentence(&mut rng, &classes);
        let rho = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let reference: Vec<&str> = concepts.iter().map(|&c| tgt_words[c].as_str()).collect();
        let noisy_word = |rng: &mut Pcg64Mcg, avoid: usize| -> &str {
            match spec.noise_pool {
                NoisePool::Unmapped => &tgt_words[v + rng.random_range(0..v)],
                NoisePool::Lexicon => {
                    let k = rng.random_range(0..2 * v - 1);
                    &tgt_words[if k < avoid { k } else { k + 1 }]
                }
            }
        };
        let mut target: Vec<&str> = Vec::with_capacity(reference.len() + 4);
        for (&c, &w) in concepts.iter().zip(&reference) {
            if rng.random::<f64>() < rho {
                match rng.random_range(0..3) {
                    0 => target.push(noisy_word(&mut rng, c)),
                    1 => {}
                    _ => {
                        target.push(w);
                        target.push(noisy_word(&mut rng, usize::MAX));
                    }
                }
            } else {
                target.push(w);
            }
        }
        let label = match spec.task {
            SyntheticTask::Hter => ter(&target, &reference)?,
            SyntheticTask::Da => 100.0 * (1.0 - rho),
        };
        let source: Vec<&str> = concepts.iter().map(|&c| src_words[c].as_str()).collect();
        records.push(Record::new(source.join(" "), target.join(" "), label, lang_pair));
        noise_rates.push(rho);
    }
    let (label_kind, labels) = match (spec.task, spec.zscore) {
        (SyntheticTask::Hter, _) => (LabelKind::Hter, None),
        (SyntheticTask::Da, false) => (LabelKind::DaRaw, None),
        (SyntheticTask::Da, true) => {
            let raw: Vec<f64> = records.iter().map(|r| r.label).collect();
            (LabelKind::DaZ, Some(zscore_standardize(&raw)?.0))
        }
    };
    if let Some(z) = labels {
        for (r, z) in records.iter_mut().zip(z) {
            r.label = z;
        }
    }
    let provenance = format!("synthetic {lang_pair} seed={} n={} vocab={}", spec.seed, spec.n_records, v);
    Ok(Dataset::new(records, label_kind, provenance))
}

/// Seeded shuffle of a record list.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut Pcg64Mcg::seed_from_u64(seed));
    out
}
