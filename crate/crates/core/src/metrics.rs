//! Pearson correlation and error metrics, per language pair.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::QEModel;

/// Two-pass Pearson correlation with `f64` accumulation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape { op: "pearson", lhs: vec![x.len()], rhs: vec![y.len()] });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("need at least 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "first" } else { "second" };
        return Err(Error::UndefinedCorrelation(format!("{which} series has zero variance")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `(mse, mae, rmse)`.
pub fn errors(predictions: &[f64], gold: &[f64]) -> Result<(f64, f64, f64)> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape { op: "errors", lhs: vec![predictions.len()], rhs: vec![gold.len()] });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let n = predictions.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, g) in predictions.iter().zip(gold) {
        se += (p - g) * (p - g);
        ae += (p - g).abs();
    }
    let mse = se / n;
    Ok((mse, ae / n, mse.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub lang_pair: String,
    pub n: usize,
    pub pearson_r: f64,
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

impl EvalResult {
    pub fn compute(lang_pair: impl Into<String>, predictions: &[f64], gold: &[f64]) -> Result<Self> {
        let (mse, mae, rmse) = errors(predictions, gold)?;
        let pearson_r = pearson(predictions, gold)?;
        Ok(EvalResult { lang_pair: lang_pair.into(), n: gold.len(), pearson_r, mse, mae, rmse })
    }
}

/// Scores of a model on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: EvalResult,
    /// One entry per language pair, sorted by tag; empty when the dataset has a single pair.
    pub per_pair: Vec<EvalResult>,
    pub predictions: Vec<f64>,
}

impl Evaluation {
    /// Per-pair results, or the overall one for single-pair data.
    pub fn rows(&self) -> Vec<EvalResult> {
        if self.per_pair.is_empty() {
            vec![self.overall.clone()]
        } else {
            self.per_pair.clone()
        }
    }

    pub fn pair(&self, tag: &str) -> Option<&EvalResult> {
        self.rows_ref().find(|r| r.lang_pair == tag)
    }

    fn rows_ref(&self) -> Box<dyn Iterator<Item = &EvalResult> + '_> {
        if self.per_pair.is_empty() {
            Box::new(std::iter::once(&self.overall))
        } else {
            Box::new(self.per_pair.iter())
        }
    }
}

/// Scores precomputed predictions against a dataset's labels.
pub fn evaluate_predictions(predictions: &[f64], test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("empty test set".into()));
    }
    let gold = test.labels();
    let mut pairs: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, &p) in test.records.iter().zip(predictions) {
        let e = pairs.entry(r.lang_pair.as_str()).or_default();
        e.0.push(p);
        e.1.push(r.label);
    }
    let overall_tag = if pairs.len() == 1 { pairs.keys().next().copied().unwrap_or("all") } else { "all" };
    let overall = EvalResult::compute(overall_tag, predictions, &gold)?;
    let per_pair = if pairs.len() > 1 {
        pairs.into_iter().map(|(tag, (p, g))| EvalResult::compute(tag, &p, &g)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(Evaluation { overall, per_pair, predictions: predictions.to_vec() })
}

/// Predicts every record and scores the predictions.
pub fn evaluate(model: &QEModel, test: &Dataset) -> Result<Evaluation> {
    let pairs: Vec<(&str, &str)> = test.records.iter().map(|r| (r.source.as_str(), r.target.as_str())).collect();
    let predictions = model.predict_batch(&pairs)?;
    evaluate_predictions(&predictions, test)
}

/// Results of one or more methods, rendered per language pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    /// `(method name, results)`; the first method is the one being reported,
    /// the rest are baselines.
    pub methods: Vec<(String, Vec<EvalResult>)>,
}

pub const TSV_HEADER: &str = "lang_pair\tn\tpearson\tmse\tmae\trmse";

/// Builds a table from a result list and an optional baseline list.
pub fn results_table(results: &[EvalResult], baseline: Option<&[EvalResult]>) -> ResultsTable {
    let mut methods = vec![("model".to_string(), results.to_vec())];
    if let Some(b) = baseline {
        methods.push(("baseline".to_string(), b.to_vec()));
    }
    ResultsTable { methods }
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_method(mut self, name: impl Into<String>, results: Vec<EvalResult>) -> Self {
        self.methods.push((name.into(), results));
        self
    }

    fn pair_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.methods.iter().flat_map(|(_, rs)| rs.iter().map(|r| r.lang_pair.clone())).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    /// Highest Pearson per pair across methods (first method wins ties).
    fn best(&self, tag: &str) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (m, (_, rs)) in self.methods.iter().enumerate() {
            if let Some(r) = rs.iter().find(|r| r.lang_pair == tag) {
                if best.is_none_or(|(_, b)| r.pearson_r > b) {
                    best = Some((m, r.pearson_r));
                }
            }
        }
        best.map(|(m, _)| m)
    }

    /// TSV rows `lang_pair n pearson mse mae rmse` for a single method; with
    /// several methods a leading `method` column is added.
    pub fn to_tsv(&self) -> String {
        let multi = self.methods.len() > 1;
        let mut out = String::new();
        if multi {
            out.push_str("method\t");
        }
        out.push_str(TSV_HEADER);
        out.push('\n');
        for tag in self.pair_tags() {
            for (name, rs) in &self.methods {
                if let Some(r) = rs.iter().find(|r| r.lang_pair == tag) {
                    if multi {
                        write!(out, "{name}\t").expect("write to String");
                    }
                    writeln!(
                        out,
                        "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                        r.lang_pair, r.n, r.pearson_r, r.mse, r.mae, r.rmse
                    )
                    .expect("write to String");
                }
            }
        }
        out
    }

    /// Aligned grid of Pearson values: one row per pair, one column per
    /// method, the best value in each row marked with `*`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["lang_pair".to_string()];
        header.extend(self.methods.iter().map(|(n, _)| n.clone()));
        let mut rows = vec![header];
        for tag in self.pair_tags() {
            let best = self.best(&tag);
            let mut row = vec![tag.clone()];
            for (m, (_, rs)) in self.methods.iter().enumerate() {
                row.push(match rs.iter().find(|r| r.lang_pair == tag) {
                    Some(r) if Some(m) == best => format!("{:.4}*", r.pearson_r),
                    Some(r) => format!("{:.4}", r.pearson_r),
                    None => "-".to_string(),
                });
            }
            rows.push(row);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
