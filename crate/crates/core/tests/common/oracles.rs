//! Independent reference implementations of the metrics, and sweeps that
//! compare the library against them on random instances.

use std::collections::HashMap;

use qe_core::data::{generate_synthetic_corpus, ter, zscore_standardize, SyntheticSpec};
use qe_core::metrics::{errors, pearson};
use qe_core::vocab::tokenize;
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

use super::fixtures::reference_of;

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

/// Covariance-formula correlation with compensated sums throughout.
pub fn reference_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let cov = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let vx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let vy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    cov / (vx.sqrt() * vy.sqrt())
}

/// Edit distance straight from its recursive definition, memoized on
/// suffix positions.
pub fn reference_edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    fn go<S: PartialEq>(a: &[S], b: &[S], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo).min(go(a, b, i, j + 1, memo)).min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn reference_ter<S: PartialEq>(hypothesis: &[S], reference: &[S]) -> f64 {
    reference_edit_distance(hypothesis, reference) as f64 / reference.len() as f64
}

pub fn reference_zscore(labels: &[f64]) -> Vec<f64> {
    let n = labels.len() as f64;
    let mean = compensated_sum(labels.iter().copied()) / n;
    let var = compensated_sum(labels.iter().map(|y| (y - mean) * (y - mean))) / n;
    labels.iter().map(|y| (y - mean) / var.sqrt()).collect()
}

pub fn reference_errors(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let n = p.len() as f64;
    let mse = compensated_sum(p.iter().zip(g).map(|(a, b)| (a - b).powi(2))) / n;
    let mae = compensated_sum(p.iter().zip(g).map(|(a, b)| (a - b).abs())) / n;
    (mse, mae, mse.sqrt())
}

fn random_series(rng: &mut Pcg64Mcg) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..=200);
    let scale = 10f64.powi(rng.random_range(-3..=3));
    let offset = rng.random_range(-100.0..100.0);
    let x: Vec<f64> = (0..n).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect();
    let coupling = rng.random_range(-1.0..1.0);
    let y: Vec<f64> = x.iter().map(|v| coupling * (v - offset) / scale + rng.random_range(-1.0..1.0)).collect();
    (x, y)
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest deviation from the reference Pearson over `instances` series.
pub fn pearson_sweep(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (x, y) = random_series(&mut rng);
        let r = pearson(&x, &y).map_err(|e| format!("instance {i}: {e}"))?;
        let gap = (r - reference_pearson(&x, &y)).abs();
        worst = worst.max(gap);
        if gap > 1e-12 {
            return Err(format!("instance {i}: pearson {r} differs from reference by {gap:e}"));
        }
    }
    Ok(worst)
}

pub fn ter_sweep(instances: usize, seed: u64) -> Result<usize, String> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    for i in 0..instances {
        let alphabet = rng.random_range(2..=6u8);
        let reference: Vec<u8> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..alphabet)).collect();
        let hypothesis: Vec<u8> = (0..rng.random_range(0..=8)).map(|_| rng.random_range(0..alphabet)).collect();
        let t = ter(&hypothesis, &reference).map_err(|e| e.to_string())?;
        if t != reference_ter(&hypothesis, &reference) {
            return Err(format!("instance {i}: ter({hypothesis:?}, {reference:?}) = {t}"));
        }
    }
    Ok(instances)
}

/// Every synthetic HTER label against the reference TER of its target and
/// its word-by-word reference translation.
pub fn synthetic_label_sweep(corpora: usize, seed: u64) -> Result<usize, String> {
    let mut checked = 0;
    for k in 0..corpora as u64 {
        let spec = SyntheticSpec { n_records: 50, seed: seed.wrapping_add(k), vocab_size: 20 + (k as usize % 30), ..SyntheticSpec::default() };
        let data = generate_synthetic_corpus(&spec, ["ro-en", "en-de", "si-en"][k as usize % 3]).map_err(|e| e.to_string())?;
        for r in &data.records {
            let target: Vec<String> = tokenize(&r.target).collect();
            let expected = reference_ter(&target, &reference_of(r, spec.vocab_size));
            if r.label != expected {
                return Err(format!("corpus {k}: label {} but reference TER {expected} for `{}`", r.label, r.target));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

pub fn zscore_sweep(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (labels, _) = random_series(&mut rng);
        let (z, mean, std) = zscore_standardize(&labels).map_err(|e| format!("instance {i}: {e}"))?;
        for (a, b) in z.iter().zip(reference_zscore(&labels)) {
            let gap = relative_gap(*a, b);
            worst = worst.max(gap);
            if gap > 1e-10 {
                return Err(format!("instance {i}: z {a} vs reference {b}"));
            }
        }
        let n = z.len() as f64;
        let mz = compensated_sum(z.iter().copied()) / n;
        let vz = compensated_sum(z.iter().map(|v| (v - mz) * (v - mz))) / n;
        if mz.abs() >= 1e-10 || (vz - 1.0).abs() > 1e-10 {
            return Err(format!("instance {i}: standardized mean {mz:e}, variance {vz}"));
        }
        for (zi, y) in z.iter().zip(&labels) {
            if relative_gap(zi * std + mean, *y) > 1e-9 {
                return Err(format!("instance {i}: inversion of {zi} gives {} not {y}", zi * std + mean));
            }
        }
    }
    Ok(worst)
}

pub fn error_metric_sweep(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (p, g) = random_series(&mut rng);
        let got = errors(&p, &g).map_err(|e| e.to_string())?;
        let want = reference_errors(&p, &g);
        for (name, a, b) in [("mse", got.0, want.0), ("mae", got.1, want.1), ("rmse", got.2, want.2)] {
            let gap = relative_gap(a, b);
            worst = worst.max(gap);
            if gap > 1e-12 {
                return Err(format!("instance {i}: {name} {a} vs reference {b}"));
            }
        }
        if (got.2 - got.0.sqrt()).abs() > 1e-12 {
            return Err(format!("instance {i}: rmse is not the square root of mse"));
        }
    }
    Ok(worst)
}
