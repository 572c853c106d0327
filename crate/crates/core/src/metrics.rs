//! AUC, accuracy and the fold-paired t-test.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auc: f64,
    pub accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricResult {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<MetricResult> {
        let auc = auc(scores, labels)?;
        let accuracy = accuracy(scores, labels, DEFAULT_THRESHOLD)?;
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(MetricResult {
            auc,
            accuracy,
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// ROC AUC via the Mann-Whitney rank statistic, tied scores sharing their
/// average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (positives={n_pos}, negatives={n_neg})"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg_rank * pos_in_tie as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Outcome of comparing method A against method B over paired folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestMarker {
    Superior,
    Equal,
    Inferior,
}

impl TTestMarker {
    /// Table marker: `*` better, `◦` tie, `•` worse.
    pub fn symbol(self) -> &'static str {
        match self {
            TTestMarker::Superior => "*",
            TTestMarker::Equal => "\u{25E6}",
            TTestMarker::Inferior => "\u{2022}",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestOutcome {
    pub marker: TTestMarker,
    /// None when the differences have zero variance.
    pub t_statistic: Option<f64>,
    pub critical_value: f64,
    pub df: usize,
}

// Two-sided critical values of Student's t, df = 1..=30.
const T_CRIT_001: [f64; 30] = [
    63.657, 9.925, 5.841, 4.604, 4.032, 3.707, 3.499, 3.355, 3.250, 3.169, 3.106, 3.055, 3.012,
    2.977, 2.947, 2.921, 2.898, 2.878, 2.861, 2.845, 2.831, 2.819, 2.807, 2.797, 2.787, 2.779,
    2.771, 2.763, 2.756, 2.750,
];
const T_CRIT_005: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160,
    2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056,
    2.052, 2.048, 2.045, 2.042,
];

/// Two-sided critical value for `alpha` in {0.01, 0.05} and `df` in 1..=30.
pub fn t_critical(df: usize, alpha: f64) -> Result<f64> {
    let table = if alpha == 0.01 {
        &T_CRIT_001
    } else if alpha == 0.05 {
        &T_CRIT_005
    } else {
        return Err(Error::invalid(format!(
            "no t table for alpha={alpha}; use 0.01 or 0.05"
        )));
    };
    df.checked_sub(1)
        .and_then(|i| table.get(i))
        .copied()
        .ok_or_else(|| Error::invalid(format!("t table covers df 1..=30, got {df}")))
}

/// Two-sided paired t-test of `a` against `b` (paired by fold).
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestOutcome> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "paired t-test needs two equal-length vectors of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let df = a.len() - 1;
    let critical_value = t_critical(df, alpha)?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);

    let by_sign = |m: f64| {
        if m > 0.0 {
            TTestMarker::Superior
        } else if m < 0.0 {
            TTestMarker::Inferior
        } else {
            TTestMarker::Equal
        }
    };
    if var == 0.0 {
        return Ok(TTestOutcome {
            marker: by_sign(mean),
            t_statistic: None,
            critical_value,
            df,
        });
    }
    let t = mean / (var / n).sqrt();
    let marker = if t.abs() > critical_value {
        by_sign(t)
    } else {
        TTestMarker::Equal
    };
    Ok(TTestOutcome {
        marker,
        t_statistic: Some(t),
        critical_value,
        df,
    })
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `0.7541±0.0011` style.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.4}\u{00B1}{s:.4}")
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length vectors of length >= 2"));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant vector".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && v[order[j]] == v[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}
