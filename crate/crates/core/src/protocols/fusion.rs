use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::KtModel;

/// How per-KC predictions of one question become a question prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMechanism {
    /// Early fusion: output head on the mean KC representation.
    #[serde(rename = "ef")]
    Ef,
    /// Mean probability.
    #[default]
    #[serde(rename = "lf-avg")]
    LfAvg,
    /// Majority vote of thresholded KC labels.
    #[serde(rename = "lf-mv")]
    LfMv,
    /// Positive only if every KC label is positive.
    #[serde(rename = "lf-s")]
    LfS,
}

impl FusionMechanism {
    pub const ALL: [FusionMechanism; 4] = [
        FusionMechanism::LfAvg,
        FusionMechanism::LfMv,
        FusionMechanism::LfS,
        FusionMechanism::Ef,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMechanism::Ef => "ef",
            FusionMechanism::LfAvg => "lf-avg",
            FusionMechanism::LfMv => "lf-mv",
            FusionMechanism::LfS => "lf-s",
        }
    }
}

impl fmt::Display for FusionMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ef" => Ok(FusionMechanism::Ef),
            "lf-avg" => Ok(FusionMechanism::LfAvg),
            "lf-mv" => Ok(FusionMechanism::LfMv),
            "lf-s" => Ok(FusionMechanism::LfS),
            other => Err(Error::invalid(format!(
                "unknown fusion `{other}` (expected ef, lf-avg, lf-mv or lf-s)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fused {
    pub prob: f64,
    pub label: u8,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fuses one question's KC predictions.
///
/// * LF-AVG: mean probability.
/// * LF-MV: majority label; the probability is the mean over the KCs that
///   voted for the winner. Ties go to `LF-AVG >= threshold`.
/// * LF-S: positive iff every KC is positive; the probability is the minimum.
/// * EF: the model's head on the mean representation. Needs `reprs`.
pub fn fuse<M: KtModel>(
    model: &M,
    probs: &[f64],
    reprs: Option<&[Vec<f64>]>,
    mechanism: FusionMechanism,
    threshold: f64,
) -> Result<Fused> {
    if probs.is_empty() {
        return Err(Error::invalid("cannot fuse an empty KC group"));
    }
    let label_of = |p: f64| (p >= threshold) as u8;
    let prob = match mechanism {
        FusionMechanism::LfAvg => mean(probs),
        FusionMechanism::LfS => probs.iter().cloned().fold(f64::INFINITY, f64::min),
        FusionMechanism::LfMv => {
            let pos: Vec<f64> = probs.iter().cloned().filter(|&p| label_of(p) == 1).collect();
            let neg: Vec<f64> = probs.iter().cloned().filter(|&p| label_of(p) == 0).collect();
            let positive = match pos.len().cmp(&neg.len()) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => mean(probs) >= threshold,
            };
            if positive {
                mean(&pos)
            } else {
                mean(&neg)
            }
        }
        FusionMechanism::Ef => {
            let capability = || Error::Capability {
                model: model.arch(),
                capability: "early fusion (per-KC representations)",
            };
            let reprs = reprs.ok_or_else(capability)?;
            let dim = reprs[0].len();
            let mut avg = vec![0.0; dim];
            for r in reprs {
                for (a, x) in avg.iter_mut().zip(r) {
                    *a += x;
                }
            }
            let n = reprs.len() as f64;
            avg.iter_mut().for_each(|a| *a /= n);
            model.head(&avg).ok_or_else(capability)?
        }
    };
    Ok(Fused {
        prob,
        label: label_of(prob),
    })
}
