//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ktbench::models::{backward, forward_loss, KtModel};
use ktbench::preprocess::{ExpandedStep, Window};

/// Brute-force AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn pair_counting_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are
/// zero in exact arithmetic compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst relative error between the analytic gradient and a central
/// finite difference, per parameter tensor.
pub fn gradient_check<M: KtModel>(model: &mut M, batch: &[Window]) -> Vec<(String, f64)> {
    let analytic = backward(model, batch).expect("non-empty batch");
    let names: Vec<String> = model.params().tensors.iter().map(|t| t.name.clone()).collect();
    let mut report = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..model.params().tensors[ti].data.len() {
            let orig = model.params().tensors[ti].data[k];
            model.params_mut().tensors[ti].data[k] = orig + FD_STEP;
            let plus = forward_loss(model, batch).unwrap().loss;
            model.params_mut().tensors[ti].data[k] = orig - FD_STEP;
            let minus = forward_loss(model, batch).unwrap().loss;
            model.params_mut().tensors[ti].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.tensors[ti][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        report.push((name.clone(), worst));
    }
    report
}

/// Single-KC steps `(item, response)`, one group per step.
pub fn steps(pairs: &[(usize, u8)]) -> Vec<ExpandedStep> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(item_id, response))| ExpandedStep {
            item_id,
            group_id: i,
            response,
            source_position: i,
        })
        .collect()
}

/// A small batch over 5 items: one full window of length 6 and one padded.
pub fn tiny_batch() -> Vec<Window> {
    let a = steps(&[(0, 1), (3, 0), (1, 1), (4, 1), (2, 0), (0, 1)]);
    let b = steps(&[(2, 0), (2, 1), (4, 0), (1, 1)]);
    vec![Window::from_steps(&a, 6), Window::from_steps(&b, 6)]
}
