//! Hyperparameter grid and seeded random search over it.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DktPlusLoss, ModelConfig, ModelTag};

/// Candidate values per hyperparameter. Only the dimensions that apply to a
/// model are searched: regularization weights for DKT+, heads and blocks
/// for SAKT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub seed: Vec<u64>,
    pub emb_size: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub num_blocks: Vec<usize>,
    pub lambda_r: Vec<f64>,
    pub lambda_w1: Vec<f64>,
    pub lambda_w2: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: vec![1e-3, 1e-4, 1e-5],
            dropout: vec![0.05, 0.1, 0.3, 0.5],
            seed: vec![42, 3407],
            emb_size: vec![64, 256],
            num_heads: vec![4, 8],
            num_blocks: vec![1, 2, 4],
            lambda_r: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
            lambda_w1: vec![0.0, 0.01, 0.03, 0.1, 0.3, 1.0],
            lambda_w2: vec![0.0, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0],
        }
    }
}

/// One point of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl SearchSpace {
    fn dims(&self, tag: ModelTag) -> Vec<usize> {
        let mut dims = vec![
            self.learning_rate.len(),
            self.dropout.len(),
            self.seed.len(),
            self.emb_size.len(),
        ];
        match tag {
            ModelTag::Dkt => {}
            ModelTag::DktPlus => {
                dims.extend([self.lambda_r.len(), self.lambda_w1.len(), self.lambda_w2.len()])
            }
            ModelTag::Sakt => dims.extend([self.num_heads.len(), self.num_blocks.len()]),
        }
        dims
    }

    /// Number of grid points for `tag`.
    pub fn size(&self, tag: ModelTag) -> usize {
        self.dims(tag).iter().product()
    }

    /// Decodes grid point `index` (mixed radix, first dimension fastest) on
    /// top of `base`, which supplies every value the space does not cover.
    pub fn trial(&self, base: &ModelConfig, index: usize) -> Trial {
        let mut digits = Vec::new();
        let mut rest = index;
        for d in self.dims(base.tag()) {
            digits.push(rest % d);
            rest /= d;
        }
        let emb = self.emb_size[digits[3]];
        let model = match base {
            ModelConfig::Dkt(c) => ModelConfig::Dkt(crate::models::DktConfig {
                emb_size: emb,
                hidden_size: emb,
                ..c.clone()
            }),
            ModelConfig::DktPlus(_) => ModelConfig::DktPlus(crate::models::DktConfig {
                emb_size: emb,
                hidden_size: emb,
                regularization: DktPlusLoss {
                    lambda_r: self.lambda_r[digits[4]],
                    lambda_w1: self.lambda_w1[digits[5]],
                    lambda_w2: self.lambda_w2[digits[6]],
                },
            }),
            ModelConfig::Sakt(c) => ModelConfig::Sakt(crate::models::SaktConfig {
                emb_size: emb,
                num_heads: self.num_heads[digits[4]],
                num_blocks: self.num_blocks[digits[5]],
                ..c.clone()
            }),
        };
        Trial {
            learning_rate: self.learning_rate[digits[0]],
            dropout: self.dropout[digits[1]],
            seed: self.seed[digits[2]],
            model,
        }
    }

    /// `budget` distinct grid points drawn uniformly without replacement.
    /// A budget larger than the grid is clamped, which makes the search
    /// exhaustive.
    pub fn sample_trials(&self, base: &ModelConfig, budget: usize, seed: u64) -> Result<Vec<Trial>> {
        if budget == 0 {
            return Err(Error::invalid("trial budget must be >= 1"));
        }
        let size = self.size(base.tag());
        if size == 0 {
            return Err(Error::invalid("search space has an empty dimension"));
        }
        let budget = if budget > size {
            log::warn!("trial budget {budget} exceeds the {size}-point search space; clamping");
            size
        } else {
            budget
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(sample(&mut rng, size, budget)
            .into_iter()
            .map(|i| self.trial(base, i))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_space() -> SearchSpace {
        SearchSpace {
            learning_rate: vec![1e-3, 1e-4],
            dropout: vec![0.1],
            seed: vec![42, 3407],
            emb_size: vec![8],
            ..SearchSpace::default()
        }
    }

    #[test]
    fn grid_sizes() {
        let s = SearchSpace::default();
        assert_eq!(s.size(ModelTag::Dkt), 3 * 4 * 2 * 2);
        assert_eq!(s.size(ModelTag::DktPlus), 48 * 6 * 6 * 7);
        assert_eq!(s.size(ModelTag::Sakt), 48 * 2 * 3);
    }

    #[test]
    fn budget_beyond_grid_is_exhaustive() {
        let base = ModelConfig::default_for(ModelTag::Dkt);
        let trials = small_space().sample_trials(&base, 100, 1).unwrap();
        assert_eq!(trials.len(), 4);
        for i in 0..trials.len() {
            for j in 0..i {
                assert_ne!(trials[i], trials[j]);
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let base = ModelConfig::default_for(ModelTag::Sakt);
        let s = SearchSpace::default();
        assert_eq!(s.sample_trials(&base, 10, 5).unwrap(), s.sample_trials(&base, 10, 5).unwrap());
        assert!(s.sample_trials(&base, 0, 5).is_err());
    }

    #[test]
    fn trial_values_come_from_the_space() {
        let s = SearchSpace::default();
        let base = ModelConfig::default_for(ModelTag::DktPlus);
        for t in s.sample_trials(&base, 50, 9).unwrap() {
            assert!(s.learning_rate.contains(&t.learning_rate));
            assert!(s.dropout.contains(&t.dropout));
            assert!(s.seed.contains(&t.seed));
            let ModelConfig::DktPlus(c) = t.model else { panic!("tag changed") };
            assert_eq!(c.emb_size, c.hidden_size);
            assert!(s.lambda_w2.contains(&c.regularization.lambda_w2));
        }
    }
}
