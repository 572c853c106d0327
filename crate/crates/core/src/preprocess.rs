//! Filtering, student-level splitting, KC expansion and fixed-length windowing.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, StudentSequence};
use crate::error::{Error, Result};

/// Students with fewer surviving interactions are dropped.
pub const MIN_INTERACTIONS: usize = 3;
pub const NUM_FOLDS: usize = 5;
/// Marker for padded slots in a [`Window`].
pub const PAD: i64 = -1;
/// Default maximum training sequence length.
pub const DEFAULT_WINDOW: usize = 200;

/// Drops incomplete interactions, then students left with fewer than
/// [`MIN_INTERACTIONS`] interactions. Vocabularies are rebuilt.
pub fn filter(dataset: &Dataset) -> Dataset {
    let sequences = dataset
        .sequences()
        .iter()
        .filter(|s| !s.student_id.is_empty())
        .map(|s| StudentSequence {
            student_id: s.student_id.clone(),
            interactions: s
                .interactions
                .iter()
                .filter(|i| i.is_complete())
                .cloned()
                .collect(),
        })
        .filter(|s| s.len() >= MIN_INTERACTIONS)
        .collect();
    Dataset::new(sequences)
}

/// Student-level partition: a held-out test set and five cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl Split {
    /// Students used for training when `fold` is the validation fold.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    pub fn num_students(&self) -> usize {
        self.test_ids.len() + self.folds.iter().map(Vec::len).sum::<usize>()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Split> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `round(0.2 * n)` with ties rounded up, in integer arithmetic.
pub fn test_set_size(n: usize) -> usize {
    (2 * n + 5) / 10
}

/// Seeded shuffle of the (sorted) student ids; the first `round(0.2 N)` go to
/// the test set and the remainder are dealt round-robin into five folds.
pub fn split_students(dataset: &Dataset, seed: u64) -> Result<Split> {
    let ids: Vec<String> = dataset
        .sequences()
        .iter()
        .map(|s| s.student_id.clone())
        .collect();
    split_ids(ids, seed)
}

pub fn split_ids(mut ids: Vec<String>, seed: u64) -> Result<Split> {
    ids.sort();
    ids.dedup();
    if ids.len() < NUM_FOLDS + 1 {
        return Err(Error::invalid(format!(
            "need at least {} students to split, got {}",
            NUM_FOLDS + 1,
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = test_set_size(ids.len());
    let rest = ids.split_off(n_test);
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    for (i, id) in rest.into_iter().enumerate() {
        folds[i % NUM_FOLDS].push(id);
    }
    Ok(Split {
        seed,
        test_ids: ids,
        folds,
    })
}

/// One KC-level (or question-level, without KC info) step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedStep {
    pub item_id: usize,
    /// Shared by all steps expanded from one source interaction.
    pub group_id: usize,
    pub response: u8,
    /// Index of the source interaction in the student's sequence.
    pub source_position: usize,
}

/// A student's expanded step sequence plus the question id of every source
/// interaction (indexed by `source_position`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedSequence {
    pub student_id: String,
    pub steps: Vec<ExpandedStep>,
    pub question_ids: Vec<String>,
}

impl ExpandedSequence {
    /// Number of source interactions (question groups).
    pub fn num_groups(&self) -> usize {
        self.question_ids.len()
    }

    /// `[start, end)` step ranges of each group, in order.
    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        group_ranges(&self.steps)
    }
}

pub fn group_ranges(steps: &[ExpandedStep]) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 1..=steps.len() {
        if i == steps.len() || steps[i].group_id != steps[start].group_id {
            ranges.push(start..i);
            start = i;
        }
    }
    ranges
}

/// Expands each interaction into one step per KC (ascending KC index), all
/// sharing the interaction's response and a fresh group id. Without KC info
/// in the dataset the question index is the item and nothing is expanded.
///
/// Interactions must be complete; run [`filter`] first.
pub fn expand_to_kc(sequence: &StudentSequence, dataset: &Dataset) -> Result<ExpandedSequence> {
    let use_kcs = dataset.has_kc_info();
    let mut steps = Vec::with_capacity(sequence.len());
    let mut question_ids = Vec::with_capacity(sequence.len());
    for (pos, inter) in sequence.interactions.iter().enumerate() {
        let response = match inter.response {
            Some(r @ (0 | 1)) => r,
            _ => {
                return Err(Error::invalid(format!(
                    "student `{}` position {pos}: missing or non-binary response",
                    sequence.student_id
                )))
            }
        };
        let group_id = pos;
        if use_kcs {
            let kcs = dataset
                .question_kc_map()
                .get(&inter.question_id)
                .filter(|set| !set.is_empty())
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "question `{}` has no KCs in a KC-bearing dataset",
                        inter.question_id
                    ))
                })?;
            let mut items: Vec<usize> = kcs
                .iter()
                .map(|k| dataset.kc_vocab().index_of(k).expect("kc in vocab"))
                .collect();
            items.sort_unstable();
            steps.extend(items.into_iter().map(|item_id| ExpandedStep {
                item_id,
                group_id,
                response,
                source_position: pos,
            }));
        } else {
            let item_id = dataset
                .question_vocab()
                .index_of(&inter.question_id)
                .ok_or_else(|| {
                    Error::invalid(format!("question `{}` not in vocabulary", inter.question_id))
                })?;
            steps.push(ExpandedStep {
                item_id,
                group_id,
                response,
                source_position: pos,
            });
        }
        question_ids.push(inter.question_id.clone());
    }
    Ok(ExpandedSequence {
        student_id: sequence.student_id.clone(),
        steps,
        question_ids,
    })
}

pub fn expand_dataset(dataset: &Dataset) -> Result<Vec<ExpandedSequence>> {
    dataset
        .sequences()
        .iter()
        .map(|s| expand_to_kc(s, dataset))
        .collect()
}

/// Fixed-length training chunk. Slots at or beyond `valid_len` hold [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub item_ids: Vec<i64>,
    pub responses: Vec<i64>,
    pub group_ids: Vec<i64>,
    pub source_positions: Vec<i64>,
    pub valid_len: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// The non-pad steps.
    pub fn steps(&self) -> Vec<ExpandedStep> {
        (0..self.valid_len)
            .map(|i| ExpandedStep {
                item_id: self.item_ids[i] as usize,
                group_id: self.group_ids[i] as usize,
                response: self.responses[i] as u8,
                source_position: self.source_positions[i] as usize,
            })
            .collect()
    }

    pub fn from_steps(steps: &[ExpandedStep], m: usize) -> Window {
        assert!(steps.len() <= m);
        let pad = |f: &dyn Fn(&ExpandedStep) -> i64| -> Vec<i64> {
            let mut v: Vec<i64> = steps.iter().map(f).collect();
            v.resize(m, PAD);
            v
        };
        Window {
            item_ids: pad(&|s| s.item_id as i64),
            responses: pad(&|s| s.response as i64),
            group_ids: pad(&|s| s.group_id as i64),
            source_positions: pad(&|s| s.source_position as i64),
            valid_len: steps.len(),
        }
    }
}

/// Non-overlapping consecutive chunks of length `m`; the last one is padded.
pub fn window(steps: &[ExpandedStep], m: usize) -> Result<Vec<Window>> {
    if m < 2 {
        return Err(Error::invalid(format!("window length must be >= 2, got {m}")));
    }
    Ok(steps.chunks(m).map(|c| Window::from_steps(c, m)).collect())
}

pub fn window_all(sequences: &[ExpandedSequence], m: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in sequences {
        out.extend(window(&s.steps, m)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn seq(id: &str, n: usize) -> StudentSequence {
        StudentSequence::new(
            id,
            (0..n)
                .map(|i| Interaction::new(format!("q{i}"), &["k"], (i % 2) as u8, i as i64))
                .collect(),
        )
    }

    fn students(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| seq(&format!("s{i:04}"), 3)).collect())
    }

    #[test]
    fn filter_minimum_length() {
        let d = Dataset::new(vec![seq("two", 2), seq("three", 3)]);
        let f = filter(&d);
        let ids: Vec<_> = f.sequences().iter().map(|s| s.student_id.as_str()).collect();
        assert_eq!(ids, ["three"]);
    }

    #[test]
    fn filter_drops_rows_before_counting() {
        let mut s = seq("s", 3);
        s.interactions[1].response = None;
        let f = filter(&Dataset::new(vec![s]));
        assert!(f.sequences().is_empty());
    }

    #[test]
    fn filter_rebuilds_vocab() {
        let d = Dataset::new(vec![
            StudentSequence::new("short", vec![Interaction::new("only_here", &["kx"], 1, 0)]),
            seq("long", 3),
        ]);
        let f = filter(&d);
        assert!(f.question_vocab().index_of("only_here").is_none());
        assert!(f.kc_vocab().index_of("kx").is_none());
    }

    #[test]
    fn split_sizes() {
        let s = split_students(&students(100), 1).unwrap();
        assert_eq!(s.test_ids.len(), 20);
        assert!(s.folds.iter().all(|f| f.len() == 16));

        let s = split_students(&students(10), 1).unwrap();
        assert_eq!(s.test_ids.len(), 2);
        let sizes: Vec<_> = s.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 2, 1, 1]);
    }

    #[test]
    fn split_is_deterministic() {
        let d = students(37);
        assert_eq!(split_students(&d, 9).unwrap(), split_students(&d, 9).unwrap());
        assert_ne!(split_students(&d, 9).unwrap(), split_students(&d, 10).unwrap());
    }

    #[test]
    fn split_needs_six_students() {
        assert!(split_students(&students(5), 0).is_err());
        assert!(split_students(&students(6), 0).is_ok());
    }

    #[test]
    fn test_size_rounds_half_up() {
        assert_eq!(test_set_size(10), 2);
        assert_eq!(test_set_size(37), 7);
        assert_eq!(test_set_size(12), 2); // 2.4
        assert_eq!(test_set_size(13), 3); // 2.6
        assert_eq!(test_set_size(15), 3); // 3.0
        assert_eq!(test_set_size(1000), 200);
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let s = split_students(&students(20), 3).unwrap();
        s.save(&path).unwrap();
        assert_eq!(Split::load(&path).unwrap(), s);
    }

    fn multi_kc_dataset() -> Dataset {
        Dataset::new(vec![StudentSequence::new(
            "s",
            vec![
                Interaction::new("q6", &["k4", "k3"], 1, 0),
                Interaction::new("q1", &["k1"], 0, 1),
            ],
        )])
    }

    #[test]
    fn expansion_of_two_kc_question() {
        let d = multi_kc_dataset();
        let e = expand_to_kc(&d.sequences()[0], &d).unwrap();
        let k3 = d.kc_vocab().index_of("k3").unwrap();
        let k4 = d.kc_vocab().index_of("k4").unwrap();
        let k1 = d.kc_vocab().index_of("k1").unwrap();
        let got: Vec<_> = e.steps.iter().map(|s| (s.item_id, s.response, s.group_id)).collect();
        assert_eq!(got, [(k3, 1, 0), (k4, 1, 0), (k1, 0, 1)]);
        assert_eq!(e.steps[2].source_position, 1);
        assert_eq!(e.question_ids, ["q6", "q1"]);
        assert_eq!(e.group_ranges(), [0..2, 2..3]);
    }

    #[test]
    fn expansion_without_kc_info_uses_questions() {
        let d = Dataset::new(vec![StudentSequence::new(
            "s",
            vec![Interaction::new("b", &[], 1, 0), Interaction::new("a", &[], 0, 1)],
        )]);
        let e = expand_to_kc(&d.sequences()[0], &d).unwrap();
        let items: Vec<_> = e.steps.iter().map(|s| s.item_id).collect();
        assert_eq!(items, [1, 0]);
    }

    #[test]
    fn expansion_rejects_kc_less_question_in_kc_dataset() {
        let d = Dataset::new(vec![StudentSequence::new(
            "s",
            vec![Interaction::new("q1", &["k"], 1, 0), Interaction::new("q2", &[], 0, 1)],
        )]);
        assert!(expand_to_kc(&d.sequences()[0], &d).is_err());
    }

    fn steps(n: usize) -> Vec<ExpandedStep> {
        (0..n)
            .map(|i| ExpandedStep {
                item_id: i % 7,
                group_id: i,
                response: (i % 3 == 0) as u8,
                source_position: i,
            })
            .collect()
    }

    #[test]
    fn window_chunking() {
        let w = window(&steps(450), 200).unwrap();
        let lens: Vec<_> = w.iter().map(|w| w.valid_len).collect();
        assert_eq!(lens, [200, 200, 50]);
        assert!(w.iter().all(|w| w.len() == 200));
        assert!(w[2].item_ids[50..].iter().all(|&i| i == PAD));

        let w = window(&steps(120), 200).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].valid_len, 120);
        assert_eq!(w[0].item_ids.iter().filter(|&&i| i == PAD).count(), 80);

        let w = window(&steps(200), 200).unwrap();
        assert_eq!(w.len(), 1);
        assert!(!w[0].item_ids.contains(&PAD));

        assert!(window(&steps(5), 1).is_err());
    }

    proptest! {
        #[test]
        fn windows_concatenate_back(n in 0usize..500, m in 2usize..64) {
            let s = steps(n);
            let rebuilt: Vec<_> = window(&s, m).unwrap().iter().flat_map(Window::steps).collect();
            prop_assert_eq!(rebuilt, s);
        }

        #[test]
        fn split_partitions(n in 6usize..300, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let split = split_ids(ids.clone(), seed).unwrap();
            let mut all: Vec<String> = split.test_ids.clone();
            for f in &split.folds {
                all.extend(f.iter().cloned());
            }
            let unique: BTreeSet<_> = all.iter().cloned().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(unique, ids.into_iter().collect::<BTreeSet<_>>());
            prop_assert_eq!(split.test_ids.len(), test_set_size(n));
            let sizes: Vec<_> = split.folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn filter_is_idempotent(lens in proptest::collection::vec(0usize..6, 0..12), drop in 0usize..5) {
            let mut seqs: Vec<_> = lens.iter().enumerate().map(|(i, &n)| seq(&format!("s{i}"), n)).collect();
            if let Some(s) = seqs.first_mut() {
                if let Some(inter) = s.interactions.get_mut(drop) {
                    inter.timestamp = None;
                }
            }
            let once = filter(&Dataset::new(seqs));
            prop_assert_eq!(filter(&once), once);
        }

        #[test]
        fn single_kc_expansion_is_bijective(n in 1usize..60) {
            let d = Dataset::new(vec![seq("s", n)]);
            let e = expand_to_kc(&d.sequences()[0], &d).unwrap();
            prop_assert_eq!(e.steps.len(), n);
            prop_assert!(e.group_ranges().iter().all(|r| r.len() == 1));
        }
    }
}
