//! In-memory data model: interactions, student sequences and vocabularies.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

/// One student-question event.
///
/// Missing fields are representable so that raw logs can be loaded before
/// filtering: an empty `question_id`, `response == None` or
/// `timestamp == None` all mark the interaction as incomplete.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub question_id: String,
    /// Ordered KC identifiers; empty means no KC information.
    pub kc_ids: Vec<String>,
    pub response: Option<u8>,
    /// Milliseconds. Only used as an ordering key.
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(
        question_id: impl Into<String>,
        kc_ids: &[&str],
        response: u8,
        timestamp: i64,
    ) -> Self {
        Interaction {
            question_id: question_id.into(),
            kc_ids: kc_ids.iter().map(|s| s.to_string()).collect(),
            response: Some(response),
            timestamp: Some(timestamp),
        }
    }

    /// True when all four fields of the tuple are present. KC ids may be empty.
    pub fn is_complete(&self) -> bool {
        !self.question_id.is_empty() && self.response.is_some() && self.timestamp.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student_id: String,
    pub interactions: Vec<Interaction>,
}

impl StudentSequence {
    pub fn new(student_id: impl Into<String>, interactions: Vec<Interaction>) -> Self {
        StudentSequence {
            student_id: student_id.into(),
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Stable chronological sort; ties keep their existing (row) order.
    pub fn sort_chronologically(&mut self) {
        self.interactions.sort_by_key(|i| i.timestamp);
    }
}

/// Dense index assignment for opaque string identifiers, in sorted id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = ids.into_iter().map(Into::into).collect();
        let ids: Vec<String> = sorted.into_iter().collect();
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// A collection of student sequences plus derived vocabularies.
///
/// Immutable once built; every constructor rebuilds the vocabularies and the
/// question to KC map from the interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    sequences: Vec<StudentSequence>,
    question_kc_map: BTreeMap<String, BTreeSet<String>>,
    question_vocab: Vocab,
    kc_vocab: Vocab,
}

impl Dataset {
    pub fn new(sequences: Vec<StudentSequence>) -> Self {
        let mut question_kc_map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for inter in sequences.iter().flat_map(|s| &s.interactions) {
            if inter.question_id.is_empty() {
                continue;
            }
            question_kc_map
                .entry(inter.question_id.clone())
                .or_default()
                .extend(inter.kc_ids.iter().cloned());
        }
        let question_vocab = Vocab::from_ids(question_kc_map.keys().cloned());
        let kc_vocab = Vocab::from_ids(question_kc_map.values().flatten().cloned());
        Dataset {
            sequences,
            question_kc_map,
            question_vocab,
            kc_vocab,
        }
    }

    pub fn empty() -> Self {
        Dataset::new(Vec::new())
    }

    pub fn sequences(&self) -> &[StudentSequence] {
        &self.sequences
    }

    pub fn into_sequences(self) -> Vec<StudentSequence> {
        self.sequences
    }

    pub fn question_kc_map(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.question_kc_map
    }

    pub fn question_vocab(&self) -> &Vocab {
        &self.question_vocab
    }

    pub fn kc_vocab(&self) -> &Vocab {
        &self.kc_vocab
    }

    /// Whether any interaction carries KC ids. Without KC info, questions are the items.
    pub fn has_kc_info(&self) -> bool {
        !self.kc_vocab.is_empty()
    }

    /// Size of the item space models are built over.
    pub fn num_items(&self) -> usize {
        if self.has_kc_info() {
            self.kc_vocab.len()
        } else {
            self.question_vocab.len()
        }
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(StudentSequence::len).sum()
    }

    pub fn sequence(&self, student_id: &str) -> Option<&StudentSequence> {
        self.sequences.iter().find(|s| s.student_id == student_id)
    }

    /// Sub-dataset restricted to the given students, keeping this dataset's order.
    /// Vocabularies are inherited so item indices stay comparable.
    pub fn subset<'a, I>(&self, student_ids: I) -> Dataset
    where
        I: IntoIterator<Item = &'a String>,
    {
        let keep: BTreeSet<&String> = student_ids.into_iter().collect();
        Dataset {
            sequences: self
                .sequences
                .iter()
                .filter(|s| keep.contains(&s.student_id))
                .cloned()
                .collect(),
            question_kc_map: self.question_kc_map.clone(),
            question_vocab: self.question_vocab.clone(),
            kc_vocab: self.kc_vocab.clone(),
        }
    }

    /// Questions whose interactions disagree on the KC set. The map takes their union.
    pub fn kc_conflicts(&self) -> Vec<String> {
        let mut seen: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        let mut conflicts = BTreeSet::new();
        for inter in self.sequences.iter().flat_map(|s| &s.interactions) {
            let set: BTreeSet<&str> = inter.kc_ids.iter().map(String::as_str).collect();
            match seen.get(inter.question_id.as_str()) {
                Some(prev) if *prev != set => {
                    conflicts.insert(inter.question_id.clone());
                }
                Some(_) => {}
                None => {
                    seen.insert(&inter.question_id, set);
                }
            }
        }
        conflicts.into_iter().collect()
    }

    pub fn stats(&self) -> DatasetStats {
        compute_stats(self)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// Mean number of KCs per question, kept as an exact ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcRatio {
    pub kc_links: usize,
    pub questions: usize,
}

impl KcRatio {
    pub fn value(&self) -> f64 {
        self.kc_links as f64 / self.questions as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub interactions: usize,
    pub sequences: usize,
    pub questions: usize,
    pub kcs: usize,
    /// Absent when no question carries KC info.
    pub avg_kcs_per_question: Option<KcRatio>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "interactions={} sequences={} questions={} kcs={} avg_kcs_per_question=",
            self.interactions, self.sequences, self.questions, self.kcs
        )?;
        match self.avg_kcs_per_question {
            Some(r) => write!(f, "{:.4}", r.value()),
            None => write!(f, "-"),
        }
    }
}

/// Counts over distinct ids. The KC average is taken over distinct questions
/// that have at least one KC.
pub fn compute_stats(dataset: &Dataset) -> DatasetStats {
    let mut questions = BTreeSet::new();
    let mut kcs = BTreeSet::new();
    for inter in dataset.sequences.iter().flat_map(|s| &s.interactions) {
        questions.insert(inter.question_id.as_str());
        kcs.extend(inter.kc_ids.iter().map(String::as_str));
    }
    let (kc_links, with_kcs) = dataset
        .question_kc_map
        .values()
        .filter(|set| !set.is_empty())
        .fold((0, 0), |(links, n), set| (links + set.len(), n + 1));
    DatasetStats {
        interactions: dataset.num_interactions(),
        sequences: dataset.sequences.len(),
        questions: questions.len(),
        kcs: kcs.len(),
        avg_kcs_per_question: (with_kcs > 0).then_some(KcRatio {
            kc_links,
            questions: with_kcs,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    InvalidResponse(u8),
    MissingField(&'static str),
    DuplicateKc(String),
    /// The interaction's KC ids are not a subset of the question's mapped set.
    MappingInconsistent { question_id: String, kc_id: String },
    NotInVocab(String),
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub student_id: String,
    /// Position within the student's sequence.
    pub position: usize,
    pub kind: ViolationKind,
}

/// Result of [`validate`]. Duplicate rows are reported but do not make the
/// dataset invalid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// (student, position) of rows identical to the row before them.
    pub duplicate_rows: Vec<(String, usize)>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(dataset: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    for seq in &dataset.sequences {
        let mut push = |position, kind| {
            report.violations.push(Violation {
                student_id: seq.student_id.clone(),
                position,
                kind,
            })
        };
        let mut prev_ts: Option<i64> = None;
        for (pos, inter) in seq.interactions.iter().enumerate() {
            match inter.response {
                None => push(pos, ViolationKind::MissingField("response")),
                Some(r) if r > 1 => push(pos, ViolationKind::InvalidResponse(r)),
                Some(_) => {}
            }
            match inter.timestamp {
                None => push(pos, ViolationKind::MissingField("timestamp")),
                Some(ts) => {
                    if prev_ts.is_some_and(|p| ts < p) {
                        push(pos, ViolationKind::OutOfOrder);
                    }
                    prev_ts = Some(ts);
                }
            }
            if inter.question_id.is_empty() {
                push(pos, ViolationKind::MissingField("question_id"));
            } else if dataset.question_vocab.index_of(&inter.question_id).is_none() {
                push(pos, ViolationKind::NotInVocab(inter.question_id.clone()));
            }
            let mut seen = BTreeSet::new();
            for kc in &inter.kc_ids {
                if !seen.insert(kc) {
                    push(pos, ViolationKind::DuplicateKc(kc.clone()));
                }
                if dataset.kc_vocab.index_of(kc).is_none() {
                    push(pos, ViolationKind::NotInVocab(kc.clone()));
                }
                let mapped = dataset
                    .question_kc_map
                    .get(&inter.question_id)
                    .is_some_and(|set| set.contains(kc));
                if !mapped {
                    push(
                        pos,
                        ViolationKind::MappingInconsistent {
                            question_id: inter.question_id.clone(),
                            kc_id: kc.clone(),
                        },
                    );
                }
            }
            if pos > 0 && seq.interactions[pos - 1] == *inter {
                report.duplicate_rows.push((seq.student_id.clone(), pos));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        Dataset::new(vec![
            StudentSequence::new(
                "s1",
                vec![
                    Interaction::new("q1", &["a", "b"], 1, 10),
                    Interaction::new("q2", &["a"], 0, 20),
                ],
            ),
            StudentSequence::new("s2", vec![Interaction::new("q1", &["a", "b"], 0, 5)]),
        ])
    }

    #[test]
    fn stats_hand_count() {
        let stats = compute_stats(&fixture());
        assert_eq!(stats.interactions, 3);
        assert_eq!(stats.sequences, 2);
        assert_eq!(stats.questions, 2);
        assert_eq!(stats.kcs, 2);
        let avg = stats.avg_kcs_per_question.unwrap();
        assert_eq!((avg.kc_links, avg.questions), (3, 2));
        assert_eq!(avg.value(), 1.5);
    }

    #[test]
    fn stats_empty() {
        let stats = compute_stats(&Dataset::empty());
        assert_eq!(
            (stats.interactions, stats.sequences, stats.questions, stats.kcs),
            (0, 0, 0, 0)
        );
        assert!(stats.avg_kcs_per_question.is_none());
    }

    #[test]
    fn stats_without_kc_info_has_no_average() {
        let d = Dataset::new(vec![StudentSequence::new(
            "s",
            vec![Interaction::new("q1", &[], 1, 1)],
        )]);
        assert!(!d.has_kc_info());
        assert_eq!(d.num_items(), 1);
        assert!(d.stats().avg_kcs_per_question.is_none());
    }

    #[test]
    fn valid_fixture_has_empty_report() {
        let report = validate(&fixture());
        assert!(report.is_valid(), "{report:?}");
        assert!(report.duplicate_rows.is_empty());
    }

    #[test]
    fn invalid_response_is_reported_at_its_row() {
        let mut seqs = fixture().into_sequences();
        seqs[0].interactions[1].response = Some(2);
        let report = validate(&Dataset::new(seqs));
        assert_eq!(
            report.violations,
            vec![Violation {
                student_id: "s1".into(),
                position: 1,
                kind: ViolationKind::InvalidResponse(2),
            }]
        );
    }

    #[test]
    fn kc_outside_question_map_is_inconsistent() {
        // Build a valid dataset, then tamper with one interaction after the
        // map is fixed so its KC set escapes the mapped entry.
        let mut d = fixture();
        d.sequences[0].interactions[1].kc_ids = vec!["b".into()];
        let report = validate(&d);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(
            report.violations[0].kind,
            ViolationKind::MappingInconsistent {
                question_id: "q2".into(),
                kc_id: "b".into()
            }
        );
    }

    #[test]
    fn duplicate_kc_and_missing_fields() {
        let mut inter = Interaction::new("q1", &["a", "a"], 1, 1);
        inter.timestamp = None;
        let d = Dataset::new(vec![StudentSequence::new("s", vec![inter])]);
        let kinds: Vec<_> = validate(&d).violations.into_iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::DuplicateKc("a".into())));
        assert!(kinds.contains(&ViolationKind::MissingField("timestamp")));
    }

    #[test]
    fn duplicate_rows_are_kept_and_flagged() {
        let row = Interaction::new("q1", &["a"], 1, 7);
        let d = Dataset::new(vec![StudentSequence::new("s", vec![row.clone(), row])]);
        assert_eq!(d.num_interactions(), 2);
        let report = validate(&d);
        assert!(report.is_valid());
        assert_eq!(report.duplicate_rows, vec![("s".to_string(), 1)]);
    }

    #[test]
    fn single_kc_questions_average_exactly_one() {
        let d = Dataset::new(vec![StudentSequence::new(
            "s",
            (0..20)
                .map(|i| Interaction::new(format!("q{i}"), &[&format!("k{}", i % 3)], 1, i))
                .collect(),
        )]);
        assert_eq!(d.stats().avg_kcs_per_question.unwrap().value(), 1.0);
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let d = fixture();
        let mut rev = d.sequences().to_vec();
        rev.reverse();
        assert_eq!(compute_stats(&d), compute_stats(&Dataset::new(rev)));
    }

    #[test]
    fn vocab_is_sorted_and_dense() {
        let v = Vocab::from_ids(["c", "a", "b", "a"]);
        assert_eq!(v.ids(), ["a", "b", "c"]);
        assert_eq!(v.index_of("c"), Some(2));
        assert_eq!(v.id(0), Some("a"));
    }
}
