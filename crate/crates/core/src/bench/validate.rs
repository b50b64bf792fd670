use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::record::{MM4Record, PairGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    QuestionCount,
    OptionCount,
    AnswerIndex,
    PairGroupLayout,
    DuplicateOption,
    DuplicateImageId,
    AnswerBalance,
    ReversalIntegrity,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::QuestionCount => "question count ≠ 4",
            ViolationKind::OptionCount => "option count ≠ 4",
            ViolationKind::AnswerIndex => "answer index out of range",
            ViolationKind::PairGroupLayout => "pair groups not A,A,B,B",
            ViolationKind::DuplicateOption => "duplicate option",
            ViolationKind::DuplicateImageId => "duplicate image_id",
            ViolationKind::AnswerBalance => "answer-index imbalance",
            ViolationKind::ReversalIntegrity => "reversal pair mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub image_id: Option<String>,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub records: usize,
    pub questions: usize,
    pub answer_histogram: [usize; 4],
    /// Per record: (pair A intact, pair B intact).
    pub reversal_integrity: Vec<(bool, bool)>,
    pub violations: Vec<Violation>,
}

impl DatasetReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOptions {
    /// Largest allowed answer-index count as a multiple of the uniform count.
    pub balance_tolerance: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            balance_tolerance: 1.25,
        }
    }
}

/// Each question's answer text occurs in the other question's text.
fn pair_intact(rec: &MM4Record, a: usize, b: usize) -> bool {
    let (Some(qa), Some(qb)) = (rec.questions.get(a), rec.questions.get(b)) else {
        return false;
    };
    match (qa.answer(), qb.answer()) {
        (Some(ans_a), Some(ans_b)) => qb.text.contains(ans_a) && qa.text.contains(ans_b),
        _ => false,
    }
}

pub fn validate_dataset(records: &[MM4Record], opts: ValidateOptions) -> DatasetReport {
    let mut violations = Vec::new();
    let mut hist = [0usize; 4];
    let mut questions = 0;
    let mut seen = HashSet::new();
    let mut integrity = Vec::with_capacity(records.len());
    let mut flag = |id: &str, kind, detail: String| {
        violations.push(Violation {
            image_id: Some(id.to_string()),
            kind,
            detail,
        })
    };
    for rec in records {
        let id = rec.image_id.as_str();
        if !seen.insert(id) {
            flag(id, ViolationKind::DuplicateImageId, id.to_string());
        }
        if rec.questions.len() != 4 {
            flag(
                id,
                ViolationKind::QuestionCount,
                format!("{} questions", rec.questions.len()),
            );
        }
        let layout: Vec<PairGroup> = rec.questions.iter().map(|q| q.pair_group).collect();
        if rec.questions.len() == 4 && layout != [PairGroup::A, PairGroup::A, PairGroup::B, PairGroup::B]
        {
            flag(id, ViolationKind::PairGroupLayout, format!("{layout:?}"));
        }
        for (qi, q) in rec.questions.iter().enumerate() {
            questions += 1;
            if q.options.len() != 4 {
                flag(
                    id,
                    ViolationKind::OptionCount,
                    format!("question {qi}: {} options", q.options.len()),
                );
            }
            if q.answer_index >= q.options.len().min(4) {
                flag(
                    id,
                    ViolationKind::AnswerIndex,
                    format!("question {qi}: index {}", q.answer_index),
                );
            } else {
                hist[q.answer_index] += 1;
            }
            let distinct: HashSet<&str> = q.options.iter().map(String::as_str).collect();
            if distinct.len() != q.options.len() {
                flag(
                    id,
                    ViolationKind::DuplicateOption,
                    format!("question {qi}: {:?}", q.options),
                );
            }
        }
        let flags = (pair_intact(rec, 0, 1), pair_intact(rec, 2, 3));
        if rec.questions.len() == 4 && !(flags.0 && flags.1) {
            flag(
                id,
                ViolationKind::ReversalIntegrity,
                format!("pair A intact: {}, pair B intact: {}", flags.0, flags.1),
            );
        }
        integrity.push(flags);
    }
    let counted: usize = hist.iter().sum();
    if counted > 0 {
        let uniform = counted as f64 / 4.0;
        let max = *hist.iter().max().expect("4 bins");
        if max as f64 > opts.balance_tolerance * uniform {
            violations.push(Violation {
                image_id: None,
                kind: ViolationKind::AnswerBalance,
                detail: format!("histogram {hist:?} exceeds {}x uniform", opts.balance_tolerance),
            });
        }
    }
    DatasetReport {
        records: records.len(),
        questions,
        answer_histogram: hist,
        reversal_integrity: integrity,
        violations,
    }
}
