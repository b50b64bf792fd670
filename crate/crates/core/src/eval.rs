//! Grading, the at-least-n-of-four score and its random-guessing baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bench::{Dataset, MM4Record};
use crate::error::{Error, Result};
use crate::model::{forward, predict, Cached, Example, Model, Tap, NUM_OPTIONS};
use crate::params::Binder;
use crate::rng::SplitMix64;
use crate::tensor::Tape;
use crate::training::par_map;
use crate::visenc::static_features;

pub const QUESTIONS_PER_IMAGE: usize = 4;

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub image_id: String,
    pub question_index: usize,
    pub choice: usize,
}

/// Chosen option per `(image_id, question position)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionSet {
    entries: BTreeMap<(String, usize), usize>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_id: &str, question_index: usize, choice: usize) -> Result<()> {
        if question_index >= QUESTIONS_PER_IMAGE {
            return Err(Error::Index {
                index: question_index,
                len: QUESTIONS_PER_IMAGE,
            });
        }
        if choice >= NUM_OPTIONS {
            return Err(Error::Index {
                index: choice,
                len: NUM_OPTIONS,
            });
        }
        let key = (image_id.to_string(), question_index);
        if self.entries.contains_key(&key) {
            return Err(Error::Data(format!(
                "duplicate prediction for {image_id} question {question_index}"
            )));
        }
        self.entries.insert(key, choice);
        Ok(())
    }

    pub fn get(&self, image_id: &str, question_index: usize) -> Option<usize> {
        self.entries.get(&(image_id.to_string(), question_index)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Prediction> + '_ {
        self.entries.iter().map(|((id, q), &c)| Prediction {
            image_id: id.clone(),
            question_index: *q,
            choice: c,
        })
    }

    /// Answers copied from the dataset.
    pub fn oracle(records: &[MM4Record]) -> Result<Self> {
        let mut p = Self::new();
        for r in records {
            for (i, q) in r.questions.iter().enumerate() {
                p.insert(&r.image_id, i, q.answer_index)?;
            }
        }
        Ok(p)
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for p in self.iter() {
            serde_json::to_writer(&mut *w, &p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut set = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Prediction = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
            set.insert(&p.image_id, p.question_index, p.choice)
                .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        }
        Ok(set)
    }
}

/// Per-image correctness of the four answers, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessMatrix {
    pub rows: Vec<(String, [bool; 4])>,
}

impl CorrectnessMatrix {
    pub fn from_rows(rows: Vec<[bool; 4]>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, r)| (format!("img_{i:04}"), r))
                .collect(),
        }
    }

    pub fn num_images(&self) -> usize {
        self.rows.len()
    }

    pub fn question_accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let hits: usize = self.rows.iter().map(|(_, r)| r.iter().filter(|&&b| b).count()).sum();
        hits as f64 / (4 * self.rows.len()) as f64
    }
}

/// Grading result plus warnings for predictions that match nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graded {
    pub matrix: CorrectnessMatrix,
    pub warnings: Vec<String>,
}

/// Missing predictions count as wrong; predictions for unknown images or
/// positions are reported and ignored.
pub fn grade_predictions(preds: &PredictionSet, records: &[MM4Record]) -> Graded {
    let mut rows = Vec::with_capacity(records.len());
    let mut known: BTreeSet<(String, usize)> = BTreeSet::new();
    for r in records {
        let mut row = [false; 4];
        for (i, q) in r.questions.iter().enumerate().take(QUESTIONS_PER_IMAGE) {
            known.insert((r.image_id.clone(), i));
            row[i] = preds.get(&r.image_id, i) == Some(q.answer_index);
        }
        rows.push((r.image_id.clone(), row));
    }
    let warnings = preds
        .entries
        .keys()
        .filter(|k| !known.contains(*k))
        .map(|(id, q)| format!("prediction for unknown {id} question {q} ignored"))
        .collect();
    Graded {
        matrix: CorrectnessMatrix { rows },
        warnings,
    }
}

fn check_n(n: usize, q: usize) -> Result<()> {
    if n == 0 || n > q {
        return Err(Error::Parameter(format!("n must be in 1..={q}, got {n}")));
    }
    Ok(())
}

/// Number of images with at least `n` correct answers.
pub fn mm4_score(matrix: &CorrectnessMatrix, n: usize) -> Result<usize> {
    check_n(n, QUESTIONS_PER_IMAGE)?;
    Ok(matrix
        .rows
        .iter()
        .filter(|(_, r)| r.iter().filter(|&&b| b).count() >= n)
        .count())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Expected score of uniform guessing:
/// `images · P[Binomial(questions, 1/options) ≥ n]`.
pub fn random_baseline(n: usize, num_images: usize, num_options: usize, num_questions: usize) -> Result<f64> {
    check_n(n, num_questions)?;
    if num_options == 0 {
        return Err(Error::Parameter("num_options must be positive".into()));
    }
    let p = 1.0 / num_options as f64;
    let tail: f64 = (n..=num_questions)
        .map(|k| binomial(num_questions, k) * p.powi(k as i32) * (1.0 - p).powi((num_questions - k) as i32))
        .sum();
    Ok(num_images as f64 * tail)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Simulated uniform guessing over `num_images` four-option, four-question
/// images.
pub fn monte_carlo_baseline(n: usize, num_images: usize, trials: usize, seed: u64) -> Result<MonteCarlo> {
    check_n(n, QUESTIONS_PER_IMAGE)?;
    if trials == 0 {
        return Err(Error::Parameter("trials must be >= 1".into()));
    }
    let mut rng = SplitMix64::named(seed, "eval.montecarlo");
    let mut scores = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut s = 0usize;
        for _ in 0..num_images {
            let hits = (0..QUESTIONS_PER_IMAGE)
                .filter(|_| rng.below(NUM_OPTIONS as u64) == 0)
                .count();
            s += (hits >= n) as usize;
        }
        scores.push(s as f64);
    }
    let mean = scores.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 {
        scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64
    } else {
        0.0
    };
    let std_dev = var.sqrt();
    Ok(MonteCarlo {
        mean,
        std_dev,
        std_error: std_dev / (trials as f64).sqrt(),
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Accuracy per question category over all questions.
pub fn category_breakdown(matrix: &CorrectnessMatrix, records: &[MM4Record]) -> BTreeMap<String, CategoryStats> {
    let rows: BTreeMap<&str, &[bool; 4]> = matrix.rows.iter().map(|(id, r)| (id.as_str(), r)).collect();
    let mut out: BTreeMap<String, CategoryStats> = BTreeMap::new();
    for rec in records {
        let row = rows.get(rec.image_id.as_str());
        for (i, q) in rec.questions.iter().enumerate().take(QUESTIONS_PER_IMAGE) {
            let e = out.entry(q.category.clone()).or_insert(CategoryStats {
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
            e.total += 1;
            e.correct += row.is_some_and(|r| r[i]) as usize;
        }
    }
    for s in out.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    out
}

/// `n,score,random_baseline` for n = 1..4.
pub fn score_csv(matrix: &CorrectnessMatrix) -> Result<String> {
    let mut s = String::from("n,score,random_baseline\n");
    for n in 1..=QUESTIONS_PER_IMAGE {
        let _ = writeln!(
            s,
            "{n},{},{}",
            mm4_score(matrix, n)?,
            random_baseline(n, matrix.num_images(), NUM_OPTIONS, QUESTIONS_PER_IMAGE)?
        );
    }
    Ok(s)
}

pub fn category_csv(table: &BTreeMap<String, CategoryStats>) -> String {
    let mut s = String::from("category,correct,total,accuracy\n");
    for (c, st) in table {
        let _ = writeln!(s, "{c},{},{},{}", st.correct, st.total, st.accuracy);
    }
    s
}

/// Predicted option for every question of every record.
pub fn predict_dataset(model: &Model, ds: &Dataset, threads: usize) -> Result<PredictionSet> {
    let texts = ds
        .records
        .iter()
        .flat_map(|r| &r.questions)
        .flat_map(|q| std::iter::once(q.text.as_str()).chain(q.options.iter().map(String::as_str)));
    let cache = model.text_cache(texts)?;
    let idx: Vec<usize> = (0..ds.records.len()).collect();
    let rows = par_map(&idx, threads, |&r| -> Result<Vec<usize>> {
        let rec = &ds.records[r];
        let img = &ds.images[r];
        let y_0 = static_features(&model.params, img, &model.config)?.tokens;
        let cached = Cached {
            text: Some(&cache),
            y_0: Some(&y_0),
        };
        rec.questions
            .iter()
            .map(|q| {
                let mut tape = Tape::new();
                let mut binder = Binder::inference(&model.params);
                let ex = Example {
                    image: img,
                    question: &q.text,
                    options: &q.options,
                };
                let out = forward(&mut tape, &mut binder, &model.config, &model.vocab, &ex, &cached, Tap::None)?;
                predict(tape.value(out.logits).data())
            })
            .collect()
    });
    let mut set = PredictionSet::new();
    for (rec, choices) in ds.records.iter().zip(rows) {
        for (i, c) in choices?.into_iter().enumerate() {
            set.insert(&rec.image_id, i, c)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_dataset, GenConfig};
    use proptest::prelude::*;

    fn records(n: usize) -> Vec<MM4Record> {
        generate_dataset(&GenConfig {
            images: n,
            ..GenConfig::default()
        })
        .unwrap()
        .records
    }

    #[test]
    fn closed_form_baselines() {
        let b: Vec<f64> = (1..=4).map(|n| random_baseline(n, 180, 4, 4).unwrap()).collect();
        assert_eq!(b, vec![123.046875, 47.109375, 9.140625, 0.703125]);
        assert!(random_baseline(0, 180, 4, 4).is_err());
        assert!(random_baseline(5, 180, 4, 4).is_err());
    }

    #[test]
    fn grading_oracle_empty_and_unknown() {
        let recs = records(6);
        let all = grade_predictions(&PredictionSet::oracle(&recs).unwrap(), &recs);
        assert!(all.matrix.rows.iter().all(|(_, r)| r.iter().all(|&b| b)));
        let none = grade_predictions(&PredictionSet::new(), &recs);
        assert!(none.matrix.rows.iter().all(|(_, r)| r.iter().all(|&b| !b)));
        let mut p = PredictionSet::new();
        for r in &recs {
            p.insert(&r.image_id, 2, r.questions[2].answer_index).unwrap();
        }
        p.insert("img_9999", 0, 1).unwrap();
        let g = grade_predictions(&p, &recs);
        assert!(g.matrix.rows.iter().all(|(_, r)| r.iter().filter(|&&b| b).count() == 1));
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn prediction_set_contracts() {
        let mut p = PredictionSet::new();
        assert!(p.insert("a", 4, 0).is_err());
        assert!(p.insert("a", 0, 4).is_err());
        p.insert("a", 0, 1).unwrap();
        assert!(p.insert("a", 0, 2).is_err());
        let mut buf = Vec::new();
        p.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"image_id\":\"a\",\"question_index\":0,\"choice\":1}\n");
        assert_eq!(PredictionSet::read_jsonl(&buf[..]).unwrap(), p);
    }

    #[test]
    fn exact_two_correct_rows() {
        let m = CorrectnessMatrix::from_rows(vec![[true, false, true, false]; 180]);
        assert_eq!(mm4_score(&m, 2).unwrap(), 180);
        assert_eq!(mm4_score(&m, 3).unwrap(), 0);
        assert!(mm4_score(&m, 0).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        for n in [1, 4] {
            let mc = monte_carlo_baseline(n, 180, 10_000, 0).unwrap();
            let exact = random_baseline(n, 180, 4, 4).unwrap();
            assert!((mc.mean - exact).abs() <= 3.0 * mc.std_error, "n={n} {mc:?}");
        }
        let a = monte_carlo_baseline(2, 180, 1, 9).unwrap();
        assert_eq!(a, monte_carlo_baseline(2, 180, 1, 9).unwrap());
    }

    #[test]
    fn categories_partition_questions() {
        let recs = records(20);
        let mut rng = SplitMix64::new(4);
        let m = CorrectnessMatrix {
            rows: recs
                .iter()
                .map(|r| (r.image_id.clone(), [0; 4].map(|_| rng.below(2) == 0)))
                .collect(),
        };
        let t = category_breakdown(&m, &recs);
        let total: usize = t.values().map(|s| s.total).sum();
        let weighted: f64 = t.values().map(|s| s.accuracy * s.total as f64).sum::<f64>() / total as f64;
        assert!((weighted - m.question_accuracy()).abs() < 1e-12);
        assert!(t.values().all(|s| (0.0..=1.0).contains(&s.accuracy)));
        let all = grade_predictions(&PredictionSet::oracle(&recs).unwrap(), &recs).matrix;
        assert!(category_breakdown(&all, &recs).values().all(|s| s.accuracy == 1.0));
    }

    #[test]
    fn score_report_for_perfect_predictions() {
        let m = CorrectnessMatrix::from_rows(vec![[true; 4]; 180]);
        assert_eq!(
            score_csv(&m).unwrap(),
            "n,score,random_baseline\n1,180,123.046875\n2,180,47.109375\n3,180,9.140625\n4,180,0.703125\n"
        );
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<[bool; 4]>> {
        prop::collection::vec(prop::array::uniform4(any::<bool>()), 0..60)
    }

    proptest! {
        #[test]
        fn scores_monotone_and_bounded(rows in matrix_strategy()) {
            let m = CorrectnessMatrix::from_rows(rows.clone());
            let s: Vec<usize> = (1..=4).map(|n| mm4_score(&m, n).unwrap()).collect();
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(s[0] <= rows.len());
            prop_assert_eq!(s[0] == rows.len(), rows.iter().all(|r| r.iter().any(|&b| b)));
        }

        #[test]
        fn scores_permutation_invariant(rows in matrix_strategy(), seed in any::<u64>()) {
            let m = CorrectnessMatrix::from_rows(rows.clone());
            let mut rng = SplitMix64::new(seed);
            let mut shuffled = rows.clone();
            rng.shuffle(&mut shuffled);
            for r in &mut shuffled {
                rng.shuffle(r);
            }
            let p = CorrectnessMatrix::from_rows(shuffled);
            for n in 1..=4 {
                prop_assert_eq!(mm4_score(&m, n).unwrap(), mm4_score(&p, n).unwrap());
            }
        }

        #[test]
        fn baseline_monotone_and_linear(images in 1usize..1000) {
            let b: Vec<f64> = (1..=4).map(|n| random_baseline(n, images, 4, 4).unwrap()).collect();
            prop_assert!(b.windows(2).all(|w| w[0] > w[1]));
            let twice = random_baseline(2, 2 * images, 4, 4).unwrap();
            prop_assert!((twice - 2.0 * b[1]).abs() < 1e-9);
        }
    }
}
