//! Contrastive backbone pretraining, staged multiple-choice training,
//! AdamW with warmup plus cosine decay, and checkpoints.

mod checkpoint;
mod contrastive;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use contrastive::{contrastive_loss, pretrain_contrastive, MAX_LOGIT_SCALE};
pub use optim::{adamw_step, AdamHyper, OptimizerState};
pub use schedule::{lr_at, warmup_steps};

use crate::bench::Dataset;
use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::model::{forward, predict, trainable_params, Cached, Example, Model, Tap, TextCache};
use crate::params::{Binder, ParamStore};
use crate::rng::{derive_seed, named_seed, SplitMix64};
use crate::tensor::{Tape, Tensor};
use crate::textenc::TEXT_PREFIX;
use crate::visenc::{static_features, VIS_PREFIX};

/// One optimisation step's record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss,accuracy,lr";

pub fn metrics_csv(history: &[StepMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(s, "{},{},{},{}", m.step, m.loss, m.accuracy, m.lr);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    /// Worker threads for per-example gradients. Results are reduced in
    /// example order, so the thread count never changes the output.
    pub threads: usize,
    /// Stop once the optimizer has taken this many steps in total.
    pub stop_after: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            stop_after: None,
        }
    }
}

/// Worker threads from `IGVLM_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("IGVLM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Item indices of the minibatch for `step`: consecutive slices of a
/// sequence of per-epoch permutations, each seeded by its epoch index, so
/// any step can be reproduced without replaying earlier ones.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64, stream: &str) -> Vec<usize> {
    let base = named_seed(seed, stream);
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let perm = SplitMix64::new(derive_seed(base, epoch as u64)).permutation(n);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[pos % n]);
        pos += 1;
    }
    out
}

fn sum_into(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign_scaled(&g, 1.0),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Run `work` over `items` on up to `threads` scoped workers and return the
/// results in item order.
pub(crate) fn par_map<T, R, F>(items: &[T], threads: usize, work: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&work).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&work).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

struct ExampleGrad {
    loss: f64,
    correct: bool,
    grads: BTreeMap<String, Tensor>,
}

/// Flattened `(record, question)` pairs of a dataset.
pub fn question_refs(ds: &Dataset) -> Vec<(usize, usize)> {
    ds.records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| (0..rec.questions.len()).map(move |q| (r, q)))
        .collect()
}

/// Caches for whatever the stage leaves frozen: text features when the
/// text encoder is frozen, static tokens when the backbone is.
pub struct StageCaches {
    pub text: Option<TextCache>,
    pub y_0: Option<Vec<Tensor>>,
}

impl StageCaches {
    pub fn build(model: &Model, ds: &Dataset, trainable: &std::collections::BTreeSet<String>) -> Result<Self> {
        let text_frozen = !trainable.iter().any(|n| n.starts_with(TEXT_PREFIX));
        let vis_frozen = !trainable.iter().any(|n| n.starts_with(VIS_PREFIX));
        let text = if text_frozen {
            let texts = ds
                .records
                .iter()
                .flat_map(|r| &r.questions)
                .flat_map(|q| std::iter::once(q.text.as_str()).chain(q.options.iter().map(String::as_str)));
            Some(model.text_cache(texts)?)
        } else {
            None
        };
        let y_0 = if vis_frozen {
            Some(
                ds.images
                    .iter()
                    .map(|img| Ok(static_features(&model.params, img, &model.config)?.tokens))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { text, y_0 })
    }

    pub fn cached(&self, image: usize) -> Cached<'_> {
        Cached {
            text: self.text.as_ref(),
            y_0: self.y_0.as_ref().map(|v| &v[image]),
        }
    }
}

fn example_grad(
    model: &Model,
    params: &ParamStore,
    trainable: &std::collections::BTreeSet<String>,
    ds: &Dataset,
    caches: &StageCaches,
    (r, q): (usize, usize),
) -> Result<ExampleGrad> {
    let rec = &ds.records[r];
    let question = &rec.questions[q];
    let ex = Example {
        image: &ds.images[r],
        question: &question.text,
        options: &question.options,
    };
    let mut tape = Tape::new();
    let mut binder = Binder::training(params, trainable);
    let out = forward(&mut tape, &mut binder, &model.config, &model.vocab, &ex, &caches.cached(r), Tap::None)?;
    let loss = tape.cross_entropy(out.logits, &[question.answer_index])?;
    let correct = predict(tape.value(out.logits).data()).map(|p| p == question.answer_index);
    let lv = tape.value(loss).item();
    tape.backward(loss)?;
    Ok(ExampleGrad {
        loss: lv,
        correct: correct.unwrap_or(false),
        grads: binder.grads(&tape),
    })
}

/// Stage 1 or 2 multiple-choice training from the optimizer's current step
/// up to `cfg.total_steps`. Only `trainable_params(stage)` change; the rest
/// are marked frozen in the store.
pub fn train_stage(
    model: &mut Model,
    ds: &Dataset,
    cfg: &StageConfig,
    state: &mut OptimizerState,
    opts: &TrainOptions,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if !(1..=2).contains(&cfg.stage) {
        return Err(Error::Parameter(format!(
            "train_stage runs stages 1 and 2, got {}",
            cfg.stage
        )));
    }
    let refs = question_refs(ds);
    if refs.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    let part = trainable_params(&model.params, cfg.stage, &model.config)?;
    model.params.set_frozen(part.frozen.iter().cloned());
    let caches = StageCaches::build(model, ds, &part.trainable)?;
    let hp = AdamHyper::default();
    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut history = Vec::new();
    let mut step = state.step as usize;
    while step < end {
        let idx = batch_indices(refs.len(), cfg.batch_size, step, cfg.seed, "train.batches");
        let items: Vec<(usize, usize)> = idx.iter().map(|&i| refs[i]).collect();
        let results = {
            let params = &model.params;
            let m = &*model;
            let c = &caches;
            par_map(&items, opts.threads, |&item| {
                example_grad(m, params, &part.trainable, ds, c, item)
            })
        };
        let mut grads = BTreeMap::new();
        let (mut loss, mut correct) = (0.0, 0usize);
        for r in results {
            let r = r?;
            loss += r.loss;
            correct += r.correct as usize;
            sum_into(&mut grads, r.grads);
        }
        let b = items.len() as f64;
        loss /= b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        for name in &part.trainable {
            let shape = model.params.get(name)?.shape().to_vec();
            let g = grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            *g = g.map(|v| v / b);
        }
        let lr = lr_at(step, cfg)?;
        state.apply(&mut model.params, &grads, lr, cfg.weight_decay, &hp)?;
        history.push(StepMetrics {
            step,
            loss,
            accuracy: correct as f64 / b,
            lr,
        });
        step += 1;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(n, 2, step, 3, "s") {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(n, 4, 7, 3, "s"), batch_indices(n, 4, 7, 3, "s"));
        assert_ne!(batch_indices(n, 4, 0, 3, "s"), batch_indices(n, 4, 0, 4, "s"));
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<usize> = (0..37).collect();
        for t in [1, 2, 5, 64] {
            assert_eq!(par_map(&xs, t, |&x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn metrics_header_first() {
        let s = metrics_csv(&[StepMetrics {
            step: 0,
            loss: 1.5,
            accuracy: 0.25,
            lr: 0.0,
        }]);
        assert_eq!(s, "step,loss,accuracy,lr\n0,1.5,0.25,0\n");
    }
}
