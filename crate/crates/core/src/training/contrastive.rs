use super::{batch_indices, lr_at, AdamHyper, OptimizerState, StepMetrics, TrainOptions};
use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::model::{trainable_params, Model};
use crate::params::Binder;
use crate::tensor::{Tape, Var};
use crate::textenc::{encode_text, tokenize_truncate, TEXT_PREFIX};
use crate::visenc::{encode_static, ImageTensor, VIS_PREFIX};

/// Upper clamp on the learned log temperature, `ln 100`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

/// Symmetric InfoNCE between row-aligned image and text features
/// (`B×D` each) with logits `exp(s) · cos`.
pub fn contrastive_loss(tape: &mut Tape, img: Var, txt: Var, log_scale: Var) -> Result<Var> {
    let b = tape.value(img).rows();
    if b < 2 {
        return Err(Error::Parameter(format!("contrastive batch needs >= 2 pairs, got {b}")));
    }
    let i = tape.l2_normalize_rows(img)?;
    let t = tape.l2_normalize_rows(txt)?;
    let tt = tape.transpose(t)?;
    let sim = tape.matmul(i, tt)?;
    let s = tape.exp(log_scale);
    let logits = tape.scale_by(sim, s)?;
    let targets: Vec<usize> = (0..b).collect();
    let l_it = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let l_ti = tape.cross_entropy(lt, &targets)?;
    let both = tape.add(l_it, l_ti)?;
    Ok(tape.scale(both, 0.5))
}

/// Stage 0: train the backbone and text encoder on image/caption pairs,
/// then mark both frozen.
pub fn pretrain_contrastive(
    model: &mut Model,
    images: &[ImageTensor],
    captions: &[String],
    cfg: &StageConfig,
    state: &mut OptimizerState,
    opts: &TrainOptions,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Parameter(format!(
            "contrastive batch size must be >= 2, got {}",
            cfg.batch_size
        )));
    }
    if images.len() != captions.len() || images.len() < 2 {
        return Err(Error::Data(format!(
            "need >= 2 aligned image/caption pairs, got {} images and {} captions",
            images.len(),
            captions.len()
        )));
    }
    if model.config.d_vis != model.config.d_text {
        return Err(Error::Parameter(
            "contrastive pretraining needs d_vis == d_text".into(),
        ));
    }
    let part = trainable_params(&model.params, 0, &model.config)?;
    model.params.set_frozen(part.frozen.iter().cloned());
    let seqs = captions
        .iter()
        .map(|c| tokenize_truncate(&model.vocab, c, model.config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let hp = AdamHyper::default();
    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut history = Vec::new();
    let mut step = state.step as usize;
    while step < end {
        let idx = batch_indices(images.len(), cfg.batch_size, step, cfg.seed, "pretrain.batches");
        let mut tape = Tape::new();
        let mut binder = Binder::training(&model.params, &part.trainable);
        let mut iv = Vec::with_capacity(idx.len());
        let mut tv = Vec::with_capacity(idx.len());
        for &i in &idx {
            let y = encode_static(&mut tape, &mut binder, &images[i], &model.config)?;
            iv.push(tape.mean_rows(y)?);
            tv.push(encode_text(&mut tape, &mut binder, &seqs[i], &model.config)?);
        }
        let img = tape.concat_rows(&iv)?;
        let txt = tape.concat_rows(&tv)?;
        let s = binder.var(&mut tape, "clip.logit_scale")?;
        let loss = contrastive_loss(&mut tape, img, txt, s)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let acc = retrieval_accuracy(&tape, img, txt);
        tape.backward(loss)?;
        let grads = binder.grads(&tape);
        let lr = lr_at(step, cfg)?;
        state.apply(&mut model.params, &grads, lr, cfg.weight_decay, &hp)?;
        let ls = model.params.get_mut("clip.logit_scale")?;
        ls.data_mut()[0] = ls.data()[0].min(MAX_LOGIT_SCALE);
        history.push(StepMetrics {
            step,
            loss: lv,
            accuracy: acc,
            lr,
        });
        step += 1;
    }
    if step >= cfg.total_steps {
        model.params.freeze_prefixes(&[VIS_PREFIX, TEXT_PREFIX]);
    }
    Ok(history)
}

/// Fraction of images whose most similar caption in the batch is their own.
fn retrieval_accuracy(tape: &Tape, img: Var, txt: Var) -> f64 {
    let (i, t) = (tape.value(img), tape.value(txt));
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let b = i.rows();
    let mut hits = 0;
    for a in 0..b {
        let ra = i.row(a);
        let sims: Vec<f64> = (0..b)
            .map(|c| {
                let rc = t.row(c);
                ra.iter().zip(rc).map(|(x, y)| x * y).sum::<f64>() / (norm(ra) * norm(rc))
            })
            .collect();
        if crate::model::predict(&sims).ok() == Some(a) {
            hits += 1;
        }
    }
    hits as f64 / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    #[test]
    fn identical_embeddings_give_log_batch() {
        let mut tape = Tape::new();
        let row = Tensor::randn(&[1, 6], 1.0, &mut SplitMix64::new(1));
        let rows: Vec<Vec<f64>> = (0..8).map(|_| row.data().to_vec()).collect();
        let x = tape.constant(Tensor::from_rows(&rows));
        let y = tape.constant(Tensor::from_rows(&rows));
        let s = tape.constant(Tensor::vector(vec![(1.0f64 / 0.07).ln()]));
        let l = contrastive_loss(&mut tape, x, y, s).unwrap();
        assert!((tape.value(l).item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4]));
        let s = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(contrastive_loss(&mut tape, x, x, s), Err(Error::Parameter(_))));
    }
}
