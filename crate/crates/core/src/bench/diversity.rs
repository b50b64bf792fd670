//! Question-diversity diagnostic: pairwise cosine similarity of raw text
//! features `c_t`.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::textenc::{text_embedding, Vocabulary};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Symmetric cosine matrix over the given feature rows. Zero-norm rows
/// get similarity 0 with everything, including themselves.
pub fn cosine_matrix(features: &[Vec<f64>]) -> Tensor {
    let n = features.len();
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let c = cosine(&features[i], &features[j]);
            m.data_mut()[i * n + j] = c;
            m.data_mut()[j * n + i] = c;
        }
    }
    m
}

/// `cos(c_t(i), c_t(j))` for every pair of questions.
pub fn diversity_matrix(
    questions: &[String],
    params: &ParamStore,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let feats = questions
        .iter()
        .map(|q| Ok(text_embedding(params, vocab, q, cfg)?.into_data()))
        .collect::<Result<Vec<_>>>()?;
    Ok(cosine_matrix(&feats))
}

/// Mean similarity inside the two reversal pairs `(0,1)`, `(2,3)` of a
/// quad's 4×4 matrix, and mean over the four cross-pair entries.
pub fn pair_similarity_stats(m: &Tensor) -> (f64, f64) {
    let at = |i: usize, j: usize| m.data()[i * 4 + j];
    let within = (at(0, 1) + at(2, 3)) / 2.0;
    let across = (at(0, 2) + at(0, 3) + at(1, 2) + at(1, 3)) / 4.0;
    (within, across)
}
