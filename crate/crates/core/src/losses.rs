//! Angular prototypical loss, its adversarially weighted variants, and the
//! speaker-classification (label) loss.
//!
//! Every loss returns its value together with the gradient with respect to
//! the similarity scores and, where weights enter, with respect to the
//! weights. Gradients flow back to embeddings through
//! [`SimilarityMatrix::backward`] and [`AnchorQuery::backward`].

use crate::error::{Error, Result};
use crate::model::{Mlp, MlpGrads};
use crate::numerics::{accumulate_cosine_grad, dot, log_sum_exp, norm, Matrix};
use crate::reweighting::{PairWeights, SpeakerWeights};

/// `N` speakers × `M` utterances of `E`-dimensional embeddings, stored as an
/// `(N·M) × E` matrix with the utterances of speaker `j` in rows `j·M..(j+1)·M`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    speakers: usize,
    utterances: usize,
    embeddings: Matrix,
}

impl EmbeddingBatch {
    pub fn new(speakers: usize, utterances: usize, embeddings: Matrix) -> Result<Self> {
        if speakers < 2 {
            return Err(Error::invalid_config(
                "N",
                "need at least 2 speakers per batch",
            ));
        }
        if utterances < 2 {
            return Err(Error::invalid_config(
                "M",
                "need at least 2 utterances per speaker (anchor + query)",
            ));
        }
        if embeddings.rows() != speakers * utterances {
            return Err(Error::DimensionMismatch {
                context: "EmbeddingBatch rows",
                expected: speakers * utterances,
                actual: embeddings.rows(),
            });
        }
        if let Some(i) = embeddings.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "EmbeddingBatch",
                coordinate: i,
            });
        }
        Ok(Self {
            speakers,
            utterances,
            embeddings,
        })
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn utterances(&self) -> usize {
        self.utterances
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn utterance(&self, speaker: usize, index: usize) -> &[f64] {
        self.embeddings.row(speaker * self.utterances + index)
    }
}

/// Per-speaker anchors (mean of the first `M−1` utterances) and queries (the
/// last utterance).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorQuery {
    pub anchors: Matrix,
    pub queries: Matrix,
    utterances: usize,
}

pub fn anchors_and_queries(batch: &EmbeddingBatch) -> Result<AnchorQuery> {
    let (n, m, e) = (batch.speakers, batch.utterances, batch.dim());
    if m < 2 {
        return Err(Error::invalid_config("M", "need at least 2 utterances"));
    }
    let mut anchors = Matrix::zeros(n, e);
    let mut queries = Matrix::zeros(n, e);
    let inv = 1.0 / (m - 1) as f64;
    for j in 0..n {
        let a = anchors.row_mut(j);
        for u in 0..m - 1 {
            for (acc, v) in a.iter_mut().zip(batch.utterance(j, u)) {
                *acc += v;
            }
        }
        for v in a.iter_mut() {
            *v *= inv;
        }
        queries
            .row_mut(j)
            .copy_from_slice(batch.utterance(j, m - 1));
    }
    Ok(AnchorQuery {
        anchors,
        queries,
        utterances: m,
    })
}

impl AnchorQuery {
    pub fn speakers(&self) -> usize {
        self.anchors.rows()
    }

    /// Maps gradients on anchors and queries back to the `(N·M) × E` batch.
    pub fn backward(&self, grad_anchors: &Matrix, grad_queries: &Matrix) -> Result<Matrix> {
        let (n, e, m) = (self.anchors.rows(), self.anchors.cols(), self.utterances);
        for g in [grad_anchors, grad_queries] {
            if g.shape() != (n, e) {
                return Err(Error::DimensionMismatch {
                    context: "AnchorQuery::backward",
                    expected: n * e,
                    actual: g.rows() * g.cols(),
                });
            }
        }
        let inv = 1.0 / (m - 1) as f64;
        let mut out = Matrix::zeros(n * m, e);
        for j in 0..n {
            for u in 0..m - 1 {
                for (d, g) in out.row_mut(j * m + u).iter_mut().zip(grad_anchors.row(j)) {
                    *d = g * inv;
                }
            }
            out.row_mut(j * m + m - 1)
                .copy_from_slice(grad_queries.row(j));
        }
        Ok(out)
    }
}

/// `S[j][k] = w · cos(anchor_j, query_k) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Matrix,
    pub cosines: Matrix,
    pub scale: f64,
    pub bias: f64,
}

/// Gradients of a scalar objective through [`SimilarityMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrads {
    pub scale: f64,
    pub bias: f64,
    pub anchors: Matrix,
    pub queries: Matrix,
}

pub fn similarity_matrix(aq: &AnchorQuery, scale: f64, bias: f64) -> Result<SimilarityMatrix> {
    let n = aq.speakers();
    for j in 0..n {
        if norm(aq.anchors.row(j)) == 0.0 {
            return Err(Error::ZeroNorm {
                context: "anchor",
                index: j,
            });
        }
        if norm(aq.queries.row(j)) == 0.0 {
            return Err(Error::ZeroNorm {
                context: "query",
                index: j,
            });
        }
    }
    let mut cosines = Matrix::zeros(n, n);
    for j in 0..n {
        let a = aq.anchors.row(j);
        let na = norm(a);
        for k in 0..n {
            let q = aq.queries.row(k);
            cosines.set(j, k, dot(a, q) / (na * norm(q)));
        }
    }
    let scores = cosines.map(|c| scale * c + bias);
    Ok(SimilarityMatrix {
        scores,
        cosines,
        scale,
        bias,
    })
}

impl SimilarityMatrix {
    pub fn speakers(&self) -> usize {
        self.scores.rows()
    }

    pub fn backward(&self, aq: &AnchorQuery, grad_scores: &Matrix) -> Result<SimilarityGrads> {
        let n = self.speakers();
        if grad_scores.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "SimilarityMatrix::backward",
                expected: n * n,
                actual: grad_scores.rows() * grad_scores.cols(),
            });
        }
        let e = aq.anchors.cols();
        let mut anchors = Matrix::zeros(n, e);
        let mut queries = Matrix::zeros(n, e);
        let mut scale = 0.0;
        let mut bias = 0.0;
        for j in 0..n {
            for k in 0..n {
                let g = grad_scores.get(j, k);
                scale += g * self.cosines.get(j, k);
                bias += g;
                if g == 0.0 {
                    continue;
                }
                let mut da = vec![0.0; e];
                let mut dq = vec![0.0; e];
                accumulate_cosine_grad(
                    aq.anchors.row(j),
                    aq.queries.row(k),
                    g * self.scale,
                    &mut da,
                    &mut dq,
                );
                for (acc, v) in anchors.row_mut(j).iter_mut().zip(&da) {
                    *acc += v;
                }
                for (acc, v) in queries.row_mut(k).iter_mut().zip(&dq) {
                    *acc += v;
                }
            }
        }
        Ok(SimilarityGrads {
            scale,
            bias,
            anchors,
            queries,
        })
    }
}

/// Gradient of a loss with respect to the adversarial weights it consumed.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightGrad {
    None,
    Speaker(Vec<f64>),
    Pair(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    /// Unweighted per-speaker softmax terms `L_{p,j}` (for the pairwise
    /// variants, the per-row terms of the reweighted softmax).
    pub per_speaker: Vec<f64>,
    pub grad_scores: Matrix,
    pub grad_weights: WeightGrad,
}

/// Cross-entropy of one softmax row against `target`; returns the loss and
/// the softmax probabilities.
fn softmax_row(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits).expect("rows are nonempty");
    let probs = logits.iter().map(|&z| (z - lse).exp()).collect();
    (lse - logits[target], probs)
}

fn check_square(scores: &Matrix) -> Result<usize> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "similarity scores must be square",
            expected: n,
            actual: scores.cols(),
        });
    }
    if n < 2 {
        return Err(Error::invalid_config("N", "need at least 2 speakers"));
    }
    Ok(n)
}

/// `scale · Σ_j λ_j L_{p,j}`, shared by the plain and weighted forms so that
/// unit weights reproduce the plain loss bit for bit.
fn weighted_rows(scores: &Matrix, weights: Option<&[f64]>, scale: f64) -> Result<LossBundle> {
    let n = check_square(scores)?;
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                context: "speaker weights",
                expected: n,
                actual: w.len(),
            });
        }
    }
    let mut per_speaker = Vec::with_capacity(n);
    let mut grad_scores = Matrix::zeros(n, n);
    let mut total = 0.0;
    for j in 0..n {
        let (loss, probs) = softmax_row(scores.row(j), j);
        let lambda = weights.map_or(1.0, |w| w[j]);
        total += lambda * loss;
        per_speaker.push(loss);
        let row = grad_scores.row_mut(j);
        for k in 0..n {
            let delta = if k == j { 1.0 } else { 0.0 };
            row[k] = scale * lambda * (probs[k] - delta);
        }
    }
    let grad_weights = match weights {
        Some(_) => WeightGrad::Speaker(per_speaker.iter().map(|l| scale * l).collect()),
        None => WeightGrad::None,
    };
    Ok(LossBundle {
        value: scale * total,
        per_speaker,
        grad_scores,
        grad_weights,
    })
}

/// Mean over speakers of `−log softmax(S_j)_j`.
pub fn ap_loss(scores: &Matrix) -> Result<LossBundle> {
    let n = check_square(scores)?;
    weighted_rows(scores, None, 1.0 / n as f64)
}

/// `Σ_j λ_j · L_{p,j}`.
pub fn weighted_ap_loss(scores: &Matrix, weights: &SpeakerWeights) -> Result<LossBundle> {
    weighted_rows(scores, Some(weights.as_slice()), 1.0)
}

/// `(1/N) Σ_j λ_j · L_{p,j}`: the per-batch objective used by the trainer,
/// identical to [`ap_loss`] when every weight is one.
pub fn weighted_ap_loss_mean(scores: &Matrix, weights: &SpeakerWeights) -> Result<LossBundle> {
    let n = check_square(scores)?;
    weighted_rows(scores, Some(weights.as_slice()), 1.0 / n as f64)
}

fn check_pairs(scores: &Matrix, pairs: &PairWeights) -> Result<usize> {
    let n = check_square(scores)?;
    if pairs.matrix().shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "pair weights",
            expected: n * n,
            actual: pairs.matrix().rows() * pairs.matrix().cols(),
        });
    }
    Ok(n)
}

/// Pairwise weights applied to the similarities inside the softmax:
/// `−(1/N) Σ_j log( e^{λ_jj S_jj} / Σ_k e^{λ_jk S_jk} )`.
pub fn pw_loss_scaled_similarity(scores: &Matrix, pairs: &PairWeights) -> Result<LossBundle> {
    let n = check_pairs(scores, pairs)?;
    let lambda = pairs.matrix();
    let inv_n = 1.0 / n as f64;
    let mut per_speaker = Vec::with_capacity(n);
    let mut grad_scores = Matrix::zeros(n, n);
    let mut grad_lambda = Matrix::zeros(n, n);
    let mut total = 0.0;
    for j in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|k| lambda.get(j, k) * scores.get(j, k))
            .collect();
        let (loss, probs) = softmax_row(&logits, j);
        total += loss;
        per_speaker.push(loss);
        for k in 0..n {
            let delta = if k == j { 1.0 } else { 0.0 };
            let g = inv_n * (probs[k] - delta);
            grad_scores.set(j, k, g * lambda.get(j, k));
            grad_lambda.set(j, k, g * scores.get(j, k));
        }
    }
    Ok(LossBundle {
        value: inv_n * total,
        per_speaker,
        grad_scores,
        grad_weights: WeightGrad::Pair(grad_lambda),
    })
}

/// Pairwise weights applied to the exponentiated similarities:
/// `−(1/N) Σ_j log( λ_jj e^{S_jj} / Σ_k λ_jk e^{S_jk} )`. Weights must be positive.
pub fn pw_loss_scaled_likelihood(scores: &Matrix, pairs: &PairWeights) -> Result<LossBundle> {
    let n = check_pairs(scores, pairs)?;
    let lambda = pairs.matrix();
    if let Some(i) = lambda.as_slice().iter().position(|&l| !(l > 0.0)) {
        return Err(Error::DegenerateWeights(format!(
            "pair weight ({}, {}) = {} is not positive",
            i / n,
            i % n,
            lambda.as_slice()[i]
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut per_speaker = Vec::with_capacity(n);
    let mut grad_scores = Matrix::zeros(n, n);
    let mut grad_lambda = Matrix::zeros(n, n);
    let mut total = 0.0;
    for j in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|k| lambda.get(j, k).ln() + scores.get(j, k))
            .collect();
        let (loss, probs) = softmax_row(&logits, j);
        total += loss;
        per_speaker.push(loss);
        for k in 0..n {
            let delta = if k == j { 1.0 } else { 0.0 };
            let g = inv_n * (probs[k] - delta);
            grad_scores.set(j, k, g);
            grad_lambda.set(j, k, g / lambda.get(j, k));
        }
    }
    Ok(LossBundle {
        value: inv_n * total,
        per_speaker,
        grad_scores,
        grad_weights: WeightGrad::Pair(grad_lambda),
    })
}

/// Result of [`label_loss`].
#[derive(Debug, Clone)]
pub struct LabelLoss {
    pub value: f64,
    pub grad_embeddings: Matrix,
    pub head_grads: MlpGrads,
}

/// Mean softmax cross-entropy of the classification head's logits against the
/// true speaker indices.
pub fn label_loss(embeddings: &Matrix, head: &Mlp, speaker_ids: &[usize]) -> Result<LabelLoss> {
    if speaker_ids.len() != embeddings.rows() {
        return Err(Error::DimensionMismatch {
            context: "label_loss ids",
            expected: embeddings.rows(),
            actual: speaker_ids.len(),
        });
    }
    if embeddings.rows() == 0 {
        return Err(Error::EmptyInput("label_loss"));
    }
    let classes = head.output_dim();
    if let Some(&bad) = speaker_ids.iter().find(|&&id| id >= classes) {
        return Err(Error::OutOfRange {
            context: "label_loss speaker id",
            index: bad,
            bound: classes,
        });
    }
    let (logits, trace) = head.forward(embeddings)?;
    let inv = 1.0 / embeddings.rows() as f64;
    let mut grad_logits = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (i, &id) in speaker_ids.iter().enumerate() {
        let (loss, probs) = softmax_row(logits.row(i), id);
        total += loss;
        let row = grad_logits.row_mut(i);
        for (c, p) in probs.into_iter().enumerate() {
            row[c] = inv * (p - if c == id { 1.0 } else { 0.0 });
        }
    }
    let (head_grads, grad_embeddings) = head.backward(&trace, &grad_logits)?;
    Ok(LabelLoss {
        value: inv * total,
        grad_embeddings,
        head_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer, Role};
    use crate::numerics::{finite_diff_gradient, relative_error, RngStream};
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if a.abs() > 1e-8 || n.abs() > 1e-8 {
                assert!(relative_error(a, n, 1e-7) <= 1e-4, "coord {i}: {a} vs {n}");
            }
        }
    }

    fn pair(values: &[[f64; 2]; 2]) -> PairWeights {
        PairWeights::from_matrix(Matrix::from_rows(values).unwrap()).unwrap()
    }

    #[test]
    fn anchors_for_two_and_three_utterances() {
        let two = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let aq = anchors_and_queries(&EmbeddingBatch::new(2, 2, two).unwrap()).unwrap();
        assert_eq!(aq.anchors.as_slice(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(aq.queries.as_slice(), &[3.0, 4.0, 7.0, 8.0]);

        let three = Matrix::from_rows(&[
            [1.0, 0.0],
            [3.0, 2.0],
            [9.0, 9.0],
            [0.0, 1.0],
            [0.0, 3.0],
            [5.0, 5.0],
        ])
        .unwrap();
        let aq = anchors_and_queries(&EmbeddingBatch::new(2, 3, three).unwrap()).unwrap();
        assert_eq!(aq.anchors.as_slice(), &[2.0, 1.0, 0.0, 2.0]);
        assert_eq!(aq.queries.as_slice(), &[9.0, 9.0, 5.0, 5.0]);
        assert_eq!(aq.anchors.shape(), (2, 2));
    }

    #[test]
    fn batch_rejects_single_utterance() {
        assert!(EmbeddingBatch::new(2, 1, Matrix::zeros(2, 3)).is_err());
        assert!(EmbeddingBatch::new(1, 2, Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn similarity_cases() {
        let aq = AnchorQuery {
            anchors: Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap(),
            queries: Matrix::from_rows(&[[0.0, 2.0], [0.0, -1.0]]).unwrap(),
            utterances: 2,
        };
        let s = similarity_matrix(&aq, 1.0, 0.0).unwrap();
        assert!(s.scores.as_slice().iter().all(|&v| v == 0.0));

        let same = AnchorQuery {
            anchors: Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap(),
            queries: Matrix::from_rows(&[[2.0, 2.0], [1.0, 0.0]]).unwrap(),
            utterances: 2,
        };
        let s = similarity_matrix(&same, 10.0, -5.0).unwrap();
        assert!((s.scores.get(0, 0) - 5.0).abs() < 1e-12);

        let zero = AnchorQuery {
            anchors: Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap(),
            queries: Matrix::from_rows(&[[2.0, 2.0], [1.0, 0.0]]).unwrap(),
            utterances: 2,
        };
        assert!(matches!(
            similarity_matrix(&zero, 1.0, 0.0),
            Err(Error::ZeroNorm {
                context: "anchor",
                index: 1
            })
        ));
    }

    #[test]
    fn ap_loss_cases() {
        let uniform = Matrix::filled(3, 3, 0.7);
        assert!((ap_loss(&uniform).unwrap().value - 3f64.ln()).abs() < 1e-12);

        let s = Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((ap_loss(&s).unwrap().value - expected).abs() < 1e-12);
        assert!((expected - 0.126928).abs() < 1e-6);

        let mut rng = RngStream::new(3);
        let g = ap_loss(&random_matrix(5, 5, &mut rng)).unwrap().grad_scores;
        for row in g.row_iter() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_ap_cases() {
        let mut rng = RngStream::new(4);
        let s = random_matrix(4, 4, &mut rng);
        let plain = ap_loss(&s).unwrap().value;
        let ones = SpeakerWeights::from_values(vec![1.0; 4]).unwrap();
        assert!((weighted_ap_loss(&s, &ones).unwrap().value - 4.0 * plain).abs() < 1e-12);
        assert_eq!(weighted_ap_loss_mean(&s, &ones).unwrap(), {
            let mut b = ap_loss(&s).unwrap();
            b.grad_weights = weighted_ap_loss_mean(&s, &ones).unwrap().grad_weights;
            b
        });

        let zeros = SpeakerWeights::from_values(vec![0.0; 4]).unwrap();
        let z = weighted_ap_loss(&s, &zeros).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad_scores.as_slice().iter().all(|&v| v == 0.0));

        let w = SpeakerWeights::from_values(vec![2.0, 1.0]).unwrap();
        let j = weighted_ap_loss(&Matrix::zeros(2, 2), &w).unwrap().value;
        assert!((j - 3.0 * 2f64.ln()).abs() < 1e-12);

        let bad = SpeakerWeights::from_values(vec![1.0; 3]).unwrap();
        assert!(weighted_ap_loss(&s, &bad).is_err());
    }

    #[test]
    fn pairwise_similarity_cases() {
        let mut rng = RngStream::new(5);
        let s = random_matrix(4, 4, &mut rng);
        let ones = PairWeights::from_matrix(Matrix::filled(4, 4, 1.0)).unwrap();
        assert!(
            (pw_loss_scaled_similarity(&s, &ones).unwrap().value - ap_loss(&s).unwrap().value)
                .abs()
                < 1e-12
        );
        let c = PairWeights::from_matrix(Matrix::filled(4, 4, 2.5)).unwrap();
        assert!(
            (pw_loss_scaled_similarity(&s, &c).unwrap().value
                - ap_loss(&s.scale(2.5)).unwrap().value)
                .abs()
                < 1e-12
        );
        let hand = pw_loss_scaled_similarity(
            &Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            &pair(&[[2.0, 1.0], [1.0, 2.0]]),
        )
        .unwrap();
        assert!((hand.value - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_likelihood_cases() {
        let mut rng = RngStream::new(6);
        let s = random_matrix(4, 4, &mut rng);
        let c = PairWeights::from_matrix(Matrix::filled(4, 4, 3.7)).unwrap();
        assert!(
            (pw_loss_scaled_likelihood(&s, &c).unwrap().value - ap_loss(&s).unwrap().value).abs()
                < 1e-12
        );
        let hand =
            pw_loss_scaled_likelihood(&Matrix::zeros(2, 2), &pair(&[[2.0, 1.0], [1.0, 2.0]]))
                .unwrap();
        assert!((hand.value + (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(matches!(
            pw_loss_scaled_likelihood(&Matrix::zeros(2, 2), &pair(&[[2.0, 0.0], [1.0, 2.0]])),
            Err(Error::DegenerateWeights(_))
        ));
        assert!(
            pw_loss_scaled_likelihood(&Matrix::zeros(3, 3), &pair(&[[2.0, 1.0], [1.0, 2.0]]))
                .is_err()
        );
    }

    #[test]
    fn pairwise_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = RngStream::new(60 + seed);
            let n = 5;
            let s = random_matrix(n, n, &mut rng);
            let lam =
                Matrix::new(n, n, (0..n * n).map(|_| rng.uniform_in(0.5, 4.0)).collect()).unwrap();
            for (name, loss) in [
                (
                    "sim",
                    pw_loss_scaled_similarity as fn(&Matrix, &PairWeights) -> Result<LossBundle>,
                ),
                ("lik", pw_loss_scaled_likelihood),
            ] {
                let pw = PairWeights::from_matrix(lam.clone()).unwrap();
                let bundle = loss(&s, &pw).unwrap();
                let num_s = finite_diff_gradient(
                    |x| {
                        loss(&Matrix::new(n, n, x.to_vec()).unwrap(), &pw)
                            .unwrap()
                            .value
                    },
                    s.as_slice(),
                    1e-5,
                )
                .unwrap();
                assert_grad_close(bundle.grad_scores.as_slice(), &num_s);
                let num_l = finite_diff_gradient(
                    |x| {
                        let p = PairWeights::from_matrix(Matrix::new(n, n, x.to_vec()).unwrap())
                            .unwrap();
                        loss(&s, &p).unwrap().value
                    },
                    lam.as_slice(),
                    1e-5,
                )
                .unwrap();
                let WeightGrad::Pair(gl) = bundle.grad_weights else {
                    panic!("{name} must return pair gradients")
                };
                assert_grad_close(gl.as_slice(), &num_l);
            }
        }
    }

    #[test]
    fn similarity_gradients_match_finite_differences() {
        let mut rng = RngStream::new(11);
        let (n, m, e) = (4, 3, 5);
        let emb = random_matrix(n * m, e, &mut rng);
        let (w, b) = (7.5, -2.0);
        let objective = |x: &[f64], w: f64, b: f64| {
            let batch =
                EmbeddingBatch::new(n, m, Matrix::new(n * m, e, x.to_vec()).unwrap()).unwrap();
            let aq = anchors_and_queries(&batch).unwrap();
            ap_loss(&similarity_matrix(&aq, w, b).unwrap().scores)
                .unwrap()
                .value
        };
        let batch = EmbeddingBatch::new(n, m, emb.clone()).unwrap();
        let aq = anchors_and_queries(&batch).unwrap();
        let sim = similarity_matrix(&aq, w, b).unwrap();
        let bundle = ap_loss(&sim.scores).unwrap();
        let grads = sim.backward(&aq, &bundle.grad_scores).unwrap();
        let d_emb = aq.backward(&grads.anchors, &grads.queries).unwrap();
        let num = finite_diff_gradient(|x| objective(x, w, b), emb.as_slice(), 1e-5).unwrap();
        assert_grad_close(d_emb.as_slice(), &num);
        let num_w =
            finite_diff_gradient(|x| objective(emb.as_slice(), x[0], b), &[w], 1e-5).unwrap();
        assert_grad_close(&[grads.scale], &num_w);
        // Softmax rows are shift invariant, so the bias gradient vanishes.
        assert!(grads.bias.abs() < 1e-12);
    }

    #[test]
    fn label_loss_cases() {
        let zero_head = Mlp::from_layers(
            vec![Layer {
                weight: Matrix::zeros(3, 5),
                bias: vec![0.0; 5],
                activation: Activation::Identity,
            }],
            Role::LabelHead,
        )
        .unwrap();
        let emb = Matrix::filled(2, 3, 0.3);
        let uniform = label_loss(&emb, &zero_head, &[0, 4]).unwrap();
        assert!((uniform.value - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            label_loss(&emb, &zero_head, &[0, 5]),
            Err(Error::OutOfRange { index: 5, .. })
        ));

        let mut bias = vec![0.0; 5];
        bias[2] = 20.0;
        let sharp = Mlp::from_layers(
            vec![Layer {
                weight: Matrix::zeros(3, 5),
                bias,
                activation: Activation::Identity,
            }],
            Role::LabelHead,
        )
        .unwrap();
        let l = label_loss(&emb, &sharp, &[2, 2]).unwrap().value;
        assert!(l < 1e-8);
    }

    #[test]
    fn label_loss_gradients_match_finite_differences() {
        let mut rng = RngStream::new(12);
        let head = Mlp::init(&[4, 6], &[Activation::Identity], Role::LabelHead, &mut rng).unwrap();
        let emb = random_matrix(5, 4, &mut rng);
        let ids = [0, 3, 5, 1, 3];
        let out = label_loss(&emb, &head, &ids).unwrap();
        let num_e = finite_diff_gradient(
            |x| {
                label_loss(&Matrix::new(5, 4, x.to_vec()).unwrap(), &head, &ids)
                    .unwrap()
                    .value
            },
            emb.as_slice(),
            1e-5,
        )
        .unwrap();
        assert_grad_close(out.grad_embeddings.as_slice(), &num_e);
        let num_h = finite_diff_gradient(
            |p| {
                let mut h = head.clone();
                h.set_flat_params(p).unwrap();
                label_loss(&emb, &h, &ids).unwrap().value
            },
            &head.flat_params(),
            1e-5,
        )
        .unwrap();
        assert_grad_close(&out.head_grads.flatten(), &num_h);
    }

    proptest! {
        #[test]
        fn ap_loss_nonnegative_and_row_shift_invariant(
            values in prop::collection::vec(-20.0f64..20.0, 16),
            row in 0usize..4,
            shift in -50.0f64..50.0,
        ) {
            let s = Matrix::new(4, 4, values).unwrap();
            let base = ap_loss(&s).unwrap();
            prop_assert!(base.value >= 0.0);
            let mut shifted = s.clone();
            for v in shifted.row_mut(row) {
                *v += shift;
            }
            let moved = ap_loss(&shifted).unwrap();
            prop_assert!((moved.per_speaker[row] - base.per_speaker[row]).abs() < 1e-12);
        }

        #[test]
        fn weighted_loss_is_linear_in_weights(
            values in prop::collection::vec(-5.0f64..5.0, 9),
            weights in prop::collection::vec(0.0f64..4.0, 3),
            alpha in 0.0f64..10.0,
        ) {
            let s = Matrix::new(3, 3, values).unwrap();
            let w = SpeakerWeights::from_values(weights.clone()).unwrap();
            let aw = SpeakerWeights::from_values(weights.iter().map(|x| alpha * x).collect()).unwrap();
            let j = weighted_ap_loss(&s, &w).unwrap().value;
            let ja = weighted_ap_loss(&s, &aw).unwrap().value;
            prop_assert!((ja - alpha * j).abs() <= 1e-10 * (1.0 + ja.abs()));
        }
    }
}
