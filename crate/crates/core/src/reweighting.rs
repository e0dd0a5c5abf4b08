//! Adversarial weight computations.
//!
//! Every per-speaker scheme ends in the same normalization,
//! `λ_i = 1 + r_i / mean(r)`, so a batch of weights always averages to 2.
//! Each forward function has a matching `*_backward` that maps an upstream
//! gradient on the weights back to the scheme's inputs.

use crate::error::{Error, Result};
use crate::numerics::{accumulate_cosine_grad, cosine_similarity, dot, norm, Matrix, RngStream};

/// One weight per speaker in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerWeights {
    values: Vec<f64>,
}

impl SpeakerWeights {
    /// Wraps arbitrary finite weights (used for injected or constant weights).
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("SpeakerWeights"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "SpeakerWeights",
                coordinate: i,
            });
        }
        Ok(Self { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        crate::numerics::mean(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `N × N` weights over speaker pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    values: Matrix,
}

impl PairWeights {
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::DimensionMismatch {
                context: "PairWeights must be square",
                expected: values.rows(),
                actual: values.cols(),
            });
        }
        if let Some(i) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "PairWeights",
                coordinate: i,
            });
        }
        Ok(Self { values })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.values.rows();
        (0..n).all(|j| (0..j).all(|k| self.values.get(j, k) == self.values.get(k, j)))
    }
}

/// `λ_i = 1 + raw_i / mean(raw)`.
pub fn normalized_instance_weights(raw: &[f64]) -> Result<SpeakerWeights> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("normalized_instance_weights"));
    }
    let m = crate::numerics::mean(raw);
    if m == 0.0 || !m.is_finite() {
        return Err(Error::DegenerateWeights(format!(
            "mean of raw adversary scores is {m}"
        )));
    }
    SpeakerWeights::from_values(raw.iter().map(|r| 1.0 + r / m).collect())
}

/// Gradient with respect to `raw` given the gradient on the normalized weights.
pub fn normalized_instance_weights_backward(raw: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    let m = crate::numerics::mean(raw);
    let coupling = dot(grad_weights, raw) / (n * m * m);
    grad_weights.iter().map(|g| g / m - coupling).collect()
}

fn check_projection(proj: &Matrix) -> Result<()> {
    if proj.rows() < 2 {
        return Err(Error::invalid_config("N", "need at least 2 speakers"));
    }
    if proj.cols() == 0 {
        return Err(Error::invalid_config(
            "H",
            "projection dimension must be >= 1",
        ));
    }
    Ok(())
}

/// Accumulated inner-product similarity: `s_j = Σ_k p_j · p_k` (self term
/// included), normalized to weights.
pub fn aps_weights_inner_product(proj: &Matrix) -> Result<SpeakerWeights> {
    check_projection(proj)?;
    normalized_instance_weights(&inner_product_aggregates(proj))
}

fn inner_product_aggregates(proj: &Matrix) -> Vec<f64> {
    let mut total = vec![0.0; proj.cols()];
    for row in proj.row_iter() {
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    proj.row_iter().map(|row| dot(row, &total)).collect()
}

pub fn aps_weights_inner_product_backward(proj: &Matrix, grad_weights: &[f64]) -> Result<Matrix> {
    let s = inner_product_aggregates(proj);
    let gs = normalized_instance_weights_backward(&s, grad_weights);
    let h = proj.cols();
    let mut total = vec![0.0; h];
    let mut weighted = vec![0.0; h];
    for (row, g) in proj.row_iter().zip(&gs) {
        for i in 0..h {
            total[i] += row[i];
            weighted[i] += g * row[i];
        }
    }
    let mut out = Matrix::zeros(proj.rows(), h);
    for (l, g) in gs.iter().enumerate() {
        for (i, d) in out.row_mut(l).iter_mut().enumerate() {
            *d = g * total[i] + weighted[i];
        }
    }
    Ok(out)
}

fn cosine_exp_aggregates(proj: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = proj.rows();
    for j in 0..n {
        if norm(proj.row(j)) == 0.0 {
            return Err(Error::ZeroNorm {
                context: "adversary projection",
                index: j,
            });
        }
    }
    let mut exps = Matrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            exps.set(j, k, cosine_similarity(proj.row(j), proj.row(k))?.exp());
        }
    }
    let s = exps.row_iter().map(|r| r.iter().sum()).collect();
    Ok((s, exps))
}

/// Accumulated exponentiated cosine: `s_j = Σ_k exp(cos(p_j, p_k))`,
/// normalized to weights. Every weight lies in `(1, 1 + N)`.
pub fn aps_weights_cosine_exp(proj: &Matrix) -> Result<SpeakerWeights> {
    check_projection(proj)?;
    let (s, _) = cosine_exp_aggregates(proj)?;
    normalized_instance_weights(&s)
}

pub fn aps_weights_cosine_exp_backward(proj: &Matrix, grad_weights: &[f64]) -> Result<Matrix> {
    let (s, exps) = cosine_exp_aggregates(proj)?;
    let gs = normalized_instance_weights_backward(&s, grad_weights);
    let (n, h) = proj.shape();
    let mut out = Matrix::zeros(n, h);
    let mut du = vec![0.0; h];
    let mut dv = vec![0.0; h];
    for j in 0..n {
        for k in 0..n {
            if j == k {
                // cos(p, p) is constant.
                continue;
            }
            du.fill(0.0);
            dv.fill(0.0);
            accumulate_cosine_grad(
                proj.row(j),
                proj.row(k),
                gs[j] * exps.get(j, k),
                &mut du,
                &mut dv,
            );
            for (d, v) in out.row_mut(j).iter_mut().zip(&du) {
                *d += v;
            }
            for (d, v) in out.row_mut(k).iter_mut().zip(&dv) {
                *d += v;
            }
        }
    }
    Ok(out)
}

/// Unit-norm cluster centers from spherical K-means.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub vectors: Matrix,
    /// Number of centroid updates performed.
    pub iterations: usize,
    /// `Σ (1 − cos(x, c_assigned))` for the final assignment.
    pub distortion: f64,
    /// Distortion after every assignment step, starting with the seeding.
    pub distortion_history: Vec<f64>,
    /// Final assignment of the fitted vectors.
    pub assignment: Vec<usize>,
    /// Whether the final assignment is a fixpoint.
    pub converged: bool,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    /// Reorders the clusters so each lands on the index of the most similar
    /// centroid in `previous`, matched greedily by descending cosine. Keeps
    /// cluster identities stable across refits. Returns `self` unchanged if
    /// the shapes differ.
    pub fn aligned_to(self, previous: &Centroids) -> Centroids {
        if self.vectors.shape() != previous.vectors.shape() {
            return self;
        }
        let k = self.k();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
        for (i, c) in self.vectors.row_iter().enumerate() {
            for (j, p) in previous.vectors.row_iter().enumerate() {
                pairs.push((dot(c, p), i, j));
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut slot = vec![usize::MAX; k];
        let mut taken = vec![false; k];
        for (_, i, j) in pairs {
            if slot[i] == usize::MAX && !taken[j] {
                slot[i] = j;
                taken[j] = true;
            }
        }
        let mut vectors = Matrix::zeros(k, self.vectors.cols());
        for (i, &j) in slot.iter().enumerate() {
            vectors.row_mut(j).copy_from_slice(self.vectors.row(i));
        }
        Centroids {
            vectors,
            assignment: self.assignment.iter().map(|&a| slot[a]).collect(),
            ..self
        }
    }
}

fn normalized_rows(vectors: &Matrix, context: &'static str) -> Result<Matrix> {
    let mut out = vectors.clone();
    for j in 0..out.rows() {
        let n = norm(out.row(j));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { context, index: j });
        }
        for v in out.row_mut(j) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Assigns each unit row to the centroid of highest cosine; ties go to the
/// lowest index. Returns the labels and the distortion.
fn assign_unit(unit: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(unit.rows());
    let mut sims = Vec::with_capacity(unit.rows());
    for x in unit.row_iter() {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, c) in centroids.row_iter().enumerate() {
            let sim = dot(x, c);
            if sim > best_sim {
                best = k;
                best_sim = sim;
            }
        }
        labels.push(best);
        sims.push(best_sim);
    }
    (labels, sims)
}

fn distortion(sims: &[f64]) -> f64 {
    sims.iter().map(|s| 1.0 - s).sum()
}

/// k-means++ seeding with sampling probability proportional to `1 − cos`.
fn seed_centroids(unit: &Matrix, k: usize, rng: &mut RngStream) -> Matrix {
    let n = unit.rows();
    let mut chosen = vec![rng.below(n)];
    let mut closest: Vec<f64> = unit
        .row_iter()
        .map(|x| (1.0 - dot(x, unit.row(chosen[0]))).max(0.0))
        .collect();
    while chosen.len() < k {
        let total: f64 = closest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| closest.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min((1.0 - dot(unit.row(i), unit.row(next))).max(0.0));
        }
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| unit.row(i)).collect();
    Matrix::from_rows(&rows).expect("rows share a width")
}

/// Independent seedings tried by [`kmeans_fit`].
pub const KMEANS_RESTARTS: usize = 10;

/// Spherical K-means: cosine assignment, normalized-mean centroid updates.
///
/// Runs [`KMEANS_RESTARTS`] Lloyd passes from successive k-means++ seedings
/// drawn from `rng` and keeps the one with the lowest final distortion
/// (earliest on ties). Each pass stops at an assignment fixpoint or after
/// `max_iters` updates, and its distortion never increases between
/// assignment steps. A cluster left empty by an update is re-seeded at the
/// member with the worst similarity to its own centroid.
pub fn kmeans_fit(
    vectors: &Matrix,
    k: usize,
    rng: &mut RngStream,
    max_iters: usize,
) -> Result<Centroids> {
    if k == 0 {
        return Err(Error::invalid_config("K", "must be >= 1"));
    }
    if k > vectors.rows() {
        return Err(Error::invalid_config(
            "K",
            format!("{k} clusters requested for {} vectors", vectors.rows()),
        ));
    }
    let unit = normalized_rows(vectors, "kmeans input")?;
    let mut best: Option<Centroids> = None;
    for _ in 0..KMEANS_RESTARTS {
        let fit = lloyd(&unit, seed_centroids(&unit, k, rng), max_iters);
        if best.as_ref().is_none_or(|b| fit.distortion < b.distortion) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(unit: &Matrix, mut centroids: Matrix, max_iters: usize) -> Centroids {
    let (mut labels, mut sims) = assign_unit(unit, &centroids);
    let mut history = vec![distortion(&sims)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        update_centroids(unit, &labels, &sims, &mut centroids);
        iterations += 1;
        let (next_labels, next_sims) = assign_unit(unit, &centroids);
        history.push(distortion(&next_sims));
        let fixpoint = next_labels == labels;
        labels = next_labels;
        sims = next_sims;
        if fixpoint {
            converged = true;
            break;
        }
    }
    Centroids {
        vectors: centroids,
        iterations,
        distortion: distortion(&sims),
        distortion_history: history,
        assignment: labels,
        converged,
    }
}

fn update_centroids(unit: &Matrix, labels: &[usize], sims: &[f64], centroids: &mut Matrix) {
    let (k, dim) = centroids.shape();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (x, &l) in unit.row_iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut used = Vec::new();
    for c in 0..k {
        if counts[c] == 0 {
            let worst = (0..unit.rows())
                .filter(|i| !used.contains(i))
                .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            if let Some(i) = worst {
                used.push(i);
                centroids.row_mut(c).copy_from_slice(unit.row(i));
            }
            continue;
        }
        let n = norm(sums.row(c));
        // Members cancelling out leave every direction equally good.
        if n > 0.0 {
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / n;
            }
        }
    }
}

/// Cluster index per speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    labels: Vec<usize>,
    k: usize,
}

impl PseudoLabels {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::OutOfRange {
                context: "pseudo label",
                index: bad,
                bound: k,
            });
        }
        Ok(Self { labels, k })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// `ŷ_j = argmax_k cos(c_k, anchor_j)`, ties to the lowest index.
pub fn assign_pseudo_labels(anchors: &Matrix, centroids: &Centroids) -> Result<PseudoLabels> {
    if anchors.cols() != centroids.vectors.cols() {
        return Err(Error::DimensionMismatch {
            context: "assign_pseudo_labels",
            expected: centroids.vectors.cols(),
            actual: anchors.cols(),
        });
    }
    let unit = normalized_rows(anchors, "anchor")?;
    let cents = normalized_rows(&centroids.vectors, "centroid")?;
    let (labels, _) = assign_unit(&unit, &cents);
    PseudoLabels::new(labels, centroids.k())
}

/// Selects `outputs[j, ŷ_j]` per speaker and normalizes.
pub fn pl_weights(outputs: &Matrix, labels: &PseudoLabels) -> Result<SpeakerWeights> {
    normalized_instance_weights(&pl_selected(outputs, labels)?)
}

fn pl_selected(outputs: &Matrix, labels: &PseudoLabels) -> Result<Vec<f64>> {
    if labels.as_slice().len() != outputs.rows() {
        return Err(Error::DimensionMismatch {
            context: "pl_weights labels",
            expected: outputs.rows(),
            actual: labels.as_slice().len(),
        });
    }
    labels
        .as_slice()
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            if y >= outputs.cols() {
                Err(Error::OutOfRange {
                    context: "pl_weights label",
                    index: y,
                    bound: outputs.cols(),
                })
            } else {
                Ok(outputs.get(j, y))
            }
        })
        .collect()
}

pub fn pl_weights_backward(
    outputs: &Matrix,
    labels: &PseudoLabels,
    grad_weights: &[f64],
) -> Result<Matrix> {
    let raw = pl_selected(outputs, labels)?;
    let g = normalized_instance_weights_backward(&raw, grad_weights);
    let mut out = Matrix::zeros(outputs.rows(), outputs.cols());
    for (j, (&y, gj)) in labels.as_slice().iter().zip(g).enumerate() {
        out.set(j, y, gj);
    }
    Ok(out)
}

/// `λ(j, k) = λ_j + λ_k`.
pub fn pw_weights(weights: &SpeakerWeights) -> PairWeights {
    let v = weights.as_slice();
    let n = v.len();
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            m.set(j, k, v[j] + v[k]);
        }
    }
    PairWeights { values: m }
}

pub fn pw_weights_backward(grad_pairs: &Matrix) -> Vec<f64> {
    let n = grad_pairs.rows();
    (0..n)
        .map(|j| {
            (0..n)
                .map(|k| grad_pairs.get(j, k) + grad_pairs.get(k, j))
                .sum()
        })
        .collect()
}
