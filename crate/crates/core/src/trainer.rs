//! Alternating min-max training: learner warmup, adversary ascent, learner
//! descent, per-epoch K-means refresh, and step history.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Corpus, FeatureBatch, Split};
use crate::error::{Error, Result};
use crate::losses::{
    anchors_and_queries, ap_loss, label_loss, pw_loss_scaled_likelihood, pw_loss_scaled_similarity,
    similarity_matrix, weighted_ap_loss_mean, AnchorQuery, EmbeddingBatch, LossBundle, WeightGrad,
};
use crate::model::{
    clip_global_norm, Activation, Direction, ForwardTrace, LrSchedule, Mlp, OptimizerKind,
    OptimizerState, Role,
};
use crate::numerics::{streams, Matrix, RngStream};
use crate::reweighting::{
    aps_weights_cosine_exp, aps_weights_cosine_exp_backward, aps_weights_inner_product,
    aps_weights_inner_product_backward, assign_pseudo_labels, kmeans_fit, pl_weights,
    pl_weights_backward, pw_weights, pw_weights_backward, Centroids, PairWeights, PseudoLabels,
    SpeakerWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    ApsInner,
    ApsCosexp,
    Pl,
    PwScaledSimilarity,
    PwScaledLikelihood,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::ApsInner,
        Variant::ApsCosexp,
        Variant::Pl,
        Variant::PwScaledSimilarity,
        Variant::PwScaledLikelihood,
    ];

    /// Short name used on the command line and in reports.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ApsInner => "aps-inner",
            Variant::ApsCosexp => "aps-cosexp",
            Variant::Pl => "pl",
            Variant::PwScaledSimilarity => "pw-sim",
            Variant::PwScaledLikelihood => "pw-lik",
        }
    }

    fn long_name(self) -> &'static str {
        match self {
            Variant::PwScaledSimilarity => "pw-scaled-similarity",
            Variant::PwScaledLikelihood => "pw-scaled-likelihood",
            other => other.name(),
        }
    }

    fn uses_centroids(self) -> bool {
        matches!(
            self,
            Variant::Pl | Variant::PwScaledSimilarity | Variant::PwScaledLikelihood
        )
    }

    fn is_pairwise(self) -> bool {
        matches!(
            self,
            Variant::PwScaledSimilarity | Variant::PwScaledLikelihood
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key || v.long_name() == key)
            .ok_or_else(|| {
                let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid_config(
                    "variant",
                    format!("unknown '{s}', expected one of {}", valid.join(", ")),
                )
            })
    }
}

/// Training configuration. Serialized field-for-field as the run config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub epochs: u32,
    pub warmup_epochs: u32,
    /// Batches per epoch; `None` means one pass over the train utterances
    /// in expectation.
    pub batches_per_epoch: Option<usize>,
    /// Adversary steps per learner step.
    pub adversary_steps: usize,
    pub learner_lr: LrSchedule,
    pub adversary_lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Clusters for `pl` and the pairwise variants.
    pub k: usize,
    /// Adversary output width for the APS variants.
    pub h: usize,
    pub kmeans_max_iters: usize,
    pub label_mix: f64,
    pub init_scale: f64,
    pub init_bias: f64,
    /// When true, the learner step treats λ as a constant.
    pub stop_gradient: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            speakers_per_batch: 20,
            utterances_per_speaker: 2,
            epochs: 30,
            warmup_epochs: 5,
            batches_per_epoch: None,
            adversary_steps: 1,
            learner_lr: LrSchedule::default(),
            adversary_lr: LrSchedule::default(),
            optimizer: OptimizerKind::default(),
            clip_norm: 5.0,
            hidden_dim: 64,
            embedding_dim: 32,
            k: 8,
            h: 64,
            kmeans_max_iters: 50,
            label_mix: 1.0,
            init_scale: 10.0,
            init_bias: -5.0,
            stop_gradient: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-size batch composition and cluster count.
    pub fn full_scale() -> Self {
        Self {
            speakers_per_batch: 200,
            k: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid_config(
                "warmup_epochs",
                "must not exceed epochs",
            ));
        }
        if self.speakers_per_batch < 2 {
            return Err(Error::invalid_config("speakers_per_batch", "must be >= 2"));
        }
        if self.utterances_per_speaker < 2 {
            return Err(Error::invalid_config(
                "utterances_per_speaker",
                "must be >= 2",
            ));
        }
        if self.adversary_steps < 1 {
            return Err(Error::invalid_config("adversary_steps", "must be >= 1"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::invalid_config("batches_per_epoch", "must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::invalid_config("k", "must be >= 1"));
        }
        if self.h == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid_config("h", "layer widths must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid_config("clip_norm", "must be positive"));
        }
        if !(self.label_mix >= 0.0) {
            return Err(Error::invalid_config("label_mix", "must be non-negative"));
        }
        if !(self.init_scale > 0.0) || !self.init_bias.is_finite() {
            return Err(Error::invalid_config(
                "init_scale",
                "scale must be positive, bias finite",
            ));
        }
        self.learner_lr.validate()?;
        self.adversary_lr.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Adversary,
    Learner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl LambdaStats {
    fn of(w: &SpeakerWeights) -> Self {
        Self {
            min: w.min(),
            mean: w.mean(),
            max: w.max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u32,
    pub step: u64,
    pub phase: Phase,
    /// The weighted AP objective before the update.
    pub objective: f64,
    /// Unweighted AP loss on the same batch.
    pub ap_loss: f64,
    pub label_loss: Option<f64>,
    pub lambda: Option<LambdaStats>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<StepRecord>,
}

impl History {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Mean unweighted AP loss of learner-side steps in `epoch`.
    pub fn epoch_ap_loss(&self, epoch: u32) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch && r.phase != Phase::Adversary)
            .map(|r| r.ap_loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub learner: Mlp,
    pub head: Mlp,
    pub scale: f64,
    pub bias: f64,
    pub adversary: Option<Mlp>,
    pub centroids: Option<Centroids>,
}

struct AdversaryPass {
    trace: ForwardTrace,
    outputs: Matrix,
    labels: Option<PseudoLabels>,
}

/// Weights applied to one batch, with what is needed to differentiate them.
pub struct BatchWeights {
    speaker: Option<SpeakerWeights>,
    pairs: Option<PairWeights>,
    adversary: Option<AdversaryPass>,
}

impl BatchWeights {
    fn plain() -> Self {
        Self {
            speaker: None,
            pairs: None,
            adversary: None,
        }
    }

    pub fn speaker(&self) -> Option<&SpeakerWeights> {
        self.speaker.as_ref()
    }
}

struct LearnerPass {
    trace: ForwardTrace,
    embeddings: Matrix,
    aq: AnchorQuery,
}

pub struct Trainer<'c> {
    config: TrainConfig,
    corpus: &'c Corpus,
    learner: Mlp,
    head: Mlp,
    scale: f64,
    bias: f64,
    adversary: Option<Mlp>,
    centroids: Option<Centroids>,
    learner_opt: OptimizerState,
    adversary_opt: Option<OptimizerState>,
    batch_rng: RngStream,
    label_of: Vec<Option<usize>>,
    batches_per_epoch: usize,
    epoch: u32,
    step: u64,
    unit_weights: bool,
    history: History,
}

impl<'c> Trainer<'c> {
    pub fn new(config: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        config.validate()?;
        let train = corpus.indices(Split::Train);
        if train.len() < config.speakers_per_batch {
            return Err(Error::Insufficient(format!(
                "batch needs {} speakers but the train split has {}",
                config.speakers_per_batch,
                train.len()
            )));
        }
        if config.variant.uses_centroids() && config.k > train.len() {
            return Err(Error::invalid_config(
                "k",
                format!(
                    "{} clusters exceed {} train speakers",
                    config.k,
                    train.len()
                ),
            ));
        }
        let mut label_of = vec![None; corpus.speakers.len()];
        for (label, &s) in train.iter().enumerate() {
            label_of[s] = Some(label);
        }
        let batches_per_epoch = config.batches_per_epoch.unwrap_or_else(|| {
            let utts: usize = train.iter().map(|&s| corpus.speakers[s].utterances).sum();
            let per_batch = config.speakers_per_batch * config.utterances_per_speaker;
            utts.div_ceil(per_batch).max(1)
        });

        let mut init = RngStream::derive(config.seed, streams::INIT);
        let learner = Mlp::init(
            &[corpus.feature_dim, config.hidden_dim, config.embedding_dim],
            &[Activation::Relu, Activation::Identity],
            Role::Learner,
            &mut init,
        )?;
        let head = Mlp::init(
            &[config.embedding_dim, train.len()],
            &[Activation::Identity],
            Role::LabelHead,
            &mut init,
        )?;
        let mut adv_rng = RngStream::derive(config.seed, streams::ADVERSARY_INIT);
        let adversary = match config.variant {
            Variant::Baseline => None,
            Variant::ApsInner | Variant::ApsCosexp => Some(Mlp::init(
                &[config.embedding_dim, config.hidden_dim, config.h],
                &[Activation::Relu, Activation::Identity],
                Role::Adversary,
                &mut adv_rng,
            )?),
            _ => Some(Mlp::adversary_256x3(
                config.embedding_dim,
                config.k,
                &mut adv_rng,
            )?),
        };
        let learner_opt = OptimizerState::new(
            config.optimizer,
            learner.param_count() + head.param_count() + 2,
        );
        let adversary_opt = adversary
            .as_ref()
            .map(|a| OptimizerState::new(config.optimizer, a.param_count()));
        Ok(Self {
            scale: config.init_scale,
            bias: config.init_bias,
            batch_rng: RngStream::derive(config.seed, streams::BATCHING),
            config,
            corpus,
            learner,
            head,
            adversary,
            centroids: None,
            learner_opt,
            adversary_opt,
            label_of,
            batches_per_epoch,
            epoch: 0,
            step: 0,
            unit_weights: false,
            history: History::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn learner(&self) -> &Mlp {
        &self.learner
    }

    pub fn adversary(&self) -> Option<&Mlp> {
        self.adversary.as_ref()
    }

    pub fn centroids(&self) -> Option<&Centroids> {
        self.centroids.as_ref()
    }

    /// Learner, head, scale and bias as one vector.
    pub fn learner_params(&self) -> Vec<f64> {
        let mut p = self.learner.flat_params();
        p.extend(self.head.flat_params());
        p.push(self.scale);
        p.push(self.bias);
        p
    }

    pub fn adversary_params(&self) -> Option<Vec<f64>> {
        self.adversary.as_ref().map(Mlp::flat_params)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    /// Replaces every λ with 1 (and every pair weight with 1).
    pub fn force_unit_weights(&mut self, on: bool) {
        self.unit_weights = on;
    }

    /// Moves the schedule to `epoch` without training.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    fn weighting_active(&self) -> bool {
        self.unit_weights
            || (self.config.variant != Variant::Baseline && self.epoch >= self.config.warmup_epochs)
    }

    pub fn sample(&mut self) -> Result<FeatureBatch> {
        sample_batch(
            self.corpus,
            self.config.speakers_per_batch,
            self.config.utterances_per_speaker,
            &mut self.batch_rng,
        )
    }

    /// Refits the centroids on one mean embedding per train speaker, keeping
    /// cluster indices aligned with the previous fit.
    pub fn refresh_centroids(&mut self) -> Result<()> {
        let train = self.corpus.indices(Split::Train);
        let emb = crate::eval::embed_speakers(&self.learner, self.corpus, &train)?;
        let e = self.config.embedding_dim;
        let mut means = Matrix::zeros(train.len(), e);
        for (row, &s) in train.iter().enumerate() {
            let m = &emb[&self.corpus.speakers[s].id];
            let inv = 1.0 / m.rows() as f64;
            let out = means.row_mut(row);
            for r in m.row_iter() {
                for (o, v) in out.iter_mut().zip(r) {
                    *o += inv * v;
                }
            }
        }
        let mut rng =
            RngStream::derive(self.config.seed, streams::KMEANS).substream(u64::from(self.epoch));
        let fit = kmeans_fit(
            &means,
            self.config.k,
            &mut rng,
            self.config.kmeans_max_iters,
        )?;
        self.centroids = Some(match self.centroids.take() {
            Some(previous) => fit.aligned_to(&previous),
            None => fit,
        });
        Ok(())
    }

    fn learner_pass(&self, batch: &FeatureBatch) -> Result<LearnerPass> {
        let (embeddings, trace) = self.learner.forward(&batch.features)?;
        let eb = EmbeddingBatch::new(
            batch.len(),
            batch.utterances_per_speaker,
            embeddings.clone(),
        )?;
        let aq = anchors_and_queries(&eb)?;
        Ok(LearnerPass {
            trace,
            embeddings,
            aq,
        })
    }

    /// λ for a batch given its anchors, under the current adversary.
    pub fn weights_for(&self, batch: &FeatureBatch) -> Result<BatchWeights> {
        let pass = self.learner_pass(batch)?;
        self.weights(&pass.aq.anchors)
    }

    fn weights(&self, anchors: &Matrix) -> Result<BatchWeights> {
        if !self.weighting_active() {
            return Ok(BatchWeights::plain());
        }
        let n = anchors.rows();
        if self.unit_weights {
            let pairwise = self.config.variant.is_pairwise();
            return Ok(BatchWeights {
                speaker: (!pairwise)
                    .then(|| SpeakerWeights::from_values(vec![1.0; n]))
                    .transpose()?,
                pairs: pairwise
                    .then(|| PairWeights::from_matrix(Matrix::filled(n, n, 1.0)))
                    .transpose()?,
                adversary: None,
            });
        }
        let adversary = self
            .adversary
            .as_ref()
            .expect("weighted variants own an adversary");
        let (outputs, trace) = adversary.forward(anchors)?;
        let (speaker, labels) = match self.config.variant {
            Variant::ApsInner => (aps_weights_inner_product(&outputs)?, None),
            Variant::ApsCosexp => (aps_weights_cosine_exp(&outputs)?, None),
            _ => {
                let centroids = self.centroids.as_ref().ok_or_else(|| {
                    Error::invalid_config("k", "centroids must be fitted before weighting")
                })?;
                let labels = assign_pseudo_labels(anchors, centroids)?;
                (pl_weights(&outputs, &labels)?, Some(labels))
            }
        };
        let pairs = self
            .config
            .variant
            .is_pairwise()
            .then(|| pw_weights(&speaker));
        Ok(BatchWeights {
            speaker: Some(speaker),
            pairs,
            adversary: Some(AdversaryPass {
                trace,
                outputs,
                labels,
            }),
        })
    }

    fn loss(&self, scores: &Matrix, weights: &BatchWeights) -> Result<LossBundle> {
        match (&weights.pairs, &weights.speaker) {
            (Some(p), _) => match self.config.variant {
                Variant::PwScaledLikelihood => pw_loss_scaled_likelihood(scores, p),
                _ => pw_loss_scaled_similarity(scores, p),
            },
            (None, Some(w)) => weighted_ap_loss_mean(scores, w),
            (None, None) => ap_loss(scores),
        }
    }

    /// Gradient of the loss with respect to the adversary outputs.
    fn adversary_output_grad(
        &self,
        weights: &BatchWeights,
        grad: &WeightGrad,
    ) -> Result<Option<Matrix>> {
        let Some(pass) = &weights.adversary else {
            return Ok(None);
        };
        let g = match grad {
            WeightGrad::None => return Ok(None),
            WeightGrad::Speaker(g) => g.clone(),
            WeightGrad::Pair(m) => pw_weights_backward(m),
        };
        let out = match self.config.variant {
            Variant::ApsInner => aps_weights_inner_product_backward(&pass.outputs, &g)?,
            Variant::ApsCosexp => aps_weights_cosine_exp_backward(&pass.outputs, &g)?,
            _ => pl_weights_backward(
                &pass.outputs,
                pass.labels
                    .as_ref()
                    .expect("pseudo-labels accompany PL weights"),
                &g,
            )?,
        };
        Ok(Some(out))
    }

    fn batch_labels(&self, batch: &FeatureBatch) -> Vec<usize> {
        batch
            .speakers
            .iter()
            .flat_map(|&s| {
                let l = self.label_of[s].expect("batches come from the train split");
                std::iter::repeat_n(l, batch.utterances_per_speaker)
            })
            .collect()
    }

    /// Weighted AP objective at the current parameters, with λ recomputed.
    pub fn objective(&self, batch: &FeatureBatch) -> Result<f64> {
        let pass = self.learner_pass(batch)?;
        let weights = self.weights(&pass.aq.anchors)?;
        self.objective_with(batch, &weights)
    }

    /// Weighted AP objective at the current learner parameters, with λ held
    /// at `weights`.
    pub fn objective_with(&self, batch: &FeatureBatch, weights: &BatchWeights) -> Result<f64> {
        let pass = self.learner_pass(batch)?;
        let sim = similarity_matrix(&pass.aq, self.scale, self.bias)?;
        Ok(self.loss(&sim.scores, weights)?.value)
    }

    /// One ascent step on the adversary; the learner is untouched.
    pub fn adversary_step(&mut self, batch: &FeatureBatch) -> Result<StepRecord> {
        if self.adversary.is_none() {
            return Err(Error::invalid_config(
                "variant",
                "baseline has no adversary",
            ));
        }
        let pass = self.learner_pass(batch)?;
        let sim = similarity_matrix(&pass.aq, self.scale, self.bias)?;
        let weights = self.weights(&pass.aq.anchors)?;
        let bundle = self.loss(&sim.scores, &weights)?;
        let plain = ap_loss(&sim.scores)?.value;
        let mut grads = match (
            self.adversary_output_grad(&weights, &bundle.grad_weights)?,
            &weights.adversary,
        ) {
            (Some(d_out), Some(adv_pass)) => {
                let adversary = self.adversary.as_ref().expect("checked above");
                adversary.backward(&adv_pass.trace, &d_out)?.0.flatten()
            }
            _ => vec![
                0.0;
                self.adversary
                    .as_ref()
                    .expect("checked above")
                    .param_count()
            ],
        };
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let adversary = self.adversary.as_mut().expect("checked above");
        let mut params = adversary.flat_params();
        let lr = self.config.adversary_lr.learning_rate_at(self.epoch);
        self.adversary_opt
            .as_mut()
            .expect("adversary has optimizer state")
            .step(&mut params, &grads, Direction::Maximize, lr)?;
        adversary.set_flat_params(&params)?;
        let record = StepRecord {
            epoch: self.epoch,
            step: self.step,
            phase: Phase::Adversary,
            objective: bundle.value,
            ap_loss: plain,
            label_loss: None,
            lambda: weights.speaker.as_ref().map(LambdaStats::of),
            grad_norm,
        };
        self.step += 1;
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// One descent step on learner, head, scale and bias; the adversary is
    /// untouched.
    pub fn learner_step(&mut self, batch: &FeatureBatch) -> Result<StepRecord> {
        let phase = if self.config.variant != Variant::Baseline && !self.weighting_active() {
            Phase::Warmup
        } else {
            Phase::Learner
        };
        let pass = self.learner_pass(batch)?;
        let sim = similarity_matrix(&pass.aq, self.scale, self.bias)?;
        let weights = self.weights(&pass.aq.anchors)?;
        let bundle = self.loss(&sim.scores, &weights)?;
        let plain = match weights.speaker.is_some() || weights.pairs.is_some() {
            true => ap_loss(&sim.scores)?.value,
            false => bundle.value,
        };
        let sg = sim.backward(&pass.aq, &bundle.grad_scores)?;
        let mut grad_anchors = sg.anchors;
        if !self.config.stop_gradient {
            if let (Some(d_out), Some(adv_pass)) = (
                self.adversary_output_grad(&weights, &bundle.grad_weights)?,
                &weights.adversary,
            ) {
                let adversary = self
                    .adversary
                    .as_ref()
                    .expect("weights came from the adversary");
                let (_, d_in) = adversary.backward(&adv_pass.trace, &d_out)?;
                for (a, d) in grad_anchors.as_mut_slice().iter_mut().zip(d_in.as_slice()) {
                    *a += d;
                }
            }
        }
        let mut grad_emb = pass.aq.backward(&grad_anchors, &sg.queries)?;
        let labels = self.batch_labels(batch);
        let label = label_loss(&pass.embeddings, &self.head, &labels)?;
        let mix = self.config.label_mix;
        for (g, l) in grad_emb
            .as_mut_slice()
            .iter_mut()
            .zip(label.grad_embeddings.as_slice())
        {
            *g += mix * l;
        }
        let (learner_grads, _) = self.learner.backward(&pass.trace, &grad_emb)?;
        let mut grads = learner_grads.flatten();
        grads.extend(label.head_grads.flatten().into_iter().map(|g| mix * g));
        grads.push(sg.scale);
        grads.push(sg.bias);
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);

        let mut params = self.learner_params();
        let lr = self.config.learner_lr.learning_rate_at(self.epoch);
        self.learner_opt
            .step(&mut params, &grads, Direction::Minimize, lr)?;
        let nl = self.learner.param_count();
        let nh = self.head.param_count();
        self.learner.set_flat_params(&params[..nl])?;
        self.head.set_flat_params(&params[nl..nl + nh])?;
        self.scale = params[nl + nh].max(1e-4);
        self.bias = params[nl + nh + 1];

        let record = StepRecord {
            epoch: self.epoch,
            step: self.step,
            phase,
            objective: bundle.value,
            ap_loss: plain,
            label_loss: Some(label.value),
            lambda: weights.speaker.as_ref().map(LambdaStats::of),
            grad_norm,
        };
        self.step += 1;
        self.history.records.push(record.clone());
        Ok(record)
    }

    /// Runs every epoch: warmup on the learner alone, then adversary and
    /// learner steps alternating on each batch.
    pub fn run(mut self) -> Result<(TrainedModel, History)> {
        for epoch in 0..self.config.epochs {
            self.epoch = epoch;
            let weighted = self.weighting_active();
            if weighted && self.config.variant.uses_centroids() {
                self.refresh_centroids()?;
            }
            for _ in 0..self.batches_per_epoch {
                let batch = self.sample()?;
                if weighted {
                    for _ in 0..self.config.adversary_steps {
                        self.adversary_step(&batch)?;
                    }
                }
                self.learner_step(&batch)?;
            }
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> (TrainedModel, History) {
        (
            TrainedModel {
                learner: self.learner,
                head: self.head,
                scale: self.scale,
                bias: self.bias,
                adversary: self.adversary,
                centroids: self.centroids,
            },
            self.history,
        )
    }
}

/// Trains the configured variant from scratch.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<(TrainedModel, History)> {
    Trainer::new(config.clone(), corpus)?.run()
}
