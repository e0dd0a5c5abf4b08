//! Verification trials, cosine scoring, EER and group-wise fairness reports.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::{index, IndexedRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::numerics::{cosine_similarity, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Genuine,
    Impostor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UtteranceRef {
    pub speaker: u32,
    pub utterance: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: UtteranceRef,
    pub test: UtteranceRef,
    pub target: Target,
    /// Per axis: the shared category, or `None` when the sides differ.
    pub groups: Vec<Option<u16>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub axes: Vec<crate::data::GroupAxis>,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

fn shared_groups(a: &[u16], b: &[u16]) -> Vec<Option<u16>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x == y).then_some(*x))
        .collect()
}

/// Builds trials over the eval split. Each speaker contributes `per_speaker`
/// genuine trials on distinct utterance pairs and `per_speaker` impostor
/// trials against speakers that share as many group categories as possible.
pub fn build_trials(corpus: &Corpus, per_speaker: usize, rng: &mut RngStream) -> Result<TrialSet> {
    let pool = corpus.indices(Split::Eval);
    if pool.len() < 2 {
        return Err(Error::Insufficient(format!(
            "trials need at least 2 eval speakers, corpus has {}",
            pool.len()
        )));
    }
    let mut trials = Vec::with_capacity(2 * per_speaker * pool.len());
    for &s in &pool {
        let spk = &corpus.speakers[s];
        let u = spk.utterances;
        let pairs = u * (u - 1) / 2;
        if per_speaker > pairs {
            return Err(Error::Insufficient(format!(
                "speaker {} has {pairs} utterance pairs, {per_speaker} genuine trials requested",
                spk.id
            )));
        }
        for p in index::sample(rng, pairs, per_speaker) {
            let (i, j) = unrank_pair(p, u);
            trials.push(Trial {
                enroll: UtteranceRef {
                    speaker: spk.id,
                    utterance: i,
                },
                test: UtteranceRef {
                    speaker: spk.id,
                    utterance: j,
                },
                target: Target::Genuine,
                groups: spk.groups.iter().map(|&g| Some(g)).collect(),
            });
        }

        let shared = |o: usize| {
            spk.groups
                .iter()
                .zip(&corpus.speakers[o].groups)
                .filter(|(a, b)| a == b)
                .count()
        };
        let best = pool
            .iter()
            .filter(|&&o| o != s)
            .map(|&o| shared(o))
            .max()
            .unwrap_or(0);
        let candidates: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&o| o != s && shared(o) == best)
            .collect();
        for _ in 0..per_speaker {
            let o = *candidates.choose(rng).expect("at least one other speaker");
            let other = &corpus.speakers[o];
            trials.push(Trial {
                enroll: UtteranceRef {
                    speaker: spk.id,
                    utterance: rng.below(u),
                },
                test: UtteranceRef {
                    speaker: other.id,
                    utterance: rng.below(other.utterances),
                },
                target: Target::Impostor,
                groups: shared_groups(&spk.groups, &other.groups),
            });
        }
    }
    Ok(TrialSet {
        axes: corpus.axes.clone(),
        trials,
    })
}

/// Maps `0..u(u-1)/2` onto pairs `i < j`.
fn unrank_pair(mut p: usize, u: usize) -> (usize, usize) {
    for i in 0..u {
        let row = u - 1 - i;
        if p < row {
            return (i, i + 1 + p);
        }
        p -= row;
    }
    unreachable!("pair rank out of range")
}

/// Embeds every utterance of the listed speakers.
pub fn embed_speakers(
    model: &Mlp,
    corpus: &Corpus,
    speakers: &[usize],
) -> Result<HashMap<u32, Matrix>> {
    if model.input_dim() != corpus.feature_dim {
        return Err(Error::DimensionMismatch {
            context: "model input vs corpus features",
            expected: model.input_dim(),
            actual: corpus.feature_dim,
        });
    }
    speakers
        .par_iter()
        .map(|&s| {
            let spk = &corpus.speakers[s];
            let x = Matrix::new(
                spk.utterances,
                corpus.feature_dim,
                spk.features.iter().map(|&v| v as f64).collect(),
            )?;
            Ok((spk.id, model.predict(&x)?))
        })
        .collect()
}

/// Cosine score per trial, in trial order.
pub fn score_trials(model: &Mlp, corpus: &Corpus, trials: &TrialSet) -> Result<Vec<f64>> {
    let by_id: HashMap<u32, usize> = corpus
        .speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i))
        .collect();
    let mut needed: Vec<usize> = Vec::new();
    for t in &trials.trials {
        for r in [t.enroll, t.test] {
            let &idx = by_id.get(&r.speaker).ok_or(Error::OutOfRange {
                context: "trial speaker id",
                index: r.speaker as usize,
                bound: corpus.speakers.len(),
            })?;
            if r.utterance >= corpus.speakers[idx].utterances {
                return Err(Error::OutOfRange {
                    context: "trial utterance index",
                    index: r.utterance,
                    bound: corpus.speakers[idx].utterances,
                });
            }
            needed.push(idx);
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let emb = embed_speakers(model, corpus, &needed)?;
    trials
        .trials
        .par_iter()
        .map(|t| {
            cosine_similarity(
                emb[&t.enroll.speaker].row(t.enroll.utterance),
                emb[&t.test.speaker].row(t.test.utterance),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate with acceptance `score >= t`.
///
/// Operating points are evaluated at every distinct score and at `+inf`.
/// The first point where FRR reaches FAR is taken exactly when the two are
/// equal; otherwise both curves are interpolated linearly from the previous
/// point to their crossing.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<Eer> {
    if genuine.is_empty() {
        return Err(Error::EmptyInput("genuine scores"));
    }
    if impostor.is_empty() {
        return Err(Error::EmptyInput("impostor scores"));
    }
    for (name, set) in [("genuine score", genuine), ("impostor score", impostor)] {
        if let Some(i) = set.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: name,
                coordinate: i,
            });
        }
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (ng, ni) = (g.len() as f64, im.len() as f64);
    let point = |t: f64| {
        let below_g = g.partition_point(|&s| s < t) as f64;
        let below_i = im.partition_point(|&s| s < t) as f64;
        ((ni - below_i) / ni, below_g / ng)
    };
    let (mut prev_far, mut prev_frr) = point(thresholds[0]);
    if prev_frr >= prev_far {
        return Ok(Eer {
            eer: prev_far,
            threshold: thresholds[0],
        });
    }
    for w in thresholds.windows(2) {
        let (far, frr) = point(w[1]);
        if frr >= far {
            if frr == far {
                return Ok(Eer {
                    eer: far,
                    threshold: if w[1].is_finite() { w[1] } else { w[0] },
                });
            }
            let d0 = prev_far - prev_frr;
            let d1 = far - frr;
            let a = d0 / (d0 - d1);
            let eer = prev_frr + a * (frr - prev_frr);
            let threshold = if w[1].is_finite() {
                w[0] + a * (w[1] - w[0])
            } else {
                w[0]
            };
            return Ok(Eer { eer, threshold });
        }
        prev_far = far;
        prev_frr = frr;
    }
    unreachable!("FRR reaches 1 and FAR reaches 0 at +inf")
}

/// Max minus min.
pub fn group_gap(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Standard deviation dividing by the number of values.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCell {
    pub category: String,
    /// Percent; `None` when the cell lacks genuine or impostor trials.
    pub eer_percent: Option<f64>,
    pub threshold: Option<f64>,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub axis: String,
    pub cells: Vec<GroupCell>,
    /// Percentage points over defined cells.
    pub gap: f64,
    pub std: f64,
    pub undefined_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub overall_eer_percent: f64,
    pub overall_threshold: f64,
    pub genuine_trials: usize,
    pub impostor_trials: usize,
    pub axes: Vec<AxisReport>,
    pub undefined_cells: usize,
}

impl FairnessReport {
    pub fn cell(&self, axis: &str, category: &str) -> Option<&GroupCell> {
        self.axes
            .iter()
            .find(|a| a.axis == axis)?
            .cells
            .iter()
            .find(|c| c.category == category)
    }
}

fn split_scores<'a>(
    scores: &[f64],
    trials: impl Iterator<Item = (usize, &'a Trial)>,
) -> (Vec<f64>, Vec<f64>) {
    let (mut g, mut i) = (Vec::new(), Vec::new());
    for (k, t) in trials {
        match t.target {
            Target::Genuine => g.push(scores[k]),
            Target::Impostor => i.push(scores[k]),
        }
    }
    (g, i)
}

pub fn fairness_report(scores: &[f64], trials: &TrialSet) -> Result<FairnessReport> {
    if scores.len() != trials.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs trials",
            expected: trials.len(),
            actual: scores.len(),
        });
    }
    let (g, im) = split_scores(scores, trials.trials.iter().enumerate());
    let overall = compute_eer(&g, &im)?;
    let mut axes = Vec::with_capacity(trials.axes.len());
    let mut undefined_total = 0;
    for (a, axis) in trials.axes.iter().enumerate() {
        let mut cells = Vec::new();
        for (c, name) in axis.categories.iter().enumerate() {
            let members = trials
                .trials
                .iter()
                .enumerate()
                .filter(|(_, t)| t.groups.get(a).copied().flatten() == Some(c as u16));
            let (cg, ci) = split_scores(scores, members);
            let eer = if cg.is_empty() || ci.is_empty() {
                None
            } else {
                Some(compute_eer(&cg, &ci)?)
            };
            cells.push(GroupCell {
                category: name.clone(),
                eer_percent: eer.map(|e| 100.0 * e.eer),
                threshold: eer.map(|e| e.threshold),
                genuine_trials: cg.len(),
                impostor_trials: ci.len(),
            });
        }
        let defined: Vec<f64> = cells.iter().filter_map(|c| c.eer_percent).collect();
        let undefined = cells.len() - defined.len();
        undefined_total += undefined;
        axes.push(AxisReport {
            axis: axis.name.clone(),
            gap: group_gap(&defined),
            std: population_std(&defined),
            cells,
            undefined_cells: undefined,
        });
    }
    Ok(FairnessReport {
        overall_eer_percent: 100.0 * overall.eer,
        overall_threshold: overall.threshold,
        genuine_trials: g.len(),
        impostor_trials: im.len(),
        axes,
        undefined_cells: undefined_total,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One overall row, then one row per group cell.
pub fn write_report_csv<W: Write>(report: &FairnessReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io {
        path: "<report csv>".into(),
        source: e.into(),
    };
    w.write_record([
        "axis",
        "group",
        "eer_percent",
        "gap",
        "std",
        "threshold",
        "genuine_trials",
        "impostor_trials",
    ])
    .map_err(io)?;
    w.write_record([
        "overall".to_string(),
        "all".to_string(),
        report.overall_eer_percent.to_string(),
        String::new(),
        String::new(),
        report.overall_threshold.to_string(),
        report.genuine_trials.to_string(),
        report.impostor_trials.to_string(),
    ])
    .map_err(io)?;
    for axis in &report.axes {
        for cell in &axis.cells {
            w.write_record([
                axis.axis.clone(),
                cell.category.clone(),
                opt(cell.eer_percent),
                axis.gap.to_string(),
                axis.std.to_string(),
                opt(cell.threshold),
                cell.genuine_trials.to_string(),
                cell.impostor_trials.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: "<report csv>".into(),
        source: e,
    })
}

/// Trial-level dump for external auditing.
pub fn write_scores_csv<W: Write>(trials: &TrialSet, scores: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io {
        path: "<scores csv>".into(),
        source: e.into(),
    };
    let mut header = vec![
        "trial".to_string(),
        "enroll_speaker".into(),
        "enroll_utterance".into(),
        "test_speaker".into(),
        "test_utterance".into(),
        "target".into(),
        "score".into(),
    ];
    header.extend(trials.axes.iter().map(|a| a.name.clone()));
    w.write_record(&header).map_err(io)?;
    for (k, (t, s)) in trials.trials.iter().zip(scores).enumerate() {
        let mut row = vec![
            k.to_string(),
            t.enroll.speaker.to_string(),
            t.enroll.utterance.to_string(),
            t.test.speaker.to_string(),
            t.test.utterance.to_string(),
            match t.target {
                Target::Genuine => "genuine".into(),
                Target::Impostor => "impostor".into(),
            },
            s.to_string(),
        ];
        for (a, g) in t.groups.iter().enumerate() {
            row.push(
                g.map(|c| trials.axes[a].categories[c as usize].clone())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<scores csv>".into(),
        source: e,
    })
}
