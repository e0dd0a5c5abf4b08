//! Finite-difference audit of every analytic gradient in the crate.
//!
//! Each component builds a random instance, flattens its differentiable
//! inputs into one vector, and compares the analytic gradient of a scalar
//! against central differences. Weight maps that return vectors are reduced
//! to a scalar through a random linear functional.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    anchors_and_queries, ap_loss, label_loss, pw_loss_scaled_likelihood, pw_loss_scaled_similarity,
    similarity_matrix, weighted_ap_loss_mean, EmbeddingBatch, LossBundle, WeightGrad,
};
use crate::model::{sigmoid, Activation, Mlp, Role};
use crate::numerics::{finite_diff_gradient, relative_error, streams, Matrix, RngStream};
use crate::reweighting::{
    aps_weights_cosine_exp, aps_weights_cosine_exp_backward, aps_weights_inner_product,
    aps_weights_inner_product_backward, normalized_instance_weights,
    normalized_instance_weights_backward, pl_weights, pl_weights_backward, pw_weights,
    pw_weights_backward, PairWeights, PseudoLabels, SpeakerWeights,
};

pub const SPEAKERS: usize = 5;
pub const UTTERANCES: usize = 2;
pub const DIM: usize = 8;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// AP loss through anchors, queries, scale and bias.
    Ap,
    /// Speaker-weighted AP loss, in embeddings and λ.
    WeightedAp,
    PwSim,
    PwLik,
    Label,
    /// λ = 1 + r / mean(r).
    ArwNorm,
    ApsInner,
    ApsCosexp,
    Pl,
    PwWeights,
    Mlp,
}

impl Component {
    pub const ALL: [Component; 11] = [
        Component::Ap,
        Component::WeightedAp,
        Component::PwSim,
        Component::PwLik,
        Component::Label,
        Component::ArwNorm,
        Component::ApsInner,
        Component::ApsCosexp,
        Component::Pl,
        Component::PwWeights,
        Component::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Ap => "ap",
            Component::WeightedAp => "weighted-ap",
            Component::PwSim => "pw-sim",
            Component::PwLik => "pw-lik",
            Component::Label => "label",
            Component::ArwNorm => "arw-norm",
            Component::ApsInner => "aps-inner",
            Component::ApsCosexp => "aps-cosexp",
            Component::Pl => "pl",
            Component::PwWeights => "pw-weights",
            Component::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Component::ALL.iter().map(|c| c.name()).collect();
                Error::invalid_config(
                    "component",
                    format!("unknown '{s}', expected one of {}", valid.join(", ")),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: Component,
    pub worst_relative_error: f64,
    pub worst_seed: u64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&ComponentResult> {
        self.components
            .iter()
            .max_by(|a, b| a.worst_relative_error.total_cmp(&b.worst_relative_error))
    }
}

/// Vector-Jacobian product: `(input, upstream) -> gradient on input`.
type VjpFn<'a> = dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + 'a;

fn normals(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::new(rows, cols, data.to_vec()).expect("sized by construction")
}

/// Scalar loss of flat embeddings `[N·M·E]`, with AP-side backprop.
fn embedding_path(
    x: &[f64],
    scale: f64,
    bias: f64,
    loss: &dyn Fn(&Matrix) -> Result<LossBundle>,
) -> Result<(f64, Vec<f64>, f64, f64, WeightGrad)> {
    let eb = EmbeddingBatch::new(SPEAKERS, UTTERANCES, matrix(SPEAKERS * UTTERANCES, DIM, x))?;
    let aq = anchors_and_queries(&eb)?;
    let sim = similarity_matrix(&aq, scale, bias)?;
    let bundle = loss(&sim.scores)?;
    let g = sim.backward(&aq, &bundle.grad_scores)?;
    let ge = aq.backward(&g.anchors, &g.queries)?;
    Ok((
        bundle.value,
        ge.into_vec(),
        g.scale,
        g.bias,
        bundle.grad_weights,
    ))
}

type Check = (Vec<f64>, Vec<f64>);

fn check_ap(rng: &mut RngStream) -> Result<Check> {
    let mut x = normals(SPEAKERS * UTTERANCES * DIM, rng);
    x.push(rng.uniform_in(2.0, 12.0));
    x.push(rng.uniform_in(-6.0, 0.0));
    let n = x.len();
    let eval = |v: &[f64]| embedding_path(&v[..n - 2], v[n - 2], v[n - 1], &|s| ap_loss(s));
    let (_, mut analytic, gs, gb, _) = eval(&x)?;
    analytic.push(gs);
    analytic.push(gb);
    let numeric = finite_diff_gradient(|v| eval(v).map(|r| r.0).unwrap_or(f64::NAN), &x, STEP)?;
    Ok((analytic, numeric))
}

/// Embeddings followed by `extra` weight coordinates; checks both.
fn check_weighted(
    rng: &mut RngStream,
    extra: Vec<f64>,
    loss: &dyn Fn(&Matrix, &[f64]) -> Result<LossBundle>,
) -> Result<Check> {
    let ne = SPEAKERS * UTTERANCES * DIM;
    let mut x = normals(ne, rng);
    let (scale, bias) = (rng.uniform_in(2.0, 12.0), rng.uniform_in(-6.0, 0.0));
    x.extend(extra);
    let eval = |v: &[f64]| embedding_path(&v[..ne], scale, bias, &|s| loss(s, &v[ne..]));
    let (_, mut analytic, _, _, wg) = eval(&x)?;
    match wg {
        WeightGrad::Speaker(g) => analytic.extend(g),
        WeightGrad::Pair(m) => analytic.extend(m.into_vec()),
        WeightGrad::None => {
            return Err(Error::invalid_config(
                "component",
                "loss exposes no weight gradient",
            ))
        }
    }
    let numeric = finite_diff_gradient(|v| eval(v).map(|r| r.0).unwrap_or(f64::NAN), &x, STEP)?;
    Ok((analytic, numeric))
}

fn positive_pairs(rng: &mut RngStream) -> Vec<f64> {
    (0..SPEAKERS * SPEAKERS)
        .map(|_| rng.uniform_in(0.5, 4.0))
        .collect()
}

fn check_weight_map(
    x: Vec<f64>,
    rng: &mut RngStream,
    outputs: usize,
    forward: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    backward: &VjpFn<'_>,
) -> Result<Check> {
    let c = normals(outputs, rng);
    let scalar = |v: &[f64]| -> f64 {
        forward(v)
            .map(|w| w.iter().zip(&c).map(|(a, b)| a * b).sum())
            .unwrap_or(f64::NAN)
    };
    let analytic = backward(&x, &c)?;
    let numeric = finite_diff_gradient(scalar, &x, STEP)?;
    Ok((analytic, numeric))
}

fn run_component(component: Component, rng: &mut RngStream) -> Result<Check> {
    let h = DIM;
    match component {
        Component::Ap => check_ap(rng),
        Component::WeightedAp => {
            let w = (0..SPEAKERS).map(|_| rng.uniform_in(0.5, 3.5)).collect();
            check_weighted(rng, w, &|s, w| {
                weighted_ap_loss_mean(s, &SpeakerWeights::from_values(w.to_vec())?)
            })
        }
        Component::PwSim => {
            let p = positive_pairs(rng);
            check_weighted(rng, p, &|s, w| {
                pw_loss_scaled_similarity(
                    s,
                    &PairWeights::from_matrix(matrix(SPEAKERS, SPEAKERS, w))?,
                )
            })
        }
        Component::PwLik => {
            let p = positive_pairs(rng);
            check_weighted(rng, p, &|s, w| {
                pw_loss_scaled_likelihood(
                    s,
                    &PairWeights::from_matrix(matrix(SPEAKERS, SPEAKERS, w))?,
                )
            })
        }
        Component::Label => {
            let rows = SPEAKERS * UTTERANCES;
            let head = Mlp::init(
                &[DIM, SPEAKERS],
                &[Activation::Identity],
                Role::LabelHead,
                rng,
            )?;
            let ids: Vec<usize> = (0..rows).map(|r| r / UTTERANCES).collect();
            let ne = rows * DIM;
            let mut x = normals(ne, rng);
            x.extend(head.flat_params());
            let eval = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut hd = head.clone();
                hd.set_flat_params(&v[ne..])?;
                let l = label_loss(&matrix(rows, DIM, &v[..ne]), &hd, &ids)?;
                let mut g = l.grad_embeddings.into_vec();
                g.extend(l.head_grads.flatten());
                Ok((l.value, g))
            };
            let analytic = eval(&x)?.1;
            let numeric =
                finite_diff_gradient(|v| eval(v).map(|r| r.0).unwrap_or(f64::NAN), &x, STEP)?;
            Ok((analytic, numeric))
        }
        Component::ArwNorm => {
            let raw = (0..SPEAKERS).map(|_| rng.uniform_in(0.05, 0.95)).collect();
            check_weight_map(
                raw,
                rng,
                SPEAKERS,
                &|v| Ok(normalized_instance_weights(v)?.as_slice().to_vec()),
                &|v, c| Ok(normalized_instance_weights_backward(v, c)),
            )
        }
        Component::ApsInner => {
            // A positive shift keeps the aggregate away from zero.
            let proj = (0..SPEAKERS * h).map(|_| rng.normal() + 0.5).collect();
            check_weight_map(
                proj,
                rng,
                SPEAKERS,
                &|v| {
                    Ok(aps_weights_inner_product(&matrix(SPEAKERS, h, v))?
                        .as_slice()
                        .to_vec())
                },
                &|v, c| {
                    Ok(aps_weights_inner_product_backward(&matrix(SPEAKERS, h, v), c)?.into_vec())
                },
            )
        }
        Component::ApsCosexp => {
            let proj = normals(SPEAKERS * h, rng);
            check_weight_map(
                proj,
                rng,
                SPEAKERS,
                &|v| {
                    Ok(aps_weights_cosine_exp(&matrix(SPEAKERS, h, v))?
                        .as_slice()
                        .to_vec())
                },
                &|v, c| Ok(aps_weights_cosine_exp_backward(&matrix(SPEAKERS, h, v), c)?.into_vec()),
            )
        }
        Component::Pl => {
            let k = 3;
            let labels = PseudoLabels::new((0..SPEAKERS).map(|_| rng.below(k)).collect(), k)?;
            let out = (0..SPEAKERS * k).map(|_| sigmoid(rng.normal())).collect();
            check_weight_map(
                out,
                rng,
                SPEAKERS,
                &|v| {
                    Ok(pl_weights(&matrix(SPEAKERS, k, v), &labels)?
                        .as_slice()
                        .to_vec())
                },
                &|v, c| Ok(pl_weights_backward(&matrix(SPEAKERS, k, v), &labels, c)?.into_vec()),
            )
        }
        Component::PwWeights => {
            let w = (0..SPEAKERS).map(|_| rng.uniform_in(1.0, 3.0)).collect();
            check_weight_map(
                w,
                rng,
                SPEAKERS * SPEAKERS,
                &|v| {
                    Ok(pw_weights(&SpeakerWeights::from_values(v.to_vec())?)
                        .matrix()
                        .as_slice()
                        .to_vec())
                },
                &|_, c| Ok(pw_weights_backward(&matrix(SPEAKERS, SPEAKERS, c))),
            )
        }
        Component::Mlp => {
            let mut net = Mlp::init(
                &[DIM, 6, 4],
                &[Activation::Sigmoid, Activation::Identity],
                Role::Learner,
                rng,
            )?;
            let rows = SPEAKERS;
            let inputs = matrix(rows, DIM, &normals(rows * DIM, rng));
            let c = matrix(rows, 4, &normals(rows * 4, rng));
            let np = net.param_count();
            let mut x = net.flat_params();
            x.extend(inputs.as_slice());
            let eval = |net: &mut Mlp, v: &[f64]| -> Result<(f64, Vec<f64>)> {
                net.set_flat_params(&v[..np])?;
                let (out, trace) = net.forward(&matrix(rows, DIM, &v[np..]))?;
                let value = out
                    .as_slice()
                    .iter()
                    .zip(c.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                let (g, gi) = net.backward(&trace, &c)?;
                let mut flat = g.flatten();
                flat.extend(gi.into_vec());
                Ok((value, flat))
            };
            let analytic = eval(&mut net, &x)?.1;
            let numeric = finite_diff_gradient(
                |v| eval(&mut net, v).map(|r| r.0).unwrap_or(f64::NAN),
                &x,
                STEP,
            )?;
            Ok((analytic, numeric))
        }
    }
}

/// Audits `components` over `seeds`. Instances for a seed come from the
/// gradcheck stream of that seed, one sub-stream per component.
pub fn run_gradcheck(components: &[Component], seeds: &[u64]) -> Result<GradcheckReport> {
    let mut results = Vec::with_capacity(components.len());
    for &component in components {
        let mut worst = (0.0f64, seeds.first().copied().unwrap_or(0), 0usize);
        let mut coordinates = 0;
        for &seed in seeds {
            let mut rng = RngStream::derive(seed, streams::GRADCHECK).substream(component as u64);
            let (analytic, numeric) = run_component(component, &mut rng)?;
            if analytic.len() != numeric.len() {
                return Err(Error::DimensionMismatch {
                    context: "gradcheck analytic vs numeric",
                    expected: numeric.len(),
                    actual: analytic.len(),
                });
            }
            coordinates += analytic.len();
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let e = relative_error(*a, *n, FLOOR);
                if e > worst.0 || e.is_nan() {
                    worst = (e, seed, i);
                }
            }
        }
        results.push(ComponentResult {
            component,
            worst_relative_error: worst.0,
            worst_seed: worst.1,
            worst_coordinate: worst.2,
            coordinates,
            passed: worst.0 <= TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        seeds: seeds.to_vec(),
        tolerance: TOLERANCE,
        components: results,
    })
}
