//! Baseline-versus-ARW comparison over seeds on a synthetic corpus.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, GenConfig};
use crate::error::{Error, ErrorClass, Result};
use crate::eval::{build_trials, fairness_report, score_trials, FairnessReport};
use crate::numerics::{streams, RngStream};
use crate::trainer::{train, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub trials_per_speaker: usize,
}

impl ExperimentConfig {
    /// The biased 85/15 fixture, every variant, five seeds.
    pub fn fairness_smoke() -> Self {
        Self {
            data: GenConfig::fairness_fixture(0),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            seeds: (1..=5).collect(),
            trials_per_speaker: 20,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::fairness_smoke();
        match name {
            "fairness-smoke" => Ok(base),
            "table1-gender" => Ok(Self {
                data: GenConfig::table1_gender(0),
                ..base
            }),
            "table2-nationality" => Ok(Self {
                data: GenConfig::table2_nationality(0),
                ..base
            }),
            other => Err(Error::invalid_config(
                "preset",
                format!("unknown '{other}', expected fairness-smoke, table1-gender or table2-nationality"),
            )),
        }
    }
}

/// One variant on one seed.
pub fn run_replica(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
) -> Result<FairnessReport> {
    let data = GenConfig {
        seed,
        ..config.data.clone()
    };
    let corpus = generate_corpus(&data, &mut RngStream::derive(seed, streams::DATA))?;
    let train_cfg = TrainConfig {
        variant,
        seed,
        ..config.train.clone()
    };
    let (model, _) = train(&train_cfg, &corpus)?;
    let trials = build_trials(
        &corpus,
        config.trials_per_speaker,
        &mut RngStream::derive(seed, streams::TRIALS),
    )?;
    let scores = score_trials(&model.learner, &corpus, &trials)?;
    fairness_report(&scores, &trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub variant: Variant,
    pub seed: u64,
    pub report: Option<FairnessReport>,
    pub error: Option<String>,
    pub error_class: Option<ErrorClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMedian {
    pub axis: String,
    pub category: String,
    pub eer_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMedian {
    pub axis: String,
    pub gap: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub completed: usize,
    pub failed: usize,
    pub overall_eer_percent: Option<f64>,
    pub groups: Vec<GroupMedian>,
    pub axes: Vec<AxisMedian>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub replicas: Vec<ReplicaResult>,
    pub summary: Vec<VariantSummary>,
}

impl ExperimentReport {
    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    pub fn replicas_for(&self, variant: Variant) -> impl Iterator<Item = &ReplicaResult> {
        self.replicas.iter().filter(move |r| r.variant == variant)
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn summarize(variant: Variant, replicas: &[ReplicaResult]) -> VariantSummary {
    let reports: Vec<&FairnessReport> = replicas
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.report.as_ref())
        .collect();
    let failed = replicas
        .iter()
        .filter(|r| r.variant == variant && r.error.is_some())
        .count();
    let mut groups = Vec::new();
    let mut axes = Vec::new();
    if let Some(first) = reports.first() {
        for (a, axis) in first.axes.iter().enumerate() {
            for (c, cell) in axis.cells.iter().enumerate() {
                let v: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.axes[a].cells[c].eer_percent)
                    .collect();
                groups.push(GroupMedian {
                    axis: axis.axis.clone(),
                    category: cell.category.clone(),
                    eer_percent: median(&v),
                });
            }
            let gaps: Vec<f64> = reports.iter().map(|r| r.axes[a].gap).collect();
            let stds: Vec<f64> = reports.iter().map(|r| r.axes[a].std).collect();
            axes.push(AxisMedian {
                axis: axis.axis.clone(),
                gap: median(&gaps).unwrap_or(0.0),
                std: median(&stds).unwrap_or(0.0),
            });
        }
    }
    let overall: Vec<f64> = reports.iter().map(|r| r.overall_eer_percent).collect();
    VariantSummary {
        variant,
        completed: reports.len(),
        failed,
        overall_eer_percent: median(&overall),
        groups,
        axes,
    }
}

/// Runs every (variant, seed) replica, in parallel across up to `workers`
/// threads (`0` = all cores). Results are ordered by variant, then seed,
/// regardless of completion order. A failing replica is recorded and the
/// rest continue.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    if config.seeds.is_empty() {
        return Err(Error::invalid_config("seeds", "need at least one seed"));
    }
    if config.variants.is_empty() {
        return Err(Error::invalid_config(
            "variants",
            "need at least one variant",
        ));
    }
    config.data.validate()?;
    config.train.validate()?;
    let jobs: Vec<(Variant, u64)> = config
        .variants
        .iter()
        .flat_map(|&v| config.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid_config("workers", e.to_string()))?;
    let replicas: Vec<ReplicaResult> = pool.install(|| {
        jobs.par_iter()
            .map(
                |&(variant, seed)| match run_replica(config, variant, seed) {
                    Ok(report) => ReplicaResult {
                        variant,
                        seed,
                        report: Some(report),
                        error: None,
                        error_class: None,
                    },
                    Err(e) => ReplicaResult {
                        variant,
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                        error_class: Some(e.class()),
                    },
                },
            )
            .collect()
    });
    let summary = config
        .variants
        .iter()
        .map(|&v| summarize(v, &replicas))
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        replicas,
        summary,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per variant: medians of overall EER, each group EER, then gap
/// and std per axis.
pub fn write_summary_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: "<experiment csv>".into(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_writer(out);
    let Some(template) = report.summary.iter().find(|s| s.completed > 0) else {
        w.write_record(["variant", "completed", "failed"])
            .map_err(io)?;
        for s in &report.summary {
            w.write_record([
                s.variant.name().to_string(),
                "0".into(),
                s.failed.to_string(),
            ])
            .map_err(io)?;
        }
        return w.flush().map_err(|e| Error::Io {
            path: "<experiment csv>".into(),
            source: e,
        });
    };
    let mut header = vec![
        "variant".to_string(),
        "completed".into(),
        "failed".into(),
        "overall_eer".into(),
    ];
    for g in &template.groups {
        header.push(format!("{}:{}", g.axis, g.category));
    }
    for a in &template.axes {
        header.push(format!("{}:gap", a.axis));
        header.push(format!("{}:std", a.axis));
    }
    w.write_record(&header).map_err(io)?;
    for s in &report.summary {
        let mut row = vec![
            s.variant.name().to_string(),
            s.completed.to_string(),
            s.failed.to_string(),
            cell(s.overall_eer_percent),
        ];
        if s.completed == 0 {
            row.resize(header.len(), String::new());
        } else {
            row.extend(s.groups.iter().map(|g| cell(g.eer_percent)));
            for a in &s.axes {
                row.push(a.gap.to_string());
                row.push(a.std.to_string());
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<experiment csv>".into(),
        source: e,
    })
}
