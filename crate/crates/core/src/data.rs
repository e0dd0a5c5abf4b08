//! Synthetic biased corpora, batch sampling, and the `.arwc` corpus file.
//!
//! Features stand in for audio. Each speaker has a mean vector built from
//! its group directions plus a speaker-specific offset; utterances add
//! within-speaker noise whose scale depends on the speaker's groups. Group
//! tags are stored for evaluation only and are never read by training.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::Reader;
use crate::numerics::{norm, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryConfig {
    pub name: String,
    pub proportion: f64,
    /// Multiplier on the within-speaker noise for members of this category.
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisConfig {
    pub name: String,
    pub categories: Vec<CategoryConfig>,
}

/// Generator settings. Serialized as JSON for `gen-data --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub axes: Vec<AxisConfig>,
    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    /// Length of each category's direction in the speaker mean.
    pub group_separation: f64,
    /// RMS length of the speaker-specific offset.
    pub speaker_spread: f64,
    /// RMS length of within-speaker noise before per-category scaling.
    pub within_noise: f64,
    /// When set, speakers of each category on the first axis differ from one
    /// another only inside a category-specific random subspace of this
    /// dimension; otherwise offsets are isotropic.
    #[serde(default)]
    pub identity_dim: Option<usize>,
    /// Dimension of a session subspace shared by all speakers. Every
    /// utterance adds an independent draw inside it.
    #[serde(default)]
    pub nuisance_dim: usize,
    /// RMS length of the session component.
    #[serde(default)]
    pub nuisance_scale: f64,
    pub seed: u64,
}

fn axis(name: &str, cats: &[(&str, f64, f64)]) -> AxisConfig {
    AxisConfig {
        name: name.into(),
        categories: cats
            .iter()
            .map(|&(n, p, s)| CategoryConfig {
                name: n.into(),
                proportion: p,
                noise_scale: s,
            })
            .collect(),
    }
}

impl GenConfig {
    fn desk(axes: Vec<AxisConfig>, seed: u64) -> Self {
        Self {
            axes,
            train_speakers: 100,
            eval_speakers: 100,
            utterances_per_speaker: 10,
            feature_dim: 64,
            group_separation: 1.0,
            speaker_spread: 1.0,
            within_noise: 0.6,
            identity_dim: Some(24),
            nuisance_dim: 8,
            nuisance_scale: 2.0,
            seed,
        }
    }

    /// Binary gender-like axis at 45/55.
    pub fn table1_gender(seed: u64) -> Self {
        Self::desk(
            vec![axis(
                "gender",
                &[("female", 0.45, 1.0), ("male", 0.55, 1.0)],
            )],
            seed,
        )
    }

    /// Ternary nationality-like axis at 64/17/19.
    pub fn table2_nationality(seed: u64) -> Self {
        Self::desk(
            vec![axis(
                "nationality",
                &[("US", 0.64, 1.0), ("UK", 0.17, 1.4), ("Others", 0.19, 1.4)],
            )],
            seed,
        )
    }

    /// Both axes, generated independently.
    pub fn both_axes(seed: u64) -> Self {
        Self::desk(
            vec![
                axis("gender", &[("female", 0.45, 1.0), ("male", 0.55, 1.0)]),
                axis(
                    "nationality",
                    &[("US", 0.64, 1.0), ("UK", 0.17, 1.4), ("Others", 0.19, 1.4)],
                ),
            ],
            seed,
        )
    }

    /// The default biased fixture: 85/15 with noisier minority speakers.
    pub fn fairness_fixture(seed: u64) -> Self {
        Self::desk(
            vec![axis(
                "group",
                &[("majority", 0.85, 1.0), ("minority", 0.15, 1.6)],
            )],
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::invalid_config(
                "axes",
                "need at least one group axis",
            ));
        }
        for (a, ax) in self.axes.iter().enumerate() {
            if ax.categories.is_empty() {
                return Err(Error::invalid_config(
                    format!("axes[{a}].categories"),
                    "need at least one category",
                ));
            }
            let total: f64 = ax.categories.iter().map(|c| c.proportion).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid_config(
                    format!("axes[{a}].categories.proportion"),
                    format!("proportions sum to {total}, not 1"),
                ));
            }
            for (c, cat) in ax.categories.iter().enumerate() {
                if !(cat.proportion >= 0.0) {
                    return Err(Error::invalid_config(
                        format!("axes[{a}].categories[{c}].proportion"),
                        "must be non-negative",
                    ));
                }
                if !(cat.noise_scale > 0.0) {
                    return Err(Error::invalid_config(
                        format!("axes[{a}].categories[{c}].noise_scale"),
                        "must be positive",
                    ));
                }
            }
        }
        if self.utterances_per_speaker < 2 {
            return Err(Error::invalid_config(
                "utterances_per_speaker",
                "must be >= 2",
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid_config("feature_dim", "must be >= 1"));
        }
        if self.train_speakers == 0 {
            return Err(Error::invalid_config("train_speakers", "must be >= 1"));
        }
        if !(self.within_noise > 0.0) {
            return Err(Error::invalid_config("within_noise", "must be positive"));
        }
        if !(self.speaker_spread >= 0.0) || !(self.group_separation >= 0.0) {
            return Err(Error::invalid_config(
                "speaker_spread",
                "spread and separation must be non-negative",
            ));
        }
        if self.nuisance_dim > self.feature_dim {
            return Err(Error::invalid_config(
                "nuisance_dim",
                format!("must be at most {}", self.feature_dim),
            ));
        }
        if !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite()) {
            return Err(Error::invalid_config(
                "nuisance_scale",
                "must be finite and non-negative",
            ));
        }
        if let Some(d) = self.identity_dim {
            if d == 0 || d > self.feature_dim {
                return Err(Error::invalid_config(
                    "identity_dim",
                    format!("must be in 1..={}", self.feature_dim),
                ));
            }
        }
        Ok(())
    }
}

/// Category counts for `total` items by largest-remainder rounding. Ties
/// in the remainder go to the earlier category.
pub fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAxis {
    pub name: String,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: u32,
    pub split: Split,
    /// Category index per axis.
    pub groups: Vec<u16>,
    pub utterances: usize,
    /// `utterances × feature_dim`, row-major.
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub axes: Vec<GroupAxis>,
    pub speakers: Vec<Speaker>,
}

impl Corpus {
    pub fn utterance(&self, speaker: usize, index: usize) -> &[f32] {
        let f = self.feature_dim;
        &self.speakers[speaker].features[index * f..(index + 1) * f]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.speakers.len())
            .filter(|&i| self.speakers[i].split == split)
            .collect()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), FormatError> {
        let bad = |m: String| Err(FormatError::InvariantViolation(m));
        if self.feature_dim == 0 {
            return bad("feature dimension is zero".into());
        }
        let mut seen = HashSet::new();
        for s in &self.speakers {
            if !seen.insert(s.id) {
                return bad(format!("duplicate speaker id {}", s.id));
            }
            if s.utterances < 2 {
                return bad(format!("speaker {} has {} utterances", s.id, s.utterances));
            }
            if s.features.len() != s.utterances * self.feature_dim {
                return bad(format!("speaker {} feature block has wrong length", s.id));
            }
            if s.groups.len() != self.axes.len() {
                return bad(format!(
                    "speaker {} has {} group tags",
                    s.id,
                    s.groups.len()
                ));
            }
            for (g, ax) in s.groups.iter().zip(&self.axes) {
                if *g as usize >= ax.categories.len() {
                    return bad(format!(
                        "speaker {} category {g} out of range on axis {}",
                        s.id, ax.name
                    ));
                }
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return bad(format!("speaker {} has non-finite features", s.id));
            }
        }
        Ok(())
    }
}

fn random_unit(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `dim` orthonormal vectors in `R^ambient` by Gram-Schmidt on Gaussian draws.
fn random_basis(dim: usize, ambient: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..ambient).map(|_| rng.normal()).collect();
        for b in &basis {
            let p = crate::numerics::dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Generates a corpus. All randomness comes from `rng`.
///
/// Order of draws: category directions (axis by axis), identity subspaces,
/// the session subspace, then for the train split followed by the eval split: per-axis category
/// shuffles, then per speaker its offset and utterance noise.
pub fn generate_corpus(config: &GenConfig, rng: &mut RngStream) -> Result<Corpus> {
    config.validate()?;
    let f = config.feature_dim;
    let directions: Vec<Vec<Vec<f64>>> = config
        .axes
        .iter()
        .map(|ax| ax.categories.iter().map(|_| random_unit(f, rng)).collect())
        .collect();
    let identity: Option<Vec<Vec<Vec<f64>>>> = config.identity_dim.map(|d| {
        config.axes[0]
            .categories
            .iter()
            .map(|_| random_basis(d, f, rng))
            .collect()
    });
    let session = if config.nuisance_dim > 0 {
        random_basis(config.nuisance_dim, f, rng)
    } else {
        Vec::new()
    };
    let session_scale = config.nuisance_scale / (config.nuisance_dim.max(1) as f64).sqrt();

    let mut speakers = Vec::with_capacity(config.train_speakers + config.eval_speakers);
    let mut next_id = 0u32;
    for (split, count) in [
        (Split::Train, config.train_speakers),
        (Split::Eval, config.eval_speakers),
    ] {
        let tags: Vec<Vec<u16>> = config
            .axes
            .iter()
            .map(|ax| {
                let props: Vec<f64> = ax.categories.iter().map(|c| c.proportion).collect();
                let mut tags: Vec<u16> = largest_remainder(&props, count)
                    .into_iter()
                    .enumerate()
                    .flat_map(|(c, n)| std::iter::repeat_n(c as u16, n))
                    .collect();
                tags.shuffle(rng);
                tags
            })
            .collect();
        for s in 0..count {
            let groups: Vec<u16> = tags.iter().map(|t| t[s]).collect();
            let mut mean = vec![0.0; f];
            let mut noise = config.within_noise;
            for (a, &g) in groups.iter().enumerate() {
                for (m, d) in mean.iter_mut().zip(&directions[a][g as usize]) {
                    *m += config.group_separation * d;
                }
                noise *= config.axes[a].categories[g as usize].noise_scale;
            }
            match &identity {
                Some(bases) => {
                    let basis = &bases[groups[0] as usize];
                    let scale = config.speaker_spread / (basis.len() as f64).sqrt();
                    for b in basis {
                        let z = rng.normal() * scale;
                        for (m, x) in mean.iter_mut().zip(b) {
                            *m += z * x;
                        }
                    }
                }
                None => {
                    let scale = config.speaker_spread / (f as f64).sqrt();
                    for m in mean.iter_mut() {
                        *m += rng.normal() * scale;
                    }
                }
            }
            let per_coord = noise / (f as f64).sqrt();
            let mut features = Vec::with_capacity(config.utterances_per_speaker * f);
            for _ in 0..config.utterances_per_speaker {
                let mut x: Vec<f64> = mean.iter().map(|&m| m + per_coord * rng.normal()).collect();
                for b in &session {
                    let z = rng.normal() * session_scale;
                    for (v, e) in x.iter_mut().zip(b) {
                        *v += z * e;
                    }
                }
                features.extend(x.into_iter().map(|v| v as f32));
            }
            speakers.push(Speaker {
                id: next_id,
                split,
                groups,
                utterances: config.utterances_per_speaker,
                features,
            });
            next_id += 1;
        }
    }
    let corpus = Corpus {
        feature_dim: f,
        axes: config
            .axes
            .iter()
            .map(|ax| GroupAxis {
                name: ax.name.clone(),
                categories: ax.categories.iter().map(|c| c.name.clone()).collect(),
            })
            .collect(),
        speakers,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// `N` distinct train speakers with `M` utterances each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    /// Indices into `Corpus::speakers`.
    pub speakers: Vec<usize>,
    /// Utterance indices, `M` per speaker.
    pub utterances: Vec<Vec<usize>>,
    /// `(N·M) × F` features, speaker-major.
    pub features: Matrix,
    pub utterances_per_speaker: usize,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

/// Draws a batch from the train split: speakers uniformly without
/// replacement, then utterances without replacement per speaker.
pub fn sample_batch(
    corpus: &Corpus,
    n: usize,
    m: usize,
    rng: &mut RngStream,
) -> Result<FeatureBatch> {
    let pool = corpus.indices(Split::Train);
    if n > pool.len() {
        return Err(Error::Insufficient(format!(
            "batch needs {n} speakers but the train split has {}",
            pool.len()
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::invalid_config(
            "N/M",
            "batch dimensions must be positive",
        ));
    }
    let chosen: Vec<usize> = index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let f = corpus.feature_dim;
    let mut data = Vec::with_capacity(n * m * f);
    let mut utterances = Vec::with_capacity(n);
    for &s in &chosen {
        let available = corpus.speakers[s].utterances;
        if available < m {
            return Err(Error::Insufficient(format!(
                "speaker {} has {available} utterances, batch needs {m}",
                corpus.speakers[s].id
            )));
        }
        let picks: Vec<usize> = index::sample(rng, available, m).into_vec();
        for &u in &picks {
            data.extend(corpus.utterance(s, u).iter().map(|&x| x as f64));
        }
        utterances.push(picks);
    }
    Ok(FeatureBatch {
        speakers: chosen,
        utterances,
        features: Matrix::new(n * m, f, data)?,
        utterances_per_speaker: m,
    })
}

const CORPUS_MAGIC: [u8; 4] = *b"ARWC";
const CORPUS_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct SpeakerMeta {
    id: u32,
    split: Split,
    groups: Vec<u16>,
    utterances: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    feature_dim: usize,
    axes: Vec<GroupAxis>,
    speakers: Vec<SpeakerMeta>,
}

/// Encodes a corpus:
///
/// ```text
/// magic "ARWC" | version u16 | metadata length u64 | metadata JSON (UTF-8) |
///   features f32[Σ utterances · feature_dim]
/// ```
///
/// Integers and floats are little-endian; features are row-major in speaker
/// order as listed in the metadata.
pub fn encode_corpus(corpus: &Corpus) -> Vec<u8> {
    let meta = CorpusMeta {
        feature_dim: corpus.feature_dim,
        axes: corpus.axes.clone(),
        speakers: corpus
            .speakers
            .iter()
            .map(|s| SpeakerMeta {
                id: s.id,
                split: s.split,
                groups: s.groups.clone(),
                utterances: s.utterances,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &corpus.speakers {
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if magic != CORPUS_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CORPUS_MAGIC,
            found: magic,
        }
        .into());
    }
    let version = r.u16()?;
    if version != CORPUS_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CORPUS_VERSION,
        }
        .into());
    }
    let len = u64::from_le_bytes(r.array()?);
    let len = usize::try_from(len).map_err(|_| FormatError::Metadata("length overflows".into()))?;
    let json = r.take(len)?;
    let meta: CorpusMeta =
        serde_json::from_slice(json).map_err(|e| FormatError::Metadata(e.to_string()))?;
    let mut speakers = Vec::with_capacity(meta.speakers.len());
    for s in meta.speakers {
        let count = s
            .utterances
            .checked_mul(meta.feature_dim)
            .ok_or_else(|| FormatError::Metadata("feature block overflows".into()))?;
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| FormatError::Metadata("feature block overflows".into()))?,
        )?;
        let features = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        speakers.push(Speaker {
            id: s.id,
            split: s.split,
            groups: s.groups,
            utterances: s.utterances,
            features,
        });
    }
    r.finish()?;
    let corpus = Corpus {
        feature_dim: meta.feature_dim,
        axes: meta.axes,
        speakers,
    };
    corpus.validate()?;
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, encode_corpus(corpus)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_corpus(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            train_speakers: 20,
            eval_speakers: 6,
            utterances_per_speaker: 4,
            feature_dim: 8,
            identity_dim: Some(3),
            ..GenConfig::both_axes(seed)
        }
    }

    fn count(corpus: &Corpus, axis: usize, split: Split) -> Vec<usize> {
        let mut c = vec![0; corpus.axes[axis].categories.len()];
        for s in corpus.speakers.iter().filter(|s| s.split == split) {
            c[s.groups[axis] as usize] += 1;
        }
        c
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(largest_remainder(&[0.45, 0.55], 100), vec![45, 55]);
        assert_eq!(
            largest_remainder(&[0.64, 0.17, 0.19], 100),
            vec![64, 17, 19]
        );
        assert_eq!(largest_remainder(&[0.64, 0.17, 0.19], 10), vec![6, 2, 2]);
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.85, 0.15], 100), vec![85, 15]);
    }

    #[test]
    fn presets_follow_demographics() {
        let mut cfg = GenConfig::table1_gender(3);
        cfg.eval_speakers = 0;
        let c = generate_corpus(&cfg, &mut RngStream::new(3)).unwrap();
        assert_eq!(count(&c, 0, Split::Train), vec![45, 55]);

        let c = generate_corpus(&GenConfig::table2_nationality(1), &mut RngStream::new(1)).unwrap();
        assert_eq!(count(&c, 0, Split::Train), vec![64, 17, 19]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(1), &mut RngStream::new(5)).unwrap();
        let b = generate_corpus(&small(1), &mut RngStream::new(5)).unwrap();
        assert_eq!(encode_corpus(&a), encode_corpus(&b));
        let c = generate_corpus(&small(1), &mut RngStream::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bad_proportions_are_rejected() {
        let mut cfg = small(0);
        cfg.axes[0].categories[0].proportion = 0.5;
        let err = generate_corpus(&cfg, &mut RngStream::new(0)).unwrap_err();
        assert!(
            matches!(err, Error::InvalidConfig { ref field, .. } if field.contains("proportion"))
        );
    }

    #[test]
    fn session_subspace_must_fit() {
        let mut cfg = small(0);
        cfg.nuisance_dim = 9;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref field, .. } if field == "nuisance_dim"));
        cfg.nuisance_dim = 2;
        cfg.nuisance_scale = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn minority_noise_is_larger() {
        let cfg = GenConfig {
            nuisance_scale: 0.0,
            ..GenConfig::fairness_fixture(2)
        };
        let c = generate_corpus(&cfg, &mut RngStream::new(2)).unwrap();
        let spread = |group: u16| {
            let mut total = 0.0;
            let mut n = 0.0;
            for (i, s) in c
                .speakers
                .iter()
                .enumerate()
                .filter(|(_, s)| s.groups[0] == group)
            {
                let f = c.feature_dim;
                let mut mean = vec![0.0f64; f];
                for u in 0..s.utterances {
                    for (m, v) in mean.iter_mut().zip(c.utterance(i, u)) {
                        *m += *v as f64 / s.utterances as f64;
                    }
                }
                for u in 0..s.utterances {
                    total += c
                        .utterance(i, u)
                        .iter()
                        .zip(&mean)
                        .map(|(v, m)| (*v as f64 - m).powi(2))
                        .sum::<f64>();
                    n += 1.0;
                }
            }
            total / n
        };
        assert!(spread(1) > 1.5 * spread(0));
    }

    #[test]
    fn batch_shapes_and_errors() {
        let mut cfg = small(4);
        cfg.train_speakers = 200;
        cfg.utterances_per_speaker = 2;
        let c = generate_corpus(&cfg, &mut RngStream::new(4)).unwrap();
        let b = sample_batch(&c, 200, 2, &mut RngStream::new(1)).unwrap();
        assert_eq!(b.features.shape(), (400, 8));
        let mut seen = b.speakers.clone();
        seen.sort();
        assert_eq!(seen, c.indices(Split::Train));
        assert!(matches!(
            sample_batch(&c, 201, 2, &mut RngStream::new(1)),
            Err(Error::Insufficient(_))
        ));
        assert!(sample_batch(&c, 10, 3, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn batches_cover_all_speakers() {
        let c = generate_corpus(&small(9), &mut RngStream::new(9)).unwrap();
        let (s, n) = (c.indices(Split::Train).len(), 5);
        let mut rng = RngStream::new(77);
        let mut seen = HashSet::new();
        for _ in 0..50 * s / n {
            let b = sample_batch(&c, n, 2, &mut rng).unwrap();
            let distinct: HashSet<_> = b.speakers.iter().collect();
            assert_eq!(distinct.len(), n);
            assert!(b.utterances.iter().all(|u| u[0] != u[1]));
            seen.extend(b.speakers);
        }
        assert_eq!(seen.len(), s);
    }

    #[test]
    fn corpus_file_errors() {
        let c = generate_corpus(&small(2), &mut RngStream::new(2)).unwrap();
        let bytes = encode_corpus(&c);
        assert!(matches!(
            decode_corpus(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(
            decode_corpus(&bytes[..3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut wrong = bytes.clone();
        wrong[1] = b'?';
        assert!(matches!(
            decode_corpus(&wrong),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_corpus(&v2),
            Err(Error::Format(FormatError::UnsupportedVersion {
                found: 2,
                ..
            }))
        ));

        let mut dup = c.clone();
        dup.speakers[1].id = dup.speakers[0].id;
        assert!(matches!(
            decode_corpus(&encode_corpus(&dup)),
            Err(Error::Format(FormatError::InvariantViolation(_)))
        ));
        let mut bad_group = c.clone();
        bad_group.speakers[0].groups[0] = 9;
        assert!(matches!(
            decode_corpus(&encode_corpus(&bad_group)),
            Err(Error::Format(FormatError::InvariantViolation(_)))
        ));
    }

    #[test]
    fn corpus_file_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.arwc");
        let c = generate_corpus(&small(8), &mut RngStream::new(8)).unwrap();
        save_corpus(&c, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), c);
        assert!(matches!(
            load_corpus(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn corpus_round_trip_is_bit_exact(seed in any::<u64>(), f in 1usize..6, utts in 2usize..5) {
            let cfg = GenConfig {
                train_speakers: 7,
                eval_speakers: 3,
                utterances_per_speaker: utts,
                feature_dim: f,
                identity_dim: None,
                nuisance_dim: f / 2,
                ..GenConfig::both_axes(seed)
            };
            let c = generate_corpus(&cfg, &mut RngStream::new(seed)).unwrap();
            let bytes = encode_corpus(&c);
            let back = decode_corpus(&bytes).unwrap();
            prop_assert_eq!(encode_corpus(&back), bytes);
            prop_assert_eq!(back, c);
        }
    }
}
