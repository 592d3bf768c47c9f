//! Deterministic synthetic corpus generator. Produces a dataset whose
//! answers need both modalities: the question names a region (text) and the
//! feature matrix carries a polarity pattern (image); the correct marker is
//! the (region, polarity) pair. Alongside the dataset it writes a transcript
//! that lets the mock backend drive the full rationale pipeline offline.
//!
//! Every rationale and caption reuses words the questions already contain,
//! so the corpus vocabulary is closed and independent of item count:
//! 4 reserved tokens + 7 base words + 4 regions + 9 flavors + 8 markers = 32.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::VQAItem;
use crate::features::{write_features, FeatureError};
use crate::orchestrator::{Stage, TranscriptEntry};
use crate::tensor::Tensor;

const REGIONS: usize = 4;
const FLAVORS: [&str; 9] = [
    "axial", "coronal", "sagittal", "contrast", "plain", "dense", "faint", "sharp", "soft",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
}

/// Shape of the generated corpus.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub items: usize,
    /// Feature width; the polarity pattern flips sign between its halves.
    pub dim: usize,
    /// Feature rows per item.
    pub patches: usize,
    /// Seed for the feature noise.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 512,
            dim: 16,
            patches: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.items == 0 {
            return Err(SynthError::BadConfig("need at least one item".into()));
        }
        if self.dim < 2 {
            return Err(SynthError::BadConfig(
                "dimension must be at least 2 for a two-sided pattern".into(),
            ));
        }
        if self.patches == 0 {
            return Err(SynthError::BadConfig(
                "need at least one feature row".into(),
            ));
        }
        Ok(())
    }
}

/// Paths of everything the generator wrote.
#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub dataset: PathBuf,
    pub transcript: PathBuf,
    pub features_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The polarity pattern: one half of the feature row is high, the other
/// low; flipped for the opposite polarity. Noise keeps rows distinct
/// without moving them across the decision boundary.
fn feature_matrix(rows: usize, dim: usize, polarity: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let half = dim / 2;
    let data: Vec<f64> = (0..rows * dim)
        .map(|idx| {
            let col = idx % dim;
            let base = if (col < half) == (polarity == 0) {
                0.8
            } else {
                -0.8
            };
            base + rng.gen_range(-0.05..0.05)
        })
        .collect();
    Tensor::matrix(rows, dim, data).expect("bounded noise stays finite")
}

/// Generate the corpus into `dir`: `dataset.jsonl`, one feature file per
/// item under `features/`, and `transcript.jsonl` with responses for every
/// pipeline stage (verdicts alternate EFFECTIVE / INEFFECTIVE by item).
pub fn generate(dir: &Path, cfg: &SynthConfig) -> Result<SyntheticOutput, SynthError> {
    cfg.validate()?;
    let features_dir = dir.join("features");
    std::fs::create_dir_all(&features_dir).map_err(io_err(&features_dir))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dataset_lines = Vec::with_capacity(cfg.items);
    let mut transcript_lines = Vec::new();

    for i in 0..cfg.items {
        let region = i % REGIONS;
        let polarity = (i / REGIONS) % 2;
        let flavor = FLAVORS[i % FLAVORS.len()];
        let id = format!("item-{i:04}");
        let suffix = if polarity == 0 { "a" } else { "b" };
        let answer = format!("marker-{region}-{suffix}");

        let feature_file = format!("{id}.txt");
        write_features(
            &features_dir.join(&feature_file),
            &feature_matrix(cfg.patches, cfg.dim, polarity, &mut rng),
        )?;

        let item = VQAItem {
            id: id.clone(),
            question: format!("which marker fits region{region} in this {flavor} scan image"),
            options: vec![format!("marker-{region}-a"), format!("marker-{region}-b")],
            answer,
            image_features: PathBuf::from(format!("features/{feature_file}")),
            category: format!("region{region}"),
        };
        dataset_lines.push(serde_json::to_string(&item)?);

        // The rationales deliberately name only the region and flavor — the
        // model still has to read the image to pick the marker.
        let entry = |stage: Stage, response: String| TranscriptEntry {
            stage,
            item_id: id.clone(),
            response,
        };
        transcript_lines.push(entry(
            Stage::Initial,
            format!("marker fits region{region} in this {flavor} scan"),
        ));
        let verdict = if i % 2 == 0 {
            "EFFECTIVE"
        } else {
            "INEFFECTIVE"
        };
        transcript_lines.push(entry(Stage::Followup, format!("VERDICT: {verdict}")));
        if i % 2 == 1 {
            transcript_lines.push(entry(
                Stage::Regen,
                format!("region{region} marker fits this {flavor} scan image"),
            ));
        }
        transcript_lines.push(entry(
            Stage::Caption,
            format!("this {flavor} scan image fits region{region}"),
        ));
    }

    let dataset = dir.join("dataset.jsonl");
    let mut f = std::fs::File::create(&dataset).map_err(io_err(&dataset))?;
    for line in &dataset_lines {
        writeln!(f, "{line}").map_err(io_err(&dataset))?;
    }

    let transcript = dir.join("transcript.jsonl");
    let mut f = std::fs::File::create(&transcript).map_err(io_err(&transcript))?;
    for entry in &transcript_lines {
        writeln!(f, "{}", serde_json::to_string(entry)?).map_err(io_err(&transcript))?;
    }

    Ok(SyntheticOutput {
        dataset,
        transcript,
        features_dir,
    })
}
