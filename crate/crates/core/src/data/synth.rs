//! Synthetic multimodal dataset with a known, recoverable target signal.
//!
//! Each sample draws a latent `u ∈ ℝ⁶` (standard normal). Targets are
//! `clamp(σ(uᵢ) + noise·εᵢ, 0, 1)`. Every modality emits a variable-length
//! frame sequence `x_t = M_m·u_S + jitter·η_t`, where `M_m` is a fixed random
//! map and `S` the subset of latent dims assigned to that modality: all six in
//! overlap mode, two disjoint dims per modality in disjoint mode.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::emif::{write_feature_file, FeatureBlock, FeatureFile};
use super::manifest::{Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::model::NUM_TARGETS;
use crate::tensor::sigmoid_scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Overlap,
    Disjoint,
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(SynthMode::Overlap),
            "disjoint" => Ok(SynthMode::Disjoint),
            other => Err(Error::Config(format!("unknown synthetic mode {other:?}"))),
        }
    }
}

impl SynthMode {
    /// Latent dims carried by each modality (visual, audio, text).
    pub fn assignment(self) -> [Vec<usize>; 3] {
        match self {
            SynthMode::Overlap => [(0..6).collect(), (0..6).collect(), (0..6).collect()],
            SynthMode::Disjoint => [vec![0, 1], vec![2, 3], vec![4, 5]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// Feature widths (visual, audio, text).
    pub dims: [usize; 3],
    pub seed: u64,
    /// Target noise standard deviation.
    pub noise: f64,
    pub mode: SynthMode,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-frame noise standard deviation.
    pub jitter: f64,
    /// Probability that a sample's text block is absent.
    pub missing_text_rate: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SynthSpec {
    pub fn new(n: usize, dims: [usize; 3], seed: u64) -> Self {
        SynthSpec {
            n,
            dims,
            seed,
            noise: 0.0,
            mode: SynthMode::Overlap,
            min_len: 16,
            max_len: 160,
            jitter: 0.1,
            missing_text_rate: 0.0,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("synthetic dataset needs n ≥ 2, got {}", self.n)));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("feature dims must be positive: {:?}", self.dims)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        let fractions_ok = (0.0..1.0).contains(&self.val_fraction)
            && (0.0..1.0).contains(&self.test_fraction)
            && self.val_fraction + self.test_fraction < 1.0;
        if !fractions_ok {
            return Err(Error::Config("invalid split spec: fractions must leave a training split".into()));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0 && (0.0..=1.0).contains(&self.missing_text_rate)) {
            return Err(Error::Config("noise, jitter must be ≥ 0 and missing_text_rate in [0, 1]".into()));
        }
        Ok(())
    }

    /// Split of the sample at `index`: train first, then val, then test.
    pub fn split_of(&self, index: usize) -> Split {
        let n_test = (self.n as f64 * self.test_fraction).round() as usize;
        let n_val = (self.n as f64 * self.val_fraction).round() as usize;
        let n_train = self.n - n_val - n_test;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One generated sample, before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub split: Split,
    pub latent: [f64; NUM_TARGETS],
    pub target: [f64; NUM_TARGETS],
    pub file: FeatureFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub spec: SynthSpec,
    /// Latent dims per modality, keyed visual/audio/text in order.
    pub assignment: [Vec<usize>; 3],
    pub counts: SplitCounts,
    pub missing_text: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generates every sample in memory. A pure function of `spec`.
pub fn generate_samples(spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let assignment = spec.mode.assignment();
    let maps: Vec<Vec<f64>> = spec
        .dims
        .iter()
        .zip(&assignment)
        .map(|(&d, dims)| {
            let scale = 1.0 / (dims.len() as f64).sqrt();
            (0..d * dims.len()).map(|_| normal(&mut rng) * scale).collect()
        })
        .collect();

    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let latent: [f64; NUM_TARGETS] = std::array::from_fn(|_| normal(&mut rng));
        let target = latent.map(|u| (sigmoid_scalar(u) + spec.noise * normal(&mut rng)).clamp(0.0, 1.0));
        let drop_text = rng.random::<f64>() < spec.missing_text_rate;

        let mut blocks = Vec::with_capacity(3);
        for (m, (&dim, dims)) in spec.dims.iter().zip(&assignment).enumerate() {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let k = dims.len();
            let signal: Vec<f64> = (0..dim)
                .map(|r| (0..k).map(|c| maps[m][r * k + c] * latent[dims[c]]).sum())
                .collect();
            let mut values = Vec::with_capacity(len * dim);
            for _ in 0..len {
                for &s in &signal {
                    values.push((s + spec.jitter * normal(&mut rng)) as f32);
                }
            }
            blocks.push(if m == 2 && drop_text {
                FeatureBlock::absent(dim)
            } else {
                FeatureBlock::new(len, dim, values)?
            });
        }
        out.push(SynthSample {
            id: format!("s{i:05}"),
            split: spec.split_of(i),
            latent,
            target,
            file: FeatureFile::new(blocks.try_into().expect("three modalities")),
        });
    }
    Ok(out)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Writes `features/*.emif`, `manifest.csv`, and `synth.json` under `out_dir`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSidecar> {
    let samples = generate_samples(spec)?;
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;

    let mut rows = Vec::with_capacity(samples.len());
    let mut counts = SplitCounts::default();
    let mut missing_text = 0;
    for s in &samples {
        let rel = format!("features/{}.emif", s.id);
        write_feature_file(&s.file, &out_dir.join(&rel))?;
        match s.split {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
            Split::Test => counts.test += 1,
        }
        missing_text += usize::from(!s.file.blocks[2].present);
        rows.push(ManifestRow {
            id: s.id.clone(),
            split: s.split,
            path: rel,
            target: s.target,
        });
    }
    Manifest::new(rows, out_dir)?.write(&out_dir.join("manifest.csv"))?;

    let sidecar = SynthSidecar {
        spec: spec.clone(),
        assignment: spec.mode.assignment(),
        counts,
        missing_text,
    };
    let json_path = out_dir.join("synth.json");
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(sidecar)
}
