//! Feature files, manifests, placeholder policy, batching, and the synthetic
//! dataset generator.

pub mod emif;
pub mod manifest;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::adaptive_avg_pool_f32;
use crate::model::{Modality, NUM_TARGETS};
use crate::tensor::Tensor;

pub use emif::{read_feature_file, write_feature_file, FeatureBlock, FeatureFile};
pub use manifest::{Manifest, ManifestRow, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Visual, audio, text.
    pub features: [FeatureBlock; 3],
    pub target: [f64; NUM_TARGETS],
    /// Presence as stored, kept after placeholders are filled in.
    pub present: [bool; 3],
    pub labeled: bool,
}

impl Sample {
    pub fn is_placeholdered(&self) -> bool {
        self.present.iter().any(|p| !p)
    }
}

/// Replaces every absent modality with a single all-zeros row of the
/// configured width and checks present blocks against `dims`.
pub fn apply_placeholder(sample: &mut Sample, dims: [usize; 3]) -> Result<()> {
    if sample.features.iter().all(|b| !b.present) {
        return Err(Error::Data(format!("sample {:?} has no modality present", sample.id)));
    }
    for (m, block) in Modality::ALL.iter().zip(sample.features.iter_mut()) {
        let dim = dims[m.index()];
        if block.present {
            if block.dim != dim {
                return Err(Error::Data(format!(
                    "sample {:?}: {} dim {} does not match configured dim {dim}",
                    sample.id,
                    m.name(),
                    block.dim
                )));
            }
        } else {
            *block = FeatureBlock::new(1, dim, vec![0.0; dim])?;
        }
    }
    Ok(())
}

/// One split, loaded and placeholder-filled, in manifest order.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: Split,
    pub samples: Vec<Sample>,
    /// Samples with at least one placeholdered modality.
    pub placeholdered: usize,
    /// Placeholder count per modality.
    pub placeholders_by_modality: [usize; 3],
}

impl SplitData {
    pub fn load(manifest: &Manifest, split: Split, dims: [usize; 3]) -> Result<Self> {
        let rows = manifest.split(split);
        if rows.is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
        let mut samples = Vec::with_capacity(rows.len());
        for row in rows {
            let file = read_feature_file(&manifest.resolve(row))?;
            samples.push(Sample {
                id: row.id.clone(),
                present: [0, 1, 2].map(|i| file.blocks[i].present),
                features: file.blocks,
                target: row.target,
                labeled: row.is_labeled(),
            });
        }
        Self::from_samples(split, samples, dims)
    }

    pub fn from_samples(split: Split, mut samples: Vec<Sample>, dims: [usize; 3]) -> Result<Self> {
        let mut by_modality = [0; 3];
        let mut placeholdered = 0;
        for s in &mut samples {
            apply_placeholder(s, dims)?;
            if s.is_placeholdered() {
                placeholdered += 1;
            }
            for (count, &p) in by_modality.iter_mut().zip(&s.present) {
                *count += usize::from(!p);
            }
        }
        Ok(SplitData {
            split,
            samples,
            placeholdered,
            placeholders_by_modality: by_modality,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the given samples into an aligned batch.
    pub fn batch(&self, indices: &[usize], align_len: usize) -> Result<Batch> {
        Batch::assemble(indices.iter().map(|&i| &self.samples[i]), align_len)
    }
}

/// Aligned, stacked inputs for one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B × T × d_m]` per modality.
    pub inputs: [Tensor<f64>; 3],
    /// `[B × 6]`.
    pub targets: Tensor<f64>,
    pub labeled: Vec<bool>,
}

impl Batch {
    pub fn assemble<'a>(samples: impl IntoIterator<Item = &'a Sample>, align_len: usize) -> Result<Self> {
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        let mut labeled = Vec::new();
        let mut data: [Vec<f64>; 3] = Default::default();
        let mut dims = [0; 3];
        for s in samples {
            for (m, block) in s.features.iter().enumerate() {
                if !block.present {
                    return Err(Error::State(format!("sample {:?} not placeholder-filled", s.id)));
                }
                if ids.is_empty() {
                    dims[m] = block.dim;
                } else if block.dim != dims[m] {
                    return Err(Error::shape("batch_assemble", &[dims[m]], &[block.dim]));
                }
                let pooled = adaptive_avg_pool_f32(block.rows, block.dim, &block.values, align_len)?;
                data[m].extend_from_slice(pooled.data());
            }
            ids.push(s.id.clone());
            targets.extend_from_slice(&s.target);
            labeled.push(s.labeled);
        }
        let b = ids.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let [v, a, t] = data;
        Ok(Batch {
            inputs: [
                Tensor::new(vec![b, align_len, dims[0]], v)?,
                Tensor::new(vec![b, align_len, dims[1]], a)?,
                Tensor::new(vec![b, align_len, dims[2]], t)?,
            ],
            targets: Tensor::new(vec![b, NUM_TARGETS], targets)?,
            ids,
            labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Partitions `0..n` into batches of `batch_size` (last one may be short).
/// With `shuffle_seed`, the order is a seeded permutation; otherwise manifest order.
pub fn make_batches(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, present: [bool; 3]) -> Sample {
        let dims = [2, 3, 4];
        let features = [0, 1, 2].map(|m| {
            if present[m] {
                FeatureBlock::new(3, dims[m], vec![1.0; 3 * dims[m]]).unwrap()
            } else {
                FeatureBlock::absent(dims[m])
            }
        });
        Sample {
            id: id.into(),
            features,
            target: [0.5; 6],
            present,
            labeled: true,
        }
    }

    #[test]
    fn placeholder_fills_absent_text() {
        let mut s = sample("a", [true, true, false]);
        apply_placeholder(&mut s, [2, 3, 4]).unwrap();
        assert_eq!(s.features[2], FeatureBlock::new(1, 4, vec![0.0; 4]).unwrap());
        assert!(s.is_placeholdered());

        let mut full = sample("b", [true; 3]);
        let before = full.clone();
        apply_placeholder(&mut full, [2, 3, 4]).unwrap();
        assert_eq!(full, before);

        let mut none = sample("c", [false; 3]);
        assert!(apply_placeholder(&mut none, [2, 3, 4]).is_err());
        let mut wrong = sample("d", [true; 3]);
        assert!(apply_placeholder(&mut wrong, [2, 3, 5]).is_err());
    }

    #[test]
    fn placeholder_counts_per_split() {
        let samples = vec![
            sample("a", [true, true, false]),
            sample("b", [true; 3]),
            sample("c", [false, true, false]),
            sample("d", [true, false, true]),
        ];
        let want = samples.iter().filter(|s| s.present.contains(&false)).count();
        let split = SplitData::from_samples(Split::Train, samples, [2, 3, 4]).unwrap();
        assert_eq!(split.placeholdered, want);
        assert_eq!(split.placeholders_by_modality, [1, 1, 2]);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let sizes: Vec<usize> = make_batches(100, 32, Some(1)).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        assert_eq!(make_batches(100, 32, Some(9)).unwrap(), make_batches(100, 32, Some(9)).unwrap());
        assert_ne!(make_batches(100, 32, Some(9)).unwrap(), make_batches(100, 32, Some(10)).unwrap());
        let ordered: Vec<usize> = make_batches(10, 4, None).unwrap().concat();
        assert_eq!(ordered, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_assembly_aligns_lengths() {
        let split = SplitData::from_samples(
            Split::Train,
            vec![sample("a", [true, true, false]), sample("b", [true; 3])],
            [2, 3, 4],
        )
        .unwrap();
        let batch = split.batch(&[1, 0], 8).unwrap();
        assert_eq!(batch.ids, vec!["b", "a"]);
        assert_eq!(batch.inputs[0].shape(), &[2, 8, 2]);
        assert_eq!(batch.inputs[2].shape(), &[2, 8, 4]);
        assert_eq!(batch.targets.shape(), &[2, 6]);
        // placeholder text for "a" pools to zeros
        assert!(batch.inputs[2].data()[32..].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn every_sample_once_per_epoch(n in 1usize..300, bs in 1usize..64, seed in any::<u64>()) {
            let mut seen: Vec<usize> = make_batches(n, bs, Some(seed)).unwrap().concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
