//! Synthetic dataset whose label is the disagreement between a text cue and
//! an image cluster.
//!
//! Each text says either "lovely" or "terrible"; each image comes from
//! cluster A or B, and its caption names the cluster. A sample is sarcastic
//! for (lovely, B) and (terrible, A). Either modality alone carries no
//! information about the label, while the pair determines it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sarcasm_tensor::Tensor;

use crate::data::manifest::{Manifest, Sample, Split};
use crate::data::tensor_file::write_tensor_file;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Sample count, even and at least 8.
    pub n: usize,
    /// Width of each region row.
    pub region_dim: usize,
    /// Region rows per image, a perfect square.
    pub regions: usize,
    /// Standard deviation of the noise around the cluster centers.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 200,
            region_dim: 8,
            regions: 4,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Fraction of each cell held out for dev and, separately, for test.
pub const HOLDOUT_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cue {
    Lovely,
    Terrible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cluster {
    A,
    B,
}

fn label(cue: Cue, cluster: Cluster) -> u8 {
    u8::from(matches!(
        (cue, cluster),
        (Cue::Lovely, Cluster::B) | (Cue::Terrible, Cluster::A)
    ))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("shape matches buffer")
}

/// Writes `manifest.jsonl` and `features/*.ft` under `out_dir` and returns
/// the manifest. Output bytes depend only on `config`.
pub fn synth_dataset(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if config.n < 8 || !config.n.is_multiple_of(2) {
        return Err(CoreError::Config(format!(
            "synthetic sample count must be even and at least 8, got {}",
            config.n
        )));
    }
    crate::visual::grid_side(config.regions)?;
    if config.region_dim == 0 || !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(CoreError::Config(
            "region_dim must be positive and noise finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = vec![config.regions, config.region_dim];
    let center_a = gaussian(&mut rng, shape.clone(), 1.0);
    let center_b = gaussian(&mut rng, shape.clone(), 1.0);

    let half = config.n / 2;
    let cells = [
        (Cue::Lovely, Cluster::B, half - half / 2),
        (Cue::Terrible, Cluster::A, half / 2),
        (Cue::Lovely, Cluster::A, half - half / 2),
        (Cue::Terrible, Cluster::B, half / 2),
    ];
    let mut rows: Vec<(Cue, Cluster, Split)> = Vec::with_capacity(config.n);
    for (cue, cluster, count) in cells {
        let held = (count as f64 * HOLDOUT_FRACTION).floor() as usize;
        let mut splits: Vec<Split> = (0..count)
            .map(|i| match i {
                i if i < held => Split::Dev,
                i if i < 2 * held => Split::Test,
                _ => Split::Train,
            })
            .collect();
        splits.shuffle(&mut rng);
        rows.extend(splits.into_iter().map(|s| (cue, cluster, s)));
    }
    rows.shuffle(&mut rng);

    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| CoreError::io(&feature_dir, e))?;
    let mut samples = Vec::with_capacity(config.n);
    for (i, (cue, cluster, split)) in rows.into_iter().enumerate() {
        let id = format!("synth-{i:05}");
        let center = match cluster {
            Cluster::A => &center_a,
            Cluster::B => &center_b,
        };
        let noise = gaussian(&mut rng, shape.clone(), config.noise);
        let data = center
            .data()
            .iter()
            .zip(noise.data())
            .map(|(c, e)| c + e)
            .collect();
        let regions = Tensor::new(shape.clone(), data)?;
        let rel = PathBuf::from("features").join(format!("{id}.ft"));
        write_tensor_file(&out_dir.join(&rel), &regions)?;
        let word = match cue {
            Cue::Lovely => "lovely",
            Cue::Terrible => "terrible",
        };
        let tag = match cluster {
            Cluster::A => "a",
            Cluster::B => "b",
        };
        samples.push(Sample {
            id,
            text: format!("what a {word} day"),
            caption: format!("cluster {tag} scene"),
            label: Some(label(cue, cluster)),
            region_features_path: Some(rel),
            split,
            text_features_path: None,
            caption_features_path: None,
        });
    }
    let manifest = Manifest {
        samples,
        base_dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.jsonl");
    fs::write(&path, manifest.to_jsonl()).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_or_small_counts() {
        let dir = tempfile::tempdir().unwrap();
        for n in [7, 6, 9] {
            let cfg = SynthConfig {
                n,
                ..Default::default()
            };
            assert!(matches!(
                synth_dataset(&cfg, dir.path()),
                Err(CoreError::Config(_))
            ));
        }
    }

    #[test]
    fn label_is_the_disagreement() {
        assert_eq!(label(Cue::Lovely, Cluster::B), 1);
        assert_eq!(label(Cue::Terrible, Cluster::A), 1);
        assert_eq!(label(Cue::Lovely, Cluster::A), 0);
        assert_eq!(label(Cue::Terrible, Cluster::B), 0);
    }
}
