//! Seeded synthetic image classification data and patch extraction.

use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianBlobs,
    StripedTextures,
}

impl std::str::FromStr for Generator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "striped-textures" => Ok(Self::StripedTextures),
            _ => Err(format!("unknown generator {s:?} (gaussian-blobs | striped-textures)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub generator: Generator,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 1024,
            n_eval: 512,
            classes: 4,
            image_size: 32,
            channels: 3,
            generator: Generator::GaussianBlobs,
            noise_sigma: 0.6,
            seed: 0,
        }
    }
}

/// Images stored as `[n, channels, size, size]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Writes `<dir>/<name>_images.bin`, `<name>_labels.bin` and
    /// `<name>.json`.
    pub fn write(&self, dir: &Path, name: &str, spec: &SyntheticDatasetSpec) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let img: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        let lab: Vec<u8> = self.labels.iter().flat_map(|&v| (v as u64).to_le_bytes()).collect();
        std::fs::write(dir.join(format!("{name}_images.bin")), img)?;
        std::fs::write(dir.join(format!("{name}_labels.bin")), lab)?;
        let manifest = serde_json::json!({
            "spec": spec,
            "n": self.len(),
            "shape": [self.len(), self.channels, self.image_size, self.image_size],
            "images": format!("{name}_images.bin"),
            "labels": format!("{name}_labels.bin"),
            "dtype": "f64-le",
            "label_dtype": "u64-le",
        });
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn class_centers(classes: usize, size: f64) -> Vec<(f64, f64)> {
    (0..classes)
        .map(|c| {
            let a = 2.0 * PI * c as f64 / classes as f64;
            (size / 2.0 + size / 4.0 * a.cos(), size / 2.0 + size / 4.0 * a.sin())
        })
        .collect()
}

fn render<R: Rng>(spec: &SyntheticDatasetSpec, label: usize, rng: &mut R, out: &mut Vec<f64>) {
    let s = spec.image_size;
    let sf = s as f64;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let jitter = Normal::new(0.0, sf / 16.0).expect("valid sigma");
    match spec.generator {
        Generator::GaussianBlobs => {
            let (cx, cy) = class_centers(spec.classes, sf)[label];
            let (cx, cy) = (cx + jitter.sample(rng), cy + jitter.sample(rng));
            let width = sf / 8.0;
            let amp = 0.8 + 0.4 * rng.random::<f64>();
            for ch in 0..spec.channels {
                let gain = if ch == label % spec.channels { 1.0 } else { 0.4 };
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let v = amp * gain * (-d2 / (2.0 * width * width)).exp();
                        out.push(v + noise.sample(rng));
                    }
                }
            }
        }
        Generator::StripedTextures => {
            let theta = PI * label as f64 / spec.classes as f64;
            let freq = 2.0 * PI / (sf / 4.0);
            let phase = 2.0 * PI * rng.random::<f64>();
            let (c, sn) = (theta.cos(), theta.sin());
            for _ch in 0..spec.channels {
                for y in 0..s {
                    for x in 0..s {
                        let u = x as f64 * c + y as f64 * sn;
                        out.push((freq * u + phase).sin() + noise.sample(rng));
                    }
                }
            }
        }
    }
}

fn generate_split(spec: &SyntheticDatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let mut images = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
    for &l in &labels {
        render(spec, l, rng, &mut images);
    }
    Dataset {
        channels: spec.channels,
        image_size: spec.image_size,
        classes: spec.classes,
        images,
        labels,
    }
}

/// Train and eval splits; bitwise deterministic given the spec.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::Data("classes, image_size and channels must be positive".into()));
    }
    if spec.n_train % spec.classes != 0 || spec.n_eval % spec.classes != 0 {
        return Err(Error::Data(format!(
            "split sizes {} / {} are not multiples of {} classes",
            spec.n_train, spec.n_eval, spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = generate_split(spec, spec.n_train, &mut rng);
    let eval = generate_split(spec, spec.n_eval, &mut rng);
    Ok((train, eval))
}

/// Patch rows `[batch * tokens, channels * patch * patch]` for the images at
/// `indices`. Tokens are row-major over the patch grid; each row lists
/// channel, then row, then column within the patch.
pub fn patchify(data: &Dataset, indices: &[usize], patch: usize) -> Vec<f64> {
    let s = data.image_size;
    let g = s / patch;
    let c = data.channels;
    let mut out = Vec::with_capacity(indices.len() * data.image_len());
    for &i in indices {
        let img = data.image(i);
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for py in 0..patch {
                        let row = (ch * s + gy * patch + py) * s + gx * patch;
                        out.extend_from_slice(&img[row..row + patch]);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = SyntheticDatasetSpec {
            n_train: 400,
            n_eval: 40,
            image_size: 8,
            ..Default::default()
        };
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 100);
        }
    }

    #[test]
    fn patch_layout() {
        let d = Dataset {
            channels: 1,
            image_size: 4,
            classes: 1,
            images: (0..16).map(|v| v as f64).collect(),
            labels: vec![0],
        };
        let p = patchify(&d, &[0], 2);
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }
}
