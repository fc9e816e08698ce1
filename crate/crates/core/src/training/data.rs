use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// In-memory NHWC image set with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(side: usize, channels: usize, classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = side * side * channels;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixel values do not form {} images of {side}x{side}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            side,
            channels,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.side * self.side * self.channels;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.side * self.side * self.channels);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let t = Tensor::from_parts(vec![indices.len(), self.side, self.side, self.channels], data);
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Quadrant-localized Gaussian blobs: class `c` puts a bright blob in
/// quadrant `c` (raster order) on a noisy background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub side: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    pub noise: f64,
    pub blob_sigma: f64,
    /// Maximum blob-centre offset from the quadrant centre, in pixels.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            side: 32,
            samples_per_class: 64,
            seed: 0,
            noise: 0.1,
            blob_sigma: 3.0,
            jitter: 2.0,
        }
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > 4 || spec.side < 4 || spec.samples_per_class == 0 {
        return Err(Error::Dataset(
            "synthetic data needs 1 to 4 classes, side >= 4 and at least one sample per class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Dataset(e.to_string()))?;
    let s = spec.side;
    let q = s as f64 / 4.0;
    let n = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n * s * s * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        let cx = q * (1 + 2 * (c % 2)) as f64 + rng.gen_range(-spec.jitter..=spec.jitter);
        let cy = q * (1 + 2 * (c / 2)) as f64 + rng.gen_range(-spec.jitter..=spec.jitter);
        let amp = rng.gen_range(0.8..1.2);
        let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
        for y in 0..s {
            for x in 0..s {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = amp * (-r2 * inv).exp();
                for _ in 0..3 {
                    images.push((v + noise.sample(&mut rng)) as f32);
                }
            }
        }
        labels.push(c);
    }
    Dataset::new(s, 3, spec.classes, images, labels)
}

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// Per-channel statistics of the CIFAR-10 training split on the 0..1 scale.
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// One record: a label byte then 1024 red, 1024 green and 1024 blue bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar_records(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, r)| {
            if r[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Dataset(format!("record {i}: label {} >= {CIFAR_CLASSES}", r[0])));
            }
            Ok(CifarRecord {
                label: r[0],
                pixels: r[1..].to_vec(),
            })
        })
        .collect()
}

pub fn write_cifar_records(records: &[CifarRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_BYTES);
    for (i, r) in records.iter().enumerate() {
        if r.pixels.len() != CIFAR_RECORD_BYTES - 1 || r.label as usize >= CIFAR_CLASSES {
            return Err(Error::Dataset(format!("record {i} is malformed")));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    Ok(out)
}

/// Planar records to normalized NHWC images.
pub fn cifar_dataset(records: &[CifarRecord]) -> Result<Dataset> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(records.len() * plane * 3);
    for r in records {
        for p in 0..plane {
            for c in 0..3 {
                let v = r.pixels[c * plane + p] as f32 / 255.0;
                images.push((v - CIFAR_MEAN[c]) / CIFAR_STD[c]);
            }
        }
    }
    Dataset::new(
        CIFAR_SIDE,
        3,
        CIFAR_CLASSES,
        images,
        records.iter().map(|r| r.label as usize).collect(),
    )
}

/// Reads one binary batch file, or every `*.bin` file of a directory in name order.
pub fn ingest_cifar_binary(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut records = Vec::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        records.extend(parse_cifar_records(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?);
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no records found at {}", path.display())));
    }
    cifar_dataset(&records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::default();
        let a = synthetic_dataset(&spec).unwrap();
        let b = synthetic_dataset(&spec).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a.image(17), b.image(17));
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 64);
        }
    }

    #[test]
    fn blob_sits_in_its_quadrant() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..Default::default()
        };
        let d = synthetic_dataset(&spec).unwrap();
        for i in 0..8 {
            let img = d.image(i);
            let argmax = (0..32 * 32).max_by(|&a, &b| img[a * 3].total_cmp(&img[b * 3])).unwrap();
            let (x, y) = (argmax % 32, argmax / 32);
            let c = d.labels()[i];
            assert_eq!((x >= 16) as usize + 2 * (y >= 16) as usize, c);
        }
    }

    #[test]
    fn record_count_must_be_whole() {
        assert!(parse_cifar_records(&vec![0u8; CIFAR_RECORD_BYTES * 2 + 1]).is_err());
        let mut two = vec![0u8; CIFAR_RECORD_BYTES * 2];
        two[CIFAR_RECORD_BYTES] = 7;
        let r = parse_cifar_records(&two).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].label, 7);
        two[0] = 10;
        assert!(parse_cifar_records(&two).is_err());
    }
}
