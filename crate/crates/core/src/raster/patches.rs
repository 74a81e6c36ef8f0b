//! Patch samples, train/val/test split, z-score statistics and the on-disk
//! patch dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Raster, Stacks};
use crate::error::{Error, Result};
use crate::gedi::LabelRasters;
use crate::model::Modality;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 64;
pub const NORM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// Per-modality `[1, bands, P, P]` blocks.
    pub inputs: BTreeMap<Modality, Tensor>,
    /// Row-major heights in meters, ignored where `mask` is false.
    pub label: Vec<f64>,
    pub mask: Vec<bool>,
    /// Pixels where at least one input band was nodata and got infilled.
    pub filled: Vec<bool>,
    /// Top-left pixel `(row, col)` in the source grid.
    pub origin: (usize, usize),
}

impl PatchSample {
    pub fn size(&self) -> usize {
        (self.label.len() as f64).sqrt() as usize
    }

    pub fn labeled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn valid_mean(v: &[f64]) -> f64 {
    let (s, n) = v.iter().filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Non-overlapping tiles from the grid origin; tiles without a labeled pixel
/// are dropped and partial edge strips discarded. Input nodata is replaced by
/// the band's grid-wide valid mean and flagged.
pub fn extract_patches(stacks: &Stacks, labels: &LabelRasters, patch: usize) -> Result<Vec<PatchSample>> {
    let first = stacks.values().next().ok_or_else(|| Error::InvalidInput("no modality stacks".into()))?;
    let g = first.raster.geometry;
    for s in stacks.values() {
        g.ensure_matches(&s.raster.geometry, s.modality.name())?;
    }
    if labels.width != g.width || labels.height != g.height {
        return Err(Error::InvalidInput("label raster does not match the stack grid".into()));
    }
    if patch == 0 || g.width < patch || g.height < patch {
        return Err(Error::InvalidInput(format!(
            "grid {}x{} is smaller than the {patch}-pixel patch",
            g.width, g.height
        )));
    }
    let means: BTreeMap<Modality, Vec<f64>> = stacks
        .iter()
        .map(|(m, s)| (*m, (0..s.raster.bands).map(|b| valid_mean(s.raster.band(b))).collect()))
        .collect();
    let w = g.width;
    let mut out = Vec::new();
    for tr in 0..g.height / patch {
        for tc in 0..g.width / patch {
            let (r0, c0) = (tr * patch, tc * patch);
            let idx = |r: usize, c: usize| (r0 + r) * w + c0 + c;
            let mut mask = vec![false; patch * patch];
            let mut label = vec![0.0; patch * patch];
            for r in 0..patch {
                for c in 0..patch {
                    let i = idx(r, c);
                    if labels.mask[i] {
                        mask[r * patch + c] = true;
                        label[r * patch + c] = labels.label[i];
                    }
                }
            }
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let mut filled = vec![false; patch * patch];
            let mut inputs = BTreeMap::new();
            for (m, s) in stacks {
                let bands = s.raster.bands;
                let mut t = Tensor::zeros([1, bands, patch, patch]);
                for b in 0..bands {
                    let src = s.raster.band(b);
                    let dst = t.plane_slice_mut(0, b);
                    for r in 0..patch {
                        for c in 0..patch {
                            let v = src[idx(r, c)];
                            dst[r * patch + c] = if v.is_nan() {
                                filled[r * patch + c] = true;
                                means[m][b]
                            } else {
                                v
                            };
                        }
                    }
                }
                inputs.insert(*m, t);
            }
            out.push(PatchSample {
                inputs,
                label,
                mask,
                filled,
                origin: (r0, c0),
            });
        }
    }
    Ok(out)
}

/// Index partition into train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded uniform shuffle, then `⌊0.8n⌋ / ⌊0.1n⌋ / remainder`.
    pub fn new(n: usize, seed: u64) -> Result<Split> {
        if n < 3 {
            return Err(Error::Insufficient(format!("split needs at least 3 samples, got {n}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        // Validation takes the rounding remainder, which reproduces 85150/10645/10643 for n = 106438.
        let n_train = n * 8 / 10;
        let n_test = n / 10;
        let test = idx.split_off(n - n_test);
        let val = idx.split_off(n_train);
        Ok(Split { train: idx, val, test })
    }

    /// Hex digest identifying the partition exactly.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (tag, part) in [(b't', &self.train), (b'v', &self.val), (b's', &self.test)] {
            h.update([tag]);
            for i in part {
                h.update((*i as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn split_samples<T: Clone>(samples: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let s = Split::new(samples.len(), seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&s.train), pick(&s.val), pick(&s.test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub bands: BTreeMap<Modality, Vec<BandStats>>,
    pub epsilon: f64,
}

impl NormStats {
    fn band(&self, m: Modality, b: usize) -> Result<BandStats> {
        self.bands
            .get(&m)
            .and_then(|v| v.get(b))
            .copied()
            .ok_or_else(|| Error::MissingModality(format!("{m} band {b} has no normalization statistics")))
    }

    /// Standardizes `[N, bands, H, W]` in place.
    pub fn apply_tensor(&self, m: Modality, t: &mut Tensor) -> Result<()> {
        let [n, c, _, _] = t.shape();
        for b in 0..c {
            let s = self.band(m, b)?;
            let d = s.std.max(self.epsilon);
            for i in 0..n {
                for v in t.plane_slice_mut(i, b) {
                    *v = (*v - s.mean) / d;
                }
            }
        }
        Ok(())
    }

    /// Standardizes a raster in place; nodata becomes 0 (the band mean).
    pub fn apply_raster(&self, m: Modality, r: &mut Raster) -> Result<()> {
        for b in 0..r.bands {
            let s = self.band(m, b)?;
            let d = s.std.max(self.epsilon);
            for v in r.band_mut(b) {
                *v = if v.is_nan() { 0.0 } else { (*v - s.mean) / d };
            }
        }
        Ok(())
    }
}

/// Per-band mean and population standard deviation over all training pixels.
pub fn fit_norm_stats(train: &[PatchSample]) -> Result<NormStats> {
    let first = train.first().ok_or_else(|| Error::Insufficient("no training samples for statistics".into()))?;
    let mut bands = BTreeMap::new();
    for (m, t0) in &first.inputs {
        let c = t0.shape()[1];
        let mut stats = Vec::with_capacity(c);
        for b in 0..c {
            let (mut sum, mut count) = (0.0, 0usize);
            for s in train {
                let t = s.inputs.get(m).ok_or_else(|| Error::MissingModality(m.name().into()))?;
                sum += t.plane_slice(0, b).iter().sum::<f64>();
                count += t.plane_slice(0, b).len();
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for s in train {
                ss += s.inputs[m].plane_slice(0, b).iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            stats.push(BandStats {
                mean,
                std: (ss / count as f64).sqrt(),
            });
        }
        bands.insert(*m, stats);
    }
    Ok(NormStats {
        bands,
        epsilon: NORM_EPSILON,
    })
}

/// `(x − mean) / max(std, ε)` on every input band; labels stay in meters.
pub fn standardize(sample: &PatchSample, stats: &NormStats) -> Result<PatchSample> {
    let mut out = sample.clone();
    for (m, t) in out.inputs.iter_mut() {
        stats.apply_tensor(*m, t)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk dataset

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    /// Raw (unstandardized) samples.
    pub samples: Vec<PatchSample>,
    pub split: Split,
    pub stats: NormStats,
    pub band_names: BTreeMap<Modality, Vec<String>>,
    pub patch_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityEntry {
    modality: Modality,
    bands: usize,
    band_names: Vec<String>,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    dtype: String,
    patch_size: usize,
    count: usize,
    modalities: Vec<ModalityEntry>,
    label_file: String,
    mask_file: String,
    filled_file: String,
    origins: Vec<(usize, usize)>,
    split: Split,
    norm_stats: NormStats,
}

const MANIFEST: &str = "manifest.json";

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", expect * 4, bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_u8(path: &Path, expect: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect {
        return Err(Error::format(path, format!("expected {expect} bytes, found {}", bytes.len())));
    }
    Ok(bytes.into_iter().map(|b| b != 0).collect())
}

impl PatchDataset {
    /// Tiles the stacks into labeled patches, splits them with `split_seed` and
    /// fits standardization on the training part. Values are rounded to the
    /// stored `f32` precision first so a saved and reloaded dataset is identical.
    pub fn build(stacks: &Stacks, labels: &LabelRasters, patch: usize, split_seed: u64) -> Result<Self> {
        let mut samples = extract_patches(stacks, labels, patch)?;
        for s in &mut samples {
            for t in s.inputs.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
            s.label.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let split = Split::new(samples.len(), split_seed)?;
        let train: Vec<PatchSample> = split.train.iter().map(|&i| samples[i].clone()).collect();
        let stats = fit_norm_stats(&train)?;
        let band_names = stacks.iter().map(|(m, s)| (*m, s.band_names.clone())).collect();
        Ok(PatchDataset {
            samples,
            split,
            stats,
            band_names,
            patch_size: patch,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.band_names.keys().copied().collect()
    }

    fn pick(&self, idx: &[usize]) -> Result<Vec<PatchSample>> {
        idx.iter().map(|&i| standardize(&self.samples[i], &self.stats)).collect()
    }

    /// Standardized train, validation and test samples.
    pub fn standardized_splits(&self) -> Result<(Vec<PatchSample>, Vec<PatchSample>, Vec<PatchSample>)> {
        Ok((self.pick(&self.split.train)?, self.pick(&self.split.val)?, self.pick(&self.split.test)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = self.patch_size;
        let mut modalities = Vec::new();
        for (m, names) in &self.band_names {
            let file = format!("inputs_{}.f32", m.name());
            write_f32(
                &dir.join(&file),
                self.samples.iter().flat_map(|s| s.inputs[m].data().iter().copied()),
            )?;
            modalities.push(ModalityEntry {
                modality: *m,
                bands: names.len(),
                band_names: names.clone(),
                file,
            });
        }
        write_f32(&dir.join("labels.f32"), self.samples.iter().flat_map(|s| s.label.iter().copied()))?;
        let mask: Vec<u8> = self.samples.iter().flat_map(|s| s.mask.iter().map(|&b| b as u8)).collect();
        let filled: Vec<u8> = self.samples.iter().flat_map(|s| s.filled.iter().map(|&b| b as u8)).collect();
        for (name, bytes) in [("mask.u8", mask), ("filled.u8", filled)] {
            fs::write(dir.join(name), bytes).map_err(|e| Error::io(dir.join(name), e))?;
        }
        debug_assert!(self.samples.iter().all(|s| s.label.len() == p * p));
        let manifest = Manifest {
            version: 1,
            dtype: "float32".into(),
            patch_size: p,
            count: self.samples.len(),
            modalities,
            label_file: "labels.f32".into(),
            mask_file: "mask.u8".into(),
            filled_file: "filled.u8".into(),
            origins: self.samples.iter().map(|s| s.origin).collect(),
            split: self.split.clone(),
            norm_stats: self.stats.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST), text).map_err(|e| Error::io(dir.join(MANIFEST), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let man: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if man.version != 1 || man.dtype != "float32" {
            return Err(Error::format(&mpath, "unsupported dataset version or dtype"));
        }
        let (n, p) = (man.count, man.patch_size);
        let plane = p * p;
        if man.origins.len() != n {
            return Err(Error::format(&mpath, "origin count differs from sample count"));
        }
        let labels = read_f32(&dir.join(&man.label_file), n * plane)?;
        let mask = read_u8(&dir.join(&man.mask_file), n * plane)?;
        let filled = read_u8(&dir.join(&man.filled_file), n * plane)?;
        let mut blocks = BTreeMap::new();
        let mut band_names = BTreeMap::new();
        for e in &man.modalities {
            let data = read_f32(&dir.join(&e.file), n * e.bands * plane)?;
            blocks.insert(e.modality, (e.bands, data));
            band_names.insert(e.modality, e.band_names.clone());
        }
        let samples = (0..n)
            .map(|i| PatchSample {
                inputs: blocks
                    .iter()
                    .map(|(m, (b, data))| {
                        let chunk = data[i * b * plane..(i + 1) * b * plane].to_vec();
                        (*m, Tensor::from_vec([1, *b, p, p], chunk))
                    })
                    .collect(),
                label: labels[i * plane..(i + 1) * plane].to_vec(),
                mask: mask[i * plane..(i + 1) * plane].to_vec(),
                filled: filled[i * plane..(i + 1) * plane].to_vec(),
                origin: man.origins[i],
            })
            .collect();
        let all: Vec<usize> = man.split.train.iter().chain(&man.split.val).chain(&man.split.test).copied().collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::format(&mpath, "split is not a partition of the samples"));
        }
        Ok(PatchDataset {
            samples,
            split: man.split,
            stats: man.norm_stats,
            band_names,
            patch_size: p,
        })
    }
}
