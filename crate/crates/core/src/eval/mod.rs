//! Evaluation: metrics, footprint-level assessment, height histograms and the
//! ablation harness.

pub mod ablation;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gedi::LabeledFootprint;
use crate::raster::Raster;
use crate::raster::patches::PatchSample;
use crate::tensor::Tensor;

pub use ablation::{run_ablation, AblationGrid, AblationRow, AblationVariant};
pub use metrics::{fit_line, metrics, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootprintEval {
    pub report: MetricsReport,
    /// Footprints whose disk held no valid predicted pixel.
    pub excluded_nodata: usize,
}

/// Mean of valid pixels whose centroids fall inside the footprint disk.
pub fn disk_mean(map: &Raster, lon: f64, lat: f64, diameter_m: f64) -> Option<f64> {
    let g = &map.geometry;
    let (x, y) = g.projection.forward(lon, lat);
    let radius = diameter_m / 2.0;
    let (fr, fc) = g.fractional_pixel(x, y);
    let reach = (radius / g.pixel_size).ceil() as isize + 1;
    let (cr, cc) = (fr.floor() as isize, fc.floor() as isize);
    let (mut sum, mut n) = (0.0, 0usize);
    for r in (cr - reach).max(0)..=(cr + reach).min(g.height as isize - 1) {
        for c in (cc - reach).max(0)..=(cc + reach).min(g.width as isize - 1) {
            let (px, py) = g.centroid(r as usize, c as usize);
            if ((px - x).powi(2) + (py - y).powi(2)).sqrt() > radius {
                continue;
            }
            let v = map.get(0, r as usize, c as usize);
            if !v.is_nan() {
                sum += v;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Compares calibrated footprint heights with the map averaged over each disk.
pub fn footprint_eval(map: &Raster, footprints: &[LabeledFootprint], diameter_m: f64) -> Result<FootprintEval> {
    let (mut obs, mut pred) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    for f in footprints {
        match disk_mean(map, f.lon, f.lat, diameter_m) {
            Some(v) => {
                obs.push(f.height);
                pred.push(v);
            }
            None => excluded += 1,
        }
    }
    if obs.is_empty() {
        return Err(Error::Insufficient("no valid footprints".into()));
    }
    if excluded > 0 {
        log::warn!("{excluded} footprint(s) fell entirely on nodata and were excluded");
    }
    Ok(FootprintEval {
        report: metrics(&obs, &pred)?,
        excluded_nodata: excluded,
    })
}

/// Per-labeled-pixel metrics over patch samples and matching `[1,1,P,P]` predictions.
pub fn pixel_metrics(samples: &[PatchSample], predictions: &[Tensor]) -> Result<MetricsReport> {
    let (mut obs, mut pred) = (Vec::new(), Vec::new());
    for (s, p) in samples.iter().zip(predictions) {
        for (i, &m) in s.mask.iter().enumerate() {
            if m {
                obs.push(s.label[i]);
                pred.push(p.data()[i]);
            }
        }
    }
    metrics(&obs, &pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightHistogram {
    pub bin_width: f64,
    pub counts_a: Vec<usize>,
    pub counts_b: Vec<usize>,
}

impl HeightHistogram {
    /// Lower edge of bin `k`.
    pub fn lower(&self, k: usize) -> f64 {
        k as f64 * self.bin_width
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lower,bin_upper,count_a,count_b\n");
        for k in 0..self.counts_a.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.lower(k),
                self.lower(k + 1),
                self.counts_a[k],
                self.counts_b[k]
            ));
        }
        s
    }
}

/// Counts valid pixels of two maps in shared `[k·w, (k+1)·w)` bins from 0 up
/// to the larger maximum. Negative heights fall in the first bin.
pub fn height_histogram(a: &Raster, b: &Raster, bin_width: f64) -> Result<HeightHistogram> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidInput(format!("bin width must be positive, got {bin_width}")));
    }
    a.geometry.ensure_matches(&b.geometry, "histogram")?;
    let valid = |r: &Raster| r.band(0).iter().copied().filter(|v| v.is_finite()).collect::<Vec<_>>();
    let (va, vb) = (valid(a), valid(b));
    if va.is_empty() || vb.is_empty() {
        return Err(Error::Insufficient("map has no valid pixels".into()));
    }
    let max = va.iter().chain(&vb).copied().fold(0.0, f64::max);
    let bins = (max / bin_width).floor() as usize + 1;
    let count = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in v {
            c[((x.max(0.0) / bin_width).floor() as usize).min(bins - 1)] += 1;
        }
        c
    };
    Ok(HeightHistogram {
        bin_width,
        counts_a: count(&va),
        counts_b: count(&vb),
    })
}

#[cfg(test)]
mod tests;
