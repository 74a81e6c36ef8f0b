//! LiDAR footprint filtering, RH-metric calibration against field plots, and
//! label rasterization.

pub mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{self, fit_line};
use crate::raster::GridGeometry;

/// Percentile levels of the relative-height metrics carried by each footprint.
pub const RH_LEVELS: [u8; 9] = [60, 65, 70, 75, 80, 85, 90, 95, 98];

/// Default footprint diameter in meters.
pub const FOOTPRINT_DIAMETER_M: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamKind {
    Power,
    Coverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    /// Heights in meters at each of [`RH_LEVELS`].
    pub rh: [f64; 9],
    pub sensitivity: f64,
    pub canopy_cover: f64,
    pub beam: BeamKind,
    pub quality_ok: bool,
    pub degraded: bool,
    pub daytime: bool,
    pub month: u8,
}

impl FootprintRecord {
    /// Height at RH level `level`, if it is one of [`RH_LEVELS`].
    pub fn rh_at(&self, level: u8) -> Option<f64> {
        RH_LEVELS.iter().position(|&l| l == level).map(|i| self.rh[i])
    }

    pub fn rh98(&self) -> f64 {
        self.rh[8]
    }

    /// Checks the record-level invariants: monotone RH profile, fractions in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.rh.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput(format!("{}: RH metrics decrease with level", self.id)));
        }
        if !(0.0..=1.0).contains(&self.sensitivity) || !(0.0..=1.0).contains(&self.canopy_cover) {
            return Err(Error::InvalidInput(format!("{}: sensitivity/cover outside [0, 1]", self.id)));
        }
        if !(1..=12).contains(&self.month) {
            return Err(Error::InvalidInput(format!("{}: month {} outside 1-12", self.id, self.month)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPlot {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub tree_heights: Vec<f64>,
    pub matched_footprint_id: Option<String>,
}

impl FieldPlot {
    pub fn validate(&self) -> Result<()> {
        if self.tree_heights.is_empty() || self.tree_heights.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidInput(format!("plot {}: tree heights must be non-empty and positive", self.id)));
        }
        Ok(())
    }

    /// Heights sorted tallest first.
    fn sorted_desc(&self) -> Vec<f64> {
        let mut h = self.tree_heights.clone();
        h.sort_by(|a, b| b.total_cmp(a));
        h
    }

    /// Value of a field statistic and whether the plot had too few trees for it.
    pub fn statistic(&self, stat: FieldStatistic) -> (f64, bool) {
        let h = self.sorted_desc();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        match stat.top_k() {
            Some(k) => {
                let short = h.len() < k;
                (mean(&h[..k.min(h.len())]), short)
            }
            None if stat == FieldStatistic::Max => (h[0], false),
            None => (mean(&h), false),
        }
    }

    /// Mean of the ten tallest trees.
    pub fn dominant_height(&self) -> f64 {
        self.statistic(FieldStatistic::Top10Mean).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldStatistic {
    Max,
    Top5Mean,
    Top10Mean,
    Top15Mean,
    Top20Mean,
    AllMean,
}

impl FieldStatistic {
    pub const ALL: [FieldStatistic; 6] = [
        FieldStatistic::Max,
        FieldStatistic::Top5Mean,
        FieldStatistic::Top10Mean,
        FieldStatistic::Top15Mean,
        FieldStatistic::Top20Mean,
        FieldStatistic::AllMean,
    ];

    fn top_k(self) -> Option<usize> {
        match self {
            FieldStatistic::Top5Mean => Some(5),
            FieldStatistic::Top10Mean => Some(10),
            FieldStatistic::Top15Mean => Some(15),
            FieldStatistic::Top20Mean => Some(20),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldStatistic::Max => "max",
            FieldStatistic::Top5Mean => "top5_mean",
            FieldStatistic::Top10Mean => "top10_mean",
            FieldStatistic::Top15Mean => "top15_mean",
            FieldStatistic::Top20Mean => "top20_mean",
            FieldStatistic::AllMean => "all_mean",
        }
    }
}

// ---------------------------------------------------------------------------
// Filters

/// Keeps good-quality, non-degraded, night-time power-beam shots.
pub fn quality_filter(records: Vec<FootprintRecord>) -> Vec<FootprintRecord> {
    records
        .into_iter()
        .filter(|r| r.quality_ok && !r.degraded && !r.daytime && r.beam == BeamKind::Power)
        .collect()
}

/// Sensitivity must reach 0.95 under open canopy (< 0.8 cover) and 0.98 under dense canopy.
pub fn sensitivity_cover_filter(records: Vec<FootprintRecord>) -> Vec<FootprintRecord> {
    records
        .into_iter()
        .filter(|r| {
            if r.canopy_cover < 0.8 {
                r.sensitivity >= 0.95
            } else {
                r.sensitivity >= 0.98
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct NdviFilterOutcome {
    pub kept: Vec<FootprintRecord>,
    /// `μ + σ` of the cover/NDVI discrepancies, when defined.
    pub threshold: Option<f64>,
    pub warning: Option<String>,
}

/// Drops footprints whose |canopy cover − NDVI| exceeds the mean discrepancy by
/// more than one (population) standard deviation.
pub fn ndvi_consistency_filter(
    records: Vec<FootprintRecord>,
    ndvi_at: impl Fn(f64, f64) -> Option<f64>,
) -> Result<NdviFilterOutcome> {
    if records.len() < 2 {
        let warning = format!(
            "NDVI consistency filter skipped: {} record(s), spread undefined",
            records.len()
        );
        log::warn!("{warning}");
        return Ok(NdviFilterOutcome {
            kept: records,
            threshold: None,
            warning: Some(warning),
        });
    }
    let mut d = Vec::with_capacity(records.len());
    for r in &records {
        let ndvi = ndvi_at(r.lon, r.lat)
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::InvalidInput(format!("no NDVI at footprint {}", r.id)))?;
        d.push((r.canopy_cover - ndvi).abs());
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mean + sd;
    let kept = records
        .into_iter()
        .zip(d)
        .filter(|(_, di)| *di <= threshold)
        .map(|(r, _)| r)
        .collect();
    Ok(NdviFilterOutcome {
        kept,
        threshold: Some(threshold),
        warning: None,
    })
}

pub fn forest_mask_filter(records: Vec<FootprintRecord>, mask_at: impl Fn(f64, f64) -> bool) -> Vec<FootprintRecord> {
    records.into_iter().filter(|r| mask_at(r.lon, r.lat)).collect()
}

/// Footprint counts per acquisition month (index 0 = January).
pub fn monthly_counts(records: &[FootprintRecord]) -> [usize; 12] {
    let mut out = [0; 12];
    for r in records {
        if (1..=12).contains(&r.month) {
            out[r.month as usize - 1] += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Calibration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationModel {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub rrmse_pct: f64,
    pub n: usize,
}

impl CalibrationModel {
    /// `slope·rh98 + intercept`, meters.
    pub fn apply(&self, rh98: f64) -> f64 {
        self.slope * rh98 + self.intercept
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("calibration serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Ordinary least squares of dominant height on RH98.
pub fn fit_calibration(pairs: &[(f64, f64)]) -> Result<CalibrationModel> {
    if pairs.len() < 2 {
        return Err(Error::Insufficient("calibration needs at least 2 pairs".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (slope, intercept) =
        fit_line(&xs, &ys).ok_or_else(|| Error::InvalidInput("RH98 values have zero variance".into()))?;
    let fitted: Vec<f64> = xs.iter().map(|x| slope * x + intercept).collect();
    let r = metrics::metrics(&ys, &fitted)?;
    Ok(CalibrationModel {
        slope,
        intercept,
        r2: r.r2.unwrap_or(f64::NAN),
        rrmse_pct: r.rrmse_pct.unwrap_or(f64::NAN),
        n: pairs.len(),
    })
}

pub fn apply_calibration(model: &CalibrationModel, rh98: f64) -> f64 {
    model.apply(rh98)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhMetricRow {
    pub rh_level: u8,
    pub statistic: FieldStatistic,
    pub r2: Option<f64>,
    pub rrmse_pct: Option<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    /// Plots with fewer trees than the statistic asks for (mean of all used).
    pub short_plots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhMetricTable {
    pub rows: Vec<RhMetricRow>,
}

impl RhMetricTable {
    pub fn get(&self, level: u8, stat: FieldStatistic) -> Option<&RhMetricRow> {
        self.rows.iter().find(|r| r.rh_level == level && r.statistic == stat)
    }

    /// The (level, statistic) pair with the highest r².
    pub fn best(&self) -> Option<&RhMetricRow> {
        self.rows
            .iter()
            .filter(|r| r.r2.is_some())
            .max_by(|a, b| a.r2.unwrap().total_cmp(&b.r2.unwrap()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rh_level,statistic,n,slope,intercept,r2,rrmse_pct,short_plots\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.rh_level,
                r.statistic.name(),
                r.n,
                r.slope,
                r.intercept,
                opt(r.r2),
                opt(r.rrmse_pct),
                r.short_plots
            ));
        }
        s
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Plots paired with their matched footprints; unmatched plots are skipped.
pub fn match_plots<'a>(plots: &'a [FieldPlot], records: &'a [FootprintRecord]) -> Vec<(&'a FieldPlot, &'a FootprintRecord)> {
    let by_id: HashMap<&str, &FootprintRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    plots
        .iter()
        .filter_map(|p| {
            let id = p.matched_footprint_id.as_deref()?;
            by_id.get(id).map(|r| (p, *r))
        })
        .collect()
}

/// Fits `field_stat = a·rh + b` for every RH level × field statistic pair.
pub fn rh_field_correlation(plots: &[FieldPlot], records: &[FootprintRecord]) -> Result<RhMetricTable> {
    let pairs = match_plots(plots, records);
    if pairs.len() < 2 {
        return Err(Error::Insufficient("insufficient pairs".into()));
    }
    for (p, _) in &pairs {
        p.validate()?;
    }
    let mut rows = Vec::with_capacity(RH_LEVELS.len() * FieldStatistic::ALL.len());
    for (li, &level) in RH_LEVELS.iter().enumerate().rev() {
        let rh: Vec<f64> = pairs.iter().map(|(_, r)| r.rh[li]).collect();
        for stat in FieldStatistic::ALL {
            let (field, short): (Vec<f64>, Vec<bool>) = pairs.iter().map(|(p, _)| p.statistic(stat)).unzip();
            let (slope, intercept) = fit_line(&rh, &field)
                .ok_or_else(|| Error::InvalidInput(format!("RH{level} has zero variance across plots")))?;
            let fitted: Vec<f64> = rh.iter().map(|x| slope * x + intercept).collect();
            let m = metrics::metrics(&field, &fitted)?;
            rows.push(RhMetricRow {
                rh_level: level,
                statistic: stat,
                r2: m.r2,
                rrmse_pct: m.rrmse_pct,
                slope,
                intercept,
                n: pairs.len(),
                short_plots: short.iter().filter(|&&s| s).count(),
            });
        }
    }
    Ok(RhMetricTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioGroup {
    pub n: usize,
    /// Intercept of `rh98 = a·field + b` (field height as the independent variable).
    pub offset_rh98_on_field: Option<f64>,
    /// Intercept of `field = a·rh98 + b`.
    pub offset_field_on_rh98: Option<f64>,
    /// Mean of `rh98 − field`.
    pub mean_signed_difference: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStrata {
    pub threshold: f64,
    /// Pairs with `rh80 / rh98 ≥ threshold`.
    pub at_or_above: RatioGroup,
    pub below: RatioGroup,
    /// Pairs dropped because `rh98 ≤ 0`.
    pub excluded: usize,
}

fn ratio_group(pairs: &[(f64, f64)]) -> RatioGroup {
    let n = pairs.len();
    let field: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let rh98: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    RatioGroup {
        n,
        offset_rh98_on_field: fit_line(&field, &rh98).map(|l| l.1),
        offset_field_on_rh98: fit_line(&rh98, &field).map(|l| l.1),
        mean_signed_difference: (n > 0).then(|| pairs.iter().map(|(f, r)| r - f).sum::<f64>() / n as f64),
    }
}

/// Splits matched plot/footprint pairs by the RH80/RH98 ratio and reports the
/// RH98-vs-field offset of each group. The field side is the dominant height.
pub fn stratify_by_rh_ratio(plots: &[FieldPlot], records: &[FootprintRecord], threshold: f64) -> Result<RatioStrata> {
    let pairs = match_plots(plots, records);
    if pairs.is_empty() {
        return Err(Error::Insufficient("no matched plot/footprint pairs".into()));
    }
    let mut above = Vec::new();
    let mut below = Vec::new();
    let mut excluded = 0;
    for (p, r) in pairs {
        let rh98 = r.rh98();
        if rh98 <= 0.0 {
            log::warn!("footprint {}: RH98 {rh98} ≤ 0, excluded from ratio strata", r.id);
            excluded += 1;
            continue;
        }
        let ratio = r.rh[4] / rh98;
        let pair = (p.dominant_height(), rh98);
        if ratio >= threshold {
            above.push(pair);
        } else {
            below.push(pair);
        }
    }
    Ok(RatioStrata {
        threshold,
        at_or_above: ratio_group(&above),
        below: ratio_group(&below),
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Label rasterization

/// A calibrated footprint ready to become a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFootprint {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRasters {
    /// Row-major heights in meters; `0` where unlabeled.
    pub label: Vec<f64>,
    pub mask: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

impl LabelRasters {
    pub fn labeled_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Burns every footprint disk into the grid: a pixel is labeled when its centroid
/// lies within `diameter/2` of a footprint center. Contested pixels take the
/// nearest center, then the lexicographically lowest id.
pub fn rasterize_labels(footprints: &[LabeledFootprint], grid: &GridGeometry, diameter_m: f64) -> LabelRasters {
    let (w, h) = (grid.width, grid.height);
    let mut label = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    let mut best: Vec<Option<(f64, usize)>> = vec![None; w * h];
    let radius = diameter_m / 2.0;
    let reach = (radius / grid.pixel_size).ceil() as isize + 1;
    for (fi, fp) in footprints.iter().enumerate() {
        let (x, y) = grid.projection.forward(fp.lon, fp.lat);
        let (cr, cc) = grid.fractional_pixel(x, y);
        let (cr, cc) = (cr.floor() as isize, cc.floor() as isize);
        for row in cr - reach..=cr + reach {
            for col in cc - reach..=cc + reach {
                if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
                    continue;
                }
                let (px, py) = grid.centroid(row as usize, col as usize);
                let dist = ((px - x).powi(2) + (py - y).powi(2)).sqrt();
                if dist > radius {
                    continue;
                }
                let idx = row as usize * w + col as usize;
                let wins = match best[idx] {
                    None => true,
                    Some((d, other)) => {
                        dist < d || (dist == d && fp.id < footprints[other].id)
                    }
                };
                if wins {
                    best[idx] = Some((dist, fi));
                    label[idx] = fp.height;
                    mask[idx] = true;
                }
            }
        }
    }
    LabelRasters {
        label,
        mask,
        width: w,
        height: h,
    }
}
