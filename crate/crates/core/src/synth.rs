//! A seeded synthetic landscape: a smooth canopy-height field, per-sensor
//! source imagery derived from it, LiDAR footprints with planted filter
//! violations, and field plots matched to footprints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gedi::{self, BeamKind, FieldPlot, FootprintRecord};
use crate::raster::{self, GridGeometry, Projection, Raster, SourceImagery, Stacks};

/// Calibration line the generator inverts: `height = 0.73·rh98 + 7.86`.
pub const CAL_SLOPE: f64 = 0.73;
pub const CAL_INTERCEPT: f64 = 7.86;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    /// Projection centre, degrees.
    pub lon0: f64,
    pub lat0: f64,
    pub min_height_m: f64,
    pub max_height_m: f64,
    /// Box-blur radius in pixels and pass count for the height field.
    pub smoothing_radius: usize,
    pub smoothing_passes: usize,
    /// Fraction of the grid outside the forest mask.
    pub nonforest_fraction: f64,
    pub optical_dates: usize,
    pub sar_dates: usize,
    /// Noise scale applied to every band (1 = nominal).
    pub band_noise: f64,
    pub footprint_spacing_m: f64,
    pub rh98_noise_m: f64,
    pub field_noise_m: f64,
    pub plots: usize,
    pub trees_per_plot: usize,
    /// One in `violation_period` footprints breaks a filter rule.
    pub violation_period: usize,
    pub speckle_radius_m: f64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        Self {
            seed: 1,
            width: 256,
            height: 256,
            pixel_size: 10.0,
            lon0: 126.0,
            lat0: 43.5,
            min_height_m: 5.0,
            max_height_m: 35.0,
            smoothing_radius: 6,
            smoothing_passes: 3,
            nonforest_fraction: 0.12,
            optical_dates: 3,
            sar_dates: 3,
            band_noise: 1.0,
            footprint_spacing_m: 60.0,
            rh98_noise_m: 0.4,
            field_noise_m: 0.4,
            plots: 60,
            trees_per_plot: 25,
            violation_period: 8,
            speckle_radius_m: 50.0,
        }
    }
}

/// Filter rule a planted footprint violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    Quality,
    Degraded,
    Daytime,
    CoverageBeam,
    Sensitivity,
    NdviConsistency,
    NonForest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedViolation {
    pub id: String,
    pub rule: Violation,
}

/// Source imagery plus everything derived from it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub world: SyntheticWorld,
    pub grid: GridGeometry,
    pub truth: Raster,
    pub forest_mask: Raster,
    pub sources: SourceImagery,
    pub stacks: Stacks,
    pub footprints: Vec<FootprintRecord>,
    pub plots: Vec<FieldPlot>,
    pub planted: Vec<PlantedViolation>,
}

fn box_blur(v: &mut [f64], w: usize, h: usize, radius: usize) {
    let r = radius as isize;
    let mut tmp = vec![0.0; v.len()];
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let c = (col as isize + d).clamp(0, w as isize - 1) as usize;
                s += v[row * w + c];
            }
            tmp[row * w + col] = s / (2 * r + 1) as f64;
        }
    }
    for row in 0..h {
        for col in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let rr = (row as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[rr * w + col];
            }
            v[row * w + col] = s / (2 * r + 1) as f64;
        }
    }
}

/// Smoothed white noise rescaled to `[lo, hi]`.
fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, radius: usize, passes: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
    for _ in 0..passes {
        box_blur(&mut v, w, h, radius);
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(f64::MIN_POSITIVE);
    v.iter().map(|x| lo + (x - min) / span * (hi - lo)).collect()
}

/// Nominal reflectance of each optical band at normalized height `t ∈ [−1, 1]`.
fn reflectance(band: usize, t: f64) -> f64 {
    // B1 B2 B3 B4 B5 B6 B7 B8 B8A B9 B11 B12
    const BASE: [f64; 12] = [0.04, 0.05, 0.07, 0.06, 0.11, 0.24, 0.29, 0.32, 0.33, 0.31, 0.18, 0.09];
    const GAIN: [f64; 12] = [-0.005, -0.012, -0.015, -0.025, -0.02, 0.03, 0.05, 0.06, 0.055, 0.04, -0.04, -0.035];
    BASE[band] + GAIN[band] * t
}

/// Coarser grid covering `g` completely at `pixel_size`.
fn covering_grid(g: &GridGeometry, pixel_size: f64) -> GridGeometry {
    let ext_w = g.width as f64 * g.pixel_size;
    let ext_h = g.height as f64 * g.pixel_size;
    GridGeometry {
        origin_x: g.origin_x - pixel_size,
        origin_y: g.origin_y + pixel_size,
        pixel_size,
        width: (ext_w / pixel_size).ceil() as usize + 2,
        height: (ext_h / pixel_size).ceil() as usize + 2,
        projection: g.projection,
    }
}

/// Value of a fine-grid plane at the pixel containing a projected point (edge-clamped).
fn sample_plane(plane: &[f64], g: &GridGeometry, x: f64, y: f64) -> f64 {
    let (r, c) = g.fractional_pixel(x, y);
    let r = (r.floor().max(0.0) as usize).min(g.height - 1);
    let c = (c.floor().max(0.0) as usize).min(g.width - 1);
    plane[r * g.width + c]
}

pub fn synth_generate(world: &SyntheticWorld) -> Result<SyntheticData> {
    let (w, h) = (world.width, world.height);
    if w < 128 || h < 128 {
        return Err(Error::InvalidInput(format!("synthetic grid must be at least 128x128, got {w}x{h}")));
    }
    if world.violation_period < 7 {
        return Err(Error::InvalidInput("violation_period must be at least 7 (one slot per rule plus clean records)".into()));
    }
    let ps = world.pixel_size;
    let grid = GridGeometry::new(
        -(w as f64) * ps / 2.0,
        h as f64 * ps / 2.0,
        ps,
        w,
        h,
        Projection::new(world.lon0, world.lat0),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let noise = |sd: f64| Normal::new(0.0, sd.max(0.0)).expect("finite sd");

    let heights = smooth_field(
        &mut rng,
        w,
        h,
        world.smoothing_radius,
        world.smoothing_passes,
        world.min_height_m,
        world.max_height_m,
    );
    let cover_field = smooth_field(&mut rng, w, h, world.smoothing_radius * 2, world.smoothing_passes, 0.0, 1.0);
    let forest: Vec<f64> = cover_field
        .iter()
        .map(|&v| if v >= world.nonforest_fraction { 1.0 } else { 0.0 })
        .collect();
    let mid = 0.5 * (world.min_height_m + world.max_height_m);
    let half = 0.5 * (world.max_height_m - world.min_height_m);
    // Normalized structure signal; non-forest reads as very short vegetation.
    let tnorm: Vec<f64> = heights
        .iter()
        .zip(&forest)
        .map(|(&hgt, &f)| if f > 0.0 { (hgt - mid) / half } else { -2.0 })
        .collect();

    // Optical observations.
    let opt_noise = noise(0.006 * world.band_noise);
    let mut optical = Vec::with_capacity(world.optical_dates);
    for _ in 0..world.optical_dates {
        let season = rng.random_range(-0.01..0.01);
        let mut data = vec![0.0; 12 * w * h];
        for b in 0..12 {
            for i in 0..w * h {
                data[b * w * h + i] = (reflectance(b, tnorm[i]) + season + opt_noise.sample(&mut rng)).max(0.001);
            }
        }
        optical.push(Raster::from_data(grid, 12, data)?);
    }

    // Sentinel-1 gamma naught (dB), per date.
    let sar_noise = noise(0.8 * world.band_noise);
    let mut s1_vv = Vec::with_capacity(world.sar_dates);
    let mut s1_vh = Vec::with_capacity(world.sar_dates);
    for _ in 0..world.sar_dates {
        let vv: Vec<f64> = tnorm.iter().map(|t| -10.0 + 1.5 * t + sar_noise.sample(&mut rng)).collect();
        let vh: Vec<f64> = tnorm.iter().map(|t| -16.5 + 2.5 * t + sar_noise.sample(&mut rng)).collect();
        s1_vv.push(Raster::from_data(grid, 1, vv)?);
        s1_vh.push(Raster::from_data(grid, 1, vh)?);
    }

    // PALSAR-2 digital numbers and incidence angle on a 25 m grid.
    let pgrid = covering_grid(&grid, 25.0);
    let l_noise = noise(0.6 * world.band_noise);
    let mut hh = Vec::with_capacity(pgrid.len());
    let mut hv = Vec::with_capacity(pgrid.len());
    let mut lia = Vec::with_capacity(pgrid.len());
    let to_dn = |db: f64| 10f64.powf((db + 83.0) / 20.0);
    for r in 0..pgrid.height {
        for c in 0..pgrid.width {
            let (x, y) = pgrid.centroid(r, c);
            let t = sample_plane(&tnorm, &grid, x, y);
            hh.push(to_dn(-8.0 + 2.0 * t + l_noise.sample(&mut rng)));
            hv.push(to_dn(-14.0 + 3.5 * t + l_noise.sample(&mut rng)));
            lia.push(36.0 + rng.random_range(-2.0..2.0));
        }
    }
    let palsar_hh_dn = Raster::from_data(pgrid, 1, hh)?;
    let palsar_hv_dn = Raster::from_data(pgrid, 1, hv)?;
    let palsar_lia = Raster::from_data(pgrid, 1, lia)?;

    // Elevation on a 30 m grid.
    let dgrid = covering_grid(&grid, 30.0);
    let dem_v = smooth_field(&mut rng, dgrid.width, dgrid.height, 4, 3, 300.0, 700.0);
    let dem = Raster::from_data(dgrid, 1, dem_v)?;

    let sources = SourceImagery {
        optical,
        s1_vv,
        s1_vh,
        palsar_hh_dn,
        palsar_hv_dn,
        palsar_lia,
        dem,
    };
    let stacks = sources.build_stacks(Some(world.speckle_radius_m))?;
    let ndvi = stacks[&crate::model::Modality::Sentinel2].raster.single_band(12);

    // Footprints on a jittered grid.
    let step = world.footprint_spacing_m;
    let jitter = step / 3.0;
    let ext_w = w as f64 * ps;
    let ext_h = h as f64 * ps;
    let rh_noise = noise(world.rh98_noise_m);
    let fractions = [0.55, 0.6, 0.65, 0.7, 0.76, 0.82, 0.88, 0.94, 1.0];
    let mut footprints = Vec::new();
    let mut planted = Vec::new();
    let mut truth_at = Vec::new();
    let (ny, nx) = ((ext_h / step) as usize, (ext_w / step) as usize);
    for gy in 0..ny {
        for gx in 0..nx {
            let x = grid.origin_x + (gx as f64 + 0.5) * step + rng.random_range(-jitter..jitter);
            let y = grid.origin_y - (gy as f64 + 0.5) * step + rng.random_range(-jitter..jitter);
            let Some((r, c)) = grid.pixel_of(x, y) else { continue };
            let idx = r * w + c;
            let hgt = heights[idx];
            let rh98 = (hgt - CAL_INTERCEPT) / CAL_SLOPE + rh_noise.sample(&mut rng);
            let pos = rh98.max(0.0);
            let mut rh = [0.0; 9];
            for (k, f) in fractions.iter().enumerate() {
                rh[k] = rh98 - (1.0 - f) * pos;
            }
            let ndvi_here = ndvi.band(0)[idx];
            let id = format!("fp{:06}", footprints.len());
            let mut rec = FootprintRecord {
                id: id.clone(),
                lon: 0.0,
                lat: 0.0,
                rh,
                sensitivity: rng.random_range(0.985..1.0),
                canopy_cover: (ndvi_here + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0),
                beam: BeamKind::Power,
                quality_ok: true,
                degraded: false,
                daytime: false,
                month: rng.random_range(4..=10),
            };
            (rec.lon, rec.lat) = grid.projection.inverse(x, y);
            let slot = footprints.len() % world.violation_period;
            let rule = match slot {
                1 => {
                    rec.quality_ok = false;
                    Some(Violation::Quality)
                }
                2 => {
                    rec.degraded = true;
                    Some(Violation::Degraded)
                }
                3 => {
                    rec.daytime = true;
                    Some(Violation::Daytime)
                }
                4 => {
                    rec.beam = BeamKind::Coverage;
                    Some(Violation::CoverageBeam)
                }
                5 => {
                    rec.sensitivity = rng.random_range(0.85..0.94);
                    Some(Violation::Sensitivity)
                }
                6 => {
                    rec.canopy_cover = if ndvi_here > 0.5 { ndvi_here - 0.6 } else { ndvi_here + 0.6 }.clamp(0.0, 1.0);
                    Some(Violation::NdviConsistency)
                }
                _ => None,
            };
            if let Some(rule) = rule {
                planted.push(PlantedViolation { id: id.clone(), rule });
            }
            if forest[idx] == 0.0 {
                planted.push(PlantedViolation {
                    id: id.clone(),
                    rule: Violation::NonForest,
                });
            }
            truth_at.push((hgt, rule.is_none() && forest[idx] > 0.0));
            footprints.push(rec);
        }
    }

    // Field plots on clean forest footprints.
    let clean: Vec<usize> = (0..footprints.len()).filter(|&i| truth_at[i].1).collect();
    if clean.len() < world.plots {
        return Err(Error::InvalidInput(format!(
            "only {} clean footprints for {} plots; enlarge the grid",
            clean.len(),
            world.plots
        )));
    }
    let field_noise = noise(world.field_noise_m);
    let stride = clean.len() / world.plots.max(1);
    let mut plots = Vec::with_capacity(world.plots);
    for p in 0..world.plots {
        let fi = clean[p * stride.max(1)];
        let target = truth_at[fi].0 + field_noise.sample(&mut rng);
        let n = world.trees_per_plot.max(1);
        let mut trees: Vec<f64> = (0..n).map(|_| target * rng.random_range(0.45..1.1)).collect();
        trees.sort_by(|a, b| b.total_cmp(a));
        let k = n.min(10);
        let top = trees[..k].iter().sum::<f64>() / k as f64;
        for t in trees.iter_mut() {
            *t = (*t + target - top).max(0.5);
        }
        let fp = &footprints[fi];
        plots.push(FieldPlot {
            id: format!("plot{p:03}"),
            lon: fp.lon,
            lat: fp.lat,
            tree_heights: trees,
            matched_footprint_id: Some(fp.id.clone()),
        });
    }

    Ok(SyntheticData {
        world: world.clone(),
        grid,
        truth: Raster::from_data(grid, 1, heights)?,
        forest_mask: Raster::from_data(grid, 1, forest)?,
        sources,
        stacks,
        footprints,
        plots,
        planted,
    })
}

/// File names used by [`SyntheticData::write`].
pub mod files {
    pub const WORLD: &str = "world.toml";
    pub const FOOTPRINTS: &str = "footprints.csv";
    pub const PLOTS: &str = "plots.csv";
    pub const PLANTED: &str = "planted_violations.csv";
    pub const TRUTH: &str = "truth_height.tif";
    pub const FOREST_MASK: &str = "forest_mask.tif";
    pub const NDVI: &str = "ndvi.tif";
    pub const SOURCES: &str = "sources";
    pub const STACKS: &str = "stacks";
}

impl SyntheticData {
    /// Writes sources, assembled stacks, footprints, plots and ground truth.
    pub fn write(&self, dir: &Path) -> Result<()> {
        use raster::io::write_raster;
        self.sources.write(&dir.join(files::SOURCES))?;
        raster::write_stacks(&dir.join(files::STACKS), &self.stacks)?;
        let ndvi = self.stacks[&crate::model::Modality::Sentinel2].raster.single_band(12);
        write_raster(&dir.join(files::NDVI), &ndvi, &["ndvi_median".into()])?;
        write_raster(&dir.join(files::FOREST_MASK), &self.forest_mask, &["forest".into()])?;
        write_raster(&dir.join(files::TRUTH), &self.truth, &["height_m".into()])?;
        gedi::io::write_footprints(&dir.join(files::FOOTPRINTS), &self.footprints)?;
        gedi::io::write_plots(&dir.join(files::PLOTS), &self.plots)?;
        let planted = dir.join(files::PLANTED);
        let mut wtr = csv::Writer::from_path(&planted).map_err(|e| Error::format(&planted, e.to_string()))?;
        for p in &self.planted {
            wtr.serialize(p).map_err(|e| Error::format(&planted, e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::io(&planted, e))?;
        let text = toml::to_string(&self.world).expect("world serializes");
        std::fs::write(dir.join(files::WORLD), text).map_err(|e| Error::io(dir.join(files::WORLD), e))
    }
}
