//! Georeferenced rasters on the common 10 m analysis grid, band derivation,
//! stack assembly and patch extraction.

pub mod io;
pub mod ops;
pub mod patches;
pub mod sources;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;

pub use ops::{
    coordinate_grids, dn_to_gamma0, optical_composite, palsar_composite, percentile_linear, resample_bicubic,
    sentinel1_composite, slope_from_dem, speckle_filter, temporal_percentiles,
};
pub use sources::{read_stacks, stack_file, write_stacks, SourceImagery};
pub use patches::{
    extract_patches, fit_norm_stats, split_samples, standardize, NormStats, PatchDataset, PatchSample, Split,
};

/// Mean Earth radius used by the local projection, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Local equirectangular projection centred on `(lon0, lat0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub lon0: f64,
    pub lat0: f64,
}

impl Projection {
    pub fn new(lon0: f64, lat0: f64) -> Self {
        Projection { lon0, lat0 }
    }

    /// Degrees to projected meters (x east, y north).
    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        let k = self.lat0.to_radians().cos();
        (
            EARTH_RADIUS_M * (lon - self.lon0).to_radians() * k,
            EARTH_RADIUS_M * (lat - self.lat0).to_radians(),
        )
    }

    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.lat0.to_radians().cos();
        (
            self.lon0 + (x / (EARTH_RADIUS_M * k)).to_degrees(),
            self.lat0 + (y / EARTH_RADIUS_M).to_degrees(),
        )
    }
}

/// North-up grid; `(origin_x, origin_y)` is the outer top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
    pub projection: Projection,
}

impl GridGeometry {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size: f64, width: usize, height: usize, projection: Projection) -> Result<Self> {
        if !(pixel_size > 0.0) || width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "grid needs positive pixel size and extent, got {pixel_size} m, {width}x{height}"
            )));
        }
        Ok(GridGeometry {
            origin_x,
            origin_y,
            pixel_size,
            width,
            height,
            projection,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Projected coordinates of a pixel centre.
    pub fn centroid(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Continuous `(row, col)` of a projected point; integer values fall on pixel edges.
    pub fn fractional_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.origin_y - y) / self.pixel_size, (x - self.origin_x) / self.pixel_size)
    }

    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (r, c) = self.fractional_pixel(x, y);
        (r >= 0.0 && c >= 0.0 && r < self.height as f64 && c < self.width as f64).then(|| (r as usize, c as usize))
    }

    pub fn pixel_of_lonlat(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let (x, y) = self.projection.forward(lon, lat);
        self.pixel_of(x, y)
    }

    /// Same extent and resolution, up to floating-point noise.
    pub fn matches(&self, other: &GridGeometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()));
        self.width == other.width
            && self.height == other.height
            && close(self.origin_x, other.origin_x)
            && close(self.origin_y, other.origin_y)
            && close(self.pixel_size, other.pixel_size)
            && close(self.projection.lon0, other.projection.lon0)
            && close(self.projection.lat0, other.projection.lat0)
    }

    pub fn ensure_matches(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "{what}: grid mismatch ({}x{} vs {}x{})",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Window of this grid starting at pixel `(row, col)`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> GridGeometry {
        GridGeometry {
            origin_x: self.origin_x + col as f64 * self.pixel_size,
            origin_y: self.origin_y - row as f64 * self.pixel_size,
            width,
            height,
            ..*self
        }
    }
}

/// Band-major raster. NaN marks nodata.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub geometry: GridGeometry,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn filled(geometry: GridGeometry, bands: usize, value: f64) -> Self {
        Raster {
            geometry,
            bands,
            data: vec![value; bands * geometry.len()],
        }
    }

    pub fn from_data(geometry: GridGeometry, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bands * geometry.len() {
            return Err(Error::Shape(format!(
                "raster data has {} values, expected {bands}x{}x{}",
                data.len(),
                geometry.height,
                geometry.width
            )));
        }
        Ok(Raster { geometry, bands, data })
    }

    pub fn from_bands(geometry: GridGeometry, bands: Vec<Vec<f64>>) -> Result<Self> {
        let n = bands.len();
        Raster::from_data(geometry, n, bands.concat())
    }

    pub fn plane_len(&self) -> usize {
        self.geometry.len()
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, row: usize, col: usize) -> f64 {
        self.data[(b * self.geometry.height + row) * self.geometry.width + col]
    }

    pub fn set(&mut self, b: usize, row: usize, col: usize, v: f64) {
        let i = (b * self.geometry.height + row) * self.geometry.width + col;
        self.data[i] = v;
    }

    /// True where any band is nodata.
    pub fn nodata_mask(&self) -> Vec<bool> {
        let n = self.plane_len();
        let mut mask = vec![false; n];
        for b in 0..self.bands {
            for (m, v) in mask.iter_mut().zip(&self.data[b * n..(b + 1) * n]) {
                *m |= v.is_nan();
            }
        }
        mask
    }

    pub fn single_band(&self, b: usize) -> Raster {
        Raster {
            geometry: self.geometry,
            bands: 1,
            data: self.band(b).to_vec(),
        }
    }

    pub fn stack(parts: &[&Raster]) -> Result<Raster> {
        let first = parts.first().ok_or_else(|| Error::InvalidInput("no rasters to stack".into()))?;
        let mut data = Vec::new();
        let mut bands = 0;
        for p in parts {
            first.geometry.ensure_matches(&p.geometry, "stack")?;
            data.extend_from_slice(&p.data);
            bands += p.bands;
        }
        Raster::from_data(first.geometry, bands, data)
    }
}

pub fn band_names(modality: Modality) -> Vec<String> {
    let names: Vec<String> = match modality {
        Modality::Sentinel2 => ["B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12"]
            .iter()
            .map(|b| format!("{b}_median"))
            .chain(["ndvi_median", "evi_median", "ndvi_max", "ndvi_min", "ndvi_diff"].map(String::from))
            .collect(),
        Modality::Sentinel1 => ["vv", "vh", "vh_vv"]
            .iter()
            .flat_map(|p| [10, 50, 90].map(|q| format!("{p}_p{q}")))
            .collect(),
        Modality::Palsar2 => ["hh", "hv", "hv_hh", "local_incidence_angle"].map(String::from).to_vec(),
        Modality::Ancillary => ["elevation", "slope", "longitude", "latitude"].map(String::from).to_vec(),
    };
    debug_assert_eq!(names.len(), modality.band_count());
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStack {
    pub modality: Modality,
    pub raster: Raster,
    pub band_names: Vec<String>,
}

pub type Stacks = BTreeMap<Modality, ModalityStack>;

/// Total bands across all four modalities.
pub const TOTAL_BANDS: usize = 34;

/// Validates the four per-modality rasters and names their bands.
pub fn assemble_stacks(sentinel2: Raster, sentinel1: Raster, palsar2: Raster, ancillary: Raster) -> Result<Stacks> {
    let geometry = sentinel2.geometry;
    let mut out = BTreeMap::new();
    for (modality, raster) in [
        (Modality::Sentinel2, sentinel2),
        (Modality::Sentinel1, sentinel1),
        (Modality::Palsar2, palsar2),
        (Modality::Ancillary, ancillary),
    ] {
        geometry.ensure_matches(&raster.geometry, modality.name())?;
        if raster.bands != modality.band_count() {
            return Err(Error::InvalidInput(format!(
                "{modality}: expected {} bands, got {}",
                modality.band_count(),
                raster.bands
            )));
        }
        out.insert(
            modality,
            ModalityStack {
                modality,
                band_names: band_names(modality),
                raster,
            },
        );
    }
    let total: usize = out.values().map(|s| s.raster.bands).sum();
    debug_assert_eq!(total, TOTAL_BANDS);
    Ok(out)
}
