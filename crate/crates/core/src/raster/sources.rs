//! Per-sensor source imagery of one study area and its reduction to the four
//! modality stacks on the optical 10 m grid.

use std::path::{Path, PathBuf};

use super::io::{read_raster, write_raster};
use super::ops::{
    coordinate_grids, optical_composite, palsar_composite, resample_bicubic, sentinel1_composite, slope_from_dem,
};
use super::{assemble_stacks, Raster, Stacks};
use crate::model::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceImagery {
    /// 12-band surface reflectance per date.
    pub optical: Vec<Raster>,
    /// Calibrated backscatter in dB per date.
    pub s1_vv: Vec<Raster>,
    pub s1_vh: Vec<Raster>,
    /// Annual mosaic digital numbers and local incidence angle, any grid.
    pub palsar_hh_dn: Raster,
    pub palsar_hv_dn: Raster,
    pub palsar_lia: Raster,
    /// Elevation in meters, any grid.
    pub dem: Raster,
}

fn series_path(dir: &Path, stem: &str, k: usize) -> PathBuf {
    dir.join(format!("{stem}_t{k}.tif"))
}

fn read_series(dir: &Path, stem: &str) -> Result<Vec<Raster>> {
    let mut out = Vec::new();
    while series_path(dir, stem, out.len()).exists() {
        out.push(read_raster(&series_path(dir, stem, out.len()))?.0);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no `{stem}_t0.tif` source found",
            dir.display()
        )));
    }
    Ok(out)
}

impl SourceImagery {
    /// Composites every sensor and resamples the coarser ones onto the optical grid.
    pub fn build_stacks(&self, speckle_radius_m: Option<f64>) -> Result<Stacks> {
        let s2 = optical_composite(&self.optical)?;
        let grid = s2.geometry;
        let s1 = sentinel1_composite(&self.s1_vv, &self.s1_vh, speckle_radius_m)?;
        grid.ensure_matches(&s1.geometry, "sentinel1")?;
        let palsar_src = palsar_composite(&self.palsar_hh_dn, &self.palsar_hv_dn, &self.palsar_lia)?;
        let palsar = resample_bicubic(&palsar_src, &grid);
        let elev = resample_bicubic(&self.dem, &grid);
        let slope = slope_from_dem(&elev);
        let coords = coordinate_grids(&grid);
        let ancillary = Raster::stack(&[&elev, &slope, &coords])?;
        assemble_stacks(s2, s1, palsar, ancillary)
    }

    /// Layout: `s2_t{k}.tif`, `s1_vv_t{k}.tif`, `s1_vh_t{k}.tif`, `palsar_hh_dn.tif`,
    /// `palsar_hv_dn.tif`, `palsar_lia.tif`, `dem.tif`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, r) in self.optical.iter().enumerate() {
            write_raster(&series_path(dir, "s2", k), r, &[])?;
        }
        for (k, (vv, vh)) in self.s1_vv.iter().zip(&self.s1_vh).enumerate() {
            write_raster(&series_path(dir, "s1_vv", k), vv, &[])?;
            write_raster(&series_path(dir, "s1_vh", k), vh, &[])?;
        }
        write_raster(&dir.join("palsar_hh_dn.tif"), &self.palsar_hh_dn, &[])?;
        write_raster(&dir.join("palsar_hv_dn.tif"), &self.palsar_hv_dn, &[])?;
        write_raster(&dir.join("palsar_lia.tif"), &self.palsar_lia, &[])?;
        write_raster(&dir.join("dem.tif"), &self.dem, &[])
    }

    pub fn read(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!("{}: source directory not found", dir.display())));
        }
        let s1_vv = read_series(dir, "s1_vv")?;
        let s1_vh = read_series(dir, "s1_vh")?;
        if s1_vv.len() != s1_vh.len() {
            return Err(Error::InvalidInput(format!(
                "{}: {} VV dates but {} VH dates",
                dir.display(),
                s1_vv.len(),
                s1_vh.len()
            )));
        }
        let single = |name: &str| read_raster(&dir.join(name)).map(|r| r.0);
        Ok(Self {
            optical: read_series(dir, "s2")?,
            s1_vv,
            s1_vh,
            palsar_hh_dn: single("palsar_hh_dn.tif")?,
            palsar_hv_dn: single("palsar_hv_dn.tif")?,
            palsar_lia: single("palsar_lia.tif")?,
            dem: single("dem.tif")?,
        })
    }
}

/// Path of the assembled stack for one modality inside a stack directory.
pub fn stack_file(dir: &Path, m: Modality) -> PathBuf {
    dir.join(format!("{}.tif", m.name()))
}

/// Writes one GeoTIFF (plus band-name sidecar) per modality.
pub fn write_stacks(dir: &Path, stacks: &Stacks) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, s) in stacks {
        write_raster(&stack_file(dir, *m), &s.raster, &s.band_names)?;
    }
    Ok(())
}

/// Reads and re-validates the four stacks written by [`write_stacks`].
pub fn read_stacks(dir: &Path) -> Result<Stacks> {
    let read = |m: Modality| read_raster(&stack_file(dir, m)).map(|r| r.0);
    assemble_stacks(
        read(Modality::Sentinel2)?,
        read(Modality::Sentinel1)?,
        read(Modality::Palsar2)?,
        read(Modality::Ancillary)?,
    )
}
