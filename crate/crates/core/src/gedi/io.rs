//! Delimited-text readers and writers for footprints, field plots and
//! calibrated labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BeamKind, FieldPlot, FootprintRecord, LabeledFootprint};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct FootprintRow {
    id: String,
    lon: f64,
    lat: f64,
    rh60: f64,
    rh65: f64,
    rh70: f64,
    rh75: f64,
    rh80: f64,
    rh85: f64,
    rh90: f64,
    rh95: f64,
    rh98: f64,
    sensitivity: f64,
    cover: f64,
    beam: BeamKind,
    quality: u8,
    degrade: u8,
    daytime: u8,
    month: u8,
}

impl From<&FootprintRecord> for FootprintRow {
    fn from(r: &FootprintRecord) -> Self {
        let h = r.rh;
        FootprintRow {
            id: r.id.clone(),
            lon: r.lon,
            lat: r.lat,
            rh60: h[0],
            rh65: h[1],
            rh70: h[2],
            rh75: h[3],
            rh80: h[4],
            rh85: h[5],
            rh90: h[6],
            rh95: h[7],
            rh98: h[8],
            sensitivity: r.sensitivity,
            cover: r.canopy_cover,
            beam: r.beam,
            quality: r.quality_ok as u8,
            degrade: r.degraded as u8,
            daytime: r.daytime as u8,
            month: r.month,
        }
    }
}

impl FootprintRow {
    fn into_record(self) -> FootprintRecord {
        FootprintRecord {
            id: self.id,
            lon: self.lon,
            lat: self.lat,
            rh: [
                self.rh60, self.rh65, self.rh70, self.rh75, self.rh80, self.rh85, self.rh90, self.rh95, self.rh98,
            ],
            sensitivity: self.sensitivity,
            canopy_cover: self.cover,
            beam: self.beam,
            quality_ok: self.quality != 0,
            degraded: self.degrade != 0,
            daytime: self.daytime != 0,
            month: self.month,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PlotRow {
    id: String,
    lon: f64,
    lat: f64,
    tree_heights: String,
    matched_footprint_id: String,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        out.push(row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads footprints and checks each record's invariants.
pub fn read_footprints(path: &Path) -> Result<Vec<FootprintRecord>> {
    let rows: Vec<FootprintRow> = read_rows(path)?;
    let records: Vec<FootprintRecord> = rows.into_iter().map(FootprintRow::into_record).collect();
    for r in &records {
        r.validate().map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(records)
}

pub fn write_footprints(path: &Path, records: &[FootprintRecord]) -> Result<()> {
    write_rows(path, records.iter().map(FootprintRow::from))
}

pub fn read_plots(path: &Path) -> Result<Vec<FieldPlot>> {
    let rows: Vec<PlotRow> = read_rows(path)?;
    rows.into_iter()
        .map(|r| {
            let tree_heights = r
                .tree_heights
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::format(path, format!("plot {}: {e}", r.id)))?;
            let plot = FieldPlot {
                id: r.id,
                lon: r.lon,
                lat: r.lat,
                tree_heights,
                matched_footprint_id: Some(r.matched_footprint_id).filter(|s| !s.is_empty()),
            };
            plot.validate().map_err(|e| Error::format(path, e.to_string()))?;
            Ok(plot)
        })
        .collect()
}

pub fn write_plots(path: &Path, plots: &[FieldPlot]) -> Result<()> {
    write_rows(
        path,
        plots.iter().map(|p| PlotRow {
            id: p.id.clone(),
            lon: p.lon,
            lat: p.lat,
            tree_heights: p.tree_heights.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(";"),
            matched_footprint_id: p.matched_footprint_id.clone().unwrap_or_default(),
        }),
    )
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledFootprint>> {
    read_rows(path)
}

pub fn write_labels(path: &Path, labels: &[LabeledFootprint]) -> Result<()> {
    write_rows(path, labels)
}
