//! Multi-page float GeoTIFF reading and writing with a band-name sidecar.
//!
//! Each band is one 32-bit float page. Georeferencing uses the standard
//! pixel-scale and tiepoint tags; the local projection centre is stored as JSON
//! in the image description. NaN encodes nodata.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype::Gray32Float, TiffEncoder};
use tiff::tags::Tag;

use super::{GridGeometry, Projection, Raster};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Description {
    lon0: f64,
    lat0: f64,
}

/// Sidecar path holding band names, one per line.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bands");
    PathBuf::from(s)
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn write_raster(path: &Path, raster: &Raster, band_names: &[String]) -> Result<()> {
    let g = raster.geometry;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let desc = serde_json::to_string(&Description {
        lon0: g.projection.lon0,
        lat0: g.projection.lat0,
    })
    .expect("description serializes");
    for b in 0..raster.bands {
        let data: Vec<f32> = raster.band(b).iter().map(|&v| v as f32).collect();
        let mut img = enc
            .new_image::<Gray32Float>(g.width as u32, g.height as u32)
            .map_err(|e| tiff_err(path, e))?;
        let d = img.encoder();
        d.write_tag(Tag::ModelPixelScaleTag, &[g.pixel_size, g.pixel_size, 0.0][..])
            .and_then(|_| d.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0][..]))
            .and_then(|_| d.write_tag(Tag::ImageDescription, desc.as_str()))
            .and_then(|_| d.write_tag(Tag::GdalNodata, "nan"))
            .map_err(|e| tiff_err(path, e))?;
        img.write_data(&data).map_err(|e| tiff_err(path, e))?;
    }
    drop(enc);
    let names: Vec<String> = if band_names.len() == raster.bands {
        band_names.to_vec()
    } else {
        (1..=raster.bands).map(|i| format!("band_{i}")).collect()
    };
    let side = sidecar_path(path);
    std::fs::write(&side, names.join("\n") + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a raster and its band names (generic names if the sidecar is absent).
pub fn read_raster(path: &Path) -> Result<(Raster, Vec<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let scale = dec.get_tag_f64_vec(Tag::ModelPixelScaleTag).map_err(|e| tiff_err(path, e))?;
    let tie = dec.get_tag_f64_vec(Tag::ModelTiepointTag).map_err(|e| tiff_err(path, e))?;
    let desc: Description = dec
        .get_tag_ascii_string(Tag::ImageDescription)
        .ok()
        .and_then(|s| serde_json::from_str(s.trim_end_matches('\0')).ok())
        .ok_or_else(|| Error::format(path, "missing projection description"))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(Error::format(path, "malformed georeferencing tags"));
    }
    let geometry = GridGeometry::new(
        tie[3],
        tie[4],
        scale[0],
        w as usize,
        h as usize,
        Projection::new(desc.lon0, desc.lat0),
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    let mut data = Vec::new();
    let mut bands = 0;
    loop {
        if dec.dimensions().map_err(|e| tiff_err(path, e))? != (w, h) {
            return Err(Error::format(path, "pages differ in size"));
        }
        match dec.read_image().map_err(|e| tiff_err(path, e))? {
            DecodingResult::F32(v) => data.extend(v.into_iter().map(f64::from)),
            DecodingResult::F64(v) => data.extend(v),
            _ => return Err(Error::format(path, "expected 32-bit float samples")),
        }
        bands += 1;
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    let raster = Raster::from_data(geometry, bands, data).map_err(|e| Error::format(path, e.to_string()))?;
    let side = sidecar_path(path);
    let names = match std::fs::read_to_string(&side) {
        Ok(text) => text.lines().map(str::to_string).filter(|s| !s.is_empty()).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (1..=bands).map(|i| format!("band_{i}")).collect(),
        Err(e) => return Err(Error::io(&side, e)),
    };
    Ok((raster, names))
}
