//! Per-band derivations: SAR calibration, focal and temporal statistics,
//! optical indices, terrain slope and resampling.

use super::{GridGeometry, Raster};
use crate::error::{Error, Result};

/// Digital number to gamma naught in dB; `None` for non-positive input.
pub fn dn_to_gamma0(dn: f64) -> Option<f64> {
    (dn > 0.0).then(|| 10.0 * (dn * dn).log10() - 83.0)
}

pub fn gamma0_raster(dn: &Raster) -> Raster {
    Raster {
        data: dn.data.iter().map(|&v| dn_to_gamma0(v).unwrap_or(f64::NAN)).collect(),
        ..dn.clone()
    }
}

fn disk_offsets(radius_px: f64) -> Vec<(isize, isize)> {
    let reach = radius_px.floor() as isize;
    let mut out = Vec::new();
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            if ((dr * dr + dc * dc) as f64) <= radius_px * radius_px + 1e-9 {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Circular focal mean over valid pixels whose centroids lie within `radius_m`.
pub fn speckle_filter(raster: &Raster, radius_m: f64) -> Result<Raster> {
    let g = raster.geometry;
    if radius_m < g.pixel_size {
        return Err(Error::InvalidInput(format!(
            "speckle radius {radius_m} m is below the pixel size {} m",
            g.pixel_size
        )));
    }
    let offsets = disk_offsets(radius_m / g.pixel_size);
    let (h, w) = (g.height as isize, g.width as isize);
    let mut out = raster.clone();
    for b in 0..raster.bands {
        let src = raster.band(b);
        let dst = out.band_mut(b);
        for r in 0..h {
            for c in 0..w {
                let (mut sum, mut n) = (0.0, 0usize);
                for &(dr, dc) in &offsets {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        continue;
                    }
                    let v = src[(rr * w + cc) as usize];
                    if !v.is_nan() {
                        sum += v;
                        n += 1;
                    }
                }
                dst[(r * w + c) as usize] = if n > 0 { sum / n as f64 } else { f64::NAN };
            }
        }
    }
    Ok(out)
}

/// Percentile `p` (0–100) of ascending `sorted` values, linear between order statistics.
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let rank = p / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = rank - lo as f64;
            sorted[lo] + t * (sorted[hi] - sorted[lo])
        }
    }
}

fn check_series(series: &[Raster]) -> Result<(GridGeometry, usize)> {
    let first = series.first().ok_or_else(|| Error::InvalidInput("empty raster series".into()))?;
    for r in series {
        first.geometry.ensure_matches(&r.geometry, "series")?;
        if r.bands != first.bands {
            return Err(Error::InvalidInput("series rasters differ in band count".into()));
        }
    }
    Ok((first.geometry, first.bands))
}

/// Per-pixel percentiles over valid observations. Output band `b·L + l` holds
/// input band `b` at `levels[l]`.
pub fn temporal_percentiles(series: &[Raster], levels: &[f64]) -> Result<Raster> {
    let (g, bands) = check_series(series)?;
    let n = g.len();
    let mut out = Raster::filled(g, bands * levels.len(), f64::NAN);
    let mut obs = Vec::with_capacity(series.len());
    for b in 0..bands {
        for i in 0..n {
            obs.clear();
            obs.extend(series.iter().map(|r| r.band(b)[i]).filter(|v| !v.is_nan()));
            if obs.is_empty() {
                continue;
            }
            obs.sort_by(f64::total_cmp);
            for (l, &p) in levels.iter().enumerate() {
                out.band_mut(b * levels.len() + l)[i] = percentile_linear(&obs, p);
            }
        }
    }
    Ok(out)
}

pub const S1_PERCENTILES: [f64; 3] = [10.0, 50.0, 90.0];

/// Nine Sentinel-1 bands from per-date VV/VH gamma naught (dB): optional focal
/// speckle filter, then p10/p50/p90 of VV, VH and the VH/VV ratio (a dB difference).
pub fn sentinel1_composite(vv: &[Raster], vh: &[Raster], speckle_radius_m: Option<f64>) -> Result<Raster> {
    if vv.len() != vh.len() {
        return Err(Error::InvalidInput("VV and VH series differ in length".into()));
    }
    let filt = |r: &Raster| match speckle_radius_m {
        Some(rad) => speckle_filter(r, rad),
        None => Ok(r.clone()),
    };
    let vv: Vec<Raster> = vv.iter().map(filt).collect::<Result<_>>()?;
    let vh: Vec<Raster> = vh.iter().map(filt).collect::<Result<_>>()?;
    let ratio: Vec<Raster> = vv
        .iter()
        .zip(&vh)
        .map(|(a, b)| Raster {
            data: b.data.iter().zip(&a.data).map(|(h, v)| h - v).collect(),
            ..a.clone()
        })
        .collect();
    let parts = [
        temporal_percentiles(&vv, &S1_PERCENTILES)?,
        temporal_percentiles(&vh, &S1_PERCENTILES)?,
        temporal_percentiles(&ratio, &S1_PERCENTILES)?,
    ];
    Raster::stack(&[&parts[0], &parts[1], &parts[2]])
}

/// Four PALSAR-2 bands: HH and HV gamma naught from digital numbers, their dB
/// ratio, and the local incidence angle.
pub fn palsar_composite(hh_dn: &Raster, hv_dn: &Raster, incidence_deg: &Raster) -> Result<Raster> {
    let hh = gamma0_raster(hh_dn);
    let hv = gamma0_raster(hv_dn);
    hh.geometry.ensure_matches(&hv.geometry, "palsar HV")?;
    let ratio = Raster {
        data: hv.data.iter().zip(&hh.data).map(|(a, b)| a - b).collect(),
        ..hh.clone()
    };
    Raster::stack(&[&hh, &hv, &ratio, incidence_deg])
}

/// Spectral band positions inside a 12-band optical observation.
pub const OPTICAL_BANDS: usize = 12;
const BLUE: usize = 1;
const RED: usize = 3;
const NIR: usize = 7;

pub fn ndvi(nir: f64, red: f64) -> Option<f64> {
    let d = nir + red;
    (d != 0.0).then(|| (nir - red) / d).filter(|v| v.is_finite())
}

pub fn evi(nir: f64, red: f64, blue: f64) -> Option<f64> {
    let d = nir + 6.0 * red - 7.5 * blue + 1.0;
    (d != 0.0).then(|| 2.5 * (nir - red) / d).filter(|v| v.is_finite())
}

/// Seventeen Sentinel-2 bands from a series of 12-band observations: per-band
/// median, median NDVI, median EVI, NDVI max, min and range.
pub fn optical_composite(series: &[Raster]) -> Result<Raster> {
    let (g, bands) = check_series(series)?;
    if bands != OPTICAL_BANDS {
        return Err(Error::InvalidInput(format!("optical observations need {OPTICAL_BANDS} bands, got {bands}")));
    }
    let n = g.len();
    let mut out = Raster::filled(g, 17, f64::NAN);
    let mut vals = Vec::with_capacity(series.len());
    let mut nd = Vec::with_capacity(series.len());
    let mut ev = Vec::with_capacity(series.len());
    for i in 0..n {
        let valid: Vec<&Raster> = series
            .iter()
            .filter(|r| (0..OPTICAL_BANDS).all(|b| !r.band(b)[i].is_nan()))
            .collect();
        if valid.is_empty() {
            continue;
        }
        for b in 0..OPTICAL_BANDS {
            vals.clear();
            vals.extend(valid.iter().map(|r| r.band(b)[i]));
            vals.sort_by(f64::total_cmp);
            out.band_mut(b)[i] = percentile_linear(&vals, 50.0);
        }
        nd.clear();
        ev.clear();
        for r in &valid {
            let (nir, red, blue) = (r.band(NIR)[i], r.band(RED)[i], r.band(BLUE)[i]);
            nd.extend(ndvi(nir, red));
            ev.extend(evi(nir, red, blue));
        }
        nd.sort_by(f64::total_cmp);
        ev.sort_by(f64::total_cmp);
        if !nd.is_empty() {
            let (lo, hi) = (nd[0], nd[nd.len() - 1]);
            out.band_mut(12)[i] = percentile_linear(&nd, 50.0);
            out.band_mut(14)[i] = hi;
            out.band_mut(15)[i] = lo;
            out.band_mut(16)[i] = hi - lo;
        }
        if !ev.is_empty() {
            out.band_mut(13)[i] = percentile_linear(&ev, 50.0);
        }
    }
    Ok(out)
}

/// Slope in degrees from central differences (one-sided at edges).
pub fn slope_from_dem(dem: &Raster) -> Raster {
    let g = dem.geometry;
    let (h, w, ps) = (g.height, g.width, g.pixel_size);
    let z = dem.band(0);
    let at = |r: usize, c: usize| z[r * w + c];
    let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / (span as f64 * ps) };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let dx = diff(at(r, c0), at(r, c1), c1 - c0);
            let dy = diff(at(r0, c), at(r1, c), r1 - r0);
            out[r * w + c] = (dx * dx + dy * dy).sqrt().atan().to_degrees();
        }
    }
    Raster {
        geometry: g,
        bands: 1,
        data: out,
    }
}

/// Longitude and latitude of every pixel centre.
pub fn coordinate_grids(g: &GridGeometry) -> Raster {
    let n = g.len();
    let mut data = vec![0.0; 2 * n];
    for r in 0..g.height {
        for c in 0..g.width {
            let (x, y) = g.centroid(r, c);
            let (lon, lat) = g.projection.inverse(x, y);
            data[r * g.width + c] = lon;
            data[n + r * g.width + c] = lat;
        }
    }
    Raster {
        geometry: *g,
        bands: 2,
        data,
    }
}

/// Catmull-Rom weights for taps at offsets -1, 0, 1, 2.
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Bicubic resampling onto `target` centroids. Support indices clamp at the
/// source edge; samples outside the source extent are nodata.
pub fn resample_bicubic(src: &Raster, target: &GridGeometry) -> Raster {
    let sg = src.geometry;
    let (sh, sw) = (sg.height as isize, sg.width as isize);
    let mut out = Raster::filled(*target, src.bands, f64::NAN);
    let same_proj = sg.projection == target.projection;
    for r in 0..target.height {
        for c in 0..target.width {
            let (tx, ty) = target.centroid(r, c);
            let (x, y) = if same_proj {
                (tx, ty)
            } else {
                let (lon, lat) = target.projection.inverse(tx, ty);
                sg.projection.forward(lon, lat)
            };
            let (fr, fc) = sg.fractional_pixel(x, y);
            if fr < 0.0 || fc < 0.0 || fr > sg.height as f64 || fc > sg.width as f64 {
                continue;
            }
            let (v, u) = (fr - 0.5, fc - 0.5);
            let (i0, j0) = (v.floor() as isize, u.floor() as isize);
            let wy = catmull_rom_weights(v - i0 as f64);
            let wx = catmull_rom_weights(u - j0 as f64);
            for b in 0..src.bands {
                let plane = src.band(b);
                let mut acc = 0.0;
                for (a, wya) in wy.iter().enumerate() {
                    let rr = (i0 - 1 + a as isize).clamp(0, sh - 1);
                    for (k, wxk) in wx.iter().enumerate() {
                        let cc = (j0 - 1 + k as isize).clamp(0, sw - 1);
                        acc += wya * wxk * plane[(rr * sw + cc) as usize];
                    }
                }
                out.band_mut(b)[r * target.width + c] = acc;
            }
        }
    }
    out
}

impl Raster {
    /// Value of the pixel containing `(lon, lat)`, if inside the grid and valid.
    pub fn value_at_lonlat(&self, band: usize, lon: f64, lat: f64) -> Option<f64> {
        let (r, c) = self.geometry.pixel_of_lonlat(lon, lat)?;
        Some(self.get(band, r, c)).filter(|v| !v.is_nan())
    }
}
