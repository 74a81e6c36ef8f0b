use crate::error::{Error, Result};
use crate::model::{ModalInputs, ModelParams};
use crate::raster::{Raster, Stacks};
use crate::tensor::Tensor;

/// Mirror index into `[0, n)` (edge pixel not repeated), folding as often as needed.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Wall-to-wall heights from standardized stacks: non-overlapping tiles of the
/// model's input size, edge tiles reflect-padded then cropped. Negative heights
/// clamp to 0 and pixels outside the forest mask become nodata.
pub fn predict_map(params: &ModelParams, stacks: &Stacks, forest_mask: &Raster) -> Result<Raster> {
    let cfg = &params.config;
    let first = cfg
        .modalities
        .first()
        .and_then(|m| stacks.get(m))
        .ok_or_else(|| Error::MissingModality(cfg.modalities.first().map(|m| m.to_string()).unwrap_or_default()))?;
    let g = first.raster.geometry;
    for m in &cfg.modalities {
        let s = stacks.get(m).ok_or_else(|| Error::MissingModality(m.to_string()))?;
        g.ensure_matches(&s.raster.geometry, m.name())?;
    }
    g.ensure_matches(&forest_mask.geometry, "forest mask")?;
    let p = cfg.input_spatial;
    let (h, w) = (g.height, g.width);
    let mut out = Raster::filled(g, 1, f64::NAN);
    for r0 in (0..h).step_by(p) {
        for c0 in (0..w).step_by(p) {
            let mut inputs = ModalInputs::new();
            for m in &cfg.modalities {
                let ras = &stacks[m].raster;
                let mut t = Tensor::zeros([1, ras.bands, p, p]);
                for b in 0..ras.bands {
                    let src = ras.band(b);
                    let dst = t.plane_slice_mut(0, b);
                    for r in 0..p {
                        let rr = reflect(r0 + r, h);
                        for c in 0..p {
                            let v = src[rr * w + reflect(c0 + c, w)];
                            dst[r * p + c] = if v.is_nan() { 0.0 } else { v };
                        }
                    }
                }
                inputs.insert(*m, t);
            }
            let pred = params.predict(&inputs)?;
            let plane = pred.plane_slice(0, 0);
            for r in 0..p.min(h - r0) {
                for c in 0..p.min(w - c0) {
                    out.band_mut(0)[(r0 + r) * w + c0 + c] = plane[r * p + c];
                }
            }
        }
    }
    let mask = forest_mask.band(0);
    for (v, m) in out.band_mut(0).iter_mut().zip(mask) {
        *v = if *m > 0.5 { v.max(0.0) } else { f64::NAN };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::reflect;

    #[test]
    fn reflect_folds_back_without_repeating_the_edge() {
        let got: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }
}
