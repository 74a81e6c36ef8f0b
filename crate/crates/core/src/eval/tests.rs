use super::*;
use crate::gedi::rasterize_labels;
use crate::raster::{GridGeometry, Projection};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(w: usize, h: usize) -> GridGeometry {
    GridGeometry::new(0.0, h as f64 * 10.0, 10.0, w, h, Projection::new(126.0, 43.5)).unwrap()
}

fn map(w: usize, h: usize, f: impl FnMut(usize) -> f64) -> Raster {
    Raster::from_data(grid(w, h), 1, (0..w * h).map(f).collect()).unwrap()
}

fn footprint_at(g: &GridGeometry, x: f64, y: f64, height: f64, id: &str) -> LabeledFootprint {
    let (lon, lat) = g.projection.inverse(x, y);
    LabeledFootprint { id: id.into(), lon, lat, height }
}

#[test]
fn metric_examples() {
    let m = metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
    assert!((m.rmse - 1.0).abs() < 1e-12);
    assert!(m.r2.unwrap().abs() < 1e-12);
    assert!((m.rrmse_pct.unwrap() - 100.0).abs() < 1e-12);
    assert_eq!(m.n, 2);
    let x = [3.0, 5.5, 9.0, 12.0];
    let same = metrics(&x, &x).unwrap();
    assert_eq!((same.r2, same.rmse), (Some(1.0), 0.0));
    assert!((same.slope.unwrap() - 1.0).abs() < 1e-12 && same.intercept.unwrap().abs() < 1e-12);
    let one = metrics(&[4.0], &[5.0]).unwrap();
    assert_eq!((one.r2, one.rmse), (None, 1.0));
    let flat = metrics(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
    assert_eq!(flat.r2, None);
    assert_eq!(metrics(&[1.0, -1.0], &[1.0, -1.0]).unwrap().rrmse_pct, None);
    assert!(metrics(&[], &[]).is_err());
    assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn r2_uses_the_predicted_mean() {
    // Hand evaluation: ȳ = 3, Σ(x−y)² = 1+1+1 = 3, Σ(x−ȳ)² = 4+0+1 = 5.
    let m = metrics(&[1.0, 3.0, 4.0], &[2.0, 4.0, 3.0]).unwrap();
    assert!((m.r2.unwrap() - (1.0 - 3.0 / 5.0)).abs() < 1e-12);
    // Conventional: x̄ = 8/3, Σ(x−x̄)² = 14/3.
    assert!((m.r2_conventional.unwrap() - (1.0 - 3.0 / (14.0 / 3.0))).abs() < 1e-12);
    assert!((m.rrmse_pct.unwrap() - 100.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn scaling_scales_rmse_and_keeps_r2(
        pairs in prop::collection::vec((0.0..50.0f64, 0.0..50.0f64), 2..30), c in 0.1..10.0f64
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = metrics(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let scaled = metrics(&xs, &ys).unwrap();
        prop_assert!((scaled.rmse - c * base.rmse).abs() <= 1e-9 * (1.0 + scaled.rmse));
        if let (Some(a), Some(b)) = (base.r2, scaled.r2) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn shifting_keeps_rmse_and_rescales_rrmse(
        pairs in prop::collection::vec((1.0..50.0f64, 1.0..50.0f64), 1..30), k in 0.0..20.0f64
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = metrics(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v + k).collect();
        let ys: Vec<f64> = y.iter().map(|v| v + k).collect();
        let shifted = metrics(&xs, &ys).unwrap();
        prop_assert!((shifted.rmse - base.rmse).abs() < 1e-9);
        let y_bar = y.iter().sum::<f64>() / y.len() as f64;
        let expect = base.rrmse_pct.unwrap() * y_bar / (y_bar + k);
        prop_assert!((shifted.rrmse_pct.unwrap() - expect).abs() < 1e-9);
    }
}

#[test]
fn constant_map_gives_zero_error() {
    let m = map(20, 20, |_| 17.0);
    let g = m.geometry;
    let fps: Vec<_> = (0..5).map(|i| footprint_at(&g, 30.0 + 30.0 * i as f64, 100.0, 17.0, &i.to_string())).collect();
    let e = footprint_eval(&m, &fps, 25.0).unwrap();
    assert_eq!(e.report.rmse, 0.0);
    assert_eq!((e.report.n, e.excluded_nodata), (5, 0));
}

#[test]
fn disk_mean_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = map(30, 30, |_| rng.random_range(0.0..40.0));
    m.set(0, 14, 15, f64::NAN);
    let g = m.geometry;
    for _ in 0..20 {
        let (x, y) = (rng.random_range(40.0..260.0), rng.random_range(40.0..260.0));
        let (lon, lat) = g.projection.inverse(x, y);
        let (mut sum, mut n) = (0.0, 0);
        for r in 0..30 {
            for c in 0..30 {
                let cx = (c as f64 + 0.5) * 10.0;
                let cy = 300.0 - (r as f64 + 0.5) * 10.0;
                let v = m.get(0, r, c);
                if (cx - x).hypot(cy - y) <= 12.5 && !v.is_nan() {
                    sum += v;
                    n += 1;
                }
            }
        }
        let got = disk_mean(&m, lon, lat, 25.0);
        if n == 0 {
            assert!(got.is_none());
        } else {
            assert!((got.unwrap() - sum / n as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn nodata_footprints_are_excluded_or_rejected() {
    let mut m = map(20, 20, |_| 10.0);
    for r in 0..20 {
        for c in 0..10 {
            m.set(0, r, c, f64::NAN);
        }
    }
    let g = m.geometry;
    let fps = vec![footprint_at(&g, 45.0, 100.0, 10.0, "a"), footprint_at(&g, 155.0, 100.0, 12.0, "b")];
    let e = footprint_eval(&m, &fps, 25.0).unwrap();
    assert_eq!((e.report.n, e.excluded_nodata), (1, 1));
    let err = footprint_eval(&m, &fps[..1], 25.0).unwrap_err();
    assert!(err.to_string().contains("no valid footprints"));
}

#[test]
fn rasterized_footprints_evaluate_exactly() {
    let g = grid(40, 40);
    let mut fps = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let h = 5.0 + (i * 5 + j) as f64;
            fps.push(footprint_at(&g, 45.0 + 70.0 * i as f64, 45.0 + 70.0 * j as f64, h, &format!("{i}-{j}")));
        }
    }
    let lab = rasterize_labels(&fps, &g, 25.0);
    let data = lab.label.iter().zip(&lab.mask).map(|(&v, &m)| if m { v } else { f64::NAN }).collect();
    let m = Raster::from_data(g, 1, data).unwrap();
    let e = footprint_eval(&m, &fps, 25.0).unwrap();
    assert_eq!(e.report.n, 25);
    assert!(e.report.rmse < 1e-12);
}

#[test]
fn histogram_examples() {
    let a = map(10, 10, |i| (i % 37) as f64 * 0.7);
    let h = height_histogram(&a, &a, 1.0).unwrap();
    assert_eq!(h.counts_a, h.counts_b);
    assert_eq!(h.counts_a.iter().sum::<usize>(), 100);
    let c = map(6, 6, |_| 20.0);
    let h = height_histogram(&c, &c, 5.0).unwrap();
    assert_eq!(h.counts_a.iter().filter(|&&n| n > 0).count(), 1);
    assert_eq!(h.counts_a[4], 36, "20 m lands in [20,25)");
    assert_eq!(h.lower(4), 20.0);
    let holes = map(6, 6, |i| if i < 6 { f64::NAN } else { 3.0 });
    assert_eq!(height_histogram(&holes, &c, 1.0).unwrap().counts_a.iter().sum::<usize>(), 30);
    assert!(height_histogram(&map(2, 2, |_| f64::NAN), &c.clone(), 1.0).is_err());
    assert!(height_histogram(&c, &c, 0.0).is_err());
    let csv = h.to_csv();
    assert!(csv.starts_with("bin_lower,bin_upper,count_a,count_b\n"));
    assert!(csv.contains("\n20,25,36,36\n"));
}

#[test]
fn bimodal_map_shows_two_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = map(60, 60, |i| {
        let centre = if i % 2 == 0 { 10.0 } else { 28.0 };
        centre + rng.random_range(-1.5..1.5) + rng.random_range(-1.5..1.5)
    });
    let h = height_histogram(&a, &a, 1.0).unwrap();
    let peaks: Vec<usize> = (1..h.counts_a.len() - 1)
        .filter(|&k| h.counts_a[k] > h.counts_a[k - 1] && h.counts_a[k] >= h.counts_a[k + 1] && h.counts_a[k] > 200)
        .collect();
    assert_eq!(peaks.len(), 2, "{:?}", h.counts_a);
    assert!((peaks[0] as i32 - 10).abs() <= 1 && (peaks[1] as i32 - 28).abs() <= 1);
}
