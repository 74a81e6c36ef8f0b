use image::{Rgb, RgbImage};

use marsnet_core::eval::HeightHistogram;

const W: u32 = 800;
const H: u32 = 420;
const MARGIN: u32 = 40;
const COLOR_A: Rgb<u8> = Rgb([31, 119, 180]);
const COLOR_B: Rgb<u8> = Rgb([255, 127, 14]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(H)..y1.min(H) {
        for x in x0.min(W)..x1.min(W) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Side-by-side bars per bin (first map blue, second orange), counts scaled to
/// the tallest bar, with faint gridlines at quarters of the maximum.
pub fn histogram_chart(h: &HeightHistogram) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (plot_w, plot_h) = (W - 2 * MARGIN, H - 2 * MARGIN);
    let base = H - MARGIN;
    for q in 1..=4 {
        let y = base - plot_h * q / 4;
        fill(&mut img, MARGIN, y, W - MARGIN, y + 1, GRID);
    }
    let bins = h.counts_a.len().max(1) as u32;
    let max = h.counts_a.iter().chain(&h.counts_b).copied().max().unwrap_or(0).max(1) as f64;
    let slot = (plot_w / bins).max(2);
    let bar = (slot / 2).saturating_sub(1).max(1);
    for k in 0..h.counts_a.len() {
        let x = MARGIN + k as u32 * slot;
        for (i, (count, color)) in [(h.counts_a[k], COLOR_A), (h.counts_b[k], COLOR_B)].into_iter().enumerate() {
            let height = (count as f64 / max * plot_h as f64).round() as u32;
            let x0 = x + i as u32 * bar;
            fill(&mut img, x0, base - height, x0 + bar, base, color);
        }
    }
    fill(&mut img, MARGIN, base, W - MARGIN, base + 1, AXIS);
    fill(&mut img, MARGIN - 1, MARGIN, MARGIN, base + 1, AXIS);
    img
}
