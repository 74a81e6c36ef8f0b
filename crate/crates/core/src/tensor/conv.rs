//! Stride-1, "same"-padded grouped 2-D convolution via im2col + GEMM.

use super::Tensor;

/// `C = alpha·A·B + beta·C` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_a = (m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa;
    let max_b = (k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb;
    assert!(k == 0 || (max_a as usize) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || (max_b as usize) < b.len(), "gemm: B out of bounds");
    assert!(c.len() >= m * n, "gemm: C out of bounds");
    // SAFETY: every index touched by the kernel is bounded by the asserts above
    // and C is a unique borrow laid out row-major with `n` columns.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fill `col` (`cin·k·k` rows × `h·w` columns) from the `cin` planes in `src`.
fn im2col(src: &[f64], cin: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` back onto `cin` planes of `dst`.
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &src[y * w..(y + 1) * w];
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in src_row.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a convolution, taken from the weight tensor `[cout, cin/groups, k, k]`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geom {
    fn new(x: &Tensor, weight: &Tensor, groups: usize) -> Self {
        let [cout, cin_g, k, k2] = weight.shape();
        assert_eq!(k, k2, "square kernels only");
        assert!(k % 2 == 1, "odd kernel size required for same padding");
        assert!(groups > 0 && cout % groups == 0, "cout not divisible by groups");
        assert_eq!(cin_g * groups, x.c(), "input channels do not match kernel");
        Self {
            cin: x.c(),
            cout,
            k,
            groups,
            cin_g,
            cout_g: cout / groups,
        }
    }
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, groups: usize) -> Tensor {
    let g = Geom::new(x, weight, groups);
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let kk = g.k * g.k;
    let mut out = Tensor::zeros([n, g.cout, h, w]);
    let mut col = if g.k > 1 { vec![0.0; g.cin_g * kk * hw] } else { Vec::new() };
    let wdata = weight.data();
    for b in 0..n {
        for gi in 0..g.groups {
            let src_start = (b * g.cin + gi * g.cin_g) * hw;
            let src = &x.data()[src_start..src_start + g.cin_g * hw];
            let bmat: &[f64] = if g.k > 1 {
                im2col(src, g.cin_g, h, w, g.k, &mut col);
                &col
            } else {
                src
            };
            let rows = g.cin_g * kk;
            let wg = &wdata[gi * g.cout_g * rows..(gi + 1) * g.cout_g * rows];
            let dst_start = (b * g.cout + gi * g.cout_g) * hw;
            let dst = &mut out.data_mut()[dst_start..dst_start + g.cout_g * hw];
            gemm(
                g.cout_g,
                rows,
                hw,
                wg,
                (rows as isize, 1),
                bmat,
                (hw as isize, 1),
                0.0,
                dst,
            );
        }
        if let Some(bias) = bias {
            for co in 0..g.cout {
                let bv = bias.data()[co];
                for v in out.plane_slice_mut(b, co) {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    groups: usize,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let g = Geom::new(x, weight, groups);
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let kk = g.k * g.k;
    let rows = g.cin_g * kk;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros([1, g.cout, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if g.k > 1 { vec![0.0; rows * hw] } else { Vec::new() };
    let mut dcol = if g.k > 1 && need_dx { vec![0.0; rows * hw] } else { Vec::new() };
    for b in 0..n {
        for co in 0..g.cout {
            db.data_mut()[co] += dy.plane_slice(b, co).iter().sum::<f64>();
        }
        for gi in 0..g.groups {
            let src_start = (b * g.cin + gi * g.cin_g) * hw;
            let src = &x.data()[src_start..src_start + g.cin_g * hw];
            let bmat: &[f64] = if g.k > 1 {
                im2col(src, g.cin_g, h, w, g.k, &mut col);
                &col
            } else {
                src
            };
            let dy_start = (b * g.cout + gi * g.cout_g) * hw;
            let dyg = &dy.data()[dy_start..dy_start + g.cout_g * hw];
            // dW_g += dY_g · colᵀ
            let dwg = &mut dw.data_mut()[gi * g.cout_g * rows..(gi + 1) * g.cout_g * rows];
            gemm(
                g.cout_g,
                hw,
                rows,
                dyg,
                (hw as isize, 1),
                bmat,
                (1, hw as isize),
                1.0,
                dwg,
            );
            if let Some(dx) = dx.as_mut() {
                let wg = &weight.data()[gi * g.cout_g * rows..(gi + 1) * g.cout_g * rows];
                if g.k > 1 {
                    gemm(
                        rows,
                        g.cout_g,
                        hw,
                        wg,
                        (1, rows as isize),
                        dyg,
                        (hw as isize, 1),
                        0.0,
                        &mut dcol,
                    );
                    let dst = &mut dx.data_mut()[src_start..src_start + g.cin_g * hw];
                    col2im(&dcol, g.cin_g, h, w, g.k, dst);
                } else {
                    let dst = &mut dx.data_mut()[src_start..src_start + g.cin_g * hw];
                    gemm(
                        rows,
                        g.cout_g,
                        hw,
                        wg,
                        (1, rows as isize),
                        dyg,
                        (hw as isize, 1),
                        1.0,
                        dst,
                    );
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn direct(x: &Tensor, wt: &Tensor, bias: &[f64], groups: usize) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let [cout, cin_g, k, _] = wt.shape();
        let cout_g = cout / groups;
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros([n, cout, h, w]);
        for b in 0..n {
            for co in 0..cout {
                let gi = co / cout_g;
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias[co];
                        for cl in 0..cin_g {
                            let ci = gi * cin_g + cl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt.at(co, cl, ky, kx) * x.at(b, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.set(b, co, y, xx, acc);
                    }
                }
            }
        }
        assert_eq!(cin, cin_g * groups);
        out
    }

    fn seq(shape: [usize; 4], scale: f64) -> Tensor {
        let len = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 17) as f64 - 8.0) * scale).collect())
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, groups) in &[(1, 1), (3, 1), (3, 2), (1, 2)] {
            let x = seq([2, 4, 5, 6], 0.1);
            let wt = seq([6, 4 / groups, k, k], 0.05);
            let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
            let bt = Tensor::from_vec([1, 6, 1, 1], bias.clone());
            let got = conv2d_forward(&x, &wt, Some(&bt), groups);
            let want = direct(&x, &wt, &bias, groups);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} g={groups}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dy, conv(x)> = <dx, x> and <dy, conv(x)> = <dw, w> for a bias-free conv.
        for &(k, groups) in &[(1, 1), (3, 1), (3, 2)] {
            let x = seq([2, 4, 5, 5], 0.1);
            let wt = seq([4, 4 / groups, k, k], 0.03);
            let dy = seq([2, 4, 5, 5], 0.07);
            let y = conv2d_forward(&x, &wt, None, groups);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let (dx, dw, _) = conv2d_backward(&x, &wt, groups, &dy, true);
            let via_x: f64 = dx.unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }
}
