//! Raw compute kernels behind the tape ops.
//!
//! Every parallel loop here is element-parallel with a fixed sequential
//! accumulation order per output element, so results are bit-identical
//! regardless of thread count.

use super::tensor::Real;
use rayon::prelude::*;

// Register-tile sizes of the matmul micro-kernel. Every path accumulates
// each c[i,j] over p in ascending order with one mul_add per step, so
// blocked, tail and scalar paths produce bit-identical results.
const MR: usize = 8;

#[inline]
fn mm_row<T: Real>(c_row: &mut [T], a_row: &[T], b: &[T], n: usize) {
    for (p, &a_ip) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (cj, &bj) in c_row.iter_mut().zip(b_row) {
            *cj = a_ip.mul_add(bj, *cj);
        }
    }
}

/// MRxW register-resident tile accumulated over the full k extent.
#[inline]
fn mm_tile<T: Real, const W: usize>(
    rows: &mut [&mut [T]; MR],
    i0: usize,
    jt: usize,
    a: &[T],
    b: &[T],
    k: usize,
    n: usize,
) {
    let mut acc = [[T::zero(); W]; MR];
    for (r, row) in rows.iter().enumerate() {
        acc[r].copy_from_slice(&row[jt..jt + W]);
    }
    for p in 0..k {
        let b_tile = &b[p * n + jt..p * n + jt + W];
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let a_rp = a[(i0 + r) * k + p];
            for (av, &bv) in acc_row.iter_mut().zip(b_tile) {
                *av = a_rp.mul_add(bv, *av);
            }
        }
    }
    for (r, row) in rows.iter_mut().enumerate() {
        row[jt..jt + W].copy_from_slice(&acc[r]);
    }
}

fn mm_block<T: Real>(c_block: &mut [T], i0: usize, a: &[T], b: &[T], k: usize, n: usize) {
    let rows_in_block = c_block.len() / n;
    if rows_in_block == MR {
        let mut it = c_block.chunks_mut(n);
        let mut rows: [&mut [T]; MR] = std::array::from_fn(|_| it.next().unwrap());
        let mut jt = 0;
        while jt + 32 <= n {
            mm_tile::<T, 32>(&mut rows, i0, jt, a, b, k, n);
            jt += 32;
        }
        if jt + 16 <= n {
            mm_tile::<T, 16>(&mut rows, i0, jt, a, b, k, n);
            jt += 16;
        }
        if jt < n {
            for (r, row) in rows.iter_mut().enumerate() {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &a_ip) in a_row.iter().enumerate() {
                    let b_row = &b[p * n + jt..(p + 1) * n];
                    for (cj, &bj) in row[jt..].iter_mut().zip(b_row) {
                        *cj = a_ip.mul_add(bj, *cj);
                    }
                }
            }
        }
    } else {
        for (r, c_row) in c_block.chunks_mut(n).enumerate() {
            let i = i0 + r;
            mm_row(c_row, &a[i * k..(i + 1) * k], b, n);
        }
    }
}

/// c[m,n] += a[m,k] @ b[k,n]. Row-block-parallel with a register-tiled
/// inner kernel; deterministic regardless of thread count.
pub fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m * n * k >= 16 * 1024 {
        c.par_chunks_mut(MR * n)
            .enumerate()
            .for_each(|(blk, c_block)| mm_block(c_block, blk * MR, a, b, k, n));
    } else {
        c.chunks_mut(MR * n)
            .enumerate()
            .for_each(|(blk, c_block)| mm_block(c_block, blk * MR, a, b, k, n));
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// Transpose a [rows, cols] matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gather one sample's [cin, h, w] plane into columns [cin*k*k, oh*ow].
pub fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut cols = vec![T::zero(); cin * k * k * oh * ow];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // Contiguous copy over the valid x-range.
                        let ix0 = kx as isize - pad as isize;
                        let ox_start = (-ix0).max(0) as usize;
                        let ox_end = ((w as isize - ix0).min(ow as isize)).max(0) as usize;
                        if ox_start < ox_end {
                            let src0 = (ix0 + ox_start as isize) as usize;
                            dst[ox_start..ox_end].copy_from_slice(
                                &plane[iy * w + src0..iy * w + src0 + (ox_end - ox_start)],
                            );
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ox] = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back onto one sample's [cin, h, w] plane.
pub fn col2im_acc<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    for ci in 0..cin {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Direct (non-im2col) convolution reference path. Kept as the slow
/// route the fast path is checked against.
pub fn conv2d_direct<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut y = vec![T::zero(); n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            let b = bias.map_or(T::zero(), |b| b[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                                acc = xv.mul_add(wv, acc);
                            }
                        }
                    }
                    y[((ni * cout + co) * oh + oy) * ow + ox] = acc + b;
                }
            }
        }
    }
    y
}

/// im2col fast path: y[n] = W @ cols(x[n]) + b.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_im2col<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let ohw = oh * ow;
    let kk = cin * k * k;
    let mut y = vec![T::zero(); n * cout * ohw];
    for ni in 0..n {
        let cols = im2col(&x[ni * cin * h * w..], cin, h, w, k, stride, pad);
        let out = &mut y[ni * cout * ohw..(ni + 1) * cout * ohw];
        matmul_acc(out, weight, &cols, cout, kk, ohw);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b[co];
                for v in &mut out[co * ohw..(co + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Gradients of conv2d; each output is computed only when requested.
/// Returns (dx, dweight, dbias).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    dy: &[T],
    x: &[T],
    weight: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let ohw = oh * ow;
    let kk = cin * k * k;
    let w_t = need_dx.then(|| transpose(weight, cout, kk)); // [kk, cout]
    let mut dx = need_dx.then(|| vec![T::zero(); n * cin * h * w]);
    let mut dw_t = need_dw.then(|| vec![T::zero(); kk * cout]);
    let mut db = need_db.then(|| vec![T::zero(); cout]);
    for ni in 0..n {
        let dy_n = &dy[ni * cout * ohw..(ni + 1) * cout * ohw];
        if let (Some(dx), Some(w_t)) = (dx.as_mut(), w_t.as_ref()) {
            // dcols = W^T @ dy, scattered back onto the input plane.
            let dcols = matmul(w_t, dy_n, kk, cout, ohw);
            col2im_acc(
                &dcols,
                cin,
                h,
                w,
                k,
                stride,
                pad,
                &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w],
            );
        }
        if let Some(dw_t) = dw_t.as_mut() {
            // dW^T += cols @ dy^T keeps the big operand untransposed.
            let cols = im2col(&x[ni * cin * h * w..], cin, h, w, k, stride, pad);
            let dy_t = transpose(dy_n, cout, ohw); // [ohw, cout]
            matmul_acc(dw_t, &cols, &dy_t, kk, ohw, cout);
        }
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut s = T::zero();
                for &g in &dy_n[co * ohw..(co + 1) * ohw] {
                    s += g;
                }
                db[co] += s;
            }
        }
    }
    let dw = dw_t.map(|t| transpose(&t, kk, cout));
    (dx, dw, db)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_fast())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d(silu)/dx given the forward's sigmoid value.
pub fn silu_grad_from_sigmoid<T: Real>(x: T, s: T) -> T {
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_grad<T: Real>(x: T) -> T {
    silu_grad_from_sigmoid(x, sigmoid(x))
}

/// Per-(sample, group) statistics for group norm: (mean, 1/sqrt(var+eps)).
pub fn group_norm_stats<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * hw;
    let mut means = vec![T::zero(); n * groups];
    let mut rstds = vec![T::zero(); n * groups];
    for ni in 0..n {
        for g in 0..groups {
            let base = (ni * c + g * cg) * hw;
            let chunk = &x[base..base + m];
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for &v in chunk {
                let vf = v.f64();
                sum += vf;
                sumsq += vf * vf;
            }
            let mean = sum / m as f64;
            let var = (sumsq / m as f64 - mean * mean).max(0.0);
            means[ni * groups + g] = T::c(mean);
            rstds[ni * groups + g] = T::c(1.0 / (var + eps.f64()).sqrt());
        }
    }
    (means, rstds)
}

/// y = gamma * (x - mean) * rstd + beta, per group.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    means: &[T],
    rstds: &[T],
) -> Vec<T> {
    let cg = c / groups;
    let mut y = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let g = ci / cg;
            let mean = means[ni * groups + g];
            let rstd = rstds[ni * groups + g];
            let ga = gamma[ci];
            let be = beta[ci];
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                y[base + i] = ga * (x[base + i] - mean) * rstd + be;
            }
        }
    }
    y
}

/// Gradients of group norm. Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    means: &[T],
    rstds: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * hw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for g in 0..groups {
            let mean = means[ni * groups + g].f64();
            let rstd = rstds[ni * groups + g].f64();
            // First pass: per-group sums of dxhat and dxhat*xhat.
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ci in g * cg..(g + 1) * cg {
                let ga = gamma[ci].f64();
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let xhat = (x[base + i].f64() - mean) * rstd;
                    let dxhat = dy[base + i].f64() * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mf = m as f64;
            for ci in g * cg..(g + 1) * cg {
                let ga = gamma[ci].f64();
                let base = (ni * c + ci) * hw;
                let mut dga = 0.0f64;
                let mut dbe = 0.0f64;
                for i in 0..hw {
                    let xhat = (x[base + i].f64() - mean) * rstd;
                    let gy = dy[base + i].f64();
                    let dxhat = gy * ga;
                    dx[base + i] += T::c(
                        rstd * (dxhat - sum_dxhat / mf - xhat * sum_dxhat_xhat / mf),
                    );
                    dga += gy * xhat;
                    dbe += gy;
                }
                dgamma[ci] += T::c(dga);
                dbeta[ci] += T::c(dbe);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    let body = |(r, y_row): (usize, &mut [T])| {
        let x_row = &x[r * cols..(r + 1) * cols];
        let mut mx = x_row[0];
        for &v in x_row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0f64;
        for (yv, &xv) in y_row.iter_mut().zip(x_row) {
            let e = (xv - mx).exp();
            *yv = e;
            sum += e.f64();
        }
        let inv = T::c(1.0 / sum);
        for yv in y_row.iter_mut() {
            *yv = *yv * inv;
        }
    };
    if rows * cols >= 8 * 1024 {
        y.par_chunks_mut(cols).enumerate().for_each(body);
    } else {
        y.chunks_mut(cols).enumerate().for_each(body);
    }
    y
}

/// dx for softmax given its own output y: dx_i = y_i * (dy_i - sum_j dy_j y_j).
pub fn softmax_backward_rows<T: Real>(dy: &[T], y: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let y_row = &y[r * cols..(r + 1) * cols];
        let mut dot = 0.0f64;
        for (g, v) in dy_row.iter().zip(y_row) {
            dot += g.f64() * v.f64();
        }
        let dot = T::c(dot);
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for ((d, &g), &v) in dx_row.iter_mut().zip(dy_row).zip(y_row) {
            *d = v * (g - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_exact() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = transpose(&a, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(a, back);
    }

    #[test]
    fn im2col_matches_direct_conv() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, cin, h, w, cout, k) = (2, 3, 8, 8, 4, 3);
        let x: Vec<f32> = (0..n * cin * h * w).map(|_| f32::std_normal(&mut rng)).collect();
        let wt: Vec<f32> = (0..cout * cin * k * k).map(|_| f32::std_normal(&mut rng)).collect();
        let b: Vec<f32> = (0..cout).map(|_| f32::std_normal(&mut rng)).collect();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let direct = conv2d_direct(&x, &wt, Some(&b), n, cin, h, w, cout, k, stride, pad);
            let fast = conv2d_im2col(&x, &wt, Some(&b), n, cin, h, w, cout, k, stride, pad);
            let max = direct
                .iter()
                .zip(&fast)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max <= 1e-5, "paths disagree by {max} at stride={stride} pad={pad}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![0.1f64, 2.0, -1.0, 3.0, 0.0, 0.5];
        let y = softmax_rows(&x, 2, 3);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
