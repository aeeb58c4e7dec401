//! Pure forward/backward compute kernels over [`Tensor4D`].
//!
//! Every kernel is a plain function of its inputs: the tape records which
//! kernel ran and replays the matching backward rule. Long reductions
//! accumulate in `f64` and always combine partial sums in a fixed order, so
//! results are bit-identical for any thread count.

use super::Tensor4D;
use crate::error::{Error, Result};
use crate::util::single_threaded;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// matmul primitives
// ---------------------------------------------------------------------------

/// Column tile kept hot in registers/L1 by the row kernel.
const JTILE: usize = 128;
/// Rows per parallel task when splitting by rows.
const ROW_CHUNK: usize = 16;
/// Columns per parallel task when splitting by columns (small-m case).
const COL_CHUNK: usize = 2048;

/// `c[m,n] = a[m,k] * b[k,n]`, all row-major.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    matmul_into(&mut c, a, b, m, k, n);
    c
}

pub fn matmul_into(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if single_threaded() {
        mm_rows(c, a, b, m, k, n);
        return;
    }
    if m >= 2 * ROW_CHUNK || m * n < 4096 {
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(blk, cc)| {
                let i0 = blk * ROW_CHUNK;
                let rows = cc.len() / n;
                mm_rows(cc, &a[i0 * k..(i0 + rows) * k], b, rows, k, n);
            });
    } else {
        // Few rows, many columns: compute disjoint column blocks.
        let nblocks = n.div_ceil(COL_CHUNK);
        let blocks: Vec<Vec<f32>> = (0..nblocks)
            .into_par_iter()
            .map(|jb| {
                let j0 = jb * COL_CHUNK;
                let jn = COL_CHUNK.min(n - j0);
                let mut out = vec![0.0f32; m * jn];
                mm_rows_cols(&mut out, a, b, m, k, n, j0, jn);
                out
            })
            .collect();
        for (jb, block) in blocks.iter().enumerate() {
            let j0 = jb * COL_CHUNK;
            let jn = COL_CHUNK.min(n - j0);
            for i in 0..m {
                c[i * n + j0..i * n + j0 + jn].copy_from_slice(&block[i * jn..(i + 1) * jn]);
            }
        }
    }
}

/// Row kernel over the full column range.
fn mm_rows(c: &mut [f32], a: &[f32], b: &[f32], rows: usize, k: usize, n: usize) {
    let mut acc = [0.0f32; JTILE];
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 < n {
            let jt = JTILE.min(n - j0);
            mm_tile(&mut acc[..jt], arow, b, k, n, j0);
            crow[j0..j0 + jt].copy_from_slice(&acc[..jt]);
            j0 += jt;
        }
    }
}

/// Row kernel over a column sub-range `[j0, j0+jn)`, writing a compact block.
fn mm_rows_cols(
    out: &mut [f32],
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    j0: usize,
    jn: usize,
) {
    let mut acc = [0.0f32; JTILE];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * jn..(i + 1) * jn];
        let mut jj = 0;
        while jj < jn {
            let jt = JTILE.min(jn - jj);
            mm_tile(&mut acc[..jt], arow, b, k, n, j0 + jj);
            orow[jj..jj + jt].copy_from_slice(&acc[..jt]);
            jj += jt;
        }
    }
}

/// acc[j] = sum_k arow[k] * b[k, j0+j], k unrolled by 4 for register reuse.
#[inline]
fn mm_tile(acc: &mut [f32], arow: &[f32], b: &[f32], k: usize, n: usize, j0: usize) {
    acc.fill(0.0);
    let jt = acc.len();
    let mut kk = 0;
    while kk + 4 <= k {
        let a0 = arow[kk];
        let a1 = arow[kk + 1];
        let a2 = arow[kk + 2];
        let a3 = arow[kk + 3];
        let b0 = &b[kk * n + j0..kk * n + j0 + jt];
        let b1 = &b[(kk + 1) * n + j0..(kk + 1) * n + j0 + jt];
        let b2 = &b[(kk + 2) * n + j0..(kk + 2) * n + j0 + jt];
        let b3 = &b[(kk + 3) * n + j0..(kk + 3) * n + j0 + jt];
        for j in 0..jt {
            acc[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        kk += 4;
    }
    while kk < k {
        let av = arow[kk];
        let brow = &b[kk * n + j0..kk * n + j0 + jt];
        for j in 0..jt {
            acc[j] += av * brow[j];
        }
        kk += 1;
    }
}

/// Dot product with eight-way partial sums combined in a fixed order.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut p = [0.0f32; 8];
    let chunks = x.len() / 8;
    for i in 0..chunks {
        let xb = &x[i * 8..i * 8 + 8];
        let yb = &y[i * 8..i * 8 + 8];
        for l in 0..8 {
            p[l] += xb[l] * yb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    (((p[0] + p[4]) + (p[1] + p[5])) + ((p[2] + p[6]) + (p[3] + p[7]))) + tail
}

/// `c[m,n] = a[m,k] * b[n,k]^T` (rows of `b` are the right-hand columns).
pub fn matmul_abt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0f32; m * n];
    let row = |i: usize, crow: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if single_threaded() {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    } else {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    }
    c
}

/// `c[p,q] = a[m,p]^T * b[m,q]` via serial rank-1 accumulation.
pub fn matmul_atb(a: &[f32], b: &[f32], m: usize, p: usize, q: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * p);
    assert_eq!(b.len(), m * q);
    let mut c = vec![0.0f32; p * q];
    for i in 0..m {
        let brow = &b[i * q..(i + 1) * q];
        for r in 0..p {
            let av = a[i * p + r];
            if av != 0.0 {
                let crow = &mut c[r * q..(r + 1) * q];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<(usize, usize)> {
    if stride < 1 {
        return Err(Error::Param(format!("conv2d stride must be >= 1, got {stride}")));
    }
    if dilation < 1 {
        return Err(Error::Param(format!(
            "conv2d dilation must be >= 1, got {dilation}"
        )));
    }
    let eff_kh = dilation * (kh - 1) + 1;
    let eff_kw = dilation * (kw - 1) + 1;
    if h + 2 * pad < eff_kh || w + 2 * pad < eff_kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {eff_kh}x{eff_kw} (dilated) does not fit input {h}x{w} with pad {pad}"
        )));
    }
    Ok((
        (h + 2 * pad - eff_kh) / stride + 1,
        (w + 2 * pad - eff_kw) / stride + 1,
    ))
}

fn conv2d_check(x: &Tensor4D, wt: &Tensor4D) -> Result<()> {
    if wt.c() != x.c() {
        return Err(Error::Dim {
            axis: "c_in",
            expected: wt.c(),
            got: x.c(),
        });
    }
    Ok(())
}

/// Patch matrix with one row per `(c_in, ky, kx)` and one column per output
/// pixel `(n, oy, ox)`. Out-of-bounds taps stay zero.
fn im2col(
    x: &Tensor4D,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let (n, cin, h, w) = x.shape();
    let p = n * ho * wo;
    let mut col = vec![0.0f32; cin * kh * kw * p];
    let fill = |r: usize, dst: &mut [f32]| {
        let ci = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        for ni in 0..n {
            let plane = x.plane(ni, ci);
            for oy in 0..ho {
                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                let drow = &mut dst[ni * ho * wo + oy * wo..ni * ho * wo + (oy + 1) * wo];
                if stride == 1 {
                    let shift = kx as isize * dilation as isize - pad as isize;
                    let ox0 = (-shift).max(0) as usize;
                    let ox1 = (w as isize - shift).clamp(0, wo as isize) as usize;
                    if ox0 < ox1 {
                        let ix0 = (ox0 as isize + shift) as usize;
                        drow[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    }
                } else {
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    };
    if single_threaded() {
        for (r, dst) in col.chunks_mut(p).enumerate() {
            fill(r, dst);
        }
    } else {
        col.par_chunks_mut(p).enumerate().for_each(|(r, dst)| fill(r, dst));
    }
    col
}

pub fn conv2d_fwd(
    x: &Tensor4D,
    wt: &Tensor4D,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Tensor4D> {
    conv2d_check(x, wt)?;
    let (n, _, h, w) = x.shape();
    let (cout, cin, kh, kw) = wt.shape();
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Dim {
                axis: "bias",
                expected: cout,
                got: b.len(),
            });
        }
    }
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad, dilation)?;
    let mut out = Tensor4D::zeros(n, cout, ho, wo);
    let hw = ho * wo;

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        // 1x1: a per-image matmul directly on the NCHW planes.
        let src_hw = h * w;
        let wmat = wt.data();
        if single_threaded() {
            for ni in 0..n {
                let r = matmul(wmat, x.sample(ni), cout, cin, src_hw);
                out.sample_mut(ni).copy_from_slice(&r);
            }
        } else {
            let results: Vec<Vec<f32>> = (0..n)
                .into_par_iter()
                .map(|ni| matmul(wmat, x.sample(ni), cout, cin, src_hw))
                .collect();
            for (ni, r) in results.into_iter().enumerate() {
                out.sample_mut(ni).copy_from_slice(&r);
            }
        }
    } else {
        let col = im2col(x, kh, kw, stride, pad, dilation, ho, wo);
        let p = n * hw;
        let out_mat = matmul(wt.data(), &col, cout, cin * kh * kw, p);
        for ni in 0..n {
            for co in 0..cout {
                out.plane_mut(ni, co)
                    .copy_from_slice(&out_mat[co * p + ni * hw..co * p + (ni + 1) * hw]);
            }
        }
    }
    if let Some(b) = bias {
        for ni in 0..n {
            for co in 0..cout {
                let bv = b[co];
                for v in out.plane_mut(ni, co) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for conv2d. `dx` is skipped when `need_dx` is false (input layer).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &Tensor4D,
    wt: &Tensor4D,
    d_out: &Tensor4D,
    stride: usize,
    pad: usize,
    dilation: usize,
    need_dx: bool,
    has_bias: bool,
) -> (Option<Tensor4D>, Tensor4D, Option<Vec<f32>>) {
    let (n, cin, h, w) = x.shape();
    let (cout, _, kh, kw) = wt.shape();
    let (_, _, ho, wo) = d_out.shape();
    let hw = ho * wo;
    let p = n * hw;

    let db = if has_bias {
        let mut db = vec![0.0f32; cout];
        for co in 0..cout {
            let mut acc = 0.0f64;
            for ni in 0..n {
                for &g in d_out.plane(ni, co) {
                    acc += g as f64;
                }
            }
            db[co] = acc as f32;
        }
        Some(db)
    } else {
        None
    };

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let src_hw = h * w;
        let mut dw = vec![0.0f32; cout * cin];
        for ni in 0..n {
            let part = matmul_abt(d_out.sample(ni), x.sample(ni), cout, src_hw, cin);
            for (d, s) in dw.iter_mut().zip(&part) {
                *d += s;
            }
        }
        let dwt = Tensor4D::from_vec(cout, cin, 1, 1, dw).expect("dw shape");
        let dx = if need_dx {
            let wmat_t = transpose(wt.data(), cout, cin);
            let mut dx = Tensor4D::zeros(n, cin, h, w);
            if single_threaded() {
                for ni in 0..n {
                    let r = matmul(&wmat_t, d_out.sample(ni), cin, cout, src_hw);
                    dx.sample_mut(ni).copy_from_slice(&r);
                }
            } else {
                let results: Vec<Vec<f32>> = (0..n)
                    .into_par_iter()
                    .map(|ni| matmul(&wmat_t, d_out.sample(ni), cin, cout, src_hw))
                    .collect();
                for (ni, r) in results.into_iter().enumerate() {
                    dx.sample_mut(ni).copy_from_slice(&r);
                }
            }
            Some(dx)
        } else {
            None
        };
        return (dx, dwt, db);
    }

    // Gather d_out into (cout, p) layout.
    let mut d_out_mat = vec![0.0f32; cout * p];
    for ni in 0..n {
        for co in 0..cout {
            d_out_mat[co * p + ni * hw..co * p + (ni + 1) * hw]
                .copy_from_slice(d_out.plane(ni, co));
        }
    }

    let col = im2col(x, kh, kw, stride, pad, dilation, ho, wo);
    let r = cin * kh * kw;
    let dw = matmul_abt(&d_out_mat, &col, cout, p, r);
    let dwt = Tensor4D::from_vec(cout, cin, kh, kw, dw).expect("dw shape");

    let dx = if need_dx {
        let wmat_t = transpose(wt.data(), cout, r);
        let dcol = matmul(&wmat_t, &d_out_mat, r, cout, p);
        let mut dx = Tensor4D::zeros(n, cin, h, w);
        // col2im scatter-add, row by row of dcol.
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let rr = (ci * kh + ky) * kw + kx;
                    let row = &dcol[rr * p..(rr + 1) * p];
                    for ni in 0..n {
                        for oy in 0..ho {
                            let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &row[ni * hw + oy * wo..ni * hw + (oy + 1) * wo];
                            let dplane = dx.plane_mut(ni, ci);
                            let drow = &mut dplane[iy as usize * w..(iy as usize + 1) * w];
                            if stride == 1 {
                                let shift = kx as isize * dilation as isize - pad as isize;
                                let ox0 = (-shift).max(0) as usize;
                                let ox1 = (w as isize - shift).clamp(0, wo as isize) as usize;
                                if ox0 < ox1 {
                                    let ix0 = (ox0 as isize + shift) as usize;
                                    for (d, &g) in drow[ix0..ix0 + (ox1 - ox0)]
                                        .iter_mut()
                                        .zip(&src[ox0..ox1])
                                    {
                                        *d += g;
                                    }
                                }
                            } else {
                                for (ox, &g) in src.iter().enumerate() {
                                    let ix =
                                        (ox * stride + kx * dilation) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        drow[ix as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    (dx, dwt, db)
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

// ---------------------------------------------------------------------------
// linear (vectors carried as (n, c, 1, 1))
// ---------------------------------------------------------------------------

pub fn linear_fwd(x: &Tensor4D, wt: &Tensor4D, bias: Option<&[f32]>) -> Result<Tensor4D> {
    let (n, c, h, w) = x.shape();
    if h != 1 || w != 1 {
        return Err(Error::Shape(format!(
            "linear expects (n, c, 1, 1) vectors, got ({n}, {c}, {h}, {w})"
        )));
    }
    let (k, wc, _, _) = wt.shape();
    if wc != c {
        return Err(Error::Dim {
            axis: "c_in",
            expected: wc,
            got: c,
        });
    }
    let mut y = matmul_abt(x.data(), wt.data(), n, c, k);
    if let Some(b) = bias {
        for row in y.chunks_mut(k) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    Tensor4D::from_vec(n, k, 1, 1, y)
}

pub fn linear_bwd(
    x: &Tensor4D,
    wt: &Tensor4D,
    d_out: &Tensor4D,
    has_bias: bool,
) -> (Tensor4D, Tensor4D, Option<Vec<f32>>) {
    let (n, c, _, _) = x.shape();
    let (k, _, _, _) = wt.shape();
    let dx = matmul(d_out.data(), wt.data(), n, k, c);
    let dw = matmul_atb(d_out.data(), x.data(), n, k, c);
    let db = if has_bias {
        let mut db = vec![0.0f32; k];
        for row in d_out.data().chunks(k) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Some(db)
    } else {
        None
    };
    (
        Tensor4D::from_vec(n, c, 1, 1, dx).expect("dx shape"),
        Tensor4D::from_vec(k, c, 1, 1, dw).expect("dw shape"),
        db,
    )
}

// ---------------------------------------------------------------------------
// grid sampling and resizing
// ---------------------------------------------------------------------------

/// Per-pixel source coordinates in input pixel units, `(x, y)` pairs,
/// laid out `(n, h, w, 2)`.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub coords: Vec<f32>,
}

impl SampleGrid {
    pub fn new(n: usize, h: usize, w: usize) -> Self {
        SampleGrid {
            n,
            h,
            w,
            coords: vec![0.0; n * h * w * 2],
        }
    }

    /// Each output pixel samples its own coordinate.
    pub fn identity(n: usize, h: usize, w: usize) -> Self {
        let mut g = SampleGrid::new(n, h, w);
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let o = ((ni * h + y) * w + x) * 2;
                    g.coords[o] = x as f32;
                    g.coords[o + 1] = y as f32;
                }
            }
        }
        g
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> (f32, f32) {
        let o = ((n * self.h + y) * self.w + x) * 2;
        (self.coords[o], self.coords[o + 1])
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, gx: f32, gy: f32) {
        let o = ((n * self.h + y) * self.w + x) * 2;
        self.coords[o] = gx;
        self.coords[o + 1] = gy;
    }
}

struct Corner {
    idx: [usize; 4], // clamped plane indices: 00, 10, 01, 11
    fx: f32,
    fy: f32,
    valid: bool,
}

fn corner_info(gx: f32, gy: f32, h: usize, w: usize) -> Corner {
    let x0f = gx.floor();
    let y0f = gy.floor();
    let fx = gx - x0f;
    let fy = gy - y0f;
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let x1 = x0 + 1;
    let y1 = y0 + 1;
    // A corner only matters when it carries interpolation weight.
    let x0_ok = x0 >= 0 && x0 < w as isize;
    let x1_ok = x1 >= 0 && x1 < w as isize;
    let y0_ok = y0 >= 0 && y0 < h as isize;
    let y1_ok = y1 >= 0 && y1 < h as isize;
    let need_x1 = fx > 0.0;
    let need_y1 = fy > 0.0;
    let valid = x0_ok && y0_ok && (!need_x1 || x1_ok) && (!need_y1 || y1_ok) && gx.is_finite() && gy.is_finite();
    let cx0 = x0.clamp(0, w as isize - 1) as usize;
    let cx1 = x1.clamp(0, w as isize - 1) as usize;
    let cy0 = y0.clamp(0, h as isize - 1) as usize;
    let cy1 = y1.clamp(0, h as isize - 1) as usize;
    Corner {
        idx: [cy0 * w + cx0, cy0 * w + cx1, cy1 * w + cx0, cy1 * w + cx1],
        fx,
        fy,
        valid,
    }
}

/// Validity mask a gather with this grid would produce, without sampling:
/// 1.0 where every weighted interpolation corner is inside an `h x w` input.
pub fn grid_validity(grid: &SampleGrid, h: usize, w: usize) -> Tensor4D {
    let mut valid = Tensor4D::zeros(grid.n, 1, grid.h, grid.w);
    for (i, v) in valid.data_mut().iter_mut().enumerate() {
        let (gx, gy) = (grid.coords[i * 2], grid.coords[i * 2 + 1]);
        if corner_info(gx, gy, h, w).valid {
            *v = 1.0;
        }
    }
    valid
}

/// Bilinear gather. Returns the sampled tensor and a `(n, 1, h', w')` 0/1
/// validity mask; invalid pixels read as 0.
pub fn grid_sample_fwd(x: &Tensor4D, grid: &SampleGrid) -> Result<(Tensor4D, Tensor4D)> {
    let (n, c, h, w) = x.shape();
    if grid.n != n {
        return Err(Error::Dim {
            axis: "n",
            expected: n,
            got: grid.n,
        });
    }
    let (ho, wo) = (grid.h, grid.w);
    let corners: Vec<Corner> = (0..n * ho * wo)
        .map(|i| {
            let (gx, gy) = (grid.coords[i * 2], grid.coords[i * 2 + 1]);
            corner_info(gx, gy, h, w)
        })
        .collect();

    let mut out = Tensor4D::zeros(n, c, ho, wo);
    let mut valid = Tensor4D::zeros(n, 1, ho, wo);
    for (i, cr) in corners.iter().enumerate() {
        valid.data_mut()[i] = if cr.valid { 1.0 } else { 0.0 };
    }
    let ohw = ho * wo;
    let gather = |pc: usize, dst: &mut [f32]| {
        let ni = pc / c;
        let ci = pc % c;
        let plane = x.plane(ni, ci);
        let crs = &corners[ni * ohw..(ni + 1) * ohw];
        for (d, cr) in dst.iter_mut().zip(crs) {
            if cr.valid {
                let a00 = plane[cr.idx[0]];
                let a10 = plane[cr.idx[1]];
                let a01 = plane[cr.idx[2]];
                let a11 = plane[cr.idx[3]];
                let top = a00 + cr.fx * (a10 - a00);
                let bot = a01 + cr.fx * (a11 - a01);
                *d = top + cr.fy * (bot - top);
            }
        }
    };
    if single_threaded() {
        for (pc, dst) in out.data_mut().chunks_mut(ohw).enumerate() {
            gather(pc, dst);
        }
    } else {
        out.data_mut()
            .par_chunks_mut(ohw)
            .enumerate()
            .for_each(|(pc, dst)| gather(pc, dst));
    }
    Ok((out, valid))
}

/// Adjoint of `grid_sample_fwd` with respect to the input (grid is constant).
pub fn grid_sample_bwd(x: &Tensor4D, grid: &SampleGrid, d_out: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let (ho, wo) = (grid.h, grid.w);
    let ohw = ho * wo;
    let corners: Vec<Corner> = (0..n * ho * wo)
        .map(|i| {
            let (gx, gy) = (grid.coords[i * 2], grid.coords[i * 2 + 1]);
            corner_info(gx, gy, h, w)
        })
        .collect();
    let mut dx = Tensor4D::zeros(n, c, h, w);
    let scatter = |pc: usize, plane: &mut [f32]| {
        let ni = pc / c;
        let ci = pc % c;
        let gsrc = d_out.plane(ni, ci);
        let crs = &corners[ni * ohw..(ni + 1) * ohw];
        for (g, cr) in gsrc.iter().zip(crs) {
            if cr.valid && *g != 0.0 {
                let w11 = cr.fx * cr.fy;
                let w10 = cr.fx * (1.0 - cr.fy);
                let w01 = (1.0 - cr.fx) * cr.fy;
                let w00 = (1.0 - cr.fx) * (1.0 - cr.fy);
                plane[cr.idx[0]] += w00 * g;
                plane[cr.idx[1]] += w10 * g;
                plane[cr.idx[2]] += w01 * g;
                plane[cr.idx[3]] += w11 * g;
            }
        }
    };
    if single_threaded() {
        for (pc, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
            scatter(pc, plane);
        }
    } else {
        dx.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(pc, plane)| scatter(pc, plane));
    }
    dx
}

/// Index/fraction table for one axis of an align-corners-false resize.
fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|i| {
            let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f32)
        })
        .collect()
}

pub fn bilinear_resize_fwd(x: &Tensor4D, oh: usize, ow: usize) -> Result<Tensor4D> {
    if oh == 0 || ow == 0 {
        return Err(Error::Param("resize target dims must be >= 1".into()));
    }
    let (n, c, h, w) = x.shape();
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut out = Tensor4D::zeros(n, c, oh, ow);
    let fill = |pc: usize, dst: &mut [f32]| {
        let plane = x.plane(pc / c, pc % c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * w..y0 * w + w];
            let r1 = &plane[y1 * w..y1 * w + w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (d, &(x0, x1, fx)) in drow.iter_mut().zip(&xs) {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                *d = top + fy * (bot - top);
            }
        }
    };
    if single_threaded() {
        for (pc, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            fill(pc, dst);
        }
    } else {
        out.data_mut()
            .par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(pc, dst)| fill(pc, dst));
    }
    Ok(out)
}

pub fn bilinear_resize_bwd(x: &Tensor4D, d_out: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let (_, _, oh, ow) = d_out.shape();
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut dx = Tensor4D::zeros(n, c, h, w);
    let scatter = |pc: usize, plane: &mut [f32]| {
        let gsrc = d_out.plane(pc / c, pc % c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let grow = &gsrc[oy * ow..(oy + 1) * ow];
            for (&g, &(x0, x1, fx)) in grow.iter().zip(&xs) {
                if g != 0.0 {
                    plane[y0 * w + x0] += (1.0 - fx) * (1.0 - fy) * g;
                    plane[y0 * w + x1] += fx * (1.0 - fy) * g;
                    plane[y1 * w + x0] += (1.0 - fx) * fy * g;
                    plane[y1 * w + x1] += fx * fy * g;
                }
            }
        }
    };
    if single_threaded() {
        for (pc, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
            scatter(pc, plane);
        }
    } else {
        dx.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(pc, plane)| scatter(pc, plane));
    }
    dx
}

// ---------------------------------------------------------------------------
// pooling, normalization
// ---------------------------------------------------------------------------

/// Spatial mean per (sample, channel); output is `(n, c, 1, 1)`.
pub fn avg_pool_all_fwd(x: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4D::zeros(n, c, 1, 1);
    let m = (h * w) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let s: f64 = x.plane(ni, ci).iter().map(|&v| v as f64).sum();
            out.data_mut()[ni * c + ci] = (s / m) as f32;
        }
    }
    out
}

/// Each spatial location receives exactly `g / (h * w)`.
pub fn avg_pool_all_bwd(x: &Tensor4D, d_out: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let m = (h * w) as f32;
    let mut dx = Tensor4D::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let q = d_out.data()[ni * c + ci] / m;
            dx.plane_mut(ni, ci).fill(q);
        }
    }
    dx
}

/// L2-normalizes each location's channel vector; `eps` guards zero vectors.
pub fn l2_normalize_fwd(x: &Tensor4D, eps: f32) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        let sample = &mut out.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        for p in 0..hw {
            let mut nsq = 0.0f32;
            for ci in 0..c {
                let v = sample[ci * hw + p];
                nsq += v * v;
            }
            let denom = nsq.sqrt().max(eps);
            for ci in 0..c {
                sample[ci * hw + p] /= denom;
            }
        }
    }
    out
}

pub fn l2_normalize_bwd(x: &Tensor4D, eps: f32, d_out: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    let mut dx = Tensor4D::zeros(n, c, h, w);
    for ni in 0..n {
        let xs = x.sample(ni);
        let gs = d_out.sample(ni);
        let ds = dx.sample_mut(ni);
        for p in 0..hw {
            let mut nsq = 0.0f32;
            for ci in 0..c {
                let v = xs[ci * hw + p];
                nsq += v * v;
            }
            let norm = nsq.sqrt();
            if norm >= eps {
                let mut xg = 0.0f32;
                for ci in 0..c {
                    xg += xs[ci * hw + p] * gs[ci * hw + p];
                }
                let inv = 1.0 / norm;
                let scale = xg * inv * inv * inv;
                for ci in 0..c {
                    ds[ci * hw + p] = gs[ci * hw + p] * inv - xs[ci * hw + p] * scale;
                }
            } else {
                let inv = 1.0 / eps;
                for ci in 0..c {
                    ds[ci * hw + p] = gs[ci * hw + p] * inv;
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f32 = 1e-5;

/// Train-mode batch norm. Returns output plus per-channel batch mean and
/// biased variance so the caller can fold them into the running stats.
pub fn batch_norm_train_fwd(
    x: &Tensor4D,
    gamma: &[f32],
    beta: &[f32],
) -> Result<(Tensor4D, Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = x.shape();
    if n * h * w <= 1 {
        return Err(Error::DegenerateBatch);
    }
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        let mut s2 = 0.0f64;
        for ni in 0..n {
            for &v in x.plane(ni, ci) {
                s += v as f64;
                s2 += (v as f64) * (v as f64);
            }
        }
        let mu = s / m;
        mean[ci] = mu as f32;
        var[ci] = ((s2 / m - mu * mu).max(0.0)) as f32;
    }
    let mut out = Tensor4D::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let rstd = 1.0 / (var[ci] + BN_EPS).sqrt();
            let (g, b, mu) = (gamma[ci], beta[ci], mean[ci]);
            for (o, &v) in out.plane_mut(ni, ci).iter_mut().zip(x.plane(ni, ci)) {
                *o = g * (v - mu) * rstd + b;
            }
        }
    }
    Ok((out, mean, var))
}

pub fn batch_norm_eval_fwd(
    x: &Tensor4D,
    gamma: &[f32],
    beta: &[f32],
    r_mean: &[f32],
    r_var: &[f32],
) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4D::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let rstd = 1.0 / (r_var[ci] + BN_EPS).sqrt();
            let (g, b, mu) = (gamma[ci], beta[ci], r_mean[ci]);
            for (o, &v) in out.plane_mut(ni, ci).iter_mut().zip(x.plane(ni, ci)) {
                *o = g * (v - mu) * rstd + b;
            }
        }
    }
    out
}

/// Backward of train-mode batch norm (batch statistics participate).
pub fn batch_norm_train_bwd(
    x: &Tensor4D,
    gamma: &[f32],
    mean: &[f32],
    var: &[f32],
    d_out: &Tensor4D,
) -> (Tensor4D, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.shape();
    let m = (n * h * w) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = Tensor4D::zeros(n, c, h, w);
    for ci in 0..c {
        let rstd = 1.0 / (var[ci] + BN_EPS).sqrt();
        let mu = mean[ci];
        let mut sg = 0.0f64;
        let mut sgx = 0.0f64;
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let gp = d_out.plane(ni, ci);
            for (&v, &g) in xp.iter().zip(gp) {
                sg += g as f64;
                sgx += (g as f64) * (((v - mu) * rstd) as f64);
            }
        }
        dgamma[ci] = sgx as f32;
        dbeta[ci] = sg as f32;
        let k1 = (sg / m) as f32;
        let k2 = (sgx / m) as f32;
        let gs = gamma[ci] * rstd;
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let gp = d_out.plane(ni, ci);
            let dp = dx.plane_mut(ni, ci);
            for ((d, &v), &g) in dp.iter_mut().zip(xp).zip(gp) {
                let xhat = (v - mu) * rstd;
                *d = gs * (g - k1 - xhat * k2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward of eval-mode batch norm (running stats are constants).
pub fn batch_norm_eval_bwd(
    x: &Tensor4D,
    gamma: &[f32],
    r_mean: &[f32],
    r_var: &[f32],
    d_out: &Tensor4D,
) -> (Tensor4D, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.shape();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = Tensor4D::zeros(n, c, h, w);
    for ci in 0..c {
        let rstd = 1.0 / (r_var[ci] + BN_EPS).sqrt();
        let mu = r_mean[ci];
        let gs = gamma[ci] * rstd;
        let mut sg = 0.0f64;
        let mut sgx = 0.0f64;
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let gp = d_out.plane(ni, ci);
            let dp = dx.plane_mut(ni, ci);
            for ((d, &v), &g) in dp.iter_mut().zip(xp).zip(gp) {
                sg += g as f64;
                sgx += (g as f64) * (((v - mu) * rstd) as f64);
                *d = gs * g;
            }
        }
        dgamma[ci] = sgx as f32;
        dbeta[ci] = sg as f32;
    }
    (dx, dgamma, dbeta)
}

pub const LN_EPS: f32 = 1e-5;

/// Layer norm over the channel axis, independently at every location.
pub fn layer_norm_c_fwd(x: &Tensor4D, gamma: &[f32], beta: &[f32]) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    let mut out = Tensor4D::zeros(n, c, h, w);
    for ni in 0..n {
        let xs = x.sample(ni);
        let os = out.sample_mut(ni);
        for p in 0..hw {
            let mut s = 0.0f32;
            let mut s2 = 0.0f32;
            for ci in 0..c {
                let v = xs[ci * hw + p];
                s += v;
                s2 += v * v;
            }
            let mu = s / c as f32;
            let var = (s2 / c as f32 - mu * mu).max(0.0);
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for ci in 0..c {
                os[ci * hw + p] = gamma[ci] * (xs[ci * hw + p] - mu) * rstd + beta[ci];
            }
        }
    }
    out
}

pub fn layer_norm_c_bwd(
    x: &Tensor4D,
    gamma: &[f32],
    d_out: &Tensor4D,
) -> (Tensor4D, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    let cf = c as f32;
    let mut dx = Tensor4D::zeros(n, c, h, w);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        let xs = x.sample(ni);
        let gs = d_out.sample(ni);
        let ds = dx.sample_mut(ni);
        for p in 0..hw {
            let mut s = 0.0f32;
            let mut s2 = 0.0f32;
            for ci in 0..c {
                let v = xs[ci * hw + p];
                s += v;
                s2 += v * v;
            }
            let mu = s / cf;
            let var = (s2 / cf - mu * mu).max(0.0);
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            let mut m1 = 0.0f32;
            let mut m2 = 0.0f32;
            for ci in 0..c {
                let xhat = (xs[ci * hw + p] - mu) * rstd;
                let gg = gs[ci * hw + p] * gamma[ci];
                m1 += gg;
                m2 += gg * xhat;
                dgamma[ci] += (gs[ci * hw + p] * xhat) as f64;
                dbeta[ci] += gs[ci * hw + p] as f64;
            }
            m1 /= cf;
            m2 /= cf;
            for ci in 0..c {
                let xhat = (xs[ci * hw + p] - mu) * rstd;
                let gg = gs[ci * hw + p] * gamma[ci];
                ds[ci * hw + p] = rstd * (gg - m1 - xhat * m2);
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}

// ---------------------------------------------------------------------------
// elementwise and reductions
// ---------------------------------------------------------------------------

pub fn relu_fwd(x: &Tensor4D) -> Tensor4D {
    x.map(|v| v.max(0.0))
}

pub fn relu_bwd(out: &Tensor4D, d_out: &Tensor4D) -> Tensor4D {
    let mut dx = d_out.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn zip2(a: &Tensor4D, b: &Tensor4D, f: impl Fn(f32, f32) -> f32) -> Result<Tensor4D> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "elementwise shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, bv);
    }
    Ok(out)
}

/// Sum over channels; output is `(n, 1, h, w)`.
pub fn channel_sum_fwd(x: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4D::zeros(n, 1, h, w);
    for ni in 0..n {
        let dst = out.plane_mut(ni, 0);
        for ci in 0..c {
            for (d, &v) in dst.iter_mut().zip(x.plane(ni, ci)) {
                *d += v;
            }
        }
    }
    out
}

pub fn channel_sum_bwd(x: &Tensor4D, d_out: &Tensor4D) -> Tensor4D {
    let (n, c, h, w) = x.shape();
    let mut dx = Tensor4D::zeros(n, c, h, w);
    for ni in 0..n {
        let g = d_out.plane(ni, 0).to_vec();
        for ci in 0..c {
            dx.plane_mut(ni, ci).copy_from_slice(&g);
        }
    }
    dx
}

/// Scalar sum of all entries, accumulated in `f64` in index order.
/// Returns both the stored f32 tensor and the unrounded accumulator.
pub fn sum_all_fwd(x: &Tensor4D) -> (Tensor4D, f64) {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    (
        Tensor4D::from_vec(1, 1, 1, 1, vec![s as f32]).expect("scalar"),
        s,
    )
}

// ---------------------------------------------------------------------------
// softmax cross-entropy over class maps
// ---------------------------------------------------------------------------

/// Mean pixelwise cross-entropy of `(n, k, h, w)` logits against integer
/// targets (`< 0` means ignore). Returns `(loss, counted_pixels)`.
pub fn softmax_ce_fwd(logits: &Tensor4D, targets: &[i32]) -> Result<(f64, usize)> {
    let (n, k, h, w) = logits.shape();
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::Dim {
            axis: "targets",
            expected: n * hw,
            got: targets.len(),
        });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ni in 0..n {
        let s = logits.sample(ni);
        for p in 0..hw {
            let t = targets[ni * hw + p];
            if t < 0 {
                continue;
            }
            let t = t as usize;
            debug_assert!(t < k);
            let mut mx = f32::NEG_INFINITY;
            for ci in 0..k {
                mx = mx.max(s[ci * hw + p]);
            }
            let mut z = 0.0f32;
            for ci in 0..k {
                z += (s[ci * hw + p] - mx).exp();
            }
            let lse = mx + z.ln();
            total += (lse - s[t * hw + p]) as f64;
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, count))
}

pub fn softmax_ce_bwd(logits: &Tensor4D, targets: &[i32], upstream: f32) -> Tensor4D {
    let (n, k, h, w) = logits.shape();
    let hw = h * w;
    let count = targets.iter().filter(|&&t| t >= 0).count();
    let mut dx = Tensor4D::zeros(n, k, h, w);
    if count == 0 {
        return dx;
    }
    let scale = upstream / count as f32;
    for ni in 0..n {
        let s = logits.sample(ni);
        let d = dx.sample_mut(ni);
        for p in 0..hw {
            let t = targets[ni * hw + p];
            if t < 0 {
                continue;
            }
            let mut mx = f32::NEG_INFINITY;
            for ci in 0..k {
                mx = mx.max(s[ci * hw + p]);
            }
            let mut z = 0.0f32;
            for ci in 0..k {
                z += (s[ci * hw + p] - mx).exp();
            }
            for ci in 0..k {
                let prob = (s[ci * hw + p] - mx).exp() / z;
                let onehot = if ci == t as usize { 1.0 } else { 0.0 };
                d[ci * hw + p] = (prob - onehot) * scale;
            }
        }
    }
    dx
}
