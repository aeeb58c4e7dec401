//! Global paired crops and flow-informed subcrop pair sampling.
//!
//! Training views come from one large rectangle cut at identical coordinates
//! from both frames of a pair. Subcrop pairs are small views intended to
//! contain a single subject: a center is drawn in the later frame (stratified
//! over grid cells, selected without replacement by the caller), warped into
//! the earlier frame by the flow displacement at that point plus jitter, and
//! a rectangle of the sampled area is placed around each center.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::kernels;
use crate::tensor::Tensor4D;
use crate::util::Rng;
use rand::Rng as _;

/// An axis-aligned crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub src_h: usize,
    pub src_w: usize,
}

impl CropSpec {
    pub fn new(x: usize, y: usize, w: usize, h: usize, src_h: usize, src_w: usize) -> Result<Self> {
        let c = CropSpec {
            x,
            y,
            w,
            h,
            src_h,
            src_w,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn full(src_h: usize, src_w: usize) -> Self {
        CropSpec {
            x: 0,
            y: 0,
            w: src_w,
            h: src_h,
            src_h,
            src_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 1 || self.h < 1 {
            return Err(Error::Param(format!(
                "crop must be at least 1x1, got {}x{}",
                self.w, self.h
            )));
        }
        if self.x + self.w > self.src_w || self.y + self.h > self.src_h {
            return Err(Error::Param(format!(
                "crop ({}, {}, {}x{}) exceeds source {}x{}",
                self.x, self.y, self.w, self.h, self.src_w, self.src_h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> (f32, f32) {
        (
            self.x as f32 + (self.w as f32 - 1.0) / 2.0,
            self.y as f32 + (self.h as f32 - 1.0) / 2.0,
        )
    }

    pub fn area_fraction(&self) -> f32 {
        (self.w * self.h) as f32 / (self.src_w * self.src_h) as f32
    }
}

/// One rectangle reused for both frames of a pair; the caller resizes both
/// views to the training resolution downstream.
pub fn sample_global_crop_pair(
    rng: &mut Rng,
    frame_h: usize,
    frame_w: usize,
    area_range: (f32, f32),
    out_h: usize,
    out_w: usize,
) -> Result<CropSpec> {
    let (a0, a1) = area_range;
    if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
        return Err(Error::Param(format!(
            "crop area range must satisfy 0 < min <= max <= 1, got [{a0}, {a1}]"
        )));
    }
    let frame_px = (frame_h * frame_w) as f32;
    if a1 * frame_px < 1.0 {
        return Err(Error::Param(format!(
            "crop area {a1} of a {frame_h}x{frame_w} frame is below one pixel"
        )));
    }
    let s = if a0 == a1 { a0 } else { rng.gen_range(a0..a1) };
    let area_px = s * frame_px;
    // Crop aspect follows the output aspect.
    let aspect = out_w as f32 / out_h as f32;
    let ch = (area_px / aspect).sqrt().round().max(1.0) as usize;
    let cw = (area_px * aspect).sqrt().round().max(1.0) as usize;
    let ch = ch.min(frame_h);
    let cw = cw.min(frame_w);
    let x = if frame_w == cw { 0 } else { rng.gen_range(0..=frame_w - cw) };
    let y = if frame_h == ch { 0 } else { rng.gen_range(0..=frame_h - ch) };
    CropSpec::new(x, y, cw, ch, frame_h, frame_w)
}

/// One stratification cell over a crop, in float pixel coordinates
/// (half-open on both axes; edge cells are clipped to the crop).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub index: usize,
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

/// Tiles an `h x w` crop with square cells of side
/// `d = min(h, w) * sqrt((s_min + s_max) / 2)`, in row-major order. A pixel
/// `(x, y)` belongs to the cell `(floor(y / d), floor(x / d))`, so the cells
/// partition the crop exactly.
pub fn grid_cells(h: usize, w: usize, s_min: f32, s_max: f32) -> Result<Vec<GridCell>> {
    if !(0.0 < s_min && s_min <= s_max && s_max <= 1.0) {
        return Err(Error::Param(format!(
            "subcrop area range must satisfy 0 < min <= max <= 1, got [{s_min}, {s_max}]"
        )));
    }
    let d = (h.min(w) as f32) * ((s_min + s_max) / 2.0).sqrt();
    let rows = (h as f32 / d).ceil() as usize;
    let cols = (w as f32 / d).ceil() as usize;
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            cells.push(GridCell {
                index: r * cols + c,
                x0: c as f32 * d,
                y0: r as f32 * d,
                x1: ((c + 1) as f32 * d).min(w as f32),
                y1: ((r + 1) as f32 * d).min(h as f32),
            });
        }
    }
    Ok(cells)
}

/// Cell side length used by [`grid_cells`].
pub fn grid_cell_side(h: usize, w: usize, s_min: f32, s_max: f32) -> f32 {
    (h.min(w) as f32) * ((s_min + s_max) / 2.0).sqrt()
}

/// An aligned pair of subcrop rectangles.
#[derive(Clone, Debug)]
pub struct SubcropPair {
    pub crop_t: CropSpec,
    pub crop_t_plus: CropSpec,
    /// Sampled center in the later frame.
    pub center_t_plus: (f32, f32),
    /// Center warped into the earlier frame (displacement negated, jittered).
    pub warped_center: (f32, f32),
    /// Area as a fraction of the crop the subcrop was cut from.
    pub area_fraction: f32,
    pub cell_index: usize,
}

/// Knobs for [`sample_subcrop_pair`].
#[derive(Clone, Debug)]
pub struct SubcropConfig {
    pub area_range: (f32, f32),
    pub aspect_range: (f32, f32),
    pub jitter_frac: f32,
    /// Center re-draws before giving up on a cell.
    pub max_attempts: usize,
}

impl Default for SubcropConfig {
    fn default() -> Self {
        SubcropConfig {
            area_range: (0.05, 0.3),
            aspect_range: (0.75, 4.0 / 3.0),
            jitter_frac: 0.1,
            max_attempts: 3,
        }
    }
}

/// Rectangle of `w x h` centered as close to `(cx, cy)` as the frame allows:
/// clamped by shifting, never by shrinking.
fn place_rect(cx: f32, cy: f32, w: usize, h: usize, frame_h: usize, frame_w: usize) -> CropSpec {
    let x = (cx - (w as f32 - 1.0) / 2.0).round() as isize;
    let y = (cy - (h as f32 - 1.0) / 2.0).round() as isize;
    let x = x.clamp(0, (frame_w - w) as isize) as usize;
    let y = y.clamp(0, (frame_h - h) as isize) as usize;
    CropSpec {
        x,
        y,
        w,
        h,
        src_h: frame_h,
        src_w: frame_w,
    }
}

/// Draws one subcrop pair from `cell`.
///
/// The center `(u, v)` is uniform in the cell; the paired center is
/// `(u, v) - flow(u, v) + jitter` (the forward displacement at the later
/// frame's point, negated, lands in the earlier frame). Returns `None` when
/// the warped center stays outside the frame for every attempt — a rejection,
/// not an error.
pub fn sample_subcrop_pair(
    rng: &mut Rng,
    cell: &GridCell,
    flow: &FlowField,
    cfg: &SubcropConfig,
) -> Option<SubcropPair> {
    let (frame_h, frame_w) = (flow.h(), flow.w());
    let (fw, fh) = (frame_w as f32, frame_h as f32);
    for _ in 0..cfg.max_attempts {
        let u = if cell.x0 < cell.x1 { rng.gen_range(cell.x0..cell.x1) } else { cell.x0 };
        let v = if cell.y0 < cell.y1 { rng.gen_range(cell.y0..cell.y1) } else { cell.y0 };
        let (s0, s1) = cfg.area_range;
        let s = if s0 == s1 { s0 } else { rng.gen_range(s0..s1) };
        let (r0, r1) = cfg.aspect_range;
        let aspect = if r0 == r1 { r0 } else { rng.gen_range(r0..r1) };
        let jx = if cfg.jitter_frac > 0.0 {
            rng.gen_range(-cfg.jitter_frac..cfg.jitter_frac) * fw
        } else {
            0.0
        };
        let jy = if cfg.jitter_frac > 0.0 {
            rng.gen_range(-cfg.jitter_frac..cfg.jitter_frac) * fh
        } else {
            0.0
        };
        let (dx, dy) = flow
            .sample(u.min(fw - 1.0), v.min(fh - 1.0))
            .expect("cell centers lie inside the frame");
        let up = u - dx + jx;
        let vp = v - dy + jy;
        if up < 0.0 || vp < 0.0 || up > fw - 1.0 || vp > fh - 1.0 {
            continue;
        }
        let area_px = s * fw * fh;
        let sw = ((area_px * aspect).sqrt().round().max(1.0) as usize).min(frame_w);
        let sh = ((area_px / aspect).sqrt().round().max(1.0) as usize).min(frame_h);
        return Some(SubcropPair {
            crop_t: place_rect(up, vp, sw, sh, frame_h, frame_w),
            crop_t_plus: place_rect(u, v, sw, sh, frame_h, frame_w),
            center_t_plus: (u, v),
            warped_center: (up, vp),
            area_fraction: s,
            cell_index: cell.index,
        });
    }
    None
}

/// Draws up to `k` subcrop pairs, each from a distinct grid cell.
///
/// Cells tile the flow's frame per [`grid_cells`] over the configured area
/// range and are visited in a without-replacement random order; rejected
/// cells are skipped.
pub fn sample_subcrop_pairs(
    rng: &mut Rng,
    k: usize,
    flow: &FlowField,
    cfg: &SubcropConfig,
) -> Result<Vec<SubcropPair>> {
    let cells = grid_cells(flow.h(), flow.w(), cfg.area_range.0, cfg.area_range.1)?;
    let mut order: Vec<usize> = (0..cells.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out = Vec::with_capacity(k);
    for &ci in &order {
        if out.len() == k {
            break;
        }
        if let Some(p) = sample_subcrop_pair(rng, &cells[ci], flow, cfg) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Cuts the crop region out of `frame` (all samples) without resampling.
pub fn extract(frame: &Tensor4D, crop: &CropSpec) -> Result<Tensor4D> {
    let (n, c, h, w) = frame.shape();
    if crop.src_h != h || crop.src_w != w {
        return Err(Error::Shape(format!(
            "crop refers to a {}x{} source but frame is {h}x{w}",
            crop.src_h, crop.src_w
        )));
    }
    crop.validate()?;
    let mut out = Tensor4D::zeros(n, c, crop.h, crop.w);
    for ni in 0..n {
        for ci in 0..c {
            let src = frame.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for yy in 0..crop.h {
                let so = (crop.y + yy) * w + crop.x;
                dst[yy * crop.w..(yy + 1) * crop.w].copy_from_slice(&src[so..so + crop.w]);
            }
        }
    }
    Ok(out)
}

/// Crop-and-resize: bilinear resample of the crop region to `out_h x out_w`.
pub fn extract_resize(
    frame: &Tensor4D,
    crop: &CropSpec,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor4D> {
    let cut = extract(frame, crop)?;
    kernels::bilinear_resize_fwd(&cut, out_h, out_w)
}
