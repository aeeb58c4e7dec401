//! Optical flow fields, cross-frame warping and occlusion detection.
//!
//! A [`FlowField`] stores per-pixel displacements in pixel units mapping the
//! earlier frame to the later one: a pixel `p` in frame `t` corresponds to
//! `p + flow(p)` in frame `t + dt`. Warping runs the other way: reading the
//! later frame's values back onto the earlier frame's pixel raster.

use crate::cropping::CropSpec;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, SampleGrid};
use crate::tensor::Tensor4D;

/// Dense displacement map, `(h, w, 2)` with channel 0 = dx, channel 1 = dy,
/// stored interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    data: Vec<f32>, // (dx, dy) pairs, row-major
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            data: vec![0.0; h * w * 2],
        }
    }

    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Self {
        let mut f = FlowField::zeros(h, w);
        for i in 0..h * w {
            f.data[i * 2] = dx;
            f.data[i * 2 + 1] = dy;
        }
        f
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 2 {
            return Err(Error::Shape(format!(
                "flow data length {} does not match ({h}, {w}, 2)",
                data.len()
            )));
        }
        Ok(FlowField { h, w, data })
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let o = (y * self.w + x) * 2;
        (self.data[o], self.data[o + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let o = (y * self.w + x) * 2;
        self.data[o] = dx;
        self.data[o + 1] = dy;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear read at a fractional position; `None` out of bounds.
    pub fn sample(&self, x: f32, y: f32) -> Option<(f32, f32)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        if x < 0.0 || y < 0.0 || x > (self.w - 1) as f32 || y > (self.h - 1) as f32 {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.w - 1);
        let y0 = (y.floor() as usize).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        let lerp = |c: usize| {
            let v00 = self.data[(y0 * self.w + x0) * 2 + c];
            let v10 = self.data[(y0 * self.w + x1) * 2 + c];
            let v01 = self.data[(y1 * self.w + x0) * 2 + c];
            let v11 = self.data[(y1 * self.w + x1) * 2 + c];
            let top = v00 + fx * (v10 - v00);
            let bot = v01 + fx * (v11 - v01);
            top + fy * (bot - top)
        };
        Some((lerp(0), lerp(1)))
    }

    /// Grid that reads each pixel's correspondent: `(x, y) + flow(x, y)`,
    /// replicated across `n` samples.
    pub fn to_warp_grid(&self, n: usize) -> SampleGrid {
        let mut grid = SampleGrid::new(n, self.h, self.w);
        for ni in 0..n {
            for y in 0..self.h {
                for x in 0..self.w {
                    let (dx, dy) = self.at(y, x);
                    grid.set(ni, y, x, x as f32 + dx, y as f32 + dy);
                }
            }
        }
        grid
    }
}

/// Per-pixel occlusion flags; `true` means no reliable correspondence exists
/// and the dense loss must skip the pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl OcclusionMask {
    pub fn new_clear(h: usize, w: usize) -> Self {
        OcclusionMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn fraction(&self) -> f32 {
        self.count() as f32 / (self.h * self.w) as f32
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// 1.0 where *not* occluded, as a `(1, 1, h, w)` mask tensor.
    pub fn to_valid_tensor(&self) -> Tensor4D {
        let data = self.data.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect();
        Tensor4D::from_vec(1, 1, self.h, self.w, data).expect("mask shape")
    }
}

/// Reads `features` (in frame t+dt coordinates) back onto frame t's raster:
/// `out(p) = features(p + flow(p))`. Returns the warped tensor and the
/// sampling validity mask.
pub fn warp_by_flow(features: &Tensor4D, flow: &FlowField) -> Result<(Tensor4D, Tensor4D)> {
    let (n, _, h, w) = features.shape();
    if flow.h != h || flow.w != w {
        return Err(Error::Shape(format!(
            "flow is {}x{} but features are {h}x{w}; resize the flow with scale_flow first",
            flow.h, flow.w
        )));
    }
    let grid = flow.to_warp_grid(n);
    kernels::grid_sample_fwd(features, &grid)
}

/// Forward-backward consistency occlusion check.
///
/// Pixel `p` is occluded iff `||f(p) + b(p + f(p))||^2 >
/// alpha1 * (||f(p)||^2 + ||b(p + f(p))||^2) + alpha2`, with `b` sampled
/// bilinearly at the correspondent; out-of-bounds correspondents are
/// occluded.
pub fn occlusion_mask(
    forward: &FlowField,
    backward: &FlowField,
    alpha1: f32,
    alpha2: f32,
) -> Result<OcclusionMask> {
    if forward.h != backward.h || forward.w != backward.w {
        return Err(Error::Shape(format!(
            "forward flow {}x{} vs backward {}x{}",
            forward.h, forward.w, backward.h, backward.w
        )));
    }
    if alpha1 < 0.0 || alpha2 < 0.0 {
        return Err(Error::Param(format!(
            "occlusion parameters must be >= 0, got alpha1={alpha1} alpha2={alpha2}"
        )));
    }
    let (h, w) = (forward.h, forward.w);
    let mut mask = OcclusionMask::new_clear(h, w);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = forward.at(y, x);
            let occluded = match backward.sample(x as f32 + fx, y as f32 + fy) {
                None => true,
                Some((bx, by)) => {
                    let mismatch = (fx + bx).powi(2) + (fy + by).powi(2);
                    let budget = alpha1 * (fx * fx + fy * fy + bx * bx + by * by) + alpha2;
                    mismatch > budget
                }
            };
            mask.set(y, x, occluded);
        }
    }
    Ok(mask)
}

/// Resizes a flow field and rescales the displacement components by the
/// resolution ratio `(out_w / w, out_h / h)`.
pub fn scale_flow(flow: &FlowField, out_h: usize, out_w: usize) -> Result<FlowField> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Param("flow resize target dims must be >= 1".into()));
    }
    if out_h == flow.h && out_w == flow.w {
        return Ok(flow.clone());
    }
    // Move channels into a tensor, resize, rescale components.
    let mut planes = Tensor4D::zeros(1, 2, flow.h, flow.w);
    for y in 0..flow.h {
        for x in 0..flow.w {
            let (dx, dy) = flow.at(y, x);
            planes.set(0, 0, y, x, dx);
            planes.set(0, 1, y, x, dy);
        }
    }
    let resized = kernels::bilinear_resize_fwd(&planes, out_h, out_w)?;
    let sx = out_w as f32 / flow.w as f32;
    let sy = out_h as f32 / flow.h as f32;
    let mut out = FlowField::zeros(out_h, out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            out.set(y, x, resized.at(0, 0, y, x) * sx, resized.at(0, 1, y, x) * sy);
        }
    }
    Ok(out)
}

/// Crops a flow field to `crop`, then rescales it to `(out_h, out_w)` with
/// the component rule of [`scale_flow`].
pub fn crop_flow(flow: &FlowField, crop: &CropSpec, out_h: usize, out_w: usize) -> Result<FlowField> {
    if crop.src_h != flow.h || crop.src_w != flow.w {
        return Err(Error::Shape(format!(
            "crop refers to a {}x{} source but flow is {}x{}",
            crop.src_h, crop.src_w, flow.h, flow.w
        )));
    }
    crop.validate()?;
    let mut cut = FlowField::zeros(crop.h, crop.w);
    for y in 0..crop.h {
        for x in 0..crop.w {
            let (dx, dy) = flow.at(crop.y + y, crop.x + x);
            cut.set(y, x, dx, dy);
        }
    }
    scale_flow(&cut, out_h, out_w)
}
