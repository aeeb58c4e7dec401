//! Deterministic synthetic video: moving shapes over textured background,
//! with exact ground-truth flow, analytic occlusion and class labels.
//!
//! Every pixel of a shape carries that shape's velocity scaled by the frame
//! gap; background pixels carry zero flow. A frame-t pixel is occluded
//! exactly when its correspondent in frame t+dt lands out of bounds or on a
//! different front-most owner.

pub mod io;

use crate::error::{Error, Result};
use crate::flow::{FlowField, OcclusionMask};
use crate::tensor::Tensor4D;
use crate::util::{rng_from_seed, Rng};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
}

/// One moving shape. `size` is `(radius, radius)` for circles and
/// `(width, height)` for rectangles; `velocity` is in pixels per frame.
#[derive(Clone, Debug)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Class label, >= 1 (0 is background).
    pub class_id: u8,
    pub center: (f32, f32),
    pub size: (f32, f32),
    pub velocity: (f32, f32),
    pub color_seed: u64,
}

impl ShapeSpec {
    fn center_at(&self, t: f32) -> (f32, f32) {
        (
            self.center.0 + self.velocity.0 * t,
            self.center.1 + self.velocity.1 * t,
        )
    }

    /// Membership test against the pixel-center point `(px, py)` at time `t`.
    fn contains(&self, px: f32, py: f32, t: f32) -> bool {
        let (cx, cy) = self.center_at(t);
        match self.kind {
            ShapeKind::Circle => {
                let r = self.size.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            ShapeKind::Rectangle => {
                (px - cx).abs() <= self.size.0 / 2.0 && (py - cy).abs() <= self.size.1 / 2.0
            }
        }
    }

    fn color(&self) -> [f32; 3] {
        let mut rng = rng_from_seed(self.color_seed);
        let base = CLASS_PALETTE[(self.class_id as usize - 1) % CLASS_PALETTE.len()];
        let mut c = [0.0f32; 3];
        for i in 0..3 {
            c[i] = (base[i] + rng.gen_range(-0.12..0.12)).clamp(0.05, 0.95);
        }
        c
    }
}

/// Base colors per class; instances jitter around these.
const CLASS_PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.78, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.80, 0.25, 0.80],
    [0.20, 0.80, 0.80],
];

/// A scene: canvas, textured background, and shapes drawn in list order
/// (later entries occlude earlier ones).
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background_seed: u64,
    pub shapes: Vec<ShapeSpec>,
}

/// Integer class map; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Class targets for cross-entropy (no ignored pixels).
    pub fn to_targets(&self) -> Vec<i32> {
        self.data.iter().map(|&v| v as i32).collect()
    }

    pub fn class_fractions(&self, n_classes: usize) -> Vec<f32> {
        let mut counts = vec![0usize; n_classes];
        for &v in &self.data {
            if (v as usize) < n_classes {
                counts[v as usize] += 1;
            }
        }
        let total = self.data.len() as f32;
        counts.iter().map(|&c| c as f32 / total).collect()
    }
}

/// A rendered training pair with exact ground truth.
#[derive(Clone, Debug)]
pub struct FramePairSample {
    pub frame_t: Tensor4D,
    pub frame_t_plus: Tensor4D,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    /// Analytic occlusion for frame t under the forward flow.
    pub occlusion: OcclusionMask,
    pub labels_t: LabelMap,
    pub dt: u32,
}

/// Two-octave value noise in [0, 1], bilinear between lattice points.
fn value_noise(h: usize, w: usize, seed: u64) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for (octave, (cell, amp)) in [(16usize, 0.7f32), (5usize, 0.3f32)].iter().enumerate() {
        let gh = h / cell + 2;
        let gw = w / cell + 2;
        let mut rng = rng_from_seed(seed.wrapping_add(octave as u64 * 7919));
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect();
        for y in 0..h {
            let fy = y as f32 / *cell as f32;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f32;
            for x in 0..w {
                let fx = x as f32 / *cell as f32;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f32;
                let v00 = lattice[y0 * gw + x0];
                let v10 = lattice[y0 * gw + x0 + 1];
                let v01 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let top = v00 + tx * (v10 - v00);
                let bot = v01 + tx * (v11 - v01);
                out[y * w + x] += amp * (top + ty * (bot - top));
            }
        }
    }
    out
}

/// Index of the front-most shape containing the pixel-center point, if any.
fn owner_at(scene: &SceneSpec, px: f32, py: f32, t: f32) -> Option<usize> {
    scene
        .shapes
        .iter()
        .enumerate()
        .rev()
        .find(|(_, s)| s.contains(px, py, t))
        .map(|(i, _)| i)
}

fn render_frame(scene: &SceneSpec, t: f32) -> Tensor4D {
    let (h, w) = (scene.height, scene.width);
    let noise = value_noise(h, w, scene.background_seed);
    let colors: Vec<[f32; 3]> = scene.shapes.iter().map(|s| s.color()).collect();
    let mut frame = Tensor4D::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let rgb = match owner_at(scene, px, py, t) {
                Some(i) => colors[i],
                None => {
                    // Low-contrast texture around mid gray.
                    let v = 0.35 + 0.2 * noise[y * w + x];
                    [v, v * 0.98, v * 1.02]
                }
            };
            for (ci, &v) in rgb.iter().enumerate() {
                frame.set(0, ci, y, x, v);
            }
        }
    }
    frame
}

/// Renders the frame pair `dt` frames apart with exact flow, labels and
/// analytic occlusion.
pub fn render_pair(scene: &SceneSpec, dt: u32) -> Result<FramePairSample> {
    let (h, w) = (scene.height, scene.width);
    if h == 0 || w == 0 {
        return Err(Error::Param("scene canvas must be non-empty".into()));
    }
    let t1 = dt as f32;
    let frame_t = render_frame(scene, 0.0);
    let frame_t_plus = if dt == 0 {
        frame_t.clone()
    } else {
        render_frame(scene, t1)
    };

    let mut flow_fwd = FlowField::zeros(h, w);
    let mut flow_bwd = FlowField::zeros(h, w);
    let mut labels = LabelMap {
        h,
        w,
        data: vec![0; h * w],
    };
    let mut occ = OcclusionMask::new_clear(h, w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let owner_t = owner_at(scene, px, py, 0.0);
            if let Some(i) = owner_t {
                let s = &scene.shapes[i];
                flow_fwd.set(y, x, s.velocity.0 * t1, s.velocity.1 * t1);
                labels.data[y * w + x] = s.class_id;
            }
            let owner_tp = owner_at(scene, px, py, t1);
            if let Some(i) = owner_tp {
                let s = &scene.shapes[i];
                flow_bwd.set(y, x, -s.velocity.0 * t1, -s.velocity.1 * t1);
            }
            // Occlusion: the correspondent leaves the frame or lands on a
            // different front-most owner.
            let (dx, dy) = flow_fwd.at(y, x);
            let (qx, qy) = (px + dx, py + dy);
            let occluded = if qx < 0.0 || qy < 0.0 || qx > w as f32 || qy > h as f32 {
                true
            } else {
                owner_at(scene, qx, qy, t1) != owner_t
            };
            occ.set(y, x, occluded);
        }
    }
    Ok(FramePairSample {
        frame_t,
        frame_t_plus,
        flow_fwd,
        flow_bwd,
        occlusion: occ,
        labels_t: labels,
        dt,
    })
}

/// Knobs for the default dataset generator.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub dt_range: (u32, u32),
    pub shapes_per_scene: (usize, usize),
    /// Shape areas as fractions of the canvas; spans two orders of magnitude
    /// by default so small and large objects coexist.
    pub area_frac_range: (f32, f32),
    pub max_speed: i32,
    pub num_classes: u8,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 512,
            canvas_h: 128,
            canvas_w: 256,
            dt_range: (1, 2),
            shapes_per_scene: (2, 6),
            area_frac_range: (0.002, 0.2),
            max_speed: 5,
            num_classes: 6,
        }
    }
}

/// Draws one scene. Velocities are integer pixel steps so rendered motion
/// aligns exactly with the pixel raster.
pub fn sample_scene(rng: &mut Rng, cfg: &DatasetConfig) -> SceneSpec {
    let (h, w) = (cfg.canvas_h, cfg.canvas_w);
    let n_shapes = rng.gen_range(cfg.shapes_per_scene.0..=cfg.shapes_per_scene.1);
    let canvas_px = (h * w) as f32;
    let shapes = (0..n_shapes)
        .map(|_| {
            let class_id = rng.gen_range(1..=cfg.num_classes);
            // Even class ids are rectangles, odd are circles.
            let kind = if class_id % 2 == 1 {
                ShapeKind::Circle
            } else {
                ShapeKind::Rectangle
            };
            // Log-uniform area fraction across the configured span.
            let (a0, a1) = cfg.area_frac_range;
            let frac = (rng.gen_range(a0.ln()..a1.ln())).exp();
            let area = frac * canvas_px;
            let size = match kind {
                ShapeKind::Circle => {
                    let r = (area / std::f32::consts::PI).sqrt();
                    (r, r)
                }
                ShapeKind::Rectangle => {
                    let aspect = rng.gen_range(0.5..2.0f32);
                    ((area * aspect).sqrt(), (area / aspect).sqrt())
                }
            };
            let center = (
                rng.gen_range(0.1 * w as f32..0.9 * w as f32),
                rng.gen_range(0.1 * h as f32..0.9 * h as f32),
            );
            let velocity = (
                rng.gen_range(-cfg.max_speed..=cfg.max_speed) as f32,
                rng.gen_range(-cfg.max_speed..=cfg.max_speed) as f32,
            );
            ShapeSpec {
                kind,
                class_id,
                center,
                size,
                velocity,
                color_seed: rng.gen(),
            }
        })
        .collect();
    SceneSpec {
        height: h,
        width: w,
        background_seed: rng.gen(),
        shapes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{occlusion_mask, warp_by_flow};

    fn square_scene(v: (f32, f32)) -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 96,
            background_seed: 5,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Rectangle,
                class_id: 2,
                center: (40.0, 32.0),
                size: (20.0, 20.0),
                velocity: v,
                color_seed: 9,
            }],
        }
    }

    #[test]
    fn dt_zero_is_static() {
        let s = square_scene((5.0, -3.0));
        let pair = render_pair(&s, 0).unwrap();
        assert_eq!(pair.frame_t, pair.frame_t_plus);
        assert!(pair.flow_fwd.data().iter().all(|&v| v == 0.0));
        assert_eq!(pair.occlusion.count(), 0);
    }

    #[test]
    fn moving_square_flow_and_occlusion_band() {
        let s = square_scene((5.0, 0.0));
        let pair = render_pair(&s, 2).unwrap();
        // Square covers x in [30, 50), y in [22, 42) at t (pixel centers).
        for y in 23..41 {
            for x in 31..49 {
                assert_eq!(pair.labels_t.get(y, x), 2, "({y},{x})");
                assert_eq!(pair.flow_fwd.at(y, x), (10.0, 0.0));
            }
        }
        // Background immediately right of the square is covered at t+dt.
        for y in 23..41 {
            for x in 51..59 {
                assert_eq!(pair.labels_t.get(y, x), 0);
                assert!(pair.occlusion.get(y, x), "({y},{x}) should be occluded");
            }
            // Far background is untouched; the vacated band is not occluded.
            assert!(!pair.occlusion.get(y, 65));
            assert!(!pair.occlusion.get(y, 35));
        }
    }

    #[test]
    fn front_shape_wins_labels_on_overlap() {
        let mut s = square_scene((0.0, 0.0));
        s.shapes.push(ShapeSpec {
            kind: ShapeKind::Circle,
            class_id: 5,
            center: (44.0, 32.0),
            size: (8.0, 8.0),
            velocity: (0.0, 0.0),
            color_seed: 11,
        });
        let pair = render_pair(&s, 1).unwrap();
        // Circle center sits on both shapes; the later entry wins.
        assert_eq!(pair.labels_t.get(32, 44), 5);
        assert_eq!(pair.labels_t.get(32, 33), 2);
    }

    #[test]
    fn warping_future_frame_recovers_past_on_visible_pixels() {
        let mut rng = rng_from_seed(21);
        for _ in 0..5 {
            let scene = sample_scene(&mut rng, &DatasetConfig::default());
            let pair = render_pair(&scene, 2).unwrap();
            let (warped, valid) = warp_by_flow(&pair.frame_t_plus, &pair.flow_fwd).unwrap();
            let (h, w) = (scene.height, scene.width);
            let mut err_sum = 0.0f64;
            let mut count = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if !pair.occlusion.get(y, x) && valid.at(0, 0, y, x) == 1.0 {
                        for c in 0..3 {
                            err_sum +=
                                (warped.at(0, c, y, x) - pair.frame_t.at(0, c, y, x)).abs() as f64;
                            count += 1;
                        }
                    }
                }
            }
            let mae = err_sum / count as f64;
            assert!(mae < 2e-2, "mean abs error {mae}");
        }
    }

    #[test]
    fn ddflow_mask_matches_analytic_inside_one_pixel_band() {
        let mut rng = rng_from_seed(33);
        for _ in 0..5 {
            let scene = sample_scene(&mut rng, &DatasetConfig::default());
            let pair = render_pair(&scene, 2).unwrap();
            let dd = occlusion_mask(&pair.flow_fwd, &pair.flow_bwd, 0.1, 0.5).unwrap();
            let (h, w) = (scene.height, scene.width);
            // Ignore pixels whose 3x3 neighborhood straddles the analytic
            // mask boundary.
            let boundary = |y: usize, x: usize| -> bool {
                let v = pair.occlusion.get(y, x);
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w
                            && pair.occlusion.get(ny as usize, nx as usize) != v
                        {
                            return true;
                        }
                    }
                }
                false
            };
            let mut inter = 0usize;
            let mut union = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if boundary(y, x) {
                        continue;
                    }
                    let a = pair.occlusion.get(y, x);
                    let b = dd.get(y, x);
                    if a && b {
                        inter += 1;
                    }
                    if a || b {
                        union += 1;
                    }
                }
            }
            let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            assert!(iou >= 0.95, "IoU {iou}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = rng_from_seed(55);
        let scene = sample_scene(&mut rng, &DatasetConfig::default());
        let a = render_pair(&scene, 2).unwrap();
        let b = render_pair(&scene, 2).unwrap();
        assert_eq!(a.frame_t, b.frame_t);
        assert_eq!(a.frame_t_plus, b.frame_t_plus);
        assert_eq!(a.flow_fwd, b.flow_fwd);
        assert_eq!(a.labels_t, b.labels_t);
    }

    #[test]
    fn dataset_spans_an_order_of_magnitude_in_shape_size() {
        let mut rng = rng_from_seed(77);
        let cfg = DatasetConfig::default();
        let mut min_area = f32::MAX;
        let mut max_area: f32 = 0.0;
        for _ in 0..64 {
            let scene = sample_scene(&mut rng, &cfg);
            for s in &scene.shapes {
                let area = match s.kind {
                    ShapeKind::Circle => std::f32::consts::PI * s.size.0 * s.size.0,
                    ShapeKind::Rectangle => s.size.0 * s.size.1,
                };
                min_area = min_area.min(area);
                max_area = max_area.max(area);
            }
        }
        assert!(max_area / min_area >= 10.0);
    }

    #[test]
    fn empty_canvas_is_an_error() {
        let s = SceneSpec {
            height: 0,
            width: 8,
            background_seed: 0,
            shapes: vec![],
        };
        assert!(render_pair(&s, 1).is_err());
    }
}
