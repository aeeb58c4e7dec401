//! Subcrop statistics: how often a small crop lands on an object versus how
//! often a single pixel does.
//!
//! Small objects occupy few pixels, so a pixel-level objective rarely sees
//! them; a subcrop counts as a "hit" already when a few percent of it covers
//! the object, which lifts small objects' effective sampling rate. The toy
//! simulation integrates this exactly for a centered circle; the empirical
//! simulation replays the crop pipeline over a labeled dataset; the
//! class-shift analysis measures how subcrop labeling re-weights the class
//! distribution.

use crate::cropping::{sample_global_crop_pair, CropSpec};
use crate::error::{Error, Result};
use crate::synth::LabelMap;
use crate::util::Rng;
use rand::Rng as _;
use std::fmt::Write as _;

/// Fraction of a subcrop that must land on the object to count as a hit.
pub const DEFAULT_HIT_THRESHOLD: f32 = 0.05;

/// One analysis record: an object-size descriptor with its subcrop hit
/// probability and pixel probability.
#[derive(Clone, Debug)]
pub struct AnalysisRow {
    /// Radius (toy) or size-bin label (empirical).
    pub condition: String,
    /// Subcrop areas the probabilities were averaged over.
    pub areas: Vec<f32>,
    pub hit_prob: f64,
    pub pixel_prob: f64,
}

impl AnalysisRow {
    pub fn ratio(&self) -> f64 {
        if self.pixel_prob == 0.0 {
            f64::INFINITY
        } else {
            self.hit_prob / self.pixel_prob
        }
    }
}

/// How averaged probabilities were aggregated, recorded in CSV output.
pub const AGGREGATION_NOTE: &str = "mean probability, uniform over subcrop areas";

/// Summed-area table over a binary membership map.
struct IntegralImage {
    w: usize,
    sums: Vec<u64>, // (h+1) x (w+1)
}

impl IntegralImage {
    fn new(h: usize, w: usize, member: impl Fn(usize, usize) -> bool) -> Self {
        let mut sums = vec![0u64; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = member(y, x) as u64;
                sums[(y + 1) * (w + 1) + (x + 1)] =
                    v + sums[y * (w + 1) + (x + 1)] + sums[(y + 1) * (w + 1) + x]
                        - sums[y * (w + 1) + x];
            }
        }
        IntegralImage { w, sums }
    }

    /// Count of member pixels in `[y0, y0+ch) x [x0, x0+cw)`.
    fn count(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> u64 {
        let w1 = self.w + 1;
        self.sums[(y0 + ch) * w1 + (x0 + cw)] + self.sums[y0 * w1 + x0]
            - self.sums[y0 * w1 + (x0 + cw)]
            - self.sums[(y0 + ch) * w1 + x0]
    }
}

/// Exhaustive grid integration for one centered circle.
///
/// Every square subcrop position fully inside the `frame_h x frame_w` frame
/// is enumerated on the integer grid; a position hits when at least
/// `hit_threshold` of its area lies on the circle. The hit probability is
/// averaged uniformly over `subcrop_areas`; the pixel probability is the
/// circle's area over the frame's.
pub fn toy_subcrop_sim(
    frame_h: usize,
    frame_w: usize,
    radius: f32,
    subcrop_areas: &[f32],
    hit_threshold: f32,
) -> Result<AnalysisRow> {
    if radius <= 0.0 {
        return Err(Error::Param(format!("circle radius must be > 0, got {radius}")));
    }
    if subcrop_areas.is_empty() {
        return Err(Error::Param("need at least one subcrop area".into()));
    }
    let (cy, cx) = (frame_h as f32 / 2.0, frame_w as f32 / 2.0);
    let r2 = radius * radius;
    let circle = IntegralImage::new(frame_h, frame_w, |y, x| {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        (py - cy).powi(2) + (px - cx).powi(2) <= r2
    });
    let mut probs = Vec::with_capacity(subcrop_areas.len());
    for &area in subcrop_areas {
        if !(0.0 < area && area <= 1.0) {
            return Err(Error::Param(format!("subcrop area {area} outside (0, 1]")));
        }
        let side = ((area * (frame_h * frame_w) as f32).sqrt().round() as usize)
            .clamp(1, frame_h.min(frame_w));
        let need = (hit_threshold * (side * side) as f32).ceil() as u64;
        let mut hits = 0u64;
        let mut positions = 0u64;
        for y0 in 0..=frame_h - side {
            for x0 in 0..=frame_w - side {
                positions += 1;
                if circle.count(y0, x0, side, side) >= need.max(1) {
                    hits += 1;
                }
            }
        }
        probs.push(hits as f64 / positions as f64);
    }
    let circle_px = std::f32::consts::PI * r2;
    let pixel_prob = (circle_px as f64 / (frame_h * frame_w) as f64).min(1.0);
    Ok(AnalysisRow {
        condition: format!("{radius}"),
        areas: subcrop_areas.to_vec(),
        hit_prob: probs.iter().sum::<f64>() / probs.len() as f64,
        pixel_prob,
    })
}

/// Knobs for the empirical simulation.
#[derive(Clone, Debug)]
pub struct EmpiricalConfig {
    pub global_area: (f32, f32),
    pub global_crops_per_image: usize,
    pub subcrop_area: (f32, f32),
    pub aspect_range: (f32, f32),
    pub subcrops_per_crop: usize,
    pub quantile_bins: usize,
    pub hit_threshold: f32,
    /// Class ids counted as foreground; empty means every id >= 1.
    pub foreground: Vec<u8>,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        EmpiricalConfig {
            global_area: (0.16, 0.45),
            global_crops_per_image: 2,
            subcrop_area: (0.02, 0.03),
            aspect_range: (0.75, 4.0 / 3.0),
            subcrops_per_crop: 512,
            quantile_bins: 10,
            hit_threshold: DEFAULT_HIT_THRESHOLD,
            foreground: Vec::new(),
        }
    }
}

fn is_foreground(cfg: &EmpiricalConfig, class: u8) -> bool {
    if cfg.foreground.is_empty() {
        class >= 1
    } else {
        cfg.foreground.contains(&class)
    }
}

/// A subcrop rectangle placed uniformly inside `h x w`, fully contained.
fn uniform_subcrop(rng: &mut Rng, h: usize, w: usize, cfg: &EmpiricalConfig) -> CropSpec {
    let (a0, a1) = cfg.subcrop_area;
    let s = if a0 == a1 { a0 } else { rng.gen_range(a0..a1) };
    let (r0, r1) = cfg.aspect_range;
    let aspect = if r0 == r1 { r0 } else { rng.gen_range(r0..r1) };
    let area_px = s * (h * w) as f32;
    let cw = ((area_px * aspect).sqrt().round().max(1.0) as usize).min(w);
    let ch = ((area_px / aspect).sqrt().round().max(1.0) as usize).min(h);
    let x = if w == cw { 0 } else { rng.gen_range(0..=w - cw) };
    let y = if h == ch { 0 } else { rng.gen_range(0..=h - ch) };
    CropSpec {
        x,
        y,
        w: cw,
        h: ch,
        src_h: h,
        src_w: w,
    }
}

/// Per-(image, class) observation before binning.
#[derive(Clone, Debug)]
struct Observation {
    size: f64,     // class pixel fraction within the global crop
    hit_prob: f64, // fraction of subcrops with >= threshold coverage
}

/// Replays the crop pipeline over labeled data: per image, global crops are
/// drawn, then subcrops uniformly inside each; per foreground class the hit
/// and pixel probabilities are recorded and aggregated into size-quantile
/// bins. Deterministic given the RNG.
pub fn empirical_subcrop_sim(
    labels: &[LabelMap],
    cfg: &EmpiricalConfig,
    rng: &mut Rng,
) -> Result<Vec<AnalysisRow>> {
    if labels.is_empty() {
        return Err(Error::Data("empirical simulation needs a nonempty dataset".into()));
    }
    let mut observations: Vec<Observation> = Vec::new();
    for map in labels {
        let (h, w) = (map.h, map.w);
        let classes: Vec<u8> = {
            let mut seen = [false; 256];
            for &v in &map.data {
                seen[v as usize] = true;
            }
            (0u16..256)
                .filter(|&c| seen[c as usize] && is_foreground(cfg, c as u8))
                .map(|c| c as u8)
                .collect()
        };
        if classes.is_empty() {
            continue;
        }
        for _ in 0..cfg.global_crops_per_image {
            let crop = sample_global_crop_pair(rng, h, w, cfg.global_area, h, w)?;
            for &class in &classes {
                let integral = IntegralImage::new(crop.h, crop.w, |y, x| {
                    map.get(crop.y + y, crop.x + x) == class
                });
                let class_px = integral.count(0, 0, crop.h, crop.w);
                if class_px == 0 {
                    continue;
                }
                let mut hits = 0u64;
                for _ in 0..cfg.subcrops_per_crop {
                    let sc = uniform_subcrop(rng, crop.h, crop.w, cfg);
                    let covered = integral.count(sc.y, sc.x, sc.h, sc.w);
                    if covered as f64 >= (cfg.hit_threshold as f64) * (sc.h * sc.w) as f64 {
                        hits += 1;
                    }
                }
                observations.push(Observation {
                    size: class_px as f64 / (crop.h * crop.w) as f64,
                    hit_prob: hits as f64 / cfg.subcrops_per_crop as f64,
                });
            }
        }
    }
    if observations.is_empty() {
        return Err(Error::Data(
            "no foreground class appears in any image".into(),
        ));
    }
    observations.sort_by(|a, b| a.size.total_cmp(&b.size));
    let bins = cfg.quantile_bins.max(1).min(observations.len());
    let mut rows = Vec::with_capacity(bins);
    let per = observations.len() as f64 / bins as f64;
    for b in 0..bins {
        let lo = (b as f64 * per).round() as usize;
        let hi = (((b + 1) as f64 * per).round() as usize).min(observations.len());
        if lo >= hi {
            continue;
        }
        let chunk = &observations[lo..hi];
        rows.push(AnalysisRow {
            condition: format!("q{:02}", b * 100 / bins),
            areas: vec![cfg.subcrop_area.0, cfg.subcrop_area.1],
            hit_prob: chunk.iter().map(|o| o.hit_prob).sum::<f64>() / chunk.len() as f64,
            pixel_prob: chunk.iter().map(|o| o.size).sum::<f64>() / chunk.len() as f64,
        });
    }
    Ok(rows)
}

/// Relative change of each class's frequency when subcrops are labeled by
/// majority class: a subcrop is a foreground instance when foreground covers
/// more than `fg_threshold` of it, else the majority background class.
#[derive(Clone, Debug)]
pub struct ClassShiftRow {
    pub class: u8,
    pub pixel_freq: f64,
    pub subcrop_freq: f64,
    pub relative_change: f64,
}

pub fn class_shift_analysis(
    labels: &[LabelMap],
    cfg: &EmpiricalConfig,
    fg_threshold: f32,
    rng: &mut Rng,
) -> Result<Vec<ClassShiftRow>> {
    if labels.is_empty() {
        return Err(Error::Data("class-shift analysis needs a nonempty dataset".into()));
    }
    let mut pixel_counts = [0u64; 256];
    let mut subcrop_counts = [0u64; 256];
    let mut total_px = 0u64;
    let mut total_subcrops = 0u64;
    for map in labels {
        for &v in &map.data {
            pixel_counts[v as usize] += 1;
        }
        total_px += map.data.len() as u64;
        let (h, w) = (map.h, map.w);
        for _ in 0..cfg.global_crops_per_image {
            let crop = sample_global_crop_pair(rng, h, w, cfg.global_area, h, w)?;
            for _ in 0..cfg.subcrops_per_crop {
                let sc = uniform_subcrop(rng, crop.h, crop.w, cfg);
                let mut counts = [0u32; 256];
                for y in 0..sc.h {
                    for x in 0..sc.w {
                        counts[map.get(crop.y + sc.y + y, crop.x + sc.x + x) as usize] += 1;
                    }
                }
                let sub_px = (sc.h * sc.w) as f32;
                let fg_px: u32 = (0u16..256)
                    .filter(|&c| is_foreground(cfg, c as u8))
                    .map(|c| counts[c as usize])
                    .sum();
                let assign = if fg_px as f32 > fg_threshold * sub_px {
                    // Majority foreground class.
                    (0u16..256)
                        .filter(|&c| is_foreground(cfg, c as u8))
                        .max_by_key(|&c| counts[c as usize])
                        .unwrap() as u8
                } else {
                    (0u16..256)
                        .filter(|&c| !is_foreground(cfg, c as u8))
                        .max_by_key(|&c| counts[c as usize])
                        .unwrap() as u8
                };
                subcrop_counts[assign as usize] += 1;
                total_subcrops += 1;
            }
        }
    }
    let mut rows = Vec::new();
    for c in 0..256usize {
        if pixel_counts[c] == 0 && subcrop_counts[c] == 0 {
            continue;
        }
        let pixel_freq = pixel_counts[c] as f64 / total_px as f64;
        let subcrop_freq = subcrop_counts[c] as f64 / total_subcrops as f64;
        let relative_change = if pixel_freq > 0.0 {
            (subcrop_freq - pixel_freq) / pixel_freq
        } else {
            f64::INFINITY
        };
        rows.push(ClassShiftRow {
            class: c as u8,
            pixel_freq,
            subcrop_freq,
            relative_change,
        });
    }
    Ok(rows)
}

pub fn analysis_rows_to_csv(rows: &[AnalysisRow]) -> String {
    let mut s = format!("# aggregation: {AGGREGATION_NOTE}\n");
    s.push_str("condition,subcrop_area,hit_prob,pixel_prob,ratio\n");
    for r in rows {
        let areas = r
            .areas
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.condition,
            areas,
            r.hit_prob,
            r.pixel_prob,
            r.ratio()
        );
    }
    s
}

pub fn class_shift_to_csv(rows: &[ClassShiftRow]) -> String {
    let mut s = String::from("class,pixel_freq,subcrop_freq,relative_change\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.class, r.pixel_freq, r.subcrop_freq, r.relative_change
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_pair, sample_scene, DatasetConfig};
    use crate::util::rng_from_seed;

    #[test]
    fn tiny_dot_pixel_probability() {
        // A 1-pixel-ish dot: pixel probability ~ pi*r^2 / (256*512).
        let row = toy_subcrop_sim(256, 512, 0.5642, &[0.02], 0.05).unwrap();
        assert!((row.pixel_prob - 1.0 / (256.0 * 512.0)).abs() < 2e-6, "{}", row.pixel_prob);
    }

    #[test]
    fn saturated_circle_hits_everything() {
        // Circle covering the whole frame: every subcrop hits.
        let row = toy_subcrop_sim(64, 64, 64.0, &[0.02, 0.08], 0.05).unwrap();
        assert_eq!(row.hit_prob, 1.0);
        assert_eq!(row.pixel_prob, 1.0);
    }

    #[test]
    fn hit_over_pixel_ratio_decreases_with_radius() {
        let areas = [0.02, 0.04, 0.06, 0.08];
        let mut prev: Option<f64> = None;
        for r in [20.0f32, 80.0] {
            let row = toy_subcrop_sim(256, 512, r, &areas, 0.05).unwrap();
            if let Some(p) = prev {
                assert!(row.ratio() < p, "ratio must shrink with radius");
            }
            prev = Some(row.ratio());
        }
    }

    #[test]
    fn hit_prob_monotonic_in_threshold_and_radius() {
        let areas = [0.04];
        let mut last = f64::INFINITY;
        for thr in [0.01f32, 0.05, 0.2, 0.5] {
            let row = toy_subcrop_sim(128, 128, 20.0, &areas, thr).unwrap();
            assert!(row.hit_prob <= last + 1e-12);
            last = row.hit_prob;
        }
        let mut lastr = 0.0;
        for r in [5.0f32, 10.0, 20.0, 40.0] {
            let row = toy_subcrop_sim(128, 128, r, &areas, 0.05).unwrap();
            assert!(row.hit_prob >= lastr - 1e-12);
            lastr = row.hit_prob;
        }
    }

    #[test]
    fn negative_radius_is_an_error() {
        assert!(toy_subcrop_sim(64, 64, -1.0, &[0.02], 0.05).is_err());
        assert!(toy_subcrop_sim(64, 64, 0.0, &[0.02], 0.05).is_err());
    }

    #[test]
    fn empirical_single_class_saturates() {
        let map = LabelMap {
            h: 64,
            w: 64,
            data: vec![3; 64 * 64],
        };
        let cfg = EmpiricalConfig {
            subcrops_per_crop: 64,
            quantile_bins: 1,
            ..Default::default()
        };
        let mut rng = rng_from_seed(3);
        let rows = empirical_subcrop_sim(&[map], &cfg, &mut rng).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].hit_prob, 1.0);
        assert_eq!(rows[0].pixel_prob, 1.0);
    }

    #[test]
    fn empirical_rejects_background_only_data() {
        let map = LabelMap {
            h: 32,
            w: 32,
            data: vec![0; 1024],
        };
        let cfg = EmpiricalConfig::default();
        let mut rng = rng_from_seed(4);
        assert!(empirical_subcrop_sim(&[map], &cfg, &mut rng).is_err());
    }

    #[test]
    fn empirical_converges_to_toy_on_single_circle() {
        // Full-frame global crop, square subcrops of one fixed area: the
        // empirical estimate must approach the exhaustive integration.
        let (h, w, r) = (96usize, 96usize, 18.0f32);
        let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
        let mut map = LabelMap {
            h,
            w,
            data: vec![0; h * w],
        };
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                    map.data[y * w + x] = 1;
                }
            }
        }
        let area = 0.04f32;
        let toy = toy_subcrop_sim(h, w, r, &[area], 0.05).unwrap();
        let cfg = EmpiricalConfig {
            global_area: (1.0, 1.0),
            global_crops_per_image: 1,
            subcrop_area: (area, area),
            aspect_range: (1.0, 1.0),
            subcrops_per_crop: 40_000,
            quantile_bins: 1,
            ..Default::default()
        };
        let mut rng = rng_from_seed(5);
        let rows = empirical_subcrop_sim(&[map], &cfg, &mut rng).unwrap();
        let p = toy.hit_prob;
        let sigma = (p * (1.0 - p) / 40_000.0).sqrt();
        assert!(
            (rows[0].hit_prob - p).abs() <= 3.0 * sigma + 1e-9,
            "empirical {} vs toy {} (3 sigma = {})",
            rows[0].hit_prob,
            p,
            3.0 * sigma
        );
    }

    #[test]
    fn small_objects_gain_more_than_large_ones() {
        // Synthetic labeled scenes: the smallest size bin's hit/pixel ratio
        // dwarfs the largest bin's.
        let mut rng = rng_from_seed(6);
        let dcfg = DatasetConfig::default();
        let mut maps = Vec::new();
        for _ in 0..24 {
            let scene = sample_scene(&mut rng, &dcfg);
            maps.push(render_pair(&scene, 0).unwrap().labels_t);
        }
        let cfg = EmpiricalConfig {
            subcrops_per_crop: 256,
            quantile_bins: 4,
            ..Default::default()
        };
        let rows = empirical_subcrop_sim(&maps, &cfg, &mut rng).unwrap();
        assert!(rows.len() >= 2);
        let first = rows.first().unwrap();
        let last = rows.last().unwrap();
        assert!(first.pixel_prob < last.pixel_prob);
        assert!(
            first.ratio() >= 2.0 * last.ratio(),
            "smallest bin ratio {} vs largest {}",
            first.ratio(),
            last.ratio()
        );
    }

    #[test]
    fn class_shift_single_class_is_zero() {
        let map = LabelMap {
            h: 48,
            w: 48,
            data: vec![0; 48 * 48],
        };
        let cfg = EmpiricalConfig {
            subcrops_per_crop: 64,
            ..Default::default()
        };
        let mut rng = rng_from_seed(7);
        let rows = class_shift_analysis(&[map], &cfg, 0.1, &mut rng).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].relative_change, 0.0);
    }

    #[test]
    fn class_shift_frequencies_sum_to_one() {
        let mut rng = rng_from_seed(8);
        let dcfg = DatasetConfig::default();
        let maps: Vec<LabelMap> = (0..8)
            .map(|_| render_pair(&sample_scene(&mut rng, &dcfg), 0).unwrap().labels_t)
            .collect();
        let cfg = EmpiricalConfig {
            subcrops_per_crop: 128,
            ..Default::default()
        };
        let rows = class_shift_analysis(&maps, &cfg, 0.1, &mut rng).unwrap();
        let sub_sum: f64 = rows.iter().map(|r| r.subcrop_freq).sum();
        let px_sum: f64 = rows.iter().map(|r| r.pixel_freq).sum();
        assert!((sub_sum - 1.0).abs() < 1e-9, "{sub_sum}");
        assert!((px_sum - 1.0).abs() < 1e-9, "{px_sum}");
    }

    #[test]
    fn class_shift_foreground_up_background_down() {
        let mut rng = rng_from_seed(9);
        let dcfg = DatasetConfig::default();
        let maps: Vec<LabelMap> = (0..16)
            .map(|_| render_pair(&sample_scene(&mut rng, &dcfg), 0).unwrap().labels_t)
            .collect();
        let cfg = EmpiricalConfig {
            subcrops_per_crop: 256,
            ..Default::default()
        };
        let rows = class_shift_analysis(&maps, &cfg, 0.1, &mut rng).unwrap();
        for r in &rows {
            if r.class == 0 {
                assert!(r.relative_change < 0.0, "background should shrink: {r:?}");
            } else if r.pixel_freq > 0.0 {
                assert!(
                    r.relative_change > 0.0,
                    "foreground class {} should grow: {r:?}",
                    r.class
                );
            }
        }
    }
}
