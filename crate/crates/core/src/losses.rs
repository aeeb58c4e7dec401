//! The two training objectives and their symmetrized combination.
//!
//! Dense term: online dense projections are upsampled to view resolution,
//! un-augmented, passed through the online predictor and normalized; the
//! offline projections of the paired frame are upsampled, un-augmented,
//! warped across time by the flow, and normalized. The per-pixel squared
//! error is averaged over pixels that survive every validity mask (both
//! un-augmentations, the flow warp, and the occlusion check).
//!
//! Pooled term: per subcrop pair, spatially pooled projections are
//! normalized, the online one is passed through the pooled predictor and
//! normalized again, and the squared error is averaged over pairs.
//!
//! The offline branch is a stop-gradient: it runs on its own tape in eval
//! mode and enters the loss graph as constants.

use crate::cropping::{extract_resize, sample_subcrop_pairs, SubcropConfig};
use crate::error::{Error, Result};
use crate::flow::{occlusion_mask, FlowField, OcclusionMask};
use crate::geometry::{affine_to_grid, apply_affine, apply_photometric, invert_affine, AffineAugment, PhotometricParams};
use crate::model::net::Net;
use crate::model::params::{Mode, ParamSet, TapeBind};
use crate::tensor::kernels::{self, SampleGrid};
use crate::tensor::tape::{Tape, VId};
use crate::tensor::Tensor4D;

pub const NORM_EPS: f32 = 1e-6;
/// Forward-backward occlusion parameters.
pub const OCC_ALPHA1: f32 = 0.1;
pub const OCC_ALPHA2: f32 = 0.5;

/// Which loss terms and trunk components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub dense: bool,
    pub pool: bool,
    pub top_down: bool,
    pub lateral: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            dense: true,
            pool: true,
            top_down: true,
            lateral: true,
        }
    }
}

/// Scalar terms and mask statistics from one symmetrized evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub dense: f32,
    pub pooled: f32,
    pub total: f32,
    /// Fraction of pixels that passed every dense-loss mask.
    pub valid_frac: f32,
    /// Fraction of pixels the occlusion check removed.
    pub occ_frac: f32,
    /// Subcrop pairs contributing to the pooled term.
    pub pairs_used: usize,
    /// No valid pixel survived in some direction (loss contribution 0).
    pub degenerate_dense: bool,
    /// Backward flow was missing; only the forward direction was used.
    pub one_directional: bool,
}

/// One sample's prepared views and ground truth, all at the global-crop
/// training resolution `(view_h, view_w)`.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    /// Photometrically distorted global views (subcrops are cut from these).
    pub photo_t: Tensor4D,
    pub photo_tp: Tensor4D,
    /// Affine-augmented views fed to the dense branch.
    pub view_t: Tensor4D,
    pub view_tp: Tensor4D,
    pub aug1: AffineAugment,
    pub aug2: AffineAugment,
    pub flow_fwd: FlowField,
    pub flow_bwd: Option<FlowField>,
    pub occ_fwd: OcclusionMask,
    pub occ_bwd: Option<OcclusionMask>,
    /// Aligned subcrop views, one row per pair: earlier frame and later frame.
    pub subcrops_t: Vec<Tensor4D>,
    pub subcrops_tp: Vec<Tensor4D>,
}

/// View-construction knobs shared by the trainer and tests.
#[derive(Clone, Debug)]
pub struct ViewConfig {
    pub view_h: usize,
    pub view_w: usize,
    pub subcrop_h: usize,
    pub subcrop_w: usize,
    pub subcrops_per_sample: usize,
    pub subcrop: SubcropConfig,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            view_h: 128,
            view_w: 256,
            subcrop_h: 48,
            subcrop_w: 48,
            subcrops_per_sample: 6,
            subcrop: SubcropConfig::default(),
        }
    }
}

/// Assembles one sample's views: photometric per frame, affine per view,
/// occlusion from the cropped flows, and flow-informed subcrop pairs.
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample(
    rng: &mut crate::util::Rng,
    frame_t: &Tensor4D,
    frame_tp: &Tensor4D,
    flow_fwd: &FlowField,
    flow_bwd: Option<&FlowField>,
    crop: &crate::cropping::CropSpec,
    aug1: AffineAugment,
    aug2: AffineAugment,
    photo1: &PhotometricParams,
    photo2: &PhotometricParams,
    cfg: &ViewConfig,
    sample_subcrops: bool,
) -> Result<PreparedSample> {
    let (vh, vw) = (cfg.view_h, cfg.view_w);
    let global_t = extract_resize(frame_t, crop, vh, vw)?;
    let global_tp = extract_resize(frame_tp, crop, vh, vw)?;
    let photo_t = apply_photometric(&global_t, photo1)?;
    let photo_tp = apply_photometric(&global_tp, photo2)?;
    let (view_t, _) = apply_affine(&photo_t, &aug1)?;
    let (view_tp, _) = apply_affine(&photo_tp, &aug2)?;
    let flow_fwd_v = crate::flow::crop_flow(flow_fwd, crop, vh, vw)?;
    let flow_bwd_v = match flow_bwd {
        Some(f) => Some(crate::flow::crop_flow(f, crop, vh, vw)?),
        None => None,
    };
    let occ_fwd = match &flow_bwd_v {
        Some(b) => occlusion_mask(&flow_fwd_v, b, OCC_ALPHA1, OCC_ALPHA2)?,
        None => OcclusionMask::new_clear(vh, vw),
    };
    let occ_bwd = match &flow_bwd_v {
        Some(b) => Some(occlusion_mask(b, &flow_fwd_v, OCC_ALPHA1, OCC_ALPHA2)?),
        None => None,
    };
    let mut subcrops_t = Vec::new();
    let mut subcrops_tp = Vec::new();
    if sample_subcrops {
        let pairs = sample_subcrop_pairs(rng, cfg.subcrops_per_sample, &flow_fwd_v, &cfg.subcrop)?;
        for p in &pairs {
            subcrops_t.push(extract_resize(&photo_t, &p.crop_t, cfg.subcrop_h, cfg.subcrop_w)?);
            subcrops_tp.push(extract_resize(
                &photo_tp,
                &p.crop_t_plus,
                cfg.subcrop_h,
                cfg.subcrop_w,
            )?);
        }
    }
    Ok(PreparedSample {
        photo_t,
        photo_tp,
        view_t,
        view_tp,
        aug1,
        aug2,
        flow_fwd: flow_fwd_v,
        flow_bwd: flow_bwd_v,
        occ_fwd,
        occ_bwd,
        subcrops_t,
        subcrops_tp,
    })
}

/// Offline-processed dense targets for one direction, as loss constants.
pub struct DenseTargets {
    /// `(n, c, H, W)` normalized target features in the online view's frame.
    pub target: Tensor4D,
    /// `(n, 1, H, W)` 0/1 product of offline validity masks and occlusion.
    pub valid: Tensor4D,
    pub occ_frac: f32,
}

/// Builds targets: upsample offline projections, reverse the offline view's
/// augmentation, warp across time by the flow, normalize. Validity combines
/// the un-augmentation mask (warped along with the features), the warp
/// bounds, and the occlusion mask.
pub fn build_dense_targets(
    p_offline: &Tensor4D,
    augs: &[&AffineAugment],
    flows: &[&FlowField],
    occs: &[&OcclusionMask],
    out_h: usize,
    out_w: usize,
) -> Result<DenseTargets> {
    let n = p_offline.n();
    if augs.len() != n || flows.len() != n || occs.len() != n {
        return Err(Error::Shape(format!(
            "dense targets: {n} projections vs {} augs / {} flows / {} occs",
            augs.len(),
            flows.len(),
            occs.len()
        )));
    }
    let c = p_offline.c();
    let mut target = Tensor4D::zeros(n, c, out_h, out_w);
    let mut valid = Tensor4D::zeros(n, 1, out_h, out_w);
    let mut occ_count = 0usize;
    // One sample at a time keeps the full-resolution intermediates small.
    for i in 0..n {
        let row = p_offline.slice_sample(i);
        let up = kernels::bilinear_resize_fwd(&row, out_h, out_w)?;
        let inv_grid = affine_to_grid(&invert_affine(augs[i])?, out_h, out_w);
        let (unaug, valid_aug) = kernels::grid_sample_fwd(&up, &inv_grid)?;
        let flow = flows[i];
        if flow.h() != out_h || flow.w() != out_w {
            return Err(Error::Shape(format!(
                "flow {} is {}x{}, expected view resolution {out_h}x{out_w}",
                i,
                flow.h(),
                flow.w()
            )));
        }
        let warp_grid = flow.to_warp_grid(1);
        let (warped, valid_warp) = kernels::grid_sample_fwd(&unaug, &warp_grid)?;
        let (valid_aug_warped, _) = kernels::grid_sample_fwd(&valid_aug, &warp_grid)?;
        let normed = kernels::l2_normalize_fwd(&warped, NORM_EPS);
        target.sample_mut(i).copy_from_slice(normed.data());
        let occ = occs[i];
        for y in 0..out_h {
            for x in 0..out_w {
                let occluded = occ.get(y, x);
                if occluded {
                    occ_count += 1;
                }
                // The warped augmentation mask must be exactly 1: every
                // interpolation corner the feature read touched was valid.
                let ok = !occluded
                    && valid_warp.at(0, 0, y, x) == 1.0
                    && valid_aug_warped.at(0, 0, y, x) >= 1.0 - 1e-5;
                if ok {
                    valid.set(i, 0, y, x, 1.0);
                }
            }
        }
    }
    Ok(DenseTargets {
        target,
        valid,
        occ_frac: occ_count as f32 / (n * out_h * out_w) as f32,
    })
}

/// Per-direction dense statistics.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseStats {
    pub valid_frac: f32,
    pub occ_frac: f32,
    pub degenerate: bool,
}

/// Dense flow-equivariance loss for one direction.
///
/// `p_online` are dense projections `(n, c, h', w')`; `inv_grids` reverse the
/// online views' augmentations at the full view resolution.
pub fn dense_loss(
    bind: &mut TapeBind,
    net: &Net,
    identity_predictor: bool,
    p_online: VId,
    inv_grids: SampleGrid,
    targets: &DenseTargets,
) -> Result<(VId, DenseStats)> {
    let (n, _, th, tw) = targets.target.shape();
    let up = bind.tape.bilinear_resize(p_online, th, tw)?;
    let (unaug, valid_online) = bind.tape.grid_sample(up, inv_grids)?;
    let pred = if identity_predictor {
        unaug
    } else {
        net.predict_dense(bind, unaug)?
    };
    let normed = bind.tape.l2_normalize(pred, NORM_EPS);
    let target = bind.tape.constant(targets.target.clone());
    let diff = bind.tape.sub(normed, target)?;
    let sq = bind.tape.mul(diff, diff)?;
    let per_px = bind.tape.channel_sum(sq);

    // Combined mask: online un-augmentation validity times offline validity.
    let mask = kernels::zip2(&valid_online, &targets.valid, |a, b| a * b)?;
    let count: f64 = mask.data().iter().map(|&v| v as f64).sum();
    let masked = bind.tape.mul_const(per_px, mask)?;
    let total = bind.tape.sum_all(masked);
    let stats = DenseStats {
        valid_frac: (count / (n * th * tw) as f64) as f32,
        occ_frac: targets.occ_frac,
        degenerate: count == 0.0,
    };
    let loss = if count == 0.0 {
        bind.tape.scale(total, 0.0)
    } else {
        bind.tape.scale(total, (1.0 / count) as f32)
    };
    Ok((loss, stats))
}

/// Pooled subcrop loss for one direction. `online_proj` and `offline_proj`
/// hold one row per pair; the offline side is already a plain tensor.
pub fn pooled_loss(
    bind: &mut TapeBind,
    net: &Net,
    identity_predictor: bool,
    online_proj: VId,
    offline_proj: &Tensor4D,
) -> Result<(VId, usize)> {
    let pairs = bind.tape.value(online_proj).n();
    if pairs == 0 || offline_proj.n() == 0 {
        let zero = bind.tape.constant(Tensor4D::zeros(1, 1, 1, 1));
        return Ok((bind.tape.scale(zero, 0.0), 0));
    }
    if offline_proj.n() != pairs {
        return Err(Error::Shape(format!(
            "pooled loss: {pairs} online rows vs {} offline rows",
            offline_proj.n()
        )));
    }
    let pooled = bind.tape.avg_pool_all(online_proj);
    let normed = bind.tape.l2_normalize(pooled, NORM_EPS);
    let pred = if identity_predictor {
        normed
    } else {
        net.predict_pool(bind, normed)?
    };
    let pred_normed = bind.tape.l2_normalize(pred, NORM_EPS);

    let off_pooled = kernels::avg_pool_all_fwd(offline_proj);
    let off_normed = kernels::l2_normalize_fwd(&off_pooled, NORM_EPS);
    let target = bind.tape.constant(off_normed);
    let diff = bind.tape.sub(pred_normed, target)?;
    let sq = bind.tape.mul(diff, diff)?;
    let per_pair = bind.tape.channel_sum(sq);
    let total = bind.tape.sum_all(per_pair);
    let loss = bind.tape.scale(total, 1.0 / pairs as f32);
    Ok((loss, pairs))
}

fn batched_inverse_grids(augs: &[&AffineAugment], h: usize, w: usize) -> Result<SampleGrid> {
    let mut grid = SampleGrid::new(augs.len(), h, w);
    for (i, aug) in augs.iter().enumerate() {
        let g = affine_to_grid(&invert_affine(aug)?, h, w);
        grid.coords[i * h * w * 2..(i + 1) * h * w * 2].copy_from_slice(&g.coords);
    }
    Ok(grid)
}

/// Options for [`symmetrized_total`].
#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub flags: AblationFlags,
    /// Replace both predictors with the identity (verification harness).
    pub identity_predictors: bool,
    /// Normalization mode of the online branch (the offline branch always
    /// runs in eval mode).
    pub online_mode: Mode,
    /// Track gradients w.r.t. the stacked view/subcrop inputs
    /// (finite-difference harness; off during training).
    pub track_inputs: bool,
    /// Evaluate the full-resolution dense head one sample at a time on
    /// scratch tapes, backpropagating each immediately. Mathematically
    /// identical (every op is sample-local past the projector), but peak
    /// memory drops from gigabytes to tens of megabytes. Incompatible with
    /// `track_inputs`.
    pub stream_dense: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            flags: AblationFlags::default(),
            identity_predictors: false,
            online_mode: Mode::Train,
            track_inputs: false,
            stream_dense: false,
        }
    }
}

/// The constructed loss graph: total node, report, and the input leaves
/// (stacked `2n` dense views / stacked `2P` subcrop views). Under streaming
/// the dense head has already been backpropagated through scratch tapes;
/// `seeds` carries the resulting upstream gradients into the main tape and
/// `extra_param_grads` the head parameters' accumulated gradients.
pub struct LossGraph {
    pub total: VId,
    pub report: LossReport,
    pub dense_views: Option<VId>,
    pub subcrop_views: Option<VId>,
    seeds: Vec<(VId, Tensor4D)>,
    /// Gradients by parameter index, accumulated outside the main tape.
    pub extra_param_grads: Vec<(usize, Tensor4D)>,
    streamed: bool,
}

/// Runs the backward pass for a built loss graph.
pub fn backward_total(bind: &mut TapeBind, graph: &LossGraph) -> Result<()> {
    if graph.streamed {
        bind.tape.backward_multi(graph.seeds.clone())
    } else {
        bind.tape.backward(graph.total)
    }
}

/// Offline-processed constants for one symmetrized evaluation: dense targets
/// and inverse-augmentation grids per direction, pooled target projections,
/// and the stacked online inputs.
pub struct FrozenTargets {
    pub view_batch: Tensor4D,
    pub crop_batch: Option<Tensor4D>,
    pub n: usize,
    pub pairs: usize,
    pub dense1: Option<DenseTargets>,
    pub dense2: Option<DenseTargets>,
    pub grids1: Option<SampleGrid>,
    pub grids2: Option<SampleGrid>,
    /// Offline pooled projections for the two directions' targets.
    pub off_pool_tp: Option<Tensor4D>,
    pub off_pool_t: Option<Tensor4D>,
    pub two_directions: bool,
}

/// Runs the offline branch (eval mode, no gradients) and precomputes every
/// constant the online loss graph consumes. The offline outputs are
/// stop-gradient targets: nothing here enters the backward pass.
pub fn freeze_targets(
    offline_params: &ParamSet,
    net: &Net,
    samples: &[PreparedSample],
    flags: AblationFlags,
) -> Result<FrozenTargets> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let two_directions = samples.iter().all(|s| s.flow_bwd.is_some());
    let views: Vec<Tensor4D> = samples
        .iter()
        .map(|s| s.view_t.clone())
        .chain(samples.iter().map(|s| s.view_tp.clone()))
        .collect();
    let view_batch = Tensor4D::stack(&views)?;
    let (vh, vw) = (view_batch.h(), view_batch.w());

    let mut out = FrozenTargets {
        view_batch,
        crop_batch: None,
        n,
        pairs: 0,
        dense1: None,
        dense2: None,
        grids1: None,
        grids2: None,
        off_pool_tp: None,
        off_pool_t: None,
        two_directions,
    };

    if flags.dense {
        let p_off = {
            let mut off_tape = Tape::new();
            let mut off_bind = TapeBind::new(&mut off_tape, offline_params, Mode::Eval, false);
            let x = off_bind.tape.constant(out.view_batch.clone());
            let feats = net.spatial_features(&mut off_bind, x, flags.top_down, flags.lateral)?;
            let proj = net.project_dense(&mut off_bind, feats)?;
            off_bind.tape.value(proj).clone()
        };
        let chw = p_off.c() * p_off.h() * p_off.w();
        let split = |lo: usize, hi: usize| -> Result<Tensor4D> {
            Tensor4D::from_vec(
                hi - lo,
                p_off.c(),
                p_off.h(),
                p_off.w(),
                p_off.data()[lo * chw..hi * chw].to_vec(),
            )
        };
        let aug1s: Vec<&AffineAugment> = samples.iter().map(|s| &s.aug1).collect();
        let aug2s: Vec<&AffineAugment> = samples.iter().map(|s| &s.aug2).collect();
        // Direction 1: online frame t predicts the warped offline frame t+dt.
        let p_off_tp = split(n, 2 * n)?;
        let flow_fwds: Vec<&FlowField> = samples.iter().map(|s| &s.flow_fwd).collect();
        let occ_fwds: Vec<&OcclusionMask> = samples.iter().map(|s| &s.occ_fwd).collect();
        out.dense1 = Some(build_dense_targets(&p_off_tp, &aug2s, &flow_fwds, &occ_fwds, vh, vw)?);
        out.grids1 = Some(batched_inverse_grids(&aug1s, vh, vw)?);
        if two_directions {
            let p_off_t = split(0, n)?;
            let flow_bwds: Vec<&FlowField> =
                samples.iter().map(|s| s.flow_bwd.as_ref().unwrap()).collect();
            let occ_bwds: Vec<&OcclusionMask> =
                samples.iter().map(|s| s.occ_bwd.as_ref().unwrap()).collect();
            out.dense2 =
                Some(build_dense_targets(&p_off_t, &aug1s, &flow_bwds, &occ_bwds, vh, vw)?);
            out.grids2 = Some(batched_inverse_grids(&aug2s, vh, vw)?);
        }
    }

    if flags.pool {
        let crops_t: Vec<Tensor4D> = samples.iter().flat_map(|s| s.subcrops_t.clone()).collect();
        let crops_tp: Vec<Tensor4D> = samples.iter().flat_map(|s| s.subcrops_tp.clone()).collect();
        let pairs = crops_t.len();
        out.pairs = pairs;
        if pairs > 0 {
            let all: Vec<Tensor4D> = crops_t.into_iter().chain(crops_tp).collect();
            let crop_batch = Tensor4D::stack(&all)?;
            let off_proj = {
                let mut off_tape = Tape::new();
                let mut off_bind = TapeBind::new(&mut off_tape, offline_params, Mode::Eval, false);
                let x = off_bind.tape.constant(crop_batch.clone());
                let pyramid = net.encode(&mut off_bind, x)?;
                let top = *pyramid.last().expect("nonempty pyramid");
                let pooled = off_bind.tape.avg_pool_all(top);
                let proj = net.project_pool(&mut off_bind, pooled)?;
                off_bind.tape.value(proj).clone()
            };
            let chw = off_proj.c() * off_proj.h() * off_proj.w();
            let split = |lo: usize, hi: usize| -> Result<Tensor4D> {
                Tensor4D::from_vec(
                    hi - lo,
                    off_proj.c(),
                    off_proj.h(),
                    off_proj.w(),
                    off_proj.data()[lo * chw..hi * chw].to_vec(),
                )
            };
            out.off_pool_t = Some(split(0, pairs)?);
            out.off_pool_tp = Some(split(pairs, 2 * pairs)?);
            out.crop_batch = Some(crop_batch);
        }
    }
    Ok(out)
}

/// One direction of the streamed dense head: per sample, a scratch tape runs
/// resize, un-augment, predictor, normalize and the masked error, then
/// backpropagates immediately with the direction's weight. Returns the
/// direction's error sum and valid count and accumulates the gradients
/// w.r.t. the projection rows and the head parameters.
#[allow(clippy::too_many_arguments)]
fn stream_dense_direction(
    bind: &mut TapeBind,
    net: &Net,
    opts: &LossOptions,
    p_online: VId,
    row0: usize,
    grids: &SampleGrid,
    targets: &DenseTargets,
    weight: f32,
    dp_online: &mut Tensor4D,
    param_grads: &mut [Option<Tensor4D>],
) -> Result<(f64, f64)> {
    let n = targets.target.n();
    let (th, tw) = (targets.target.h(), targets.target.w());
    let params = bind.param_set();
    let mut err_sum = 0.0f64;
    let mut valid_sum = 0.0f64;
    for i in 0..n {
        let mut grid = SampleGrid::new(1, th, tw);
        grid.coords
            .copy_from_slice(&grids.coords[i * th * tw * 2..(i + 1) * th * tw * 2]);
        let online_valid = kernels::grid_validity(&grid, th, tw);
        let mask = kernels::zip2(&online_valid, &targets.valid.slice_sample(i), |a, b| a * b)?;
        let count: f64 = mask.data().iter().map(|&v| v as f64).sum();
        valid_sum += count;

        let mut sub = Tape::new();
        let mut sbind = TapeBind::new(&mut sub, params, opts.online_mode, true);
        let slice = bind.tape.value(p_online).slice_sample(row0 + i);
        let leaf = sbind.tape.leaf(slice, true);
        let up = sbind.tape.bilinear_resize(leaf, th, tw)?;
        let (unaug, _) = sbind.tape.grid_sample(up, grid)?;
        let pred = if opts.identity_predictors {
            unaug
        } else {
            net.predict_dense(&mut sbind, unaug)?
        };
        let normed = sbind.tape.l2_normalize(pred, NORM_EPS);
        let target = sbind.tape.constant(targets.target.slice_sample(i));
        let diff = sbind.tape.sub(normed, target)?;
        let sq = sbind.tape.mul(diff, diff)?;
        let per_px = sbind.tape.channel_sum(sq);
        let masked = sbind.tape.mul_const(per_px, mask)?;
        let total = sbind.tape.sum_all(masked);
        err_sum += sbind.tape.scalar_f64(total);
        if weight != 0.0 {
            sbind
                .tape
                .backward_with(total, Tensor4D::full(1, 1, 1, 1, weight))?;
            for (idx, _) in sbind.touched() {
                if let Some(g) = sbind.grad_of(params.name(idx)) {
                    match &mut param_grads[idx] {
                        Some(acc) => {
                            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        None => param_grads[idx] = Some(g.clone()),
                    }
                }
            }
            let dslice = sbind.tape.grad(leaf).expect("leaf gradient exists");
            dp_online
                .sample_mut(row0 + i)
                .copy_from_slice(dslice.data());
        }
    }
    Ok((err_sum, valid_sum))
}

/// Builds the online loss graph against frozen targets. `view_batch` and
/// `crop_batch` must be tape nodes holding `frozen.view_batch` /
/// `frozen.crop_batch` (leaves when input gradients are wanted).
pub fn online_total(
    bind: &mut TapeBind,
    net: &Net,
    frozen: &FrozenTargets,
    view_batch: VId,
    crop_batch: Option<VId>,
    opts: &LossOptions,
) -> Result<LossGraph> {
    if opts.stream_dense && opts.track_inputs {
        return Err(Error::Param(
            "stream_dense cannot track input gradients".into(),
        ));
    }
    let n = frozen.n;
    let mut report = LossReport {
        one_directional: !frozen.two_directions,
        pairs_used: frozen.pairs,
        ..Default::default()
    };
    let mut seeds: Vec<(VId, Tensor4D)> = Vec::new();
    let mut extra_param_grads: Vec<(usize, Tensor4D)> = Vec::new();

    let dense_term = if let (Some(d1), Some(g1)) = (&frozen.dense1, &frozen.grids1) {
        let feats =
            net.spatial_features(bind, view_batch, opts.flags.top_down, opts.flags.lateral)?;
        let p_online = net.project_dense(bind, feats)?;
        if opts.stream_dense {
            let (pn, pc, ph, pw) = bind.tape.value(p_online).shape();
            let mut dp = Tensor4D::zeros(pn, pc, ph, pw);
            let mut pgrads: Vec<Option<Tensor4D>> =
                vec![None; bind.param_set().len()];
            // Valid counts fix the per-direction weights before any backward.
            let count1: f64 = {
                let v1 = kernels::grid_validity(g1, frozen.view_batch.h(), frozen.view_batch.w());
                kernels::zip2(&v1, &d1.valid, |a, b| a * b)?
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .sum()
            };
            let dir_scale = if frozen.two_directions { 0.5 } else { 1.0 };
            let w1 = if count1 == 0.0 { 0.0 } else { (dir_scale / count1) as f32 };
            let (sum1, _) = stream_dense_direction(
                bind, net, opts, p_online, 0, g1, d1, w1, &mut dp, &mut pgrads,
            )?;
            let loss1 = if count1 == 0.0 { 0.0 } else { sum1 / count1 };
            la_or(&mut report.degenerate_dense, count1 == 0.0);
            let hw_total = (n * frozen.view_batch.h() * frozen.view_batch.w()) as f32;
            let mut dense_val;
            if let (Some(d2), Some(g2)) = (&frozen.dense2, &frozen.grids2) {
                let count2: f64 = {
                    let v2 =
                        kernels::grid_validity(g2, frozen.view_batch.h(), frozen.view_batch.w());
                    kernels::zip2(&v2, &d2.valid, |a, b| a * b)?
                        .data()
                        .iter()
                        .map(|&v| v as f64)
                        .sum()
                };
                let w2 = if count2 == 0.0 { 0.0 } else { (0.5 / count2) as f32 };
                let (sum2, _) = stream_dense_direction(
                    bind, net, opts, p_online, n, g2, d2, w2, &mut dp, &mut pgrads,
                )?;
                let loss2 = if count2 == 0.0 { 0.0 } else { sum2 / count2 };
                la_or(&mut report.degenerate_dense, count2 == 0.0);
                report.valid_frac =
                    0.5 * (count1 as f32 / hw_total + count2 as f32 / hw_total);
                report.occ_frac = 0.5 * (d1.occ_frac + d2.occ_frac);
                dense_val = 0.5 * (loss1 + loss2);
            } else {
                report.valid_frac = count1 as f32 / hw_total;
                report.occ_frac = d1.occ_frac;
                dense_val = loss1;
            }
            if !dense_val.is_finite() {
                dense_val = f64::NAN;
            }
            seeds.push((p_online, dp));
            for (idx, g) in pgrads.into_iter().enumerate() {
                if let Some(g) = g {
                    extra_param_grads.push((idx, g));
                }
            }
            Some(bind.tape.constant(Tensor4D::full(1, 1, 1, 1, dense_val as f32)))
        } else {
            let online_t = bind.tape.slice_batch(p_online, 0, n)?;
            let (loss1, stats1) = dense_loss(
                bind,
                net,
                opts.identity_predictors,
                online_t,
                g1.clone(),
                d1,
            )?;
            la_or(&mut report.degenerate_dense, stats1.degenerate);
            if let (Some(d2), Some(g2)) = (&frozen.dense2, &frozen.grids2) {
                let online_tp = bind.tape.slice_batch(p_online, n, 2 * n)?;
                let (loss2, stats2) = dense_loss(
                    bind,
                    net,
                    opts.identity_predictors,
                    online_tp,
                    g2.clone(),
                    d2,
                )?;
                la_or(&mut report.degenerate_dense, stats2.degenerate);
                report.valid_frac = 0.5 * (stats1.valid_frac + stats2.valid_frac);
                report.occ_frac = 0.5 * (stats1.occ_frac + stats2.occ_frac);
                let sum = bind.tape.add(loss1, loss2)?;
                Some(bind.tape.scale(sum, 0.5))
            } else {
                report.valid_frac = stats1.valid_frac;
                report.occ_frac = stats1.occ_frac;
                Some(loss1)
            }
        }
    } else {
        None
    };

    let pooled_term = match (crop_batch, &frozen.off_pool_t, &frozen.off_pool_tp) {
        (Some(crops), Some(off_t), Some(off_tp)) => {
            let pairs = frozen.pairs;
            let pyramid = net.encode(bind, crops)?;
            let top = *pyramid.last().expect("nonempty pyramid");
            let pooled = bind.tape.avg_pool_all(top);
            let on_proj = net.project_pool(bind, pooled)?;
            let on_t = bind.tape.slice_batch(on_proj, 0, pairs)?;
            let (p1, _) = pooled_loss(bind, net, opts.identity_predictors, on_t, off_tp)?;
            if frozen.two_directions {
                let on_tp = bind.tape.slice_batch(on_proj, pairs, 2 * pairs)?;
                let (p2, _) = pooled_loss(bind, net, opts.identity_predictors, on_tp, off_t)?;
                let sum = bind.tape.add(p1, p2)?;
                Some(bind.tape.scale(sum, 0.5))
            } else {
                Some(p1)
            }
        }
        _ => None,
    };
    if opts.stream_dense {
        if let Some(p) = pooled_term {
            seeds.push((p, Tensor4D::full(1, 1, 1, 1, 1.0)));
        }
    }

    let total = match (dense_term, pooled_term) {
        (Some(d), Some(p)) => bind.tape.add(d, p)?,
        (Some(d), None) => d,
        (None, Some(p)) => p,
        (None, None) => bind.tape.constant(Tensor4D::zeros(1, 1, 1, 1)),
    };
    report.dense = dense_term.map(|id| bind.tape.scalar(id)).unwrap_or(0.0);
    report.pooled = pooled_term.map(|id| bind.tape.scalar(id)).unwrap_or(0.0);
    report.total = bind.tape.scalar(total);
    Ok(LossGraph {
        total,
        report,
        dense_views: None,
        subcrop_views: None,
        seeds,
        extra_param_grads,
        streamed: opts.stream_dense,
    })
}

/// Builds the symmetrized objective on `bind`'s tape: freezes the offline
/// targets, then evaluates the online branch against them.
///
/// Both frames of every sample are encoded once by the online branch (with
/// gradients) and once by the offline branch (as constants); the dense and
/// pooled terms are each evaluated in both directions — backward flow driving
/// the reversed direction — and averaged. With no backward flow the forward
/// direction stands alone and the report is flagged.
pub fn symmetrized_total(
    bind: &mut TapeBind,
    offline_params: &ParamSet,
    net: &Net,
    samples: &[PreparedSample],
    opts: &LossOptions,
) -> Result<LossGraph> {
    let frozen = freeze_targets(offline_params, net, samples, opts.flags)?;
    let view_batch = if opts.flags.dense {
        Some(bind.tape.leaf(frozen.view_batch.clone(), opts.track_inputs))
    } else {
        None
    };
    let crop_batch = frozen
        .crop_batch
        .as_ref()
        .map(|c| bind.tape.leaf(c.clone(), opts.track_inputs));
    // A dense-less graph never reads the view node; feed a placeholder id.
    let view_id = match view_batch {
        Some(id) => id,
        None => bind.tape.constant(Tensor4D::zeros(1, 1, 1, 1)),
    };
    let mut graph = online_total(bind, net, &frozen, view_id, crop_batch, opts)?;
    graph.dense_views = view_batch;
    graph.subcrop_views = crop_batch;
    Ok(graph)
}

fn la_or(dst: &mut bool, v: bool) {
    *dst = *dst || v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cropping::CropSpec;
    use crate::geometry::{sample_affine, sample_photometric, AffineConfig, PhotometricConfig};
    use crate::model::params::ParamKind;
    use crate::model::{ModelConfig, ModelState};
    use crate::synth::{render_pair, sample_scene, DatasetConfig};
    use crate::util::rng_from_seed;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![8, 16],
            head_hidden: 16,
            projection_dim: 8,
            sdm_blocks: 1,
            ..Default::default()
        }
    }

    fn tiny_view_config() -> ViewConfig {
        ViewConfig {
            view_h: 32,
            view_w: 64,
            subcrop_h: 16,
            subcrop_w: 16,
            subcrops_per_sample: 3,
            ..Default::default()
        }
    }

    fn tiny_view_config_no_jitter() -> ViewConfig {
        ViewConfig {
            subcrop: SubcropConfig {
                jitter_frac: 0.0,
                ..Default::default()
            },
            ..tiny_view_config()
        }
    }

    fn tiny_dataset_config() -> DatasetConfig {
        DatasetConfig {
            canvas_h: 32,
            canvas_w: 64,
            shapes_per_scene: (2, 3),
            area_frac_range: (0.01, 0.2),
            max_speed: 2,
            ..Default::default()
        }
    }

    fn prepared_batch(
        seed: u64,
        n: usize,
        dt: u32,
        identity_augs: bool,
        vcfg: &ViewConfig,
    ) -> Vec<PreparedSample> {
        let mut rng = rng_from_seed(seed);
        let dcfg = tiny_dataset_config();
        (0..n)
            .map(|_| {
                let scene = sample_scene(&mut rng, &dcfg);
                let pair = render_pair(&scene, dt).unwrap();
                let crop = CropSpec::full(dcfg.canvas_h, dcfg.canvas_w);
                let (aug1, aug2, photo1, photo2) = if identity_augs {
                    (
                        AffineAugment::identity(vcfg.view_h, vcfg.view_w),
                        AffineAugment::identity(vcfg.view_h, vcfg.view_w),
                        PhotometricParams::identity(),
                        PhotometricParams::identity(),
                    )
                } else {
                    let acfg = AffineConfig::new(vcfg.view_h, vcfg.view_w);
                    let pcfg = PhotometricConfig::default();
                    (
                        sample_affine(&mut rng, &acfg),
                        sample_affine(&mut rng, &acfg),
                        sample_photometric(&mut rng, &pcfg),
                        sample_photometric(&mut rng, &pcfg),
                    )
                };
                prepare_sample(
                    &mut rng,
                    &pair.frame_t,
                    &pair.frame_t_plus,
                    &pair.flow_fwd,
                    Some(&pair.flow_bwd),
                    &crop,
                    aug1,
                    aug2,
                    &photo1,
                    &photo2,
                    vcfg,
                    true,
                )
                .unwrap()
            })
            .collect()
    }

    fn eval_loss(
        state: &ModelState,
        samples: &[PreparedSample],
        opts: &LossOptions,
    ) -> (f32, LossReport) {
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &state.online, opts.online_mode, false);
        let g = symmetrized_total(&mut bind, &state.offline, &state.net, samples, opts).unwrap();
        (bind.tape.scalar(g.total), g.report)
    }

    #[test]
    fn tied_weights_identity_setup_gives_zero_loss() {
        let mut rng = rng_from_seed(1);
        let mut state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        state.tie_offline_to_online();
        // Identity augments include zero subcrop jitter: with zero flow the
        // paired rectangles coincide.
        let vcfg = tiny_view_config_no_jitter();
        let samples = prepared_batch(7, 2, 0, true, &vcfg);
        let opts = LossOptions {
            identity_predictors: true,
            online_mode: Mode::Eval,
            ..Default::default()
        };
        let (total, report) = eval_loss(&state, &samples, &opts);
        assert!(total.abs() < 1e-10, "total {total}");
        assert!(report.dense.abs() < 1e-10);
        assert!(report.pooled.abs() < 1e-10);
        assert!(!report.one_directional);
    }

    #[test]
    fn swapping_pair_order_leaves_total_unchanged() {
        let mut rng = rng_from_seed(2);
        let mut state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        state.ema_update(0, 100);
        let vcfg = tiny_view_config();
        let samples = prepared_batch(11, 2, 1, false, &vcfg);
        let swapped: Vec<PreparedSample> = samples
            .iter()
            .map(|s| PreparedSample {
                photo_t: s.photo_tp.clone(),
                photo_tp: s.photo_t.clone(),
                view_t: s.view_tp.clone(),
                view_tp: s.view_t.clone(),
                aug1: s.aug2.clone(),
                aug2: s.aug1.clone(),
                flow_fwd: s.flow_bwd.clone().unwrap(),
                flow_bwd: Some(s.flow_fwd.clone()),
                occ_fwd: s.occ_bwd.clone().unwrap(),
                occ_bwd: Some(s.occ_fwd.clone()),
                subcrops_t: s.subcrops_tp.clone(),
                subcrops_tp: s.subcrops_t.clone(),
            })
            .collect();
        let opts = LossOptions {
            online_mode: Mode::Eval,
            ..Default::default()
        };
        let (a, _) = eval_loss(&state, &samples, &opts);
        let (b, _) = eval_loss(&state, &swapped, &opts);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn disabling_dense_leaves_pooled_only() {
        let mut rng = rng_from_seed(3);
        let state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        let vcfg = tiny_view_config();
        let samples = prepared_batch(13, 2, 1, false, &vcfg);
        let opts = LossOptions {
            flags: AblationFlags {
                dense: false,
                ..Default::default()
            },
            online_mode: Mode::Eval,
            ..Default::default()
        };
        let (total, report) = eval_loss(&state, &samples, &opts);
        assert_eq!(report.dense, 0.0);
        assert_eq!(total, report.pooled);
        assert_eq!(total, report.total);
    }

    #[test]
    fn pooled_orthogonal_unit_vectors_and_mean_invariance() {
        let mut rng = rng_from_seed(4);
        let state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        let d = 8;
        let e1 = |p: usize| {
            Tensor4D::from_fn(p, d, 1, 1, |_, c, _, _| if c == 0 { 1.0 } else { 0.0 })
        };
        let e2 = |p: usize| {
            Tensor4D::from_fn(p, d, 1, 1, |_, c, _, _| if c == 1 { 1.0 } else { 0.0 })
        };
        for pairs in [1usize, 4] {
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Eval, false);
            let online = bind.tape.constant(e1(pairs));
            let (loss, used) =
                pooled_loss(&mut bind, &state.net, true, online, &e2(pairs)).unwrap();
            assert_eq!(used, pairs);
            let v = bind.tape.scalar(loss);
            assert!((v - 2.0).abs() < 1e-5, "pairs={pairs}: {v}");
        }
    }

    #[test]
    fn identical_projections_identity_predictor_zero() {
        let mut rng = rng_from_seed(5);
        let state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        let x = Tensor4D::rand_uniform(&mut rng, 3, 8, 1, 1, -1.0, 1.0);
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Eval, false);
        let online = bind.tape.constant(x.clone());
        let (loss, _) = pooled_loss(&mut bind, &state.net, true, online, &x).unwrap();
        assert!(bind.tape.scalar(loss) < 1e-10);
    }

    #[test]
    fn masked_pixels_never_contribute() {
        // Crafted aligned projections with a nontrivial mask: altering masked
        // pixels of either side leaves the loss bit-identical.
        let mut rng = rng_from_seed(6);
        let state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        let (n, c, h, w) = (1usize, 8usize, 8usize, 8usize);
        let online = Tensor4D::rand_uniform(&mut rng, n, c, h, w, -1.0, 1.0);
        let target = kernels::l2_normalize_fwd(
            &Tensor4D::rand_uniform(&mut rng, n, c, h, w, -1.0, 1.0),
            NORM_EPS,
        );
        let mut valid = Tensor4D::zeros(n, 1, h, w);
        for y in 0..h {
            for x in 0..w {
                if (x + y) % 3 != 0 {
                    valid.set(0, 0, y, x, 1.0);
                }
            }
        }
        let run = |p_online: &Tensor4D, target: &Tensor4D| -> f32 {
            let targets = DenseTargets {
                target: target.clone(),
                valid: valid.clone(),
                occ_frac: 0.0,
            };
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Eval, false);
            let on = bind.tape.constant(p_online.clone());
            let grids = SampleGrid::identity(n, h, w);
            let (loss, _) =
                dense_loss(&mut bind, &state.net, false, on, grids, &targets).unwrap();
            bind.tape.scalar(loss)
        };
        let base = run(&online, &target);
        let mut corrupted_target = target.clone();
        let mut corrupted_online = online.clone();
        for y in 0..h {
            for x in 0..w {
                if valid.at(0, 0, y, x) == 0.0 {
                    for ci in 0..c {
                        corrupted_target.set(0, ci, y, x, 1e6);
                        corrupted_online.set(0, ci, y, x, -77.0);
                    }
                }
            }
        }
        assert_eq!(base, run(&online, &corrupted_target));
        assert_eq!(base, run(&corrupted_online, &target));
    }

    #[test]
    fn all_valid_mean_matches_plain_average() {
        let mut rng = rng_from_seed(7);
        let state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        let (n, c, h, w) = (2usize, 8usize, 6usize, 6usize);
        let online = Tensor4D::rand_uniform(&mut rng, n, c, h, w, -1.0, 1.0);
        let target = kernels::l2_normalize_fwd(
            &Tensor4D::rand_uniform(&mut rng, n, c, h, w, -1.0, 1.0),
            NORM_EPS,
        );
        let targets = DenseTargets {
            target: target.clone(),
            valid: Tensor4D::full(n, 1, h, w, 1.0),
            occ_frac: 0.0,
        };
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Eval, false);
        let on = bind.tape.constant(online.clone());
        let grids = SampleGrid::identity(n, h, w);
        let (loss, stats) =
            dense_loss(&mut bind, &state.net, true, on, grids, &targets).unwrap();
        assert_eq!(stats.valid_frac, 1.0);
        // Oracle: plain 1/(n*h*w) average of per-pixel channel-summed errors.
        let normed = kernels::l2_normalize_fwd(&online, NORM_EPS);
        let mut acc = 0.0f64;
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut px = 0.0f32;
                    for ci in 0..c {
                        px += (normed.at(ni, ci, y, x) - target.at(ni, ci, y, x)).powi(2);
                    }
                    acc += px as f64;
                }
            }
        }
        let expect = (acc / (n * h * w) as f64) as f32;
        let got = bind.tape.scalar(loss);
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn dense_loss_is_batch_permutation_invariant() {
        let mut rng = rng_from_seed(8);
        let state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        let (n, c, h, w) = (3usize, 8usize, 5usize, 5usize);
        let online = Tensor4D::rand_uniform(&mut rng, n, c, h, w, -1.0, 1.0);
        let target = kernels::l2_normalize_fwd(
            &Tensor4D::rand_uniform(&mut rng, n, c, h, w, -1.0, 1.0),
            NORM_EPS,
        );
        let run = |order: &[usize]| -> f32 {
            let on = Tensor4D::stack(&order.iter().map(|&i| online.slice_sample(i)).collect::<Vec<_>>())
                .unwrap();
            let tg = Tensor4D::stack(&order.iter().map(|&i| target.slice_sample(i)).collect::<Vec<_>>())
                .unwrap();
            let targets = DenseTargets {
                target: tg,
                valid: Tensor4D::full(n, 1, h, w, 1.0),
                occ_frac: 0.0,
            };
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Eval, false);
            let on = bind.tape.constant(on);
            let (loss, _) = dense_loss(
                &mut bind,
                &state.net,
                true,
                on,
                SampleGrid::identity(n, h, w),
                &targets,
            )
            .unwrap();
            bind.tape.scalar(loss)
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn gradient_reaches_every_online_parameter() {
        let mut rng = rng_from_seed(9);
        let mut state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        state.ema_update(0, 100);
        let vcfg = tiny_view_config();
        let samples = prepared_batch(17, 2, 1, false, &vcfg);
        let opts = LossOptions::default();
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Train, true);
        let g =
            symmetrized_total(&mut bind, &state.offline, &state.net, &samples, &opts).unwrap();
        bind.tape.backward(g.total).unwrap();
        for idx in 0..state.online.len() {
            if state.online.kind(idx) == ParamKind::Buffer {
                continue;
            }
            let name = state.online.name(idx);
            let grad = bind.grad_of(name);
            let nonzero = grad.map(|t| t.data().iter().any(|&v| v != 0.0)).unwrap_or(false);
            assert!(nonzero, "parameter `{name}` received no gradient");
        }

        // With the pooled loss disabled, pooled-head gradients vanish.
        let mut tape2 = Tape::new();
        let mut bind2 = TapeBind::new(&mut tape2, &state.online, Mode::Train, true);
        let opts2 = LossOptions {
            flags: AblationFlags {
                pool: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let g2 =
            symmetrized_total(&mut bind2, &state.offline, &state.net, &samples, &opts2).unwrap();
        bind2.tape.backward(g2.total).unwrap();
        for prefix in ["pool_proj.", "pool_pred."] {
            for idx in 0..state.online.len() {
                let name = state.online.name(idx);
                if name.starts_with(prefix) {
                    assert!(
                        bind2.grad_of(name).is_none(),
                        "`{name}` should receive no gradient with the pooled loss off"
                    );
                }
            }
        }
    }

    #[test]
    fn streamed_dense_head_matches_monolithic() {
        let mut rng = rng_from_seed(12);
        let mut state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        state.ema_update(0, 100);
        let vcfg = tiny_view_config();
        let samples = prepared_batch(23, 2, 1, false, &vcfg);
        let run = |stream: bool| {
            let opts = LossOptions {
                stream_dense: stream,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Train, true);
            let graph =
                symmetrized_total(&mut bind, &state.offline, &state.net, &samples, &opts)
                    .unwrap();
            backward_total(&mut bind, &graph).unwrap();
            let mut grads: Vec<Option<Tensor4D>> = (0..state.online.len())
                .map(|i| bind.grad_of(state.online.name(i)).cloned())
                .collect();
            for (idx, g) in &graph.extra_param_grads {
                match &mut grads[*idx] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    None => grads[*idx] = Some(g.clone()),
                }
            }
            (graph.report.clone(), grads)
        };
        let (rep_mono, grads_mono) = run(false);
        let (rep_stream, grads_stream) = run(true);
        assert!((rep_mono.total - rep_stream.total).abs() < 1e-5);
        assert!((rep_mono.dense - rep_stream.dense).abs() < 1e-5);
        assert_eq!(rep_mono.pooled, rep_stream.pooled);
        assert!((rep_mono.valid_frac - rep_stream.valid_frac).abs() < 1e-6);
        for idx in 0..state.online.len() {
            match (&grads_mono[idx], &grads_stream[idx]) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    let scale = a.max_abs().max(b.max_abs()).max(1e-6);
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!(
                            (x - y).abs() / scale < 1e-4,
                            "grad mismatch on `{}`: {x} vs {y}",
                            state.online.name(idx)
                        );
                    }
                }
                _ => panic!(
                    "gradient presence differs on `{}`",
                    state.online.name(idx)
                ),
            }
        }
    }

    #[test]
    fn full_graph_gradcheck_small() {
        // Finite differences through encoder, decoder, heads and both losses
        // against frozen stop-gradient targets, w.r.t. the stacked view and
        // subcrop inputs.
        let mut rng = rng_from_seed(10);
        let mut state = ModelState::init(tiny_model_config(), &mut rng).unwrap();
        state.ema_update(0, 100);
        let vcfg = ViewConfig {
            view_h: 16,
            view_w: 16,
            subcrop_h: 8,
            subcrop_w: 8,
            subcrops_per_sample: 2,
            ..Default::default()
        };
        let samples = prepared_batch(19, 1, 1, false, &vcfg);
        let opts = LossOptions {
            online_mode: Mode::Eval,
            ..Default::default()
        };
        let frozen =
            freeze_targets(&state.offline, &state.net, &samples, opts.flags).unwrap();
        let inputs = [
            frozen.view_batch.clone(),
            frozen.crop_batch.clone().unwrap(),
        ];
        let check = crate::tensor::gradcheck::gradcheck_graph(
            |tape, ids| {
                let mut bind = TapeBind::new(tape, &state.online, Mode::Eval, false);
                let graph = online_total(
                    &mut bind,
                    &state.net,
                    &frozen,
                    ids[0],
                    Some(ids[1]),
                    &opts,
                )?;
                Ok(graph.total)
            },
            &inputs,
            3e-3,
            7,
            8e-3,
            1e-4,
        )
        .unwrap();
        assert!(
            check.checked * 2 >= check.skipped,
            "kink guard excluded too much: {} checked vs {} skipped",
            check.checked,
            check.skipped
        );
        assert!(
            check.max_rel < 5e-3,
            "worst relative error {} over {} coordinates ({} kink-skipped)",
            check.max_rel,
            check.checked,
            check.skipped
        );
    }
}
