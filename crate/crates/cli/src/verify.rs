//! In-process invariant suites behind `poodle verify`.

use crate::Suite;
use poodle::flow::{occlusion_mask, warp_by_flow};
use poodle::model::{ModelConfig, ModelState};
use poodle::synth::{render_pair, sample_scene, DatasetConfig};
use poodle::tensor::gradcheck::gradcheck;
use poodle::tensor::Tensor4D;
use poodle::util::rng_from_seed;

struct Reporter {
    failures: usize,
}

impl Reporter {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            println!("PASS {name}");
        } else {
            println!("FAIL {name}: {detail}");
            self.failures += 1;
        }
    }
}

pub fn run(suite: Suite) -> anyhow::Result<bool> {
    let mut r = Reporter { failures: 0 };
    if matches!(suite, Suite::Grad | Suite::All) {
        grad_suite(&mut r)?;
    }
    if matches!(suite, Suite::Warp | Suite::All) {
        warp_suite(&mut r)?;
    }
    if matches!(suite, Suite::Ema | Suite::All) {
        ema_suite(&mut r)?;
    }
    Ok(r.failures == 0)
}

fn grad_suite(r: &mut Reporter) -> anyhow::Result<()> {
    let mut rng = rng_from_seed(41);
    for seed in 0..3u64 {
        let x = Tensor4D::rand_uniform(&mut rng, 1, 2, 6, 6, -1.0, 1.0);
        let w = Tensor4D::rand_uniform(&mut rng, 3, 2, 3, 3, -1.0, 1.0);
        let b = Tensor4D::rand_uniform(&mut rng, 1, 3, 1, 1, -0.5, 0.5);
        let err = gradcheck(
            |tape, ids| tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, 1),
            &[x, w, b],
            5e-2,
            seed,
        )?;
        r.check(
            &format!("gradcheck conv2d seed {seed}"),
            err < 1e-3,
            format!("relative error {err}"),
        );
    }
    for seed in 0..3u64 {
        let x = Tensor4D::rand_uniform(&mut rng, 1, 4, 5, 7, -1.0, 1.0);
        let err = gradcheck(
            |tape, ids| {
                let up = tape.bilinear_resize(ids[0], 10, 14)?;
                Ok(tape.avg_pool_all(up))
            },
            &[x],
            5e-2,
            seed,
        )?;
        r.check(
            &format!("gradcheck resize+pool seed {seed}"),
            err < 1e-3,
            format!("relative error {err}"),
        );
    }
    for seed in [3u64, 6, 11] {
        let mut srng = rng_from_seed(230 + seed);
        let x = Tensor4D::rand_uniform(&mut srng, 1, 6, 4, 5, -1.0, 1.0);
        let err = gradcheck(|tape, ids| Ok(tape.l2_normalize(ids[0], 1e-6)), &[x], 5e-3, seed)?;
        r.check(
            &format!("gradcheck l2_normalize seed {seed}"),
            err < 1e-3,
            format!("relative error {err}"),
        );
    }
    Ok(())
}

fn warp_suite(r: &mut Reporter) -> anyhow::Result<()> {
    let mut rng = rng_from_seed(42);
    let cfg = DatasetConfig::default();
    let mut worst_mae = 0.0f64;
    let mut worst_iou = 1.0f64;
    for _ in 0..10 {
        let scene = sample_scene(&mut rng, &cfg);
        let pair = render_pair(&scene, 2)?;
        let (warped, valid) = warp_by_flow(&pair.frame_t_plus, &pair.flow_fwd)?;
        let (h, w) = (scene.height, scene.width);
        let mut err = 0.0f64;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !pair.occlusion.get(y, x) && valid.at(0, 0, y, x) == 1.0 {
                    for c in 0..3 {
                        err += (warped.at(0, c, y, x) - pair.frame_t.at(0, c, y, x)).abs() as f64;
                        count += 1;
                    }
                }
            }
        }
        worst_mae = worst_mae.max(err / count.max(1) as f64);
        let dd = occlusion_mask(&pair.flow_fwd, &pair.flow_bwd, 0.1, 0.5)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for y in 0..h {
            for x in 0..w {
                let boundary = (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|ny| {
                    (x.saturating_sub(1)..=(x + 1).min(w - 1))
                        .any(|nx| pair.occlusion.get(ny, nx) != pair.occlusion.get(y, x))
                });
                if boundary {
                    continue;
                }
                let (a, b) = (pair.occlusion.get(y, x), dd.get(y, x));
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        worst_iou = worst_iou.min(iou);
    }
    r.check(
        "warp reconstructs non-occluded pixels",
        worst_mae < 2e-2,
        format!("worst mean abs error {worst_mae}"),
    );
    r.check(
        "forward-backward occlusion matches analytic mask",
        worst_iou >= 0.95,
        format!("worst IoU {worst_iou}"),
    );
    Ok(())
}

fn ema_suite(r: &mut Reporter) -> anyhow::Result<()> {
    let mut rng = rng_from_seed(43);
    let mut state = ModelState::init(
        ModelConfig {
            stage_channels: vec![8, 16],
            sdm_blocks: 1,
            head_hidden: 16,
            projection_dim: 8,
            ..Default::default()
        },
        &mut rng,
    )?;
    let m0 = state.momentum(0, 1000);
    r.check(
        "momentum starts at its base value",
        (m0 - 0.996).abs() < 1e-7,
        format!("m(0) = {m0}"),
    );
    let m1 = state.momentum(1000, 1000);
    r.check(
        "momentum closes to one",
        (m1 - 1.0).abs() < 1e-7,
        format!("m(total) = {m1}"),
    );
    let name = "enc.stage0.down.w";
    state.online.get_mut(name)?.data_mut().fill(0.0);
    state.offline.get_mut(name)?.data_mut().fill(1.0);
    state.ema_update(0, 1000);
    let got = state.offline.get(name)?.data()[0];
    r.check(
        "ema blends with exact arithmetic",
        (got - 0.996).abs() < 1e-6,
        format!("xi' = {got}"),
    );
    let mut tied = state.clone();
    tied.tie_offline_to_online();
    let before = tied.offline.clone();
    tied.ema_update(500, 1000);
    let mut fixed = true;
    for idx in 0..before.len() {
        if before.value(idx).data() != tied.offline.value(idx).data() {
            fixed = false;
        }
    }
    r.check("tied weights are a fixed point", fixed, "xi moved".into());
    Ok(())
}
