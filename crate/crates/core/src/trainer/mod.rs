//! Training orchestration: data sampling, the optimization step, schedules,
//! metrics, and checkpointing.

pub mod ablation;
pub mod adamw;
pub mod probe;

use crate::cropping::sample_global_crop_pair;
use crate::error::{Error, Result};
use crate::geometry::{sample_affine, sample_photometric, AffineConfig, PhotometricConfig};
use crate::losses::{
    prepare_sample, symmetrized_total, AblationFlags, LossOptions, LossReport, PreparedSample,
    ViewConfig,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};
use crate::model::params::{apply_stat_updates, Mode, TapeBind};
use crate::model::{ModelConfig, ModelState};
use crate::synth::io::Dataset;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor4D;
use crate::util::{rng_from_seed, rng_restore, rng_state, Rng};
use adamw::AdamW;
use probe::ProbeConfig;
use rand::Rng as _;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Everything a run needs, with defaults at the small scale: batch 8, base
/// learning rate 5e-4 with a 2-epoch linear warmup and cosine decay to zero,
/// decoupled weight decay 0.01, 6 subcrop pairs of area [0.05, 0.3].
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f32,
    pub weight_decay: f32,
    pub warmup_epochs: f32,
    /// Frame-gap range used when generating data (metadata for manifests).
    pub dt_range: (u32, u32),
    pub global_area: (f32, f32),
    pub view: ViewConfig,
    pub flags: AblationFlags,
    /// Samples drawn per visited scene.
    pub repeat_samples: usize,
    pub model: ModelConfig,
    pub scale_range: (f32, f32),
    pub rotation_deg_range: (f32, f32),
    pub photometric: PhotometricConfig,
    pub checkpoint_every: u64,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            total_steps: 2000,
            base_lr: 5e-4,
            weight_decay: 0.01,
            warmup_epochs: 2.0,
            dt_range: (1, 2),
            global_area: (0.16, 0.45),
            view: ViewConfig::default(),
            flags: AblationFlags::default(),
            repeat_samples: 1,
            model: ModelConfig::default(),
            scale_range: (0.9, 1.1),
            rotation_deg_range: (-10.0, 10.0),
            photometric: PhotometricConfig::default(),
            checkpoint_every: 500,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Canonical key=value serialization; the digest of this text guards
    /// checkpoint/config compatibility.
    pub fn canonical_kv(&self) -> String {
        let mut s = String::new();
        let kv = &mut s;
        let _ = writeln!(kv, "seed={}", self.seed);
        let _ = writeln!(kv, "batch_size={}", self.batch_size);
        let _ = writeln!(kv, "total_steps={}", self.total_steps);
        let _ = writeln!(kv, "base_lr={}", self.base_lr);
        let _ = writeln!(kv, "weight_decay={}", self.weight_decay);
        let _ = writeln!(kv, "warmup_epochs={}", self.warmup_epochs);
        let _ = writeln!(kv, "dt_range={}:{}", self.dt_range.0, self.dt_range.1);
        let _ = writeln!(kv, "global_area={}:{}", self.global_area.0, self.global_area.1);
        let _ = writeln!(kv, "view_h={}", self.view.view_h);
        let _ = writeln!(kv, "view_w={}", self.view.view_w);
        let _ = writeln!(kv, "subcrop_h={}", self.view.subcrop_h);
        let _ = writeln!(kv, "subcrop_w={}", self.view.subcrop_w);
        let _ = writeln!(kv, "subcrops={}", self.view.subcrops_per_sample);
        let _ = writeln!(
            kv,
            "subcrop_area={}:{}",
            self.view.subcrop.area_range.0, self.view.subcrop.area_range.1
        );
        let _ = writeln!(
            kv,
            "subcrop_aspect={}:{}",
            self.view.subcrop.aspect_range.0, self.view.subcrop.aspect_range.1
        );
        let _ = writeln!(kv, "subcrop_jitter={}", self.view.subcrop.jitter_frac);
        let _ = writeln!(kv, "subcrop_attempts={}", self.view.subcrop.max_attempts);
        let _ = writeln!(kv, "ablate_dense={}", !self.flags.dense);
        let _ = writeln!(kv, "ablate_pool={}", !self.flags.pool);
        let _ = writeln!(kv, "ablate_topdown={}", !self.flags.top_down);
        let _ = writeln!(kv, "ablate_lateral={}", !self.flags.lateral);
        let _ = writeln!(kv, "repeat_samples={}", self.repeat_samples);
        let _ = writeln!(
            kv,
            "stage_channels={}",
            self.model
                .stage_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(kv, "blocks_per_stage={}", self.model.blocks_per_stage);
        let _ = writeln!(kv, "encoder_bottleneck_div={}", self.model.encoder_bottleneck_div);
        let _ = writeln!(kv, "sdm_blocks={}", self.model.sdm_blocks);
        let _ = writeln!(kv, "sdm_bottleneck_div={}", self.model.sdm_bottleneck_div);
        let _ = writeln!(kv, "head_hidden={}", self.model.head_hidden);
        let _ = writeln!(kv, "projection_dim={}", self.model.projection_dim);
        let _ = writeln!(kv, "ema_base={}", self.model.ema_base);
        let _ = writeln!(kv, "scale_range={}:{}", self.scale_range.0, self.scale_range.1);
        let _ = writeln!(
            kv,
            "rotation_deg={}:{}",
            self.rotation_deg_range.0, self.rotation_deg_range.1
        );
        let _ = writeln!(
            kv,
            "brightness={}:{}",
            self.photometric.brightness_range.0, self.photometric.brightness_range.1
        );
        let _ = writeln!(
            kv,
            "contrast={}:{}",
            self.photometric.contrast_range.0, self.photometric.contrast_range.1
        );
        let _ = writeln!(
            kv,
            "blur_sigma={}:{}",
            self.photometric.blur_sigma_range.0, self.photometric.blur_sigma_range.1
        );
        let _ = writeln!(kv, "checkpoint_every={}", self.checkpoint_every);
        let _ = writeln!(kv, "probe_epochs={}", self.probe.epochs);
        let _ = writeln!(kv, "probe_lr={}", self.probe.lr);
        let _ = writeln!(kv, "probe_train={}", self.probe.train_images);
        let _ = writeln!(kv, "probe_eval={}", self.probe.eval_images);
        let _ = writeln!(kv, "num_classes={}", self.probe.num_classes);
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_kv().as_bytes());
        h.finalize().into()
    }

    /// Applies one `key=value` assignment in the canonical vocabulary.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| {
                Error::Param(format!("cannot parse `{v}` for config key `{key}`"))
            })
        }
        fn pair<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
            let (a, b) = v
                .split_once(':')
                .ok_or_else(|| Error::Param(format!("key `{key}` expects `lo:hi`, got `{v}`")))?;
            Ok((num(key, a)?, num(key, b)?))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "dt_range" => self.dt_range = pair(key, value)?,
            "global_area" => self.global_area = pair(key, value)?,
            "view_h" => self.view.view_h = num(key, value)?,
            "view_w" => self.view.view_w = num(key, value)?,
            "subcrop_h" => self.view.subcrop_h = num(key, value)?,
            "subcrop_w" => self.view.subcrop_w = num(key, value)?,
            "subcrops" => self.view.subcrops_per_sample = num(key, value)?,
            "subcrop_area" => self.view.subcrop.area_range = pair(key, value)?,
            "subcrop_aspect" => self.view.subcrop.aspect_range = pair(key, value)?,
            "subcrop_jitter" => self.view.subcrop.jitter_frac = num(key, value)?,
            "subcrop_attempts" => self.view.subcrop.max_attempts = num(key, value)?,
            "ablate_dense" => self.flags.dense = !num::<bool>(key, value)?,
            "ablate_pool" => self.flags.pool = !num::<bool>(key, value)?,
            "ablate_topdown" => self.flags.top_down = !num::<bool>(key, value)?,
            "ablate_lateral" => self.flags.lateral = !num::<bool>(key, value)?,
            "repeat_samples" => self.repeat_samples = num(key, value)?,
            "stage_channels" => {
                self.model.stage_channels = value
                    .split(',')
                    .map(|v| num("stage_channels", v))
                    .collect::<Result<_>>()?;
            }
            "blocks_per_stage" => self.model.blocks_per_stage = num(key, value)?,
            "encoder_bottleneck_div" => self.model.encoder_bottleneck_div = num(key, value)?,
            "sdm_blocks" => self.model.sdm_blocks = num(key, value)?,
            "sdm_bottleneck_div" => self.model.sdm_bottleneck_div = num(key, value)?,
            "head_hidden" => self.model.head_hidden = num(key, value)?,
            "projection_dim" => self.model.projection_dim = num(key, value)?,
            "ema_base" => self.model.ema_base = num(key, value)?,
            "scale_range" => self.scale_range = pair(key, value)?,
            "rotation_deg" => self.rotation_deg_range = pair(key, value)?,
            "brightness" => self.photometric.brightness_range = pair(key, value)?,
            "contrast" => self.photometric.contrast_range = pair(key, value)?,
            "blur_sigma" => self.photometric.blur_sigma_range = pair(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "probe_epochs" => self.probe.epochs = num(key, value)?,
            "probe_lr" => self.probe.lr = num(key, value)?,
            "probe_train" => self.probe.train_images = num(key, value)?,
            "probe_eval" => self.probe.eval_images = num(key, value)?,
            "num_classes" => self.probe.num_classes = num(key, value)?,
            other => return Err(Error::Param(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a line-oriented key=value config body (`#` starts a comment).
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Param(format!("config line {} is not key=value: `{raw}`", lineno + 1))
            })?;
            self.set_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warmup over `warmup_epochs`, then
    /// cosine decay to zero at `total_steps`.
    pub fn learning_rate(&self, step: u64, steps_per_epoch: u64) -> f32 {
        let warmup = (self.warmup_epochs * steps_per_epoch as f32).round() as u64;
        if warmup > 0 && step < warmup {
            return self.base_lr * step as f32 / warmup as f32;
        }
        let total = self.total_steps.max(warmup + 1);
        let t = (step - warmup) as f32 / (total - warmup) as f32;
        let t = t.clamp(0.0, 1.0);
        self.base_lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

/// One metrics row per training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f32,
    pub momentum: f32,
    pub dense: f32,
    pub pooled: f32,
    pub total: f32,
    pub valid_frac: f32,
    pub occ_frac: f32,
}

pub const METRICS_HEADER: &str = "step,lr,momentum,dense,pooled,total,valid_frac,occ_frac";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.lr, r.momentum, r.dense, r.pooled, r.total, r.valid_frac, r.occ_frac
        );
    }
    s
}

/// Live training state: model, optimizer, RNG stream, step counter.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: ModelState,
    pub opt: AdamW,
    pub rng: Rng,
    pub step: u64,
    /// How many times the subcrop sampler ran (control-flow probe for the
    /// pooled-loss ablation).
    pub subcrop_sampler_calls: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.model.validate()?;
        let mut init_rng = rng_from_seed(cfg.seed);
        let state = ModelState::init(cfg.model.clone(), &mut init_rng)?;
        let opt = AdamW::new(&state.online);
        // The data stream gets its own seed derived from the config seed.
        let rng = rng_from_seed(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(Trainer {
            cfg,
            state,
            opt,
            rng,
            step: 0,
            subcrop_sampler_calls: 0,
        })
    }

    /// Draws and prepares one training batch from the dataset.
    fn prepare_batch(&mut self, dataset: &Dataset) -> Result<Vec<PreparedSample>> {
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        let repeat = self.cfg.repeat_samples.max(1);
        while samples.len() < self.cfg.batch_size {
            let idx = self.rng.gen_range(0..dataset.len());
            let loaded = dataset.load(idx)?;
            for _ in 0..repeat {
                if samples.len() == self.cfg.batch_size {
                    break;
                }
                samples.push(self.prepare_one(&loaded)?);
            }
        }
        Ok(samples)
    }

    fn prepare_one(&mut self, loaded: &crate::synth::io::LoadedSample) -> Result<PreparedSample> {
        let (vh, vw) = (self.cfg.view.view_h, self.cfg.view.view_w);
        let (_, _, fh, fw) = loaded.frame_t.shape();
        let crop = sample_global_crop_pair(&mut self.rng, fh, fw, self.cfg.global_area, vh, vw)?;
        let acfg = AffineConfig {
            scale_range: self.cfg.scale_range,
            rotation_deg_range: self.cfg.rotation_deg_range,
            height: vh,
            width: vw,
        };
        let aug1 = sample_affine(&mut self.rng, &acfg);
        let aug2 = sample_affine(&mut self.rng, &acfg);
        let photo1 = sample_photometric(&mut self.rng, &self.cfg.photometric);
        let photo2 = sample_photometric(&mut self.rng, &self.cfg.photometric);
        if self.cfg.flags.pool {
            self.subcrop_sampler_calls += 1;
        }
        prepare_sample(
            &mut self.rng,
            &loaded.frame_t,
            &loaded.frame_t_plus,
            &loaded.flow_fwd,
            Some(&loaded.flow_bwd),
            &crop,
            aug1,
            aug2,
            &photo1,
            &photo2,
            &self.cfg.view,
            self.cfg.flags.pool,
        )
    }

    /// One optimization step: prepare views, evaluate the symmetrized loss,
    /// backpropagate, update online weights, fold in batch statistics, then
    /// advance the EMA copy.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<(MetricsRow, LossReport)> {
        let steps_per_epoch = (dataset.len() as u64).div_ceil(self.cfg.batch_size as u64);
        let samples = self.prepare_batch(dataset)?;
        let opts = LossOptions {
            flags: self.cfg.flags,
            identity_predictors: false,
            online_mode: Mode::Train,
            track_inputs: false,
            stream_dense: true,
        };
        let mut tape = Tape::new();
        let mut bind = TapeBind::new(&mut tape, &self.state.online, Mode::Train, true);
        let graph = symmetrized_total(
            &mut bind,
            &self.state.offline,
            &self.state.net,
            &samples,
            &opts,
        )?;
        let report = graph.report.clone();
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step as usize,
                detail: format!(
                    "dense={} pooled={} valid_frac={} occ_frac={} pairs={} degenerate={}",
                    report.dense,
                    report.pooled,
                    report.valid_frac,
                    report.occ_frac,
                    report.pairs_used,
                    report.degenerate_dense
                ),
            });
        }
        crate::losses::backward_total(&mut bind, &graph)?;

        let lr = self.cfg.learning_rate(self.step, steps_per_epoch);
        let mut grads: Vec<Option<Tensor4D>> = (0..self.state.online.len())
            .map(|i| bind.grad_of(self.state.online.name(i)).cloned())
            .collect();
        // Streamed head gradients accumulated outside the main tape.
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
        let stat_updates = bind.take_stat_updates();
        drop(bind);
        drop(tape);
        self.opt
            .step(&mut self.state.online, |i| grads[i].clone(), lr, self.cfg.weight_decay);
        apply_stat_updates(&mut self.state.online, stat_updates);
        let momentum = self.state.momentum(self.step, self.cfg.total_steps);
        self.state.ema_update(self.step, self.cfg.total_steps);
        let row = MetricsRow {
            step: self.step,
            lr,
            momentum,
            dense: report.dense,
            pooled: report.pooled,
            total: report.total,
            valid_frac: report.valid_frac,
            occ_frac: report.occ_frac,
        };
        self.step += 1;
        self.state.step = self.step;
        Ok((row, report))
    }

    /// Serializes the complete run state; resuming continues bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (rng_seed, rng_word_pos) = rng_state(&self.rng);
        let mut tensors = Vec::new();
        for (name, _, v) in self.state.online.iter() {
            tensors.push((format!("online/{name}"), v.clone()));
        }
        for (name, _, v) in self.state.offline.iter() {
            tensors.push((format!("offline/{name}"), v.clone()));
        }
        let (m, v) = self.opt.moments();
        for (i, t) in m.iter().enumerate() {
            tensors.push((format!("opt_m/{}", self.state.online.name(i)), t.clone()));
        }
        for (i, t) in v.iter().enumerate() {
            tensors.push((format!("opt_v/{}", self.state.online.name(i)), t.clone()));
        }
        let data = CheckpointData {
            digest: self.cfg.digest(),
            step: self.step,
            total_steps: self.cfg.total_steps,
            rng_seed,
            rng_word_pos,
            tensors,
        };
        save_checkpoint(&data, path)
    }

    /// Restores a trainer from a checkpoint. The checkpoint's digest must
    /// match the provided config.
    pub fn load(cfg: TrainConfig, path: &Path) -> Result<Trainer> {
        let data = load_checkpoint(path)?;
        if data.digest != cfg.digest() {
            return Err(Error::Integrity(format!(
                "checkpoint config digest mismatch for {}",
                path.display()
            )));
        }
        let mut t = Trainer::new(cfg)?;
        t.step = data.step;
        t.state.step = data.step;
        t.opt.t = data.step;
        t.rng = rng_restore(data.rng_seed, data.rng_word_pos);
        let mut seen = 0usize;
        for (name, tensor) in &data.tensors {
            let apply = |ps: &mut crate::model::params::ParamSet, key: &str| -> Result<bool> {
                if let Some(idx) = ps.idx(key) {
                    if ps.value(idx).shape() != tensor.shape() {
                        return Err(Error::Integrity(format!(
                            "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                            tensor.shape(),
                            ps.value(idx).shape()
                        )));
                    }
                    ps.value_mut(idx).data_mut().copy_from_slice(tensor.data());
                    return Ok(true);
                }
                Ok(false)
            };
            let hit = if let Some(key) = name.strip_prefix("online/") {
                apply(&mut t.state.online, key)?
            } else if let Some(key) = name.strip_prefix("offline/") {
                apply(&mut t.state.offline, key)?
            } else if let Some(key) = name.strip_prefix("opt_m/") {
                if let Some(idx) = t.state.online.idx(key) {
                    t.opt.moments_mut().0[idx].data_mut().copy_from_slice(tensor.data());
                    true
                } else {
                    false
                }
            } else if let Some(key) = name.strip_prefix("opt_v/") {
                if let Some(idx) = t.state.online.idx(key) {
                    t.opt.moments_mut().1[idx].data_mut().copy_from_slice(tensor.data());
                    true
                } else {
                    false
                }
            } else {
                false
            };
            if hit {
                seen += 1;
            } else {
                return Err(Error::Integrity(format!(
                    "checkpoint tensor `{name}` does not match any model parameter"
                )));
            }
        }
        let expected = t.state.online.len() * 3 + t.state.offline.len();
        if seen != expected {
            return Err(Error::Integrity(format!(
                "checkpoint holds {seen} tensors, model expects {expected}"
            )));
        }
        Ok(t)
    }
}

/// Runs `steps` training steps, appending one metrics row per step.
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &Dataset,
    steps: u64,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let (row, _) = trainer.train_step(dataset)?;
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::io::generate_dataset;
    use crate::synth::DatasetConfig;

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            seed: 11,
            batch_size: 2,
            total_steps: 50,
            view: ViewConfig {
                view_h: 32,
                view_w: 64,
                subcrop_h: 16,
                subcrop_w: 16,
                subcrops_per_sample: 2,
                ..Default::default()
            },
            model: ModelConfig {
                stage_channels: vec![8, 16],
                head_hidden: 16,
                projection_dim: 8,
                sdm_blocks: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = DatasetConfig {
            scenes: 6,
            canvas_h: 32,
            canvas_w: 64,
            shapes_per_scene: (2, 3),
            area_frac_range: (0.01, 0.2),
            max_speed: 2,
            ..Default::default()
        };
        generate_dataset(&cfg, 3, dir).unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 100,
            ..tiny_train_config()
        };
        // 6 scenes, batch 2 -> 3 steps per epoch -> warmup = 6 steps.
        assert_eq!(cfg.learning_rate(0, 3), 0.0);
        let end_warmup = cfg.learning_rate(6, 3);
        assert!((end_warmup - cfg.base_lr).abs() < 1e-9, "{end_warmup}");
        let late = cfg.learning_rate(99, 3);
        assert!(late < 0.05 * cfg.base_lr);
    }

    #[test]
    fn train_steps_decrease_nothing_but_run_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let run = |steps: u64| -> Vec<MetricsRow> {
            let mut t = Trainer::new(tiny_train_config()).unwrap();
            train_loop(&mut t, &ds, steps, |_| {}).unwrap()
        };
        let a = run(4);
        let b = run(4);
        assert_eq!(a, b, "same seed must give bit-identical metrics");
        assert!(a.iter().all(|r| r.total.is_finite()));
        assert!(a[0].pooled > 0.0);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let cfg = tiny_train_config();

        let mut full = Trainer::new(cfg.clone()).unwrap();
        let full_rows = train_loop(&mut full, &ds, 6, |_| {}).unwrap();

        let mut first = Trainer::new(cfg.clone()).unwrap();
        let _ = train_loop(&mut first, &ds, 3, |_| {}).unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        first.save(&ckpt).unwrap();
        let mut resumed = Trainer::load(cfg.clone(), &ckpt).unwrap();
        let resumed_rows = train_loop(&mut resumed, &ds, 3, |_| {}).unwrap();
        assert_eq!(&full_rows[3..], &resumed_rows[..], "resume must continue bit-exactly");

        // Digest mismatch is an integrity error.
        let mut other = cfg.clone();
        other.base_lr *= 2.0;
        assert!(matches!(
            Trainer::load(other, &ckpt),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn pool_ablation_never_invokes_subcrop_sampler() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let mut cfg = tiny_train_config();
        cfg.flags.pool = false;
        let mut t = Trainer::new(cfg).unwrap();
        let rows = train_loop(&mut t, &ds, 3, |_| {}).unwrap();
        assert_eq!(t.subcrop_sampler_calls, 0);
        assert!(rows.iter().all(|r| r.pooled == 0.0));
    }

    #[test]
    fn config_kv_round_trip_preserves_digest() {
        let mut cfg = tiny_train_config();
        cfg.flags.lateral = false;
        cfg.base_lr = 1e-3;
        let text = cfg.canonical_kv();
        let mut back = TrainConfig::default();
        back.apply_kv_text(&text).unwrap();
        assert_eq!(back.canonical_kv(), text);
        assert_eq!(back.digest(), cfg.digest());
        assert!(!back.flags.lateral);
        let mut bad = TrainConfig::default();
        assert!(bad.apply_kv_text("no_such_key=1\n").is_err());
        assert!(bad.apply_kv_text("gibberish\n").is_err());
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricsRow {
            step: 0,
            lr: 0.0,
            momentum: 0.996,
            dense: 1.5,
            pooled: 0.5,
            total: 2.0,
            valid_frac: 0.9,
            occ_frac: 0.05,
        }];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.next().unwrap(), "0,0,0.996,1.5,0.5,2,0.9,0.05");
    }
}
