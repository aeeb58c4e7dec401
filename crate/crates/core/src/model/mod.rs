//! Model state: a staged convolutional encoder, a two-block spatial decoder
//! with lateral connections, dense and pooled projector/predictor heads, and
//! an exponential-moving-average copy serving as the prediction target.

pub mod checkpoint;
pub mod net;
pub mod params;

use crate::error::{Error, Result};
use crate::util::Rng;
use net::{Net, PREDICTOR_PREFIXES};
use params::{ParamKind, ParamSet};

/// Architecture knobs. Defaults give the small configuration: stage widths
/// 16/32/64/128 (16x total downsampling), a two-block decoder restoring 1/4
/// resolution, and 64-hidden / 32-dim heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub encoder_bottleneck_div: usize,
    pub sdm_blocks: usize,
    pub sdm_bottleneck_div: usize,
    pub head_hidden: usize,
    pub projection_dim: usize,
    /// EMA momentum at step 0; the schedule closes to 1 over training.
    pub ema_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            encoder_bottleneck_div: 4,
            sdm_blocks: 2,
            sdm_bottleneck_div: 8,
            head_hidden: 64,
            projection_dim: 32,
            ema_base: 0.996,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Param("encoder needs at least one stage".into()));
        }
        if self.sdm_blocks + 1 > self.stage_channels.len() {
            return Err(Error::Param(format!(
                "{} decoder blocks need at least {} encoder stages",
                self.sdm_blocks,
                self.sdm_blocks + 1
            )));
        }
        if self.projection_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Param("head dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_base) {
            return Err(Error::Param(format!(
                "ema_base must be in [0, 1), got {}",
                self.ema_base
            )));
        }
        Ok(())
    }

    /// Total encoder downsampling factor (2 per stage).
    pub fn downsampling(&self) -> usize {
        1 << self.stage_channels.len()
    }
}

/// Online parameters, their EMA copy, and the step counter.
///
/// The offline set holds every shared submodule (encoder, decoder, both
/// projectors) but no predictors; the optimizer never touches it.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub net: Net,
    pub online: ParamSet,
    pub offline: ParamSet,
    pub step: u64,
}

impl ModelState {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<ModelState> {
        let (net, online) = Net::init(&config, rng)?;
        let offline = online.filtered(|name| !PREDICTOR_PREFIXES.iter().any(|p| name.starts_with(p)));
        Ok(ModelState {
            config,
            net,
            online,
            offline,
            step: 0,
        })
    }

    /// Momentum at `step` of `total_steps`: starts at `ema_base`, closes to 1
    /// along a half-cosine.
    pub fn momentum(&self, step: u64, total_steps: u64) -> f32 {
        let m0 = self.config.ema_base;
        if total_steps == 0 {
            return m0;
        }
        let t = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
        let window = ((std::f64::consts::PI * t).cos() + 1.0) / 2.0;
        1.0 - (1.0 - m0) * window as f32
    }

    /// `offline <- m * offline + (1 - m) * online` for shared weights;
    /// running statistics are copied outright so the offline branch
    /// normalizes with the online estimates.
    pub fn ema_update(&mut self, step: u64, total_steps: u64) {
        let m = self.momentum(step, total_steps);
        for idx in 0..self.offline.len() {
            let name = self.offline.name(idx).to_string();
            let src = self
                .online
                .get(&name)
                .expect("offline names are a subset of online names")
                .clone();
            let kind = self.offline.kind(idx);
            let dst = self.offline.value_mut(idx);
            match kind {
                ParamKind::Buffer => dst.data_mut().copy_from_slice(src.data()),
                _ => {
                    // Delta form keeps xi == theta an exact fixed point.
                    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                        *d += (1.0 - m) * (s - *d);
                    }
                }
            }
        }
    }

    /// Copies online weights into the offline set verbatim (tied start).
    pub fn tie_offline_to_online(&mut self) {
        for idx in 0..self.offline.len() {
            let name = self.offline.name(idx).to_string();
            let src = self.online.get(&name).unwrap().clone();
            self.offline.value_mut(idx).data_mut().copy_from_slice(src.data());
        }
    }
}
