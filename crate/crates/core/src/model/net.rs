//! Network layers and the staged encoder / spatial decoder / head stack.
//!
//! Layers store parameter names plus call-time attributes; the same layer
//! definitions run against the online or the offline parameter set through a
//! [`TapeBind`]. All components are always registered, so ablated variants
//! share initialization with the full model; ablation only changes which
//! parameters the forward pass touches.

use super::params::{Mode, ParamKind, ParamSet, TapeBind};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::tape::VId;
use crate::tensor::Tensor4D;
use crate::util::Rng;

#[derive(Clone, Debug)]
struct Conv {
    w: String,
    b: Option<String>,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl Conv {
    fn forward(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        self.forward_dilated(bind, x, self.dilation, self.pad)
    }

    /// Same weights, caller-chosen dilation (used by the dilated trunk).
    fn forward_dilated(&self, bind: &mut TapeBind, x: VId, dilation: usize, pad: usize) -> Result<VId> {
        let w = bind.param(&self.w)?;
        let b = match &self.b {
            Some(name) => Some(bind.param(name)?),
            None => None,
        };
        bind.tape.conv2d(x, w, b, self.stride, pad, dilation)
    }
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: String,
    beta: String,
    r_mean: String,
    r_var: String,
}

impl Bn {
    fn forward(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        let gamma = bind.param(&self.gamma)?;
        let beta = bind.param(&self.beta)?;
        match bind.mode {
            Mode::Train => {
                let (y, mean, var) = bind.tape.batch_norm_train(x, gamma, beta)?;
                bind.queue_stat_update(&self.r_mean, &mean)?;
                bind.queue_stat_update(&self.r_var, &var)?;
                Ok(y)
            }
            Mode::Eval => {
                let rm = bind.buffer(&self.r_mean)?.data().to_vec();
                let rv = bind.buffer(&self.r_var)?.data().to_vec();
                bind.tape.batch_norm_eval(x, gamma, beta, &rm, &rv)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct LnC {
    gamma: String,
    beta: String,
}

impl LnC {
    fn forward(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        let gamma = bind.param(&self.gamma)?;
        let beta = bind.param(&self.beta)?;
        Ok(bind.tape.layer_norm_c(x, gamma, beta))
    }
}

#[derive(Clone, Debug)]
struct LinearLayer {
    w: String,
    b: String,
}

impl LinearLayer {
    fn forward(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        let w = bind.param(&self.w)?;
        let b = bind.param(&self.b)?;
        bind.tape.linear(x, w, Some(b))
    }
}

/// 1x1 down, 3x3, 1x1 up, plus identity residual.
#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    conv3: Conv,
    bn3: Bn,
}

impl Bottleneck {
    fn forward(&self, bind: &mut TapeBind, x: VId, dilation: usize) -> Result<VId> {
        let h = self.conv1.forward(bind, x)?;
        let h = self.bn1.forward(bind, h)?;
        let h = bind.tape.relu(h);
        let h = self.conv2.forward_dilated(bind, h, dilation, dilation)?;
        let h = self.bn2.forward(bind, h)?;
        let h = bind.tape.relu(h);
        let h = self.conv3.forward(bind, h)?;
        let h = self.bn3.forward(bind, h)?;
        let y = bind.tape.add(h, x)?;
        Ok(bind.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv,
    bn: Bn,
    blocks: Vec<Bottleneck>,
}

/// Two-layer 1x1-convolutional MLP with per-location channel norm between.
#[derive(Clone, Debug)]
pub struct ConvMlp {
    conv1: Conv,
    ln: LnC,
    conv2: Conv,
}

impl ConvMlp {
    pub fn forward(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        let h = self.conv1.forward(bind, x)?;
        let h = self.ln.forward(bind, h)?;
        let h = bind.tape.relu(h);
        self.conv2.forward(bind, h)
    }
}

/// Two-layer linear MLP over `(n, c, 1, 1)` vectors, channel norm between.
#[derive(Clone, Debug)]
pub struct LinMlp {
    fc1: LinearLayer,
    ln: LnC,
    fc2: LinearLayer,
}

impl LinMlp {
    pub fn forward(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        let h = self.fc1.forward(bind, x)?;
        let h = self.ln.forward(bind, h)?;
        let h = bind.tape.relu(h);
        self.fc2.forward(bind, h)
    }
}

#[derive(Clone, Debug)]
struct SdmBlock {
    g: Bottleneck,
    lateral: Conv,
}

/// Registers parameters while building layers.
struct Builder<'a> {
    ps: &'a mut ParamSet,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Conv> {
        let fan_in = (cin * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor4D::rand_uniform(self.rng, cout, cin, k, k, -bound, bound);
        let wname = format!("{name}.w");
        self.ps.insert(&wname, ParamKind::Weight, w)?;
        let b = if bias {
            let bname = format!("{name}.b");
            self.ps.insert(&bname, ParamKind::Gain, Tensor4D::zeros(1, cout, 1, 1))?;
            Some(bname)
        } else {
            None
        };
        Ok(Conv {
            w: wname,
            b,
            stride,
            pad,
            dilation,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Bn> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let r_mean = format!("{name}.running_mean");
        let r_var = format!("{name}.running_var");
        self.ps.insert(&gamma, ParamKind::Gain, Tensor4D::full(1, c, 1, 1, 1.0))?;
        self.ps.insert(&beta, ParamKind::Gain, Tensor4D::zeros(1, c, 1, 1))?;
        self.ps.insert(&r_mean, ParamKind::Buffer, Tensor4D::zeros(1, c, 1, 1))?;
        self.ps.insert(&r_var, ParamKind::Buffer, Tensor4D::full(1, c, 1, 1, 1.0))?;
        Ok(Bn {
            gamma,
            beta,
            r_mean,
            r_var,
        })
    }

    fn ln(&mut self, name: &str, c: usize) -> Result<LnC> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        self.ps.insert(&gamma, ParamKind::Gain, Tensor4D::full(1, c, 1, 1, 1.0))?;
        self.ps.insert(&beta, ParamKind::Gain, Tensor4D::zeros(1, c, 1, 1))?;
        Ok(LnC { gamma, beta })
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<LinearLayer> {
        let bound = (6.0 / cin as f32).sqrt();
        let w = Tensor4D::rand_uniform(self.rng, cout, cin, 1, 1, -bound, bound);
        let wname = format!("{name}.w");
        let bname = format!("{name}.b");
        self.ps.insert(&wname, ParamKind::Weight, w)?;
        self.ps.insert(&bname, ParamKind::Gain, Tensor4D::zeros(1, cout, 1, 1))?;
        Ok(LinearLayer { w: wname, b: bname })
    }

    fn bottleneck(&mut self, name: &str, c: usize, div: usize) -> Result<Bottleneck> {
        let mid = (c / div).max(1);
        Ok(Bottleneck {
            conv1: self.conv(&format!("{name}.conv1"), c, mid, 1, 1, 0, 1, false)?,
            bn1: self.bn(&format!("{name}.bn1"), mid)?,
            conv2: self.conv(&format!("{name}.conv2"), mid, mid, 3, 1, 1, 1, false)?,
            bn2: self.bn(&format!("{name}.bn2"), mid)?,
            conv3: self.conv(&format!("{name}.conv3"), mid, c, 1, 1, 0, 1, false)?,
            bn3: self.bn(&format!("{name}.bn3"), c)?,
        })
    }

    fn conv_mlp(&mut self, name: &str, cin: usize, hidden: usize, cout: usize) -> Result<ConvMlp> {
        Ok(ConvMlp {
            conv1: self.conv(&format!("{name}.conv1"), cin, hidden, 1, 1, 0, 1, true)?,
            ln: self.ln(&format!("{name}.ln"), hidden)?,
            conv2: self.conv(&format!("{name}.conv2"), hidden, cout, 1, 1, 0, 1, true)?,
        })
    }
}

/// The full layer stack. Construction registers every parameter into a fresh
/// [`ParamSet`] in a fixed order.
#[derive(Clone, Debug)]
pub struct Net {
    stages: Vec<Stage>,
    sdm_blocks: Vec<SdmBlock>,
    dense_proj: ConvMlp,
    dense_pred: ConvMlp,
    pool_proj: LinMlp,
    pool_pred: LinMlp,
    stage_channels: Vec<usize>,
}

/// Prefix of predictor parameters; these exist only in the online set.
pub const PREDICTOR_PREFIXES: [&str; 2] = ["dense_pred.", "pool_pred."];

impl Net {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<(Net, ParamSet)> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut b = Builder { ps: &mut ps, rng };
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for (si, &ch) in cfg.stage_channels.iter().enumerate() {
            let down = b.conv(&format!("enc.stage{si}.down"), cin, ch, 3, 2, 1, 1, false)?;
            let bn = b.bn(&format!("enc.stage{si}.bn"), ch)?;
            let blocks = (0..cfg.blocks_per_stage)
                .map(|bi| b.bottleneck(&format!("enc.stage{si}.block{bi}"), ch, cfg.encoder_bottleneck_div))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, bn, blocks });
            cin = ch;
        }
        let top = *cfg.stage_channels.last().expect("config validated");
        let n_stages = cfg.stage_channels.len();
        // Decoder block l takes its lateral from the stage whose resolution
        // matches the upsampled map: block 0 from stage n-2, block 1 from n-3.
        let mut sdm_blocks = Vec::new();
        for bi in 0..cfg.sdm_blocks {
            let src_stage = n_stages - 2 - bi;
            let src_ch = cfg.stage_channels[src_stage];
            sdm_blocks.push(SdmBlock {
                g: b.bottleneck(&format!("sdm.block{bi}.g"), top, cfg.sdm_bottleneck_div)?,
                lateral: b.conv(&format!("sdm.block{bi}.lateral"), src_ch, top, 1, 1, 0, 1, true)?,
            });
        }
        let dense_proj = b.conv_mlp("dense_proj", top, cfg.head_hidden, cfg.projection_dim)?;
        let dense_pred = b.conv_mlp(
            "dense_pred",
            cfg.projection_dim,
            cfg.head_hidden,
            cfg.projection_dim,
        )?;
        let pool_proj = LinMlp {
            fc1: b.linear("pool_proj.fc1", top, cfg.head_hidden)?,
            ln: b.ln("pool_proj.ln", cfg.head_hidden)?,
            fc2: b.linear("pool_proj.fc2", cfg.head_hidden, cfg.projection_dim)?,
        };
        let pool_pred = LinMlp {
            fc1: b.linear("pool_pred.fc1", cfg.projection_dim, cfg.head_hidden)?,
            ln: b.ln("pool_pred.ln", cfg.head_hidden)?,
            fc2: b.linear("pool_pred.fc2", cfg.head_hidden, cfg.projection_dim)?,
        };
        Ok((
            Net {
                stages,
                sdm_blocks,
                dense_proj,
                dense_pred,
                pool_proj,
                pool_pred,
                stage_channels: cfg.stage_channels.clone(),
            },
            ps,
        ))
    }

    pub fn total_downsampling(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn top_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    /// Staged feature pyramid: `z[l]` has spatial dims `h / 2^(l+1)`.
    pub fn encode(&self, bind: &mut TapeBind, image: VId) -> Result<Vec<VId>> {
        let (_, c, h, w) = bind.tape.value(image).shape();
        if c != 3 {
            return Err(Error::Dim {
                axis: "c",
                expected: 3,
                got: c,
            });
        }
        let down = self.total_downsampling();
        if h % down != 0 {
            return Err(Error::Dim {
                axis: "h",
                expected: (h / down.max(1)).max(1) * down,
                got: h,
            });
        }
        if w % down != 0 {
            return Err(Error::Dim {
                axis: "w",
                expected: (w / down.max(1)).max(1) * down,
                got: w,
            });
        }
        let mut pyramid = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for stage in &self.stages {
            let y = stage.down.forward(bind, x)?;
            let y = stage.bn.forward(bind, y)?;
            let mut y = bind.tape.relu(y);
            for block in &stage.blocks {
                y = block.forward(bind, y, 1)?;
            }
            pyramid.push(y);
            x = y;
        }
        Ok(pyramid)
    }

    /// Dilated trunk: the last two stages keep resolution with dilations 2
    /// and 4, so every pyramid level from stage 1 onward sits at 1/4 input
    /// resolution.
    fn encode_dilated(&self, bind: &mut TapeBind, image: VId) -> Result<Vec<VId>> {
        let n = self.stages.len();
        let mut pyramid = Vec::with_capacity(n);
        let mut x = image;
        for (si, stage) in self.stages.iter().enumerate() {
            // Stages 0..n-2 downsample; the final two hold at 1/4.
            let dilated = si + 2 >= n && si >= 2;
            let y = if dilated {
                let dil = if si + 2 == n { 2 } else { 4 };
                let w = bind.param(&stage.down.w)?;
                bind.tape.conv2d(x, w, None, 1, dil, dil)?
            } else {
                stage.down.forward(bind, x)?
            };
            let y = stage.bn.forward(bind, y)?;
            let mut y = bind.tape.relu(y);
            let dil = if si + 2 == n && si >= 2 {
                2
            } else if si + 1 == n && si >= 2 {
                4
            } else {
                1
            };
            for block in &stage.blocks {
                y = block.forward(bind, y, dil)?;
            }
            pyramid.push(y);
            x = y;
        }
        Ok(pyramid)
    }

    /// Decoder block: upsample 2x, bottleneck, plus 1x1 lateral from the
    /// matching encoder stage.
    fn sdm_forward_from(
        &self,
        bind: &mut TapeBind,
        pyramid: &[VId],
        use_lateral: bool,
    ) -> Result<VId> {
        let n = pyramid.len();
        if n < self.sdm_blocks.len() + 1 {
            return Err(Error::Shape(format!(
                "pyramid has {n} levels but the decoder needs {}",
                self.sdm_blocks.len() + 1
            )));
        }
        let mut y = pyramid[n - 1];
        for (bi, block) in self.sdm_blocks.iter().enumerate() {
            let (_, _, h, w) = bind.tape.value(y).shape();
            let up = bind.tape.bilinear_resize(y, h * 2, w * 2)?;
            let g = block.g.forward(bind, up, 1)?;
            y = if use_lateral {
                let lat = block.lateral.forward(bind, pyramid[n - 2 - bi])?;
                bind.tape.add(g, lat)?
            } else {
                g
            };
        }
        Ok(y)
    }

    /// Dense trunk output at 1/4 input resolution, honoring the
    /// top-down/lateral ablation flags.
    pub fn spatial_features(
        &self,
        bind: &mut TapeBind,
        image: VId,
        use_top_down: bool,
        use_lateral: bool,
    ) -> Result<VId> {
        if use_top_down {
            let pyramid = self.encode(bind, image)?;
            self.sdm_forward_from(bind, &pyramid, use_lateral)
        } else {
            let pyramid = self.encode_dilated(bind, image)?;
            let n = pyramid.len();
            let mut y = pyramid[n - 1];
            if use_lateral {
                // Same lateral weights as the decoder; with the dilated trunk
                // all source maps already share the 1/4 resolution.
                for (bi, block) in self.sdm_blocks.iter().enumerate() {
                    let lat = block.lateral.forward(bind, pyramid[n - 2 - bi])?;
                    y = bind.tape.add(y, lat)?;
                }
            }
            Ok(y)
        }
    }

    /// Decoder output from a precomputed pyramid (full SDM path).
    pub fn sdm_forward(&self, bind: &mut TapeBind, pyramid: &[VId]) -> Result<VId> {
        self.sdm_forward_from(bind, pyramid, true)
    }

    pub fn project_dense(&self, bind: &mut TapeBind, feats: VId) -> Result<VId> {
        self.dense_proj.forward(bind, feats)
    }

    pub fn predict_dense(&self, bind: &mut TapeBind, x: VId) -> Result<VId> {
        self.dense_pred.forward(bind, x)
    }

    pub fn project_pool(&self, bind: &mut TapeBind, vec: VId) -> Result<VId> {
        self.pool_proj.forward(bind, vec)
    }

    pub fn predict_pool(&self, bind: &mut TapeBind, vec: VId) -> Result<VId> {
        self.pool_pred.forward(bind, vec)
    }
}
