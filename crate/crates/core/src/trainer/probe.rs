//! Frozen-feature linear readout for semantic segmentation.
//!
//! A single 1x1 convolution maps the frozen dense feature map to class
//! logits, which are bilinearly upsampled to label resolution and trained
//! with pixelwise cross-entropy. Feature maps are extracted once and cached;
//! only the head is optimized.

use crate::error::{Error, Result};
use crate::losses::AblationFlags;
use crate::model::params::{Mode, ParamKind, ParamSet, TapeBind};
use crate::model::ModelState;
use crate::synth::io::Dataset;
use crate::synth::LabelMap;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor4D;
use crate::util::rng_from_seed;
use rand::Rng as _;

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Class count including background class 0.
    pub num_classes: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            lr: 1e-2,
            batch: 8,
            num_classes: 7,
            train_images: 96,
            eval_images: 48,
            seed: 77,
        }
    }
}

/// Readout quality on the held-out split.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    /// Per-class IoU; `None` where the class is absent from the eval set.
    pub per_class_iou: Vec<Option<f32>>,
    /// Unweighted mean over classes present in the eval set.
    pub miou: f32,
    /// Mean over present foreground classes (id >= 1).
    pub fg_miou: f32,
    pub pixel_acc: f32,
    /// Classes excluded from the mean because no ground-truth pixel exists.
    pub excluded: Vec<usize>,
}

/// IoU/accuracy from a `num_classes x num_classes` confusion matrix indexed
/// `[truth][prediction]`.
pub fn segmentation_metrics(confusion: &[Vec<u64>]) -> ProbeResult {
    let k = confusion.len();
    let mut per_class = vec![None; k];
    let mut excluded = Vec::new();
    let mut correct = 0u64;
    let mut total = 0u64;
    for (t, row) in confusion.iter().enumerate() {
        correct += row[t];
        total += row.iter().sum::<u64>();
    }
    for c in 0..k {
        let gt: u64 = confusion[c].iter().sum();
        if gt == 0 {
            excluded.push(c);
            continue;
        }
        let tp = confusion[c][c];
        let fp: u64 = (0..k).map(|t| confusion[t][c]).sum::<u64>() - tp;
        // union = tp + fn + fp = gt + fp.
        let union = gt + fp;
        per_class[c] = Some(tp as f32 / union as f32);
    }
    let present: Vec<f32> = per_class.iter().flatten().copied().collect();
    let fg: Vec<f32> = per_class
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(_, v)| *v)
        .collect();
    ProbeResult {
        miou: mean(&present),
        fg_miou: mean(&fg),
        pixel_acc: if total == 0 { 0.0 } else { correct as f32 / total as f32 },
        per_class_iou: per_class,
        excluded,
    }
}

fn mean(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f32>() / xs.len() as f32
    }
}

/// Extracts dense features from the frozen online weights in eval mode.
pub fn frozen_features(
    state: &ModelState,
    flags: AblationFlags,
    image: &Tensor4D,
) -> Result<Tensor4D> {
    let mut tape = Tape::new();
    let mut bind = TapeBind::new(&mut tape, &state.online, Mode::Eval, false);
    let x = bind.tape.constant(image.clone());
    let f = state
        .net
        .spatial_features(&mut bind, x, flags.top_down, flags.lateral)?;
    Ok(bind.tape.value(f).clone())
}

/// Labeled image pairs for the probe.
pub type LabeledSet = Vec<(Tensor4D, LabelMap)>;

/// Head/tail split of a dataset into probe train and eval sets; the eval
/// images come from the end of the manifest and never overlap the train set.
pub fn probe_split(dataset: &Dataset, cfg: &ProbeConfig) -> Result<(LabeledSet, LabeledSet)> {
    let total = dataset.len();
    if cfg.train_images + cfg.eval_images > total {
        return Err(Error::Data(format!(
            "probe needs {} train + {} eval images but the dataset has {total}",
            cfg.train_images, cfg.eval_images
        )));
    }
    let mut train = Vec::with_capacity(cfg.train_images);
    for i in 0..cfg.train_images {
        let s = dataset.load(i)?;
        train.push((s.frame_t, s.labels_t));
    }
    let mut eval = Vec::with_capacity(cfg.eval_images);
    for i in total - cfg.eval_images..total {
        let s = dataset.load(i)?;
        eval.push((s.frame_t, s.labels_t));
    }
    Ok((train, eval))
}

/// Trains the linear readout on frozen features and evaluates it.
///
/// `features` maps a `(1, 3, h, w)` image to its frozen feature map; it is
/// called once per image.
pub fn linear_probe(
    features: &dyn Fn(&Tensor4D) -> Result<Tensor4D>,
    train: &LabeledSet,
    eval: &LabeledSet,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("probe needs nonempty train and eval sets".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let train_feats: Vec<Tensor4D> = train
        .iter()
        .map(|(img, _)| features(img))
        .collect::<Result<_>>()?;
    let c = train_feats[0].c();

    // Head: one 1x1 convolution, zero-initialized.
    let mut head = ParamSet::new();
    head.insert(
        "probe.w",
        ParamKind::Weight,
        Tensor4D::zeros(cfg.num_classes, c, 1, 1),
    )?;
    head.insert(
        "probe.b",
        ParamKind::Gain,
        Tensor4D::zeros(1, cfg.num_classes, 1, 1),
    )?;
    let mut opt = super::adamw::AdamW::new(&head);

    let n = train.len();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch) {
            let feats =
                Tensor4D::stack(&chunk.iter().map(|&i| train_feats[i].clone()).collect::<Vec<_>>())?;
            let (lh, lw) = (train[chunk[0]].1.h, train[chunk[0]].1.w);
            let mut targets = Vec::with_capacity(chunk.len() * lh * lw);
            for &i in chunk {
                targets.extend(train[i].1.to_targets());
            }
            let mut tape = Tape::new();
            let mut bind = TapeBind::new(&mut tape, &head, Mode::Train, true);
            let x = bind.tape.constant(feats);
            let w = bind.param("probe.w")?;
            let b = bind.param("probe.b")?;
            let logits = bind.tape.conv2d(x, w, Some(b), 1, 0, 1)?;
            let up = bind.tape.bilinear_resize(logits, lh, lw)?;
            let loss = bind.tape.softmax_ce(up, targets)?;
            bind.tape.backward(loss)?;
            let grads: Vec<Option<Tensor4D>> =
                (0..head.len()).map(|i| bind.grad_of(head.name(i)).cloned()).collect();
            drop(bind);
            drop(tape);
            opt.step(&mut head, |i| grads[i].clone(), cfg.lr, 0.0);
        }
    }

    // Evaluation: argmax prediction at label resolution, confusion matrix.
    let mut confusion = vec![vec![0u64; cfg.num_classes]; cfg.num_classes];
    for (img, labels) in eval {
        let f = features(img)?;
        let logits = predict_logits(&head, &f, labels.h, labels.w)?;
        let k = cfg.num_classes;
        let hw = labels.h * labels.w;
        for p in 0..hw {
            let truth = labels.data[p] as usize;
            if truth >= k {
                continue;
            }
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for ci in 0..k {
                let v = logits.data()[ci * hw + p];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            confusion[truth][best] += 1;
        }
    }
    Ok(segmentation_metrics(&confusion))
}

fn predict_logits(head: &ParamSet, feats: &Tensor4D, lh: usize, lw: usize) -> Result<Tensor4D> {
    let mut tape = Tape::new();
    let mut bind = TapeBind::new(&mut tape, head, Mode::Eval, false);
    let x = bind.tape.constant(feats.clone());
    let w = bind.param("probe.w")?;
    let b = bind.param("probe.b")?;
    let logits = bind.tape.conv2d(x, w, Some(b), 1, 0, 1)?;
    let up = bind.tape.bilinear_resize(logits, lh, lw)?;
    Ok(bind.tape.value(up).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_from_confusion_matrix() {
        // Two classes, perfect prediction.
        let conf = vec![vec![10, 0], vec![0, 5]];
        let r = segmentation_metrics(&conf);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixel_acc, 1.0);
        // All-background prediction with 5 present foreground classes:
        // mIoU = bg IoU / 6.
        let mut conf = vec![vec![0u64; 6]; 6];
        conf[0][0] = 100;
        for c in 1..6 {
            conf[c][0] = 10;
        }
        let r = segmentation_metrics(&conf);
        let bg_iou = 100.0 / 150.0;
        assert!((r.miou - bg_iou / 6.0).abs() < 1e-6);
        assert_eq!(r.fg_miou, 0.0);
        // Absent classes are excluded with a note.
        let conf = vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 0]];
        let r = segmentation_metrics(&conf);
        assert_eq!(r.excluded, vec![2]);
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn one_hot_oracle_features_probe_perfectly() {
        // Features that are the one-hot label map downsampled 4x: the probe
        // is a separable problem and must reach near-perfect mIoU.
        let k = 4usize;
        let mut images = Vec::new();
        let mut rng = rng_from_seed(5);
        for _ in 0..8 {
            let mut labels = LabelMap {
                h: 16,
                w: 16,
                data: vec![0; 256],
            };
            for p in 0..256 {
                labels.data[p] = rng.gen_range(0..k as u8);
            }
            let tag = images.len() as f32;
            images.push((Tensor4D::full(1, 3, 16, 16, tag), labels));
        }
        let feats = move |labels: &LabelMap| -> Tensor4D {
            let mut f = Tensor4D::zeros(1, k, 16, 16);
            for p in 0..256 {
                let cls = labels.data[p] as usize;
                f.data_mut()[cls * 256 + p] = 1.0;
            }
            f
        };
        // Bind labels by pointer equality through an index map.
        let sets: LabeledSet = images.clone();
        let features = |img: &Tensor4D| -> Result<Tensor4D> {
            let idx = sets
                .iter()
                .position(|(i, _)| i == img)
                .expect("image belongs to the set");
            Ok(feats(&sets[idx].1))
        };
        let cfg = ProbeConfig {
            epochs: 120,
            lr: 2e-2,
            num_classes: k,
            train_images: 8,
            eval_images: 8,
            ..Default::default()
        };
        let r = linear_probe(&features, &images, &images, &cfg).unwrap();
        assert!(r.miou > 0.99, "mIoU {}", r.miou);
        assert!(r.pixel_acc > 0.99);
    }

    #[test]
    fn probe_is_deterministic() {
        let mut rng = rng_from_seed(9);
        let mut set: LabeledSet = Vec::new();
        for _ in 0..4 {
            let img = Tensor4D::rand_uniform(&mut rng, 1, 3, 16, 16, 0.0, 1.0);
            let mut labels = LabelMap {
                h: 16,
                w: 16,
                data: vec![0; 256],
            };
            for p in 0..256 {
                labels.data[p] = rng.gen_range(0..3);
            }
            set.push((img, labels));
        }
        let features = |img: &Tensor4D| -> Result<Tensor4D> {
            crate::tensor::kernels::bilinear_resize_fwd(img, 4, 4)
        };
        let cfg = ProbeConfig {
            epochs: 3,
            num_classes: 3,
            train_images: 4,
            eval_images: 4,
            ..Default::default()
        };
        let a = linear_probe(&features, &set, &set, &cfg).unwrap();
        let b = linear_probe(&features, &set, &set, &cfg).unwrap();
        assert_eq!(a.miou, b.miou);
        assert_eq!(a.per_class_iou, b.per_class_iou);
    }
}
