//! Component ablation grid: trains one model per flag configuration over
//! shared seed and data, then probes each with the frozen-feature readout.

use super::probe::{linear_probe, probe_split, LabeledSet, ProbeResult};
use super::{train_loop, TrainConfig, Trainer};
use crate::error::Result;
use crate::losses::AblationFlags;
use crate::synth::io::Dataset;
use std::fmt::Write as _;

/// The standard grid: dense only, dense+pool, adding only the top-down
/// decoder, adding only lateral connections, and the full configuration.
pub fn default_rows() -> Vec<(String, AblationFlags)> {
    let f = |dense, pool, top_down, lateral| AblationFlags {
        dense,
        pool,
        top_down,
        lateral,
    };
    vec![
        ("dense_only".into(), f(true, false, false, false)),
        ("dense_pool".into(), f(true, true, false, false)),
        ("dense_pool_topdown".into(), f(true, true, true, false)),
        ("dense_pool_lateral".into(), f(true, true, false, true)),
        ("full".into(), f(true, true, true, true)),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub name: String,
    pub flags: AblationFlags,
    pub probe: ProbeResult,
    pub final_total_loss: f32,
}

/// Trains and probes one configuration.
pub fn run_one(
    base: &TrainConfig,
    name: &str,
    flags: AblationFlags,
    dataset: &Dataset,
    probe_train: &LabeledSet,
    probe_eval: &LabeledSet,
    mut on_step: impl FnMut(u64),
) -> Result<AblationOutcome> {
    let mut cfg = base.clone();
    cfg.flags = flags;
    let mut trainer = Trainer::new(cfg.clone())?;
    let rows = train_loop(&mut trainer, dataset, cfg.total_steps, |r| on_step(r.step))?;
    let features = |img: &crate::tensor::Tensor4D| {
        super::probe::frozen_features(&trainer.state, flags, img)
    };
    let probe = linear_probe(&features, probe_train, probe_eval, &cfg.probe)?;
    Ok(AblationOutcome {
        name: name.to_string(),
        flags,
        probe,
        final_total_loss: rows.last().map(|r| r.total).unwrap_or(f32::NAN),
    })
}

/// Runs every row with the shared seed and data.
pub fn run_ablation_grid(
    base: &TrainConfig,
    rows: &[(String, AblationFlags)],
    dataset: &Dataset,
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationOutcome>> {
    let (probe_train, probe_eval) = probe_split(dataset, &base.probe)?;
    rows.iter()
        .map(|(name, flags)| {
            run_one(base, name, *flags, dataset, &probe_train, &probe_eval, |s| {
                progress(name, s)
            })
        })
        .collect()
}

/// One CSV row per configuration: flags, mIoU, accuracy, per-class IoU.
pub fn grid_to_csv(outcomes: &[AblationOutcome]) -> String {
    let num_classes = outcomes
        .first()
        .map(|o| o.probe.per_class_iou.len())
        .unwrap_or(0);
    let mut s = String::from("variant,dense,pool,top_down,lateral,miou,fg_miou,acc");
    for c in 0..num_classes {
        let _ = write!(s, ",iou_class{c}");
    }
    s.push('\n');
    for o in outcomes {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            o.name,
            o.flags.dense as u8,
            o.flags.pool as u8,
            o.flags.top_down as u8,
            o.flags.lateral as u8,
            o.probe.miou,
            o.probe.fg_miou,
            o.probe.pixel_acc
        );
        for iou in &o.probe.per_class_iou {
            match iou {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => {
                    let _ = write!(s, ",NA");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rows_cover_the_table() {
        let rows = default_rows();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].1, AblationFlags {
            dense: true,
            pool: false,
            top_down: false,
            lateral: false
        });
        let full = &rows[4].1;
        assert!(full.dense && full.pool && full.top_down && full.lateral);
    }

    #[test]
    fn csv_contains_na_for_absent_classes() {
        let outcome = AblationOutcome {
            name: "full".into(),
            flags: AblationFlags::default(),
            probe: ProbeResult {
                per_class_iou: vec![Some(0.5), None],
                miou: 0.5,
                fg_miou: 0.0,
                pixel_acc: 0.9,
                excluded: vec![1],
            },
            final_total_loss: 1.0,
        };
        let csv = grid_to_csv(&[outcome]);
        assert!(csv.contains("full,1,1,1,1,0.5,0,0.9,0.5,NA"));
    }
}
