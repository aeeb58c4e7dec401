//! Command-line front end tying together dataset generation, training,
//! frozen-feature probing, subcrop analysis, and the invariant suites.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/checkpoint integrity error,
//! 4 invariant failure.

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use poodle::analysis::{
    analysis_rows_to_csv, class_shift_analysis, class_shift_to_csv, empirical_subcrop_sim,
    toy_subcrop_sim, EmpiricalConfig,
};
use poodle::synth::io::{generate_dataset, load_pgm, Dataset};
use poodle::synth::{DatasetConfig, LabelMap};
use poodle::trainer::probe::{frozen_features, linear_probe, probe_split};
use poodle::trainer::{TrainConfig, Trainer, METRICS_HEADER};
use poodle::util::{init_parallelism, rng_from_seed};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod verify;

#[derive(Parser)]
#[command(name = "poodle", version, about = "Pooled and dense self-supervised learning on synthetic video")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset (frames, flows, labels, manifest).
    GenData(GenDataArgs),
    /// Train on a generated dataset.
    Train(TrainArgs),
    /// Linear readout of a checkpoint's frozen features.
    Probe(ProbeArgs),
    /// Subcrop statistics.
    Analyze(AnalyzeArgs),
    /// Run invariant suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of scenes to render.
    #[arg(long, default_value_t = 512)]
    scenes: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Canvas size as HxW.
    #[arg(long, default_value = "128x256")]
    canvas: String,
    /// Frame gap range as LO:HI.
    #[arg(long, default_value = "1:2")]
    dt_range: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (must contain manifest.tsv).
    #[arg(long)]
    data: PathBuf,
    /// key=value config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics, checkpoints and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Disable a component (repeatable).
    #[arg(long, value_enum)]
    ablate: Vec<Ablate>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Resume from a checkpoint written by an identical config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablate {
    Dense,
    Pool,
    Topdown,
    Lateral,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config/manifest the checkpoint was trained with; defaults to
    /// manifest.txt next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    which: AnalyzeCmd,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Exhaustive circle-vs-subcrop integration.
    Toy {
        /// Circle radii in pixels (comma-separated).
        #[arg(long, default_value = "10,20,40,80")]
        radii: String,
        /// Subcrop areas as fractions (comma-separated).
        #[arg(long, default_value = "0.02,0.04,0.06,0.08")]
        areas: String,
        #[arg(long, default_value_t = 0.05)]
        threshold: f32,
        /// Frame size as HxW.
        #[arg(long, default_value = "256x512")]
        frame: String,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo simulation over a labeled dataset's PGM maps.
    Empirical {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 512)]
        subcrops: usize,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value = "0.02:0.03")]
        subcrop_area: String,
        #[arg(long, default_value = "0.16:0.45")]
        global_area: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-frequency shift under majority-class subcrop labeling.
    ClassShift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        fg_threshold: f32,
        #[arg(long, default_value_t = 512)]
        subcrops: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grad,
    Warp,
    Ema,
    All,
}

fn parse_dims(s: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .with_context(|| format!("expected HxW, got `{s}`"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> anyhow::Result<(T, T)>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    let (a, b) = s
        .split_once(':')
        .with_context(|| format!("expected LO:HI, got `{s}`"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(|v| v.trim().parse().map_err(anyhow::Error::from))
        .collect()
}

fn exit_for(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<poodle::Error>() {
        return match e {
            poodle::Error::Param(_) | poodle::Error::Dim { .. } | poodle::Error::Shape(_) => 2,
            poodle::Error::Format { .. }
            | poodle::Error::Data(_)
            | poodle::Error::Integrity(_) => 3,
            poodle::Error::NonFinite { .. } => 4,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_parallelism();
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Verify(a) => match verify::run(a.suite) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("verification failed");
                return ExitCode::from(4);
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let (h, w) = parse_dims(&a.canvas)?;
    let dt = parse_pair::<u32>(&a.dt_range)?;
    let cfg = DatasetConfig {
        scenes: a.scenes,
        canvas_h: h,
        canvas_w: w,
        dt_range: dt,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg, a.seed, &a.out)
        .with_context(|| format!("generating dataset under {}", a.out.display()))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# dataset manifest");
    let _ = writeln!(manifest, "# build={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "scenes={}", a.scenes);
    let _ = writeln!(manifest, "canvas={h}x{w}");
    let _ = writeln!(manifest, "dt_range={}:{}", dt.0, dt.1);
    let _ = writeln!(manifest, "seed={}", a.seed);
    fs::write(a.out.join("dataset.txt"), manifest)?;
    println!("wrote {} samples under {}", ds.len(), a.out.display());
    Ok(())
}

fn resolved_train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv_text(&text)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.total_steps = steps;
    }
    if let Some(batch) = a.batch {
        cfg.batch_size = batch;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    for ab in &a.ablate {
        match ab {
            Ablate::Dense => cfg.flags.dense = false,
            Ablate::Pool => cfg.flags.pool = false,
            Ablate::Topdown => cfg.flags.top_down = false,
            Ablate::Lateral => cfg.flags.lateral = false,
        }
    }
    Ok(cfg)
}

fn write_run_manifest(cfg: &TrainConfig, out: &Path, data: &Path) -> anyhow::Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# run manifest: re-running `poodle train --config` on this file");
    let _ = writeln!(s, "# with the same dataset reproduces the outputs bit-exactly");
    let _ = writeln!(s, "# build={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# data={}", data.display());
    let _ = writeln!(s, "# outputs=metrics.csv,final.ckpt,manifest.txt");
    s.push_str(&cfg.canonical_kv());
    fs::write(out.join("manifest.txt"), s)?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolved_train_config(&a)?;
    let dataset = Dataset::open(&a.data)?;
    fs::create_dir_all(&a.out)?;
    write_run_manifest(&cfg, &a.out, &a.data)?;

    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::load(cfg.clone(), ckpt)?,
        None => Trainer::new(cfg.clone())?,
    };
    let remaining = cfg.total_steps.saturating_sub(trainer.step);
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let every = cfg.checkpoint_every.max(1);
    let mut last_print = std::time::Instant::now();
    for _ in 0..remaining {
        let (row, _) = trainer.train_step(&dataset)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.step, row.lr, row.momentum, row.dense, row.pooled, row.total, row.valid_frac, row.occ_frac
        );
        if trainer.step % every == 0 && trainer.step < cfg.total_steps {
            trainer.save(&a.out.join(format!("step_{:06}.ckpt", trainer.step)))?;
        }
        if last_print.elapsed().as_secs() >= 10 {
            eprintln!(
                "step {}/{} total={:.4} dense={:.4} pooled={:.4}",
                row.step, cfg.total_steps, row.total, row.dense, row.pooled
            );
            last_print = std::time::Instant::now();
        }
    }
    fs::write(a.out.join("metrics.csv"), csv)?;
    trainer.save(&a.out.join("final.ckpt"))?;
    println!(
        "trained {} steps; outputs under {}",
        trainer.step,
        a.out.display()
    );
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> anyhow::Result<()> {
    let config_path = a.config.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .map(|d| d.join("manifest.txt"))
            .unwrap_or_else(|| PathBuf::from("manifest.txt"))
    });
    let mut cfg = TrainConfig::default();
    let text = fs::read_to_string(&config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    cfg.apply_kv_text(&text)?;
    let trainer = Trainer::load(cfg.clone(), &a.checkpoint)?;
    let dataset = Dataset::open(&a.data)?;
    let (train_set, eval_set) = probe_split(&dataset, &cfg.probe)?;
    let features =
        |img: &poodle::Tensor4D| frozen_features(&trainer.state, cfg.flags, img);
    let result = linear_probe(&features, &train_set, &eval_set, &cfg.probe)?;
    let tag = if trainer.step == 0 { "scratch" } else { "trained" };
    let mut csv = String::from("tag,miou,fg_miou,acc");
    for c in 0..result.per_class_iou.len() {
        let _ = write!(csv, ",iou_class{c}");
    }
    csv.push('\n');
    let _ = write!(csv, "{tag},{},{},{}", result.miou, result.fg_miou, result.pixel_acc);
    for iou in &result.per_class_iou {
        match iou {
            Some(v) => {
                let _ = write!(csv, ",{v}");
            }
            None => {
                let _ = write!(csv, ",NA");
            }
        }
    }
    csv.push('\n');
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&a.out, &csv)?;
    println!("{csv}");
    Ok(())
}

fn load_label_maps(data: &Path) -> anyhow::Result<Vec<LabelMap>> {
    let ds = Dataset::open(data)?;
    let maps = (0..ds.len())
        .map(|i| {
            let entry = &ds.entries[i];
            load_pgm(&ds.root.join(&entry.labels)).map_err(anyhow::Error::from)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(maps)
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(p, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    match a.which {
        AnalyzeCmd::Toy {
            radii,
            areas,
            threshold,
            frame,
            out,
        } => {
            let radii: Vec<f32> = parse_list(&radii)?;
            let areas: Vec<f32> = parse_list(&areas)?;
            let (h, w) = parse_dims(&frame)?;
            let rows = radii
                .iter()
                .map(|&r| toy_subcrop_sim(h, w, r, &areas, threshold))
                .collect::<poodle::Result<Vec<_>>>()?;
            write_or_print(out.as_deref(), &analysis_rows_to_csv(&rows))
        }
        AnalyzeCmd::Empirical {
            data,
            subcrops,
            bins,
            subcrop_area,
            global_area,
            seed,
            out,
        } => {
            let maps = load_label_maps(&data)?;
            let cfg = EmpiricalConfig {
                subcrops_per_crop: subcrops,
                quantile_bins: bins,
                subcrop_area: parse_pair(&subcrop_area)?,
                global_area: parse_pair(&global_area)?,
                ..Default::default()
            };
            let mut rng = rng_from_seed(seed);
            let rows = empirical_subcrop_sim(&maps, &cfg, &mut rng)?;
            write_or_print(out.as_deref(), &analysis_rows_to_csv(&rows))
        }
        AnalyzeCmd::ClassShift {
            data,
            fg_threshold,
            subcrops,
            seed,
            out,
        } => {
            let maps = load_label_maps(&data)?;
            let cfg = EmpiricalConfig {
                subcrops_per_crop: subcrops,
                ..Default::default()
            };
            let mut rng = rng_from_seed(seed);
            let rows = class_shift_analysis(&maps, &cfg, fg_threshold, &mut rng)?;
            write_or_print(out.as_deref(), &class_shift_to_csv(&rows))
        }
    }
}
