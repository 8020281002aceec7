//! Batch command-line front end for the point cloud forecasting pipeline.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use pcforecast::baselines::BaselineKind;
use pcforecast::config::{
    read_calib_matrix, resolve_data_path, resolve_out_path, Manifest, RunConfig,
};
use pcforecast::evaluation::{evaluate, EvalMode, EvalReport, EvalRow, Predictor, Stats};
use pcforecast::lidar_io::dataset::SequenceDataset;
use pcforecast::lidar_io::synth::{generate, SceneSpec};
use pcforecast::lidar_io::{read_poses, write_poses, write_scan_bin};
use pcforecast::losses::{LossContext, LossReport, LossWeights};
use pcforecast::network::{load_model, ForecastModel};
use pcforecast::projection::{project, write_range_image};
use pcforecast::trainer::{fine_tune, load_sample, train, SchedulePhase, TrainConfig};

use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pcforecast",
    version,
    about = "Self-supervised LiDAR point cloud forecasting: projection, training, baselines, evaluation"
)]
struct Cli {
    /// Cap worker threads used by parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, value_parser = ["kitti", "desk"], default_value = "kitti")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        match &self.config {
            Some(path) => Ok(RunConfig::from_file(path)?),
            None => Ok(match self.preset.as_str() {
                "desk" => RunConfig::desk(),
                _ => RunConfig::default(),
            }),
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding .bin scans (relative paths honor PCF_DATA_ROOT).
    #[arg(long)]
    data: PathBuf,
    /// KITTI-format pose file aligned with the scans.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// 3x4 or 4x4 calibration matrix file applied as C⁻¹ T C to each pose.
    #[arg(long)]
    calib: Option<PathBuf>,
}

impl DataArgs {
    fn dataset(&self, past: usize, future: usize) -> anyhow::Result<SequenceDataset> {
        let dir = resolve_data_path(&self.data);
        let poses = match &self.poses {
            Some(p) => {
                let calib = match &self.calib {
                    Some(c) => Some(read_calib_matrix(&resolve_data_path(c))?),
                    None => None,
                };
                Some(read_poses(&resolve_data_path(p), calib.as_ref())?)
            }
            None => None,
        };
        Ok(SequenceDataset::from_dir(&dir, poses, past, future)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scan sequence from a scene description.
    Synth {
        /// Scene spec (TOML): primitives, ego trajectory, scan count, sensor.
        #[arg(long)]
        scene: PathBuf,
        /// Output directory (relative paths honor PCF_OUT_ROOT).
        #[arg(long)]
        out: PathBuf,
    },
    /// Project binary scans to range-image files.
    Project {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the forecasting network (range + mask loss).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Validation scan directory.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training epochs (default from config, 50).
        #[arg(long)]
        epochs: Option<usize>,
        /// Run seed for init and shuffling.
        #[arg(long)]
        seed: Option<u64>,
        /// Initial learning rate (default 1e-3).
        #[arg(long)]
        lr: Option<f64>,
        /// Per-epoch exponential decay factor (default 0.99).
        #[arg(long)]
        decay: Option<f64>,
        /// Samples accumulated per optimizer step (default 16).
        #[arg(long)]
        accumulation: Option<usize>,
    },
    /// Resume a checkpoint and fine-tune with the Chamfer loss enabled.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Fine-tuning epochs.
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict future clouds with a trained model.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Additionally write predicted range images (.rimg).
        #[arg(long, default_value_t = false)]
        write_rimg: bool,
    },
    /// Predict future clouds with a geometric baseline.
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Baseline predictor.
        #[arg(long, value_parser = parse_baseline)]
        baseline: BaselineKind,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chamfer-distance evaluation of a model or baseline.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Baseline predictor (mutually exclusive with --checkpoint).
        #[arg(long, value_parser = parse_baseline)]
        baseline: Option<BaselineKind>,
        /// Model checkpoint (mutually exclusive with --baseline).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// full: all points; sampled: uniform subsets of both clouds.
        #[arg(long, value_parser = ["full", "sampled"], default_value = "full")]
        mode: String,
        /// Subset size for sampled mode.
        #[arg(long, default_value_t = 32768)]
        points: usize,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Wall-clock repeats for the per-prediction timing.
        #[arg(long, default_value_t = 5)]
        timing_repeats: usize,
    },
    /// Recompute summary statistics from a per-sample CSV.
    Stats {
        /// per_sample.csv produced by `evaluate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, round-trip, Chamfer-oracle, and persistence checks.
    Selftest {
        /// Run the full acceptance-sized battery instead of the quick one.
        #[arg(long, default_value_t = false)]
        full: bool,
    },
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    s.parse::<BaselineKind>().map_err(|e| e.to_string())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn write_manifest(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    Manifest::new(command_line(), cfg).write(out)?;
    Ok(())
}

fn save_prediction_clouds(
    out: &Path,
    sample: usize,
    clouds: &[pcforecast::geom::PointCloud],
    intr: Option<&pcforecast::projection::SensorIntrinsics>,
) -> anyhow::Result<()> {
    for (t, cloud) in clouds.iter().enumerate() {
        let base = out.join(format!("sample{sample:04}_step{}", t + 1));
        write_scan_bin(&base.with_extension("bin"), cloud)?;
        if let Some(intr) = intr {
            write_range_image(&base.with_extension("rimg"), &project(cloud, intr))?;
        }
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("predictor: {}", report.predictor);
    println!("step  count      mean       std       min        q1    median        q3       max");
    let row = |label: &str, s: &Stats| {
        println!(
            "{label:>4}  {:>5}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            s.count, s.mean, s.std, s.min, s.q1, s.median, s.q3, s.max
        );
    };
    for (i, s) in report.per_step.iter().enumerate() {
        row(&format!("{}", i + 1), s);
    }
    if let Some(s) = &report.overall {
        row("all", s);
    }
    if !report.flagged.is_empty() {
        println!("flagged (empty prediction): {} sample-steps", report.flagged.len());
    }
    println!("median prediction time: {:.3} ms", report.prediction_ms);
}

fn run(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Synth { scene, out } => {
            let out = resolve_out_path(&out);
            let scene_path = resolve_data_path(&scene);
            let text = std::fs::read_to_string(&scene_path)
                .with_context(|| format!("reading {}", scene_path.display()))?;
            let spec = SceneSpec::from_toml(&text)?;
            let seq = generate(&spec)?;
            let scan_dir = out.join("scans");
            std::fs::create_dir_all(&scan_dir)?;
            for (i, frame) in seq.frames.iter().enumerate() {
                write_scan_bin(&scan_dir.join(format!("{i:06}.bin")), &frame.cloud)?;
            }
            write_poses(&out.join("poses.txt"), &seq.poses)?;
            std::fs::write(out.join("scene.toml"), &text)?;
            let mut cfg = RunConfig::desk();
            cfg.sensor = spec.sensor.clone();
            write_manifest(&out, &cfg)?;
            println!(
                "wrote {} scans ({} x {}) to {}",
                seq.frames.len(),
                spec.sensor.height,
                spec.sensor.width,
                out.display()
            );
            Ok(0)
        }
        Command::Project { config, data, out } => {
            let cfg = config.load()?;
            let intr = cfg.intrinsics()?;
            let out = resolve_out_path(&out);
            std::fs::create_dir_all(&out)?;
            let ds = SequenceDataset::from_dir(&resolve_data_path(&data), None, 1, 1)?;
            for i in 0..ds.len() {
                let img = project(&ds.cloud(i)?, &intr);
                write_range_image(&out.join(format!("{i:06}.rimg")), &img)?;
            }
            write_manifest(&out, &cfg)?;
            println!("projected {} scans to {}", ds.len(), out.display());
            Ok(0)
        }
        Command::Train {
            config,
            data,
            val,
            out,
            epochs,
            seed,
            lr,
            decay,
            accumulation,
        } => {
            let mut cfg = config.load()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.seed = s;
            }
            if let Some(v) = lr {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = decay {
                cfg.train.lr_decay = v;
            }
            if let Some(v) = accumulation {
                cfg.train.accumulation = v;
            }
            let arch = cfg.architecture()?;
            let out = resolve_out_path(&out);
            let train_ds = data.dataset(arch.past, arch.future)?;
            let val_ds = match val {
                Some(dir) => Some(SequenceDataset::from_dir(
                    &resolve_data_path(&dir),
                    None,
                    arch.past,
                    arch.future,
                )?),
                None => None,
            };
            let mut model = ForecastModel::<f32>::build(arch, cfg.train.seed)?;
            write_manifest(&out, &cfg)?;
            let report = train(&mut model, &train_ds, val_ds.as_ref(), &cfg.train, Some(&out))?;
            println!(
                "trained {} epochs ({} optimizer steps); best epoch {:?} with tracked loss {:.4}",
                cfg.train.epochs, report.optimizer_steps, report.best_epoch, report.best_val_total
            );
            println!("checkpoints and metrics.csv in {}", out.display());
            Ok(0)
        }
        Command::Finetune {
            checkpoint,
            data,
            val,
            out,
            epochs,
            seed,
            lr,
        } => {
            let mut model = load_model::<f32>(&resolve_data_path(&checkpoint))?;
            let arch = model.config.clone();
            let out = resolve_out_path(&out);
            let train_ds = data.dataset(arch.past, arch.future)?;
            let val_ds = match val {
                Some(dir) => Some(SequenceDataset::from_dir(
                    &resolve_data_path(&dir),
                    None,
                    arch.past,
                    arch.future,
                )?),
                None => None,
            };
            let mut tcfg = TrainConfig {
                epochs,
                ..TrainConfig::default()
            };
            if let Some(s) = seed {
                tcfg.seed = s;
            }
            if let Some(v) = lr {
                tcfg.learning_rate = v;
            }
            tcfg.schedule = vec![SchedulePhase {
                from_epoch: 0,
                to_epoch: usize::MAX,
                alpha_mask: 1.0,
                alpha_chamfer: 1.0,
            }];
            let mut cfg = RunConfig::default();
            cfg.train = tcfg.clone();
            cfg.seed = tcfg.seed;
            write_manifest(&out, &cfg)?;
            let report = fine_tune(&mut model, &train_ds, val_ds.as_ref(), &tcfg, Some(&out))?;
            println!(
                "fine-tuned {epochs} epochs ({} steps); outputs in {}",
                report.optimizer_steps,
                out.display()
            );
            Ok(0)
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            write_rimg,
        } => {
            let model = load_model::<f32>(&resolve_data_path(&checkpoint))?;
            let intr = model.config.intrinsics;
            let ds = data.dataset(model.config.past, model.config.future)?;
            let out = resolve_out_path(&out);
            std::fs::create_dir_all(&out)?;
            let samples = ds.slice_samples();
            let predictor = Predictor::Model(&model);
            for (si, sample) in samples.iter().enumerate() {
                let clouds = predictor.predict(&ds, sample, &intr)?;
                save_prediction_clouds(&out, si, &clouds, write_rimg.then_some(&intr))?;
            }
            write_manifest(&out, &RunConfig::default())?;
            println!(
                "wrote predictions for {} samples x {} steps to {}",
                samples.len(),
                model.config.future,
                out.display()
            );
            Ok(0)
        }
        Command::Baseline {
            config,
            baseline,
            data,
            out,
        } => {
            let cfg = config.load()?;
            let intr = cfg.intrinsics()?;
            let ds = data.dataset(cfg.model.past, cfg.model.future)?;
            let out = resolve_out_path(&out);
            std::fs::create_dir_all(&out)?;
            let predictor = Predictor::Baseline(baseline);
            let samples = ds.slice_samples();
            for (si, sample) in samples.iter().enumerate() {
                let clouds = predictor.predict(&ds, sample, &intr)?;
                save_prediction_clouds(&out, si, &clouds, None)?;
            }
            write_manifest(&out, &cfg)?;
            println!(
                "wrote {baseline} predictions for {} samples to {}",
                samples.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Evaluate {
            config,
            baseline,
            checkpoint,
            data,
            out,
            mode,
            points,
            seed,
            timing_repeats,
        } => {
            let cfg = config.load()?;
            let out = resolve_out_path(&out);
            std::fs::create_dir_all(&out)?;
            let eval_mode = match mode.as_str() {
                "sampled" => EvalMode::Sampled(points),
                _ => EvalMode::Full,
            };
            let model;
            let (predictor, intr, past, future) = match (baseline, checkpoint) {
                (Some(_), Some(_)) => {
                    bail!("--baseline and --checkpoint are mutually exclusive")
                }
                (Some(kind), None) => (
                    Predictor::Baseline(kind),
                    cfg.intrinsics()?,
                    cfg.model.past,
                    cfg.model.future,
                ),
                (None, Some(path)) => {
                    model = load_model::<f32>(&resolve_data_path(&path))?;
                    let intr = model.config.intrinsics;
                    let (p, f) = (model.config.past, model.config.future);
                    (Predictor::Model(&model), intr, p, f)
                }
                (None, None) => bail!("one of --baseline or --checkpoint is required"),
            };
            let ds = data.dataset(past, future)?;
            let report = evaluate(&predictor, &ds, &intr, eval_mode, seed)?;
            std::fs::write(out.join("per_sample.csv"), report.per_sample_csv())?;
            std::fs::write(out.join("summary.csv"), report.summary_csv())?;
            std::fs::write(out.join("boxplot.csv"), report.boxplot_data())?;
            if let Predictor::Model(model) = &predictor {
                write_model_losses(&out, model, &ds)?;
            }
            if let Some(sample) = ds.slice_samples().first() {
                let (median, raw) =
                    pcforecast::evaluation::time_prediction(&predictor, &ds, sample, &intr, timing_repeats)?;
                let raw_str: Vec<String> = raw.iter().map(|t| format!("{t:.3}")).collect();
                std::fs::write(
                    out.join("timing.csv"),
                    format!("median_ms,{median:.3}\nraw_ms,{}\n", raw_str.join(",")),
                )?;
            }
            write_manifest(&out, &cfg)?;
            print_report(&report);
            println!("CSV reports in {}", out.display());
            Ok(0)
        }
        Command::Stats { input, out } => {
            let text = std::fs::read_to_string(resolve_data_path(&input))?;
            let rows = parse_per_sample_csv(&text)?;
            let future = rows.iter().map(|r| r.step).max().unwrap_or(0);
            if future == 0 {
                bail!("no rows in {}", input.display());
            }
            let (per_step, overall) = pcforecast::evaluation::aggregate(&rows, future);
            let report = EvalReport {
                predictor: "stats".into(),
                rows,
                per_step,
                overall,
                flagged: Vec::new(),
                prediction_ms: 0.0,
            };
            let out = resolve_out_path(&out);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("summary.csv"), report.summary_csv())?;
            std::fs::write(out.join("boxplot.csv"), report.boxplot_data())?;
            print_report(&report);
            Ok(0)
        }
        Command::Selftest { full } => {
            let outcomes = pcforecast::selfcheck::run_selftest(!full);
            let mut all_ok = true;
            for o in &outcomes {
                println!("{}  {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                all_ok &= o.passed;
            }
            if all_ok {
                println!("selftest: all {} checks passed", outcomes.len());
                Ok(0)
            } else {
                Err(anyhow!("selftest failed"))
            }
        }
    }
}

fn parse_per_sample_csv(text: &str) -> anyhow::Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            bail!("line {}: expected 3 CSV fields, got {}", i + 1, fields.len());
        }
        rows.push(EvalRow {
            sample: fields[0].parse().map_err(|_| anyhow!("line {}: bad sample id", i + 1))?,
            step: fields[1].parse().map_err(|_| anyhow!("line {}: bad step", i + 1))?,
            chamfer_m2: fields[2].parse().map_err(|_| anyhow!("line {}: bad value", i + 1))?,
        });
    }
    Ok(rows)
}

/// Per-sample loss CSV for model evaluations (range/mask/chamfer per step).
fn write_model_losses(
    out: &Path,
    model: &ForecastModel<f32>,
    ds: &SequenceDataset,
) -> anyhow::Result<()> {
    let intr = model.config.intrinsics;
    let weights = LossWeights::finetune();
    let mut lines = vec![LossReport::csv_header().to_string()];
    for (si, sample) in ds.slice_samples().iter().enumerate() {
        let pack = load_sample(ds, sample, &intr)?;
        let (ranges, mask) = pcforecast::autodiff::no_grad(|| {
            model.forward_tensors(&pack.stack, pcforecast::autodiff::Phase::Eval)
        })?;
        let ctx = LossContext {
            gt_images: &pack.gt_images,
            gt_clouds: Some(&pack.gt_clouds),
            intrinsics: intr,
            weights,
            chamfer_metric: true,
        };
        let (_, report) = pcforecast::losses::total_loss(&ranges, &mask, &ctx)?;
        lines.extend(report.csv_rows(si, &weights));
    }
    std::fs::write(out.join("losses.csv"), lines.join("\n") + "\n")?;
    Ok(())
}
