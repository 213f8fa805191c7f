//! Command-line front end: `init`, `train`, `sr`, `eval` and `count`.
//!
//! Every command writes its results to `out` and progress to `log`, so the
//! binary and the tests drive the same code.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, load_optimizer, save_checkpoint, save_optimizer};
use crate::config::RunConfig;
use crate::error::{FpanError, Result};
use crate::imaging::{
    load_png, save_png, self_ensemble_sr, Bicubic, Dataset, DegradationKind, DegradationSpec, Identity, Upscaler,
};
use crate::metrics::{count_flops, evaluate, EvalReport};
use crate::model::{AblationPreset, Fpan, ModelConfig, FULL_SIZE_TARGET};
use crate::training::{train, LossRecord, TrainObserver, TrainingData};

#[derive(Debug, Parser)]
#[command(name = "fpan", version, about = "FPAN image super-resolution: train, upscale, evaluate, count")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a configuration file listing every key with its default.
    Init {
        /// Destination; prints to stdout when omitted.
        path: Option<PathBuf>,
        /// Replace an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Train from a configuration file, resuming from the newest checkpoint in out_dir.
    Train {
        config: PathBuf,
        /// Override a configuration key, e.g. `--set epochs=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Upscale one PNG.
    Sr {
        /// Checkpoint file, or `bicubic:<scale>` / `identity`.
        model: String,
        input: PathBuf,
        output: PathBuf,
        /// Average over the eight flips and rotations of the input.
        #[arg(long)]
        ensemble: bool,
    },
    /// Degrade a directory of HR PNGs, super-resolve them and report Y-channel PSNR/SSIM.
    Eval {
        /// Checkpoint file, or `bicubic:<scale>` / `identity`.
        model: String,
        hr_dir: PathBuf,
        /// Use these LR images (same file names) instead of degrading.
        #[arg(long)]
        lr_dir: Option<PathBuf>,
        #[arg(long, default_value = "BI")]
        degradation: DegradationKind,
        /// Noise seed for DN.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ensemble: bool,
        /// Print an aligned table instead of CSV.
        #[arg(long)]
        table: bool,
        /// Also write the CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Report parameters and FLOPs of a configuration.
    Count {
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// HR output side for the FLOP count.
        #[arg(long, default_value_t = 512)]
        hr_size: usize,
        /// Summarize the P0..P4 ablation presets instead of listing layers.
        #[arg(long)]
        grid: bool,
        /// Use the full-size architecture and compare it with the 11.7M parameter target.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        csv: bool,
    },
}

fn write_out(w: &mut dyn Write, s: &str) -> Result<()> {
    w.write_all(s.as_bytes()).map_err(|e| FpanError::io("<output>", e))
}

/// Resolve a model argument: a checkpoint path, `bicubic:<scale>` or `identity`.
pub fn load_upscaler(spec: &str) -> Result<Box<dyn Upscaler>> {
    if spec == "identity" {
        return Ok(Box::new(Identity));
    }
    if let Some(s) = spec.strip_prefix("bicubic:") {
        let s: usize = s
            .parse()
            .map_err(|_| FpanError::usage(format!("bad bicubic scale in '{spec}'")))?;
        if !(1..=4).contains(&s) {
            return Err(FpanError::usage(format!("bicubic scale {s} not in 1..=4")));
        }
        return Ok(Box::new(Bicubic(s)));
    }
    Ok(Box::new(load_checkpoint(spec)?))
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn optimizer_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.adam"))
}

/// Highest `n` with an `epoch_<n>.ckpt` in `dir`.
pub fn latest_epoch(dir: &Path) -> Result<Option<usize>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(dir).map_err(|e| FpanError::io(dir, e))? {
        let name = entry.map_err(|e| FpanError::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        let n = name
            .strip_prefix("epoch_")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(n) = n {
            best = best.max(Some(n));
        }
    }
    Ok(best)
}

/// Appends loss lines and writes a checkpoint plus optimizer sidecar after each epoch.
struct RunObserver<'a> {
    out_dir: &'a Path,
    epochs: usize,
    loss_log: BufWriter<File>,
    progress: &'a mut dyn Write,
    sum: f64,
    count: usize,
}

impl TrainObserver<f32> for RunObserver<'_> {
    fn on_step(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.loss_log, "{}", r.to_line()).map_err(|e| FpanError::io(self.out_dir.join("loss.log"), e))?;
        self.sum += r.loss;
        self.count += 1;
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &Fpan<f32>) -> Result<()> {
        let done = epoch + 1;
        self.loss_log
            .flush()
            .map_err(|e| FpanError::io(self.out_dir.join("loss.log"), e))?;
        save_checkpoint(model, checkpoint_path(self.out_dir, done))?;
        save_optimizer(&model.store, optimizer_path(self.out_dir, done))?;
        let _ = writeln!(
            self.progress,
            "epoch {done}/{}: mean loss {:.6}",
            self.epochs,
            self.sum / self.count.max(1) as f64
        );
        self.sum = 0.0;
        self.count = 0;
        Ok(())
    }
}

/// Train per `cfg`. Returns the records of the steps run by this call.
pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn Write) -> Result<Vec<LossRecord>> {
    let data_dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| FpanError::config("data_dir is not set"))?;
    let dataset = Dataset::load(data_dir, cfg.lr_dir.as_deref())?;
    if dataset.is_empty() {
        return Err(FpanError::data(format!("no PNG files in {}", data_dir.display())));
    }
    let pairs = dataset.pairs(&cfg.train.degradation)?;
    let data = TrainingData::new(pairs, cfg.model.scale, cfg.train.patch)?;

    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| FpanError::io(out, e))?;
    std::fs::write(out.join("run.cfg"), cfg.to_text()).map_err(|e| FpanError::io(out.join("run.cfg"), e))?;

    let start = latest_epoch(out)?.unwrap_or(0);
    let mut model = if start > 0 {
        let mut m = load_checkpoint(checkpoint_path(out, start))?;
        if m.config != cfg.model {
            return Err(FpanError::config(format!(
                "{} was trained with a different architecture; use a fresh out_dir",
                checkpoint_path(out, start).display()
            )));
        }
        load_optimizer(optimizer_path(out, start), &mut m.store)?;
        let _ = writeln!(progress, "resuming after epoch {start}");
        m
    } else {
        Fpan::<f32>::new(cfg.model.clone(), cfg.train.seed)?
    };

    // Keep only the log lines of completed epochs.
    let log_path = out.join("loss.log");
    let mut kept = Vec::new();
    if start > 0 && log_path.exists() {
        let f = File::open(&log_path).map_err(|e| FpanError::io(&log_path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| FpanError::io(&log_path, e))?;
            if LossRecord::parse(&line).is_some_and(|r| r.epoch < start) {
                kept.push(line);
            }
        }
    }
    let file = File::create(&log_path).map_err(|e| FpanError::io(&log_path, e))?;
    let mut loss_log = BufWriter::new(file);
    for line in &kept {
        writeln!(loss_log, "{line}").map_err(|e| FpanError::io(&log_path, e))?;
    }

    if start >= cfg.train.epochs {
        let _ = writeln!(progress, "all {} epochs already done", cfg.train.epochs);
        loss_log.flush().map_err(|e| FpanError::io(&log_path, e))?;
        return Ok(Vec::new());
    }
    let _ = writeln!(
        progress,
        "training {} parameters on {} images, {} steps per epoch",
        model.param_count(),
        data.len(),
        cfg.train.steps_per_epoch(data.len())
    );
    let mut observer = RunObserver {
        out_dir: out,
        epochs: cfg.train.epochs,
        loss_log,
        progress,
        sum: 0.0,
        count: 0,
    };
    train(&mut model, &data, &cfg.train, start, &mut observer)
}

pub fn cmd_sr(model: &dyn Upscaler, input: &Path, output: &Path, ensemble: bool) -> Result<()> {
    let lr = load_png(input)?;
    let sr = if ensemble {
        self_ensemble_sr(model, &lr)?
    } else {
        model.upscale(&lr)?
    };
    save_png(&sr, output)
}

pub fn cmd_eval(
    model: &dyn Upscaler,
    hr_dir: &Path,
    lr_dir: Option<&Path>,
    kind: DegradationKind,
    seed: u64,
    ensemble: bool,
) -> Result<EvalReport> {
    let dataset = Dataset::load(hr_dir, lr_dir)?;
    if dataset.is_empty() {
        return Err(FpanError::data(format!("no PNG files in {}", hr_dir.display())));
    }
    let spec = DegradationSpec {
        kind,
        scale: model.scale(),
        seed,
    };
    evaluate(model, &dataset.pairs(&spec)?, ensemble)
}

/// `preset,params,flops` for P0..P4 applied to `base`.
pub fn ablation_grid(base: &ModelConfig, hr_size: usize) -> Result<Vec<(AblationPreset, usize, u64)>> {
    AblationPreset::ALL
        .into_iter()
        .map(|p| {
            let m = Fpan::<f32>::skeleton(base.clone().with_ablation(p))?;
            let r = count_flops(&m, hr_size, hr_size);
            Ok((p, r.total_params(), r.total_flops()))
        })
        .collect()
}

/// One line comparing a parameter count with the 11.7M target.
pub fn size_gap_line(config: &ModelConfig, params: usize) -> String {
    let gap = params as i64 - FULL_SIZE_TARGET as i64;
    format!(
        "blocks = {}, params = {}, target = {}, gap = {:+} ({:+.2}%)",
        config.num_blocks,
        params,
        FULL_SIZE_TARGET,
        gap,
        100.0 * gap as f64 / FULL_SIZE_TARGET as f64
    )
}

pub fn cmd_count(model: &ModelConfig, hr_size: usize, grid: bool, full: bool, csv: bool) -> Result<String> {
    if hr_size < model.scale {
        return Err(FpanError::usage(format!("hr size {hr_size} is smaller than the scale")));
    }
    let mut s = String::new();
    if grid {
        let rows = ablation_grid(model, hr_size)?;
        if csv {
            s.push_str("preset,params,flops\n");
            for (p, n, f) in &rows {
                s.push_str(&format!("{p},{n},{f}\n"));
            }
        } else {
            s.push_str(&format!("x{} at HR {hr_size}x{hr_size}\n", model.scale));
            s.push_str(&format!("{:<6}  {:>12}  {:>16}\n", "preset", "params", "flops"));
            for (p, n, f) in &rows {
                s.push_str(&format!("{:<6}  {:>12}  {:>16}\n", p.to_string(), n, f));
            }
        }
    } else {
        let report = count_flops(&Fpan::<f32>::skeleton(model.clone())?, hr_size, hr_size);
        if csv {
            s.push_str(&report.to_csv());
        } else {
            s.push_str(&report.to_table());
        }
    }
    if full && !csv {
        let params = crate::model::count_params_for(model)?;
        s.push_str(&size_gap_line(model, params));
        s.push('\n');
    }
    Ok(s)
}

pub fn run(cli: Cli, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Init { path, force } => {
            let text = RunConfig::template();
            match path {
                None => write_out(out, &text),
                Some(p) => {
                    if p.exists() && !force {
                        return Err(FpanError::usage(format!("{} exists; pass --force to replace it", p.display())));
                    }
                    std::fs::write(&p, text).map_err(|e| FpanError::io(&p, e))
                }
            }
        }
        Command::Train { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let trace = cmd_train(&cfg, log)?;
            if let Some(last) = trace.last() {
                write_out(
                    out,
                    &format!(
                        "trained {} steps, final loss {}, checkpoints in {}\n",
                        trace.len(),
                        last.loss,
                        cfg.out_dir.display()
                    ),
                )?;
            }
            Ok(())
        }
        Command::Sr {
            model,
            input,
            output,
            ensemble,
        } => cmd_sr(load_upscaler(&model)?.as_ref(), &input, &output, ensemble),
        Command::Eval {
            model,
            hr_dir,
            lr_dir,
            degradation,
            seed,
            ensemble,
            table,
            csv,
        } => {
            let report = cmd_eval(
                load_upscaler(&model)?.as_ref(),
                &hr_dir,
                lr_dir.as_deref(),
                degradation,
                seed,
                ensemble,
            )?;
            if let Some(p) = csv {
                std::fs::write(&p, report.to_csv()).map_err(|e| FpanError::io(&p, e))?;
            }
            write_out(out, &if table { report.to_table() } else { report.to_csv() })
        }
        Command::Count {
            config,
            overrides,
            hr_size,
            grid,
            full,
            csv,
        } => {
            let cfg = match &config {
                Some(p) => RunConfig::load(p, &overrides)?,
                None => RunConfig::parse_with_overrides("", "<defaults>", &overrides)?,
            };
            let model = if full {
                ModelConfig::full(cfg.model.scale)?
            } else {
                cfg.model
            };
            write_out(out, &cmd_count(&model, hr_size, grid, full, csv)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn upscaler_specs() {
        assert_eq!(load_upscaler("identity").unwrap().scale(), 1);
        assert_eq!(load_upscaler("bicubic:3").unwrap().scale(), 3);
        assert!(matches!(load_upscaler("bicubic:9"), Err(FpanError::Usage(_))));
        assert!(matches!(load_upscaler("/no/such.ckpt"), Err(FpanError::Io { .. })));
    }

    #[test]
    fn latest_epoch_picks_highest() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(latest_epoch(d.path()).unwrap(), None);
        for n in ["epoch_0002.ckpt", "epoch_0010.ckpt", "epoch_0011.adam", "other.ckpt"] {
            std::fs::write(d.path().join(n), b"").unwrap();
        }
        assert_eq!(latest_epoch(d.path()).unwrap(), Some(10));
    }

    #[test]
    fn grid_is_monotone() {
        let rows = ablation_grid(&ModelConfig::tiny(2), 64).unwrap();
        let params: Vec<usize> = rows.iter().map(|r| r.1).collect();
        assert!(params[0] < params[2] && params[2] < params[3] && params[3] <= params[4]);
        assert!(rows[0].2 < rows[4].2);
    }

    #[test]
    fn size_line_reports_gap() {
        let line = size_gap_line(&ModelConfig::full(2).unwrap(), 12_015_592);
        assert_eq!(line, "blocks = 11, params = 12015592, target = 11700000, gap = +315592 (+2.70%)");
    }
}
