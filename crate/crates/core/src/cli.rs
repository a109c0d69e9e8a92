//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adversary::{attack_dataset, linf, AttackConfig, AttackLoss, AttackTarget};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{encode_netpbm, read_dataset, sample_dir_name, synth_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::Mode;
use crate::objective::{evaluate_sample, LossSpec, OwnedTargets};
use crate::plot::training_curves_svg;
use crate::train::{evaluate, log_from_csv, log_to_csv, train_with_progress, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fusion-counting", version, about = "Joint visible-infrared fusion and crowd counting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Train on clean plus PGD-attacked inputs.
    Advtrain(AdvTrainArgs),
    /// Write PGD-attacked copies of a dataset.
    Attack(AttackArgs),
    /// Compute fusion and counting metrics.
    Eval(EvalArgs),
    /// Render training curves as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Image size as HxW, each a multiple of 16.
    #[arg(long, value_parser = parse_size, default_value = "64x64")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// People per image as MIN..MAX (inclusive).
    #[arg(long, value_parser = parse_range, default_value = "5..15")]
    pub people: (usize, usize),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Training log path (default: train_log.csv beside the checkpoint).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct AttackFlags {
    #[arg(long, default_value_t = 20.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 5.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 7)]
    pub iters: usize,
    #[arg(long, default_value = "both")]
    pub target: AttackTarget,
    /// Loss ascended by the attack: total, fusion or count.
    #[arg(long, default_value = "total")]
    pub objective: AttackLoss,
}

impl AttackFlags {
    fn config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.eps,
            alpha: self.alpha,
            iters: self.iters,
            target: self.target,
            objective: self.objective,
            per_epoch: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct AdvTrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub attack: AttackFlags,
    /// Regenerate adversarial examples every epoch.
    #[arg(long)]
    pub per_epoch: bool,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output dataset directory; attack_report.csv is written inside it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Attack every input with PGD before evaluation.
    #[arg(long)]
    pub attack: bool,
    #[command(flatten)]
    pub attack_flags: AttackFlags,
    #[arg(long)]
    pub report: PathBuf,
    /// Directory receiving fused images as PGM.
    #[arg(long)]
    pub dump_fused: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size {s:?}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once("..").ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid range {s:?}"));
    let (lo, hi) = (parse(lo)?, parse(hi)?);
    if lo > hi {
        return Err(format!("empty range {s:?}"));
    }
    Ok((lo, hi))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a, None),
        Command::Advtrain(a) => {
            let mut attack = a.attack.config();
            attack.per_epoch = a.per_epoch;
            train_cmd(a.train, Some(attack))
        }
        Command::Attack(a) => attack_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let samples = synth_dataset(a.count, a.size.0, a.size.1, a.people, a.seed)?;
    write_dataset(&samples, &a.out)?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, attack: Option<AttackConfig>) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    if attack.is_some() {
        cfg.adversarial = attack;
    }
    cfg.validate()?;
    let data = a
        .data
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let dataset = read_dataset(&data)?;
    let epochs = cfg.epochs;
    let out = train_with_progress(&dataset, &cfg, &mut |r| {
        eprintln!(
            "epoch {}/{epochs}  l_fusion {:.4}  l_count {:.4}  l_total {:.4}  lambda ({:.3}, {:.3})",
            r.epoch, r.l_fusion, r.l_count, r.l_total, r.lambda1, r.lambda2
        );
        std::ops::ControlFlow::Continue(())
    })?;
    save_checkpoint(&out.params, &a.out)?;
    let log = a.log.unwrap_or_else(|| a.out.with_file_name("train_log.csv"));
    write(&log, log_to_csv(&out.log))?;
    eprintln!("saved {} and {}", a.out.display(), log.display());
    Ok(())
}

fn attack_cmd(a: AttackArgs) -> Result<()> {
    let params = load_checkpoint(&a.ckpt)?;
    let dataset = read_dataset(&a.data)?;
    let cfg = a.attack.config();
    let spec = LossSpec::default();
    let attacked = attack_dataset(&params, &dataset, &cfg, &spec)?;
    write_dataset(&attacked, &a.out)?;
    let mut report = String::from("sample,clean_loss,attacked_loss,linf\n");
    for (i, (c, adv)) in dataset.iter().zip(&attacked).enumerate() {
        let t = OwnedTargets::of(c);
        let loss = |s: &crate::data::RgbtSample| -> Result<f64> {
            let spec = LossSpec {
                lambda: cfg.attack_lambda(spec.lambda),
                ..spec
            };
            Ok(evaluate_sample(&params, &s.visible, &s.infrared, t.view(), &spec, false, false)?
                .breakdown
                .l_total)
        };
        let norm = linf(&c.visible, &adv.visible).max(linf(&c.infrared, &adv.infrared));
        report.push_str(&format!("{},{},{},{}\n", sample_dir_name(i), loss(c)?, loss(adv)?, norm));
    }
    write(&a.out.join("attack_report.csv"), report)?;
    eprintln!("attacked {} samples into {}", attacked.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let params = load_checkpoint(&a.ckpt)?;
    let dataset = read_dataset(&a.data)?;
    let attack = a.attack.then(|| a.attack_flags.config());
    let ev = evaluate(
        &params,
        &dataset,
        attack.as_ref(),
        losses::DEFAULT_ETA,
        losses::DEFAULT_COUNT_SIGMA,
    )?;
    let names: Vec<String> = (0..dataset.len()).map(sample_dir_name).collect();
    write(&a.report, ev.to_csv(&names))?;
    if let Some(dir) = &a.dump_fused {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, f) in names.iter().zip(&ev.fused) {
            write(&dir.join(format!("{name}.pgm")), encode_netpbm(f))?;
        }
    }
    let s = &ev.summary;
    eprintln!(
        "{} images  psnr {:.2}  ssim {:.4}  game0 {:.3}  rmse {:.3}",
        dataset.len(),
        s.fusion.psnr,
        s.fusion.ssim,
        s.game[0],
        s.rmse
    );
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    if !a.log.is_file() {
        return Err(Error::MissingFile(a.log));
    }
    let text = fs::read_to_string(&a.log).map_err(|e| Error::io(&a.log, e))?;
    let rows = log_from_csv(&text, &a.log)?;
    write(&a.out, training_curves_svg(&rows)?)
}

/// Worker-thread cap from `FC_THREADS`, if set.
pub fn thread_limit() -> std::result::Result<Option<usize>, String> {
    match std::env::var("FC_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("FC_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_range_parsers() {
        assert_eq!(parse_size("64x48").unwrap(), (64, 48));
        assert!(parse_size("64").is_err());
        assert_eq!(parse_range("3..9").unwrap(), (3, 9));
        assert!(parse_range("9..3").is_err());
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let err = Cli::try_parse_from(["fusion-counting", "plot", "--log", "a", "--out", "b", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
