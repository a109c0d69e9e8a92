//! Multi-task and adversarial training, evaluation and experiment logs.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adversary::{attack_dataset, augment_epoch, AttackConfig, AttackLoss, AttackTarget};
use crate::data::{luminance, RgbtSample};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::metrics::{counting_report, fusion_quality, game, FusionMetrics, MetricReport, GAME_LEVELS};
use crate::model::{forward_images, init_params_for, Heads, Mode, ModelParams};
use crate::objective::{evaluate_sample, points_to_cells, LossSpec, OwnedTargets};
use crate::tensor::Tensor;
use crate::weighting::{WeightState, DEFAULT_Z};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eta: [f64; 4],
    pub z: f64,
    pub mode: Mode,
    pub count_sigma: f64,
    pub adversarial: Option<AttackConfig>,
    pub data: Option<PathBuf>,
    /// Record real epoch durations in the log (otherwise `wall_ms` is 0).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-5,
            lr_min: 1e-7,
            batch_size: 4,
            seed: 0,
            eta: losses::DEFAULT_ETA,
            z: DEFAULT_Z,
            mode: Mode::Multitask,
            count_sigma: losses::DEFAULT_COUNT_SIGMA,
            adversarial: None,
            data: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    /// Settings of the 64x64 toy experiments.
    pub fn toy(seed: u64) -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            lr_min: 1e-5,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr_min > 0.0 && self.lr > self.lr_min && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "need lr > lr_min > 0, got lr={} lr_min={}",
                self.lr, self.lr_min
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eta.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config(format!("eta must be finite and nonnegative, got {:?}", self.eta)));
        }
        if !self.z.is_finite() {
            return Err(Error::Config(format!("Z must be finite, got {}", self.z)));
        }
        if !(self.count_sigma > 0.0 && self.count_sigma.is_finite()) {
            return Err(Error::Config(format!("count_sigma must be positive, got {}", self.count_sigma)));
        }
        if let Some(a) = &self.adversarial {
            a.validate()?;
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut attack = AttackConfig::default();
        let mut adversarial: Option<bool> = None;
        let mut attack_keys = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: invalid {what} {value:?} for {key}", n + 1));
            let num = || value.parse::<f64>().map_err(|_| bad("number"));
            let int = || value.parse::<u64>().map_err(|_| bad("integer"));
            let flag = || value.parse::<bool>().map_err(|_| bad("boolean"));
            match key {
                "epochs" => cfg.epochs = int()? as usize,
                "lr" => cfg.lr = num()?,
                "lr_min" => cfg.lr_min = num()?,
                "batch_size" => cfg.batch_size = int()? as usize,
                "seed" => cfg.seed = int()?,
                "eta" => {
                    let parts = value
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("list"))?;
                    cfg.eta = parts.try_into().map_err(|_| bad("4-element list"))?;
                }
                "Z" => cfg.z = num()?,
                "mode" => cfg.mode = value.parse().map_err(|e: Error| Error::Config(format!("line {}: {e}", n + 1)))?,
                "count_sigma" => cfg.count_sigma = num()?,
                "data" => cfg.data = Some(PathBuf::from(value)),
                "record_wall_time" => cfg.record_wall_time = flag()?,
                "adversarial" => adversarial = Some(flag()?),
                "epsilon" | "alpha" | "iters" | "target" | "attack_objective" | "regenerate_per_epoch" => {
                    attack_keys = true;
                    match key {
                        "epsilon" => attack.epsilon = num()?,
                        "alpha" => attack.alpha = num()?,
                        "iters" => attack.iters = int()? as usize,
                        "target" => attack.target = value.parse::<AttackTarget>()?,
                        "attack_objective" => attack.objective = value.parse::<AttackLoss>()?,
                        _ => attack.per_epoch = flag()?,
                    }
                }
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        if adversarial.unwrap_or(attack_keys) {
            cfg.adversarial = Some(attack);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Task weights used for an epoch in the fixed-weight modes.
    fn fixed_lambda(&self) -> Option<[f64; 2]> {
        match self.mode {
            Mode::Multitask | Mode::Series => None,
            Mode::NoDw => Some([1.0, 1.0]),
            Mode::StFusion => Some([1.0, 0.0]),
            Mode::StCount => Some([0.0, 1.0]),
        }
    }
}

/// Cosine-annealed learning rate at epoch offset `t` of `total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::Schedule(format!("epoch {t} outside schedule of {total} epochs")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Adaptive-moment optimizer. Parameters stay on the float32 grid.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for k in 0..params.len() {
            let g = grads.tensor(k).data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in params.tensor_mut(k).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        params.round_to_f32();
    }
}

/// Sample visiting order of an epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub l_fusion: f64,
    pub l_count: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "epoch,l_fusion,l_count,l_total,lambda1,lambda2,lr,wall_ms";

pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.l_fusion, r.l_count, r.l_total, r.lambda1, r.lambda2, r.lr, r.wall_ms
        );
    }
    out
}

pub fn log_from_csv(text: &str, file: &Path) -> Result<Vec<TrainLogRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(Error::format(file, format!("expected header {LOG_HEADER}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::format(file, format!("line {}: malformed log row", n + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(TrainLogRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                l_fusion: num(1)?,
                l_count: num(2)?,
                l_total: num(3)?,
                lambda1: num(4)?,
                lambda2: num(5)?,
                lr: num(6)?,
                wall_ms: f[7].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
    pub weights: WeightState,
}

/// Multi-task training.
pub fn train(dataset: &[RgbtSample], cfg: &TrainConfig) -> Result<TrainOutput> {
    run(dataset, cfg, None, &mut |_| ControlFlow::Continue(()))
}

/// Training on clean plus PGD-attacked inputs; `cfg.adversarial` must be set.
pub fn adv_train(dataset: &[RgbtSample], cfg: &TrainConfig) -> Result<TrainOutput> {
    let attack = cfg
        .adversarial
        .ok_or_else(|| Error::Config("adversarial training needs attack settings".into()))?;
    run(dataset, cfg, Some(attack), &mut |_| ControlFlow::Continue(()))
}

/// Either `train` or `adv_train` depending on `cfg.adversarial`, reporting
/// each epoch. Returning `Break` from `progress` ends training after that
/// epoch; the learning-rate schedule still spans `cfg.epochs`.
pub fn train_with_progress(
    dataset: &[RgbtSample],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&TrainLogRow) -> ControlFlow<()>,
) -> Result<TrainOutput> {
    run(dataset, cfg, cfg.adversarial, progress)
}

fn run(
    dataset: &[RgbtSample],
    cfg: &TrainConfig,
    attack: Option<AttackConfig>,
    progress: &mut dyn FnMut(&TrainLogRow) -> ControlFlow<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in dataset {
        s.validate()?;
    }
    let targets: Vec<OwnedTargets> = dataset.iter().map(OwnedTargets::of).collect();
    let mut params = init_params_for(cfg.mode, cfg.seed);
    let mut adam = Adam::new(&params);
    let mut weights = WeightState::new(2, cfg.z)?;
    let mut adversarial: Vec<RgbtSample> = Vec::new();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr, cfg.lr_min)?;
        let lambda = match cfg.fixed_lambda() {
            Some(l) => l,
            None => {
                let l = weights.compute_weights(epoch)?;
                [l[0], l[1]]
            }
        };
        let spec = LossSpec {
            eta: cfg.eta,
            lambda,
            count_sigma: cfg.count_sigma,
        };

        let stream: Vec<(&Tensor, &Tensor, usize)> = match &attack {
            None => dataset.iter().enumerate().map(|(k, s)| (&s.visible, &s.infrared, k)).collect(),
            Some(a) => {
                if epoch == 1 || a.per_epoch {
                    adversarial = attack_dataset(&params, dataset, a, &spec)?;
                }
                augment_epoch(dataset, &adversarial)?
                    .into_iter()
                    .map(|s| (s.visible, s.infrared, s.clean_index))
                    .collect()
            }
        };

        let order = epoch_order(cfg.seed, epoch, stream.len());
        let mut sums = [0.0; 3];
        for batch in order.chunks(cfg.batch_size) {
            let evals = batch
                .par_iter()
                .map(|&k| {
                    let (v, i, c) = stream[k];
                    evaluate_sample(&params, v, i, targets[c].view(), &spec, true, false)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = params.zeroed();
            for e in &evals {
                if let Some(term) = e.breakdown.non_finite_term() {
                    return Err(Error::NonFinite { term, epoch });
                }
                sums[0] += e.breakdown.l_fusion;
                sums[1] += e.breakdown.l_count;
                sums[2] += e.breakdown.l_total;
                let g = e.param_grads.as_ref().expect("parameter gradients requested");
                for k in 0..grad.len() {
                    grad.tensor_mut(k).add_assign(g.tensor(k));
                }
            }
            for k in 0..grad.len() {
                grad.tensor_mut(k).scale(1.0 / evals.len() as f64);
            }
            adam.step(&mut params, &grad, lr);
        }

        let n = stream.len() as f64;
        let means = [sums[0] / n, sums[1] / n, sums[2] / n];
        weights.record_epoch(&means[..2])?;
        let row = TrainLogRow {
            epoch,
            l_fusion: means[0],
            l_count: means[1],
            l_total: means[2],
            lambda1: lambda[0],
            lambda2: lambda[1],
            lr,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        log.push(row);
        if progress(&row).is_break() {
            break;
        }
    }
    Ok(TrainOutput { params, log, weights })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_image: Vec<MetricReport>,
    pub summary: MetricReport,
    /// Losses with unit task weights, against clean references.
    pub losses: Vec<LossBreakdown>,
    pub fused: Vec<Tensor>,
    pub densities: Vec<Tensor>,
}

impl Evaluation {
    pub fn mean_l_fusion(&self) -> f64 {
        self.losses.iter().map(|l| l.l_fusion).sum::<f64>() / self.losses.len() as f64
    }

    pub fn mean_l_total(&self) -> f64 {
        self.losses.iter().map(|l| l.l_total).sum::<f64>() / self.losses.len() as f64
    }

    /// `metrics.csv`: one row per image plus a `summary` row of means.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("image");
        for c in MetricReport::COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let mut row = |name: &str, r: &MetricReport| {
            out.push_str(name);
            for v in r.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for (name, r) in names.iter().zip(&self.per_image) {
            row(name, r);
        }
        row("summary", &self.summary);
        out
    }
}

/// Runs both heads on every sample, optionally attacking the inputs first.
pub fn evaluate(
    params: &ModelParams,
    dataset: &[RgbtSample],
    attack: Option<&AttackConfig>,
    eta: [f64; 4],
    count_sigma: f64,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let spec = LossSpec {
        eta,
        lambda: [1.0, 1.0],
        count_sigma,
    };
    let results = dataset
        .par_iter()
        .map(|clean| -> Result<_> {
            clean.validate()?;
            let attacked;
            let input = match attack {
                Some(a) => {
                    attacked = crate::adversary::pgd_attack(params, clean, a, &spec)?;
                    &attacked
                }
                None => clean,
            };
            let pred = forward_images(&input.visible, &input.infrared, params, Heads::Both, &mut ())?;
            let (fused, density) = (pred.fused.expect("fusion head"), pred.density.expect("count head"));
            let vis_y = luminance(&clean.visible);
            let (h, w) = (clean.height(), clean.width());
            let fusion = losses::fusion_loss(&fused, &vis_y, &clean.infrared, eta)?;
            let (_, mh, mw) = density.chw();
            let cells = points_to_cells(&clean.points, (h, w), (mh, mw));
            let l_count = losses::bayesian_count_loss(&density, &cells, count_sigma)?;
            let mut report = MetricReport {
                fusion: fusion_quality(&fused, &vis_y, &clean.infrared)?,
                game: [0.0; GAME_LEVELS],
                rmse: (density.sum() - clean.points.len() as f64).abs(),
            };
            for (l, g) in report.game.iter_mut().enumerate() {
                *g = game(&density, &clean.points, h, w, l)?;
            }
            Ok((report, LossBreakdown::new(fusion, l_count, eta, [1.0, 1.0]), fused, density))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_image = Vec::with_capacity(results.len());
    let mut losses_out = Vec::with_capacity(results.len());
    let mut fused = Vec::with_capacity(results.len());
    let mut densities = Vec::with_capacity(results.len());
    for (r, l, f, d) in results {
        per_image.push(r);
        losses_out.push(l);
        fused.push(f);
        densities.push(d);
    }

    let n = per_image.len() as f64;
    let mut mean = FusionMetrics::default();
    for r in &per_image {
        let f = &r.fusion;
        mean.psnr += f.psnr / n;
        mean.ssim += f.ssim / n;
        mean.qabf += f.qabf / n;
        mean.cc += f.cc / n;
        mean.scd += f.scd / n;
        mean.sd += f.sd / n;
        mean.ag += f.ag / n;
        mean.sf += f.sf / n;
    }
    let sizes: Vec<(usize, usize)> = dataset.iter().map(|s| (s.height(), s.width())).collect();
    let counting = if sizes.iter().all(|s| *s == sizes[0]) {
        let points: Vec<_> = dataset.iter().map(|s| s.points.clone()).collect();
        counting_report(&densities, &points, sizes[0].0, sizes[0].1)?
    } else {
        let mut c = crate::metrics::CountingReport::default();
        for r in &per_image {
            for l in 0..GAME_LEVELS {
                c.game[l] += r.game[l] / n;
            }
            c.rmse += r.rmse * r.rmse / n;
        }
        c.rmse = c.rmse.sqrt();
        c
    };
    Ok(Evaluation {
        per_image,
        summary: MetricReport {
            fusion: mean,
            game: counting.game,
            rmse: counting.rmse,
        },
        losses: losses_out,
        fused,
        densities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny_set(n: usize) -> Vec<RgbtSample> {
        synth_dataset(n, 32, 32, (2, 5), 3).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(10, 10, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(matches!(cosine_lr(11, 10, 1e-3, 1e-5), Err(Error::Schedule(_))));
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::parse(
            "# toy run\nepochs = 3\nlr = 0.001 # peak\nlr_min=1e-6\nseed = 9\neta = 1, 2, 3, 4\nZ = 2.5\nmode = series\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.eta, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cfg.z, 2.5);
        assert_eq!(cfg.mode, Mode::Series);
        assert!(cfg.adversarial.is_none());

        let adv = TrainConfig::parse("adversarial = true\nepsilon = 8\ntarget = infrared\n").unwrap();
        let a = adv.adversarial.unwrap();
        assert_eq!((a.epsilon, a.alpha, a.target), (8.0, 5.0, AttackTarget::Infrared));

        for bad in ["epochs = 0", "lr = 1e-8", "colour = red", "eta = 1,2,3", "noequals", "mode = fast"] {
            assert!(matches!(TrainConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(7, 1, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(7, 1, 20));
        assert_ne!(a, epoch_order(7, 2, 20));
        assert_ne!(a, epoch_order(8, 1, 20));
    }

    #[test]
    fn one_epoch_smoke() {
        let set = tiny_set(4);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 1e-3,
            lr_min: 1e-5,
            ..TrainConfig::default()
        };
        let out = train(&set, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].epoch, 1);
        assert_eq!((out.log[0].lambda1, out.log[0].lambda2), (1.0, 1.0));
        assert_eq!(out.log[0].wall_ms, 0);
        let again = train(&set, &cfg).unwrap();
        assert_eq!(again.params, out.params);
        let csv = log_to_csv(&out.log);
        assert_eq!(log_from_csv(&csv, Path::new("log")).unwrap(), out.log);
    }

    #[test]
    fn zero_epsilon_adv_train_matches_doubled_set() {
        let set = tiny_set(2);
        let doubled: Vec<_> = set.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let mut cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            lr_min: 1e-5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let plain = train(&doubled, &cfg).unwrap();
        cfg.adversarial = Some(AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        });
        let adv = adv_train(&set, &cfg).unwrap();
        assert_eq!(adv.params, plain.params);
        assert_eq!(adv.log, plain.log);
    }

    #[test]
    fn zero_model_game_is_mean_count() {
        let set = tiny_set(3);
        let params = init_params_for(Mode::Multitask, 1).zeroed();
        let ev = evaluate(&params, &set, None, losses::DEFAULT_ETA, 4.0).unwrap();
        let mean = set.iter().map(|s| s.points.len() as f64).sum::<f64>() / 3.0;
        assert!((ev.summary.game[0] - mean).abs() < 1e-12);
        assert_eq!(ev.per_image.len(), 3);
        let names: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let csv = ev.to_csv(&names);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().last().unwrap().starts_with("summary,"));
    }
}
