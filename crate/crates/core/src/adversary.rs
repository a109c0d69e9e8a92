//! PGD adversarial examples and adversarial training-set augmentation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::RgbtSample;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::{evaluate_sample, LossSpec, OwnedTargets};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackTarget {
    Visible,
    Infrared,
    Both,
}

impl AttackTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackTarget::Visible => "visible",
            AttackTarget::Infrared => "infrared",
            AttackTarget::Both => "both",
        }
    }

    fn visible(self) -> bool {
        self != AttackTarget::Infrared
    }

    fn infrared(self) -> bool {
        self != AttackTarget::Visible
    }
}

impl fmt::Display for AttackTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(AttackTarget::Visible),
            "infrared" => Ok(AttackTarget::Infrared),
            "both" => Ok(AttackTarget::Both),
            _ => Err(Error::Config(format!("unknown attack target {s:?} (visible|infrared|both)"))),
        }
    }
}

/// Which loss the attack ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackLoss {
    Total,
    Fusion,
    Count,
}

impl AttackLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackLoss::Total => "total",
            AttackLoss::Fusion => "fusion",
            AttackLoss::Count => "count",
        }
    }
}

impl FromStr for AttackLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(AttackLoss::Total),
            "fusion" => Ok(AttackLoss::Fusion),
            "count" => Ok(AttackLoss::Count),
            _ => Err(Error::Config(format!("unknown attack objective {s:?} (total|fusion|count)"))),
        }
    }
}

/// PGD settings; `epsilon` and `alpha` are in 8-bit intensity units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iters: usize,
    pub target: AttackTarget,
    pub objective: AttackLoss,
    /// Regenerate adversarial examples from the current parameters each epoch.
    pub per_epoch: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 20.0,
            alpha: 5.0,
            iters: 7,
            target: AttackTarget::Both,
            objective: AttackLoss::Total,
            per_epoch: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Task weights of the attacked loss given the training weights.
    pub fn attack_lambda(&self, lambda: [f64; 2]) -> [f64; 2] {
        match self.objective {
            AttackLoss::Total => lambda,
            AttackLoss::Fusion => [1.0, 0.0],
            AttackLoss::Count => [0.0, 1.0],
        }
    }
}

/// Differentiable scalar loss of an input pair.
pub trait AttackObjective {
    /// Loss and its gradients with respect to the visible and infrared inputs.
    fn loss_and_input_grad(&self, visible: &Tensor, infrared: &Tensor) -> Result<(f64, Tensor, Tensor)>;
}

/// The multi-task loss of a fixed model against clean labels.
pub struct ModelObjective<'a> {
    pub params: &'a ModelParams,
    pub targets: &'a OwnedTargets,
    pub spec: LossSpec,
}

impl AttackObjective for ModelObjective<'_> {
    fn loss_and_input_grad(&self, visible: &Tensor, infrared: &Tensor) -> Result<(f64, Tensor, Tensor)> {
        let e = evaluate_sample(self.params, visible, infrared, self.targets.view(), &self.spec, false, true)?;
        let (gv, gi) = e.input_grads.expect("input gradients requested");
        Ok((e.breakdown.l_total, gv, gi))
    }
}

fn step(x: &mut Tensor, x0: &Tensor, grad: &Tensor, alpha: f64, eps: f64) {
    for ((v, &o), &g) in x.data_mut().iter_mut().zip(x0.data()).zip(grad.data()) {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        *v = (*v + alpha * s).clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

/// Projected signed-gradient ascent from `(visible, infrared)` with no random start.
pub fn pgd(
    objective: &dyn AttackObjective,
    visible: &Tensor,
    infrared: &Tensor,
    cfg: &AttackConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (eps, alpha) = (cfg.epsilon / 255.0, cfg.alpha / 255.0);
    let (mut xv, mut xi) = (visible.clone(), infrared.clone());
    if eps == 0.0 {
        return Ok((xv, xi));
    }
    for it in 0..cfg.iters {
        let (_, gv, gi) = objective.loss_and_input_grad(&xv, &xi)?;
        if !(gv.all_finite() && gi.all_finite()) {
            return Err(Error::Attack(format!("non-finite input gradient at step {}", it + 1)));
        }
        if cfg.target.visible() {
            step(&mut xv, visible, &gv, alpha, eps);
        }
        if cfg.target.infrared() {
            step(&mut xi, infrared, &gi, alpha, eps);
        }
    }
    Ok((xv, xi))
}

/// Attacked copy of `sample`; labels are carried over unchanged.
pub fn pgd_attack(params: &ModelParams, sample: &RgbtSample, cfg: &AttackConfig, spec: &LossSpec) -> Result<RgbtSample> {
    let targets = OwnedTargets::of(sample);
    let objective = ModelObjective {
        params,
        targets: &targets,
        spec: LossSpec {
            lambda: cfg.attack_lambda(spec.lambda),
            ..*spec
        },
    };
    let (visible, infrared) = pgd(&objective, &sample.visible, &sample.infrared, cfg)?;
    Ok(RgbtSample {
        visible,
        infrared,
        points: sample.points.clone(),
        gt_density: sample.gt_density.clone(),
    })
}

/// Attacks every sample in parallel, preserving order.
pub fn attack_dataset(
    params: &ModelParams,
    samples: &[RgbtSample],
    cfg: &AttackConfig,
    spec: &LossSpec,
) -> Result<Vec<RgbtSample>> {
    samples.par_iter().map(|s| pgd_attack(params, s, cfg, spec)).collect()
}

/// One element of an adversarially augmented stream.
#[derive(Clone, Debug)]
pub struct AugmentedSample<'a> {
    /// Images fed to the network.
    pub visible: &'a Tensor,
    pub infrared: &'a Tensor,
    /// Index of the clean twin whose images and labels supervise this input.
    pub clean_index: usize,
    pub adversarial: bool,
}

/// Interleaved `[c0, a0, c1, a1, ...]` stream of clean and adversarial inputs.
pub fn augment_epoch<'a>(clean: &'a [RgbtSample], adversarial: &'a [RgbtSample]) -> Result<Vec<AugmentedSample<'a>>> {
    if clean.is_empty() {
        return Err(Error::Attack("cannot augment an empty dataset".into()));
    }
    if clean.len() != adversarial.len() {
        return Err(Error::Attack(format!(
            "{} clean samples but {} adversarial",
            clean.len(),
            adversarial.len()
        )));
    }
    Ok(clean
        .iter()
        .zip(adversarial)
        .enumerate()
        .flat_map(|(k, (c, a))| {
            [
                AugmentedSample {
                    visible: &c.visible,
                    infrared: &c.infrared,
                    clean_index: k,
                    adversarial: false,
                },
                AugmentedSample {
                    visible: &a.visible,
                    infrared: &a.infrared,
                    clean_index: k,
                    adversarial: true,
                },
            ]
        })
        .collect())
}

/// L-infinity distance between two equally shaped tensors.
pub fn linf(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneConfig};
    use crate::model::{init_params_for, Mode};

    struct SumProbe;

    impl AttackObjective for SumProbe {
        fn loss_and_input_grad(&self, v: &Tensor, i: &Tensor) -> Result<(f64, Tensor, Tensor)> {
            Ok((v.sum() + i.sum(), Tensor::full(v.shape(), 1.0), Tensor::full(i.shape(), 1.0)))
        }
    }

    fn sample() -> RgbtSample {
        synth_scene(&SceneConfig {
            width: 32,
            height: 32,
            n_people: 4,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn linear_probe_hits_the_ball() {
        let v = Tensor::full(&[3, 4, 4], 0.3);
        let i = Tensor::full(&[1, 4, 4], 0.95);
        let (av, ai) = pgd(&SumProbe, &v, &i, &AttackConfig::default()).unwrap();
        for x in av.data() {
            assert!((x - (0.3 + 20.0 / 255.0)).abs() < 1e-12);
        }
        for x in ai.data() {
            assert_eq!(*x, 1.0);
        }
    }

    #[test]
    fn target_selects_channels() {
        let v = Tensor::full(&[3, 4, 4], 0.3);
        let i = Tensor::full(&[1, 4, 4], 0.3);
        let cfg = AttackConfig {
            target: AttackTarget::Infrared,
            ..AttackConfig::default()
        };
        let (av, ai) = pgd(&SumProbe, &v, &i, &cfg).unwrap();
        assert_eq!(av, v);
        assert!(ai.data().iter().all(|x| *x > 0.3));
    }

    #[test]
    fn trivial_configs_are_identity() {
        let s = sample();
        let p = init_params_for(Mode::Multitask, 1);
        for cfg in [
            AttackConfig {
                iters: 0,
                ..AttackConfig::default()
            },
            AttackConfig {
                epsilon: 0.0,
                ..AttackConfig::default()
            },
        ] {
            let a = pgd_attack(&p, &s, &cfg, &LossSpec::default()).unwrap();
            assert_eq!(a, s);
        }
    }

    #[test]
    fn model_attack_stays_in_ball_and_keeps_labels() {
        let s = sample();
        let p = init_params_for(Mode::Multitask, 1);
        let a = pgd_attack(&p, &s, &AttackConfig::default(), &LossSpec::default()).unwrap();
        assert!(linf(&a.visible, &s.visible) <= 20.0 / 255.0 + 1e-15);
        assert!(linf(&a.infrared, &s.infrared) <= 20.0 / 255.0 + 1e-15);
        assert!(a.visible.data().iter().chain(a.infrared.data()).all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(a.points, s.points);
        assert_eq!(a.gt_density, s.gt_density);
    }

    #[test]
    fn augmentation_interleaves() {
        let clean = vec![sample(); 3];
        let adv = clean.clone();
        let stream = augment_epoch(&clean, &adv).unwrap();
        assert_eq!(stream.len(), 6);
        let tags: Vec<_> = stream.iter().map(|s| (s.clean_index, s.adversarial)).collect();
        assert_eq!(tags, vec![(0, false), (0, true), (1, false), (1, true), (2, false), (2, true)]);
        assert!(augment_epoch(&[], &[]).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let v = Tensor::full(&[3, 2, 2], 0.5);
        let i = Tensor::full(&[1, 2, 2], 0.5);
        let cfg = AttackConfig {
            alpha: 0.0,
            ..AttackConfig::default()
        };
        assert!(matches!(pgd(&SumProbe, &v, &i, &cfg), Err(Error::Config(_))));
        assert!("sideways".parse::<AttackTarget>().is_err());
    }
}
