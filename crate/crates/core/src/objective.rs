//! Per-sample multi-task objective with gradients for parameters and inputs.

use crate::autodiff::Graph;
use crate::data::{luminance, Point, RgbtSample};
use crate::error::{Error, Result};
use crate::losses::{self, FusionLoss, LossBreakdown};
use crate::model::{forward_graph, Binder, Heads, ModelParams};
use crate::tensor::Tensor;

/// Loss hyperparameters of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub eta: [f64; 4],
    pub lambda: [f64; 2],
    pub count_sigma: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            eta: losses::DEFAULT_ETA,
            lambda: [1.0, 1.0],
            count_sigma: losses::DEFAULT_COUNT_SIGMA,
        }
    }
}

impl LossSpec {
    /// Heads needed for the nonzero task weights.
    pub fn heads(&self) -> Result<Heads> {
        if let Some(l) = self.lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Loss(format!("lambda must be finite and nonnegative, got {l}")));
        }
        match (self.lambda[0] > 0.0, self.lambda[1] > 0.0) {
            (true, true) => Ok(Heads::Both),
            (true, false) => Ok(Heads::FusionOnly),
            (false, true) => Ok(Heads::CountOnly),
            (false, false) => Err(Error::Loss("both task weights are zero".into())),
        }
    }
}

/// Supervision for one sample: clean fusion references and count labels.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub vis_y: &'a Tensor,
    pub infrared: &'a Tensor,
    pub points: &'a [Point],
}

#[derive(Clone, Debug)]
pub struct SampleEval {
    pub breakdown: LossBreakdown,
    /// Gradients parallel to the parameter entries (zero for unused ones).
    pub param_grads: Option<ModelParams>,
    /// Gradients with respect to the visible and infrared inputs.
    pub input_grads: Option<(Tensor, Tensor)>,
}

/// Points scaled from image pixels to density-map cells.
pub fn points_to_cells(points: &[Point], img: (usize, usize), map: (usize, usize)) -> Vec<(f64, f64)> {
    let sy = map.0 as f64 / img.0 as f64;
    let sx = map.1 as f64 / img.1 as f64;
    points.iter().map(|p| (p.x * sx, p.y * sy)).collect()
}

/// Evaluates the weighted loss of `(visible, infrared)` against `targets`,
/// optionally back-propagating into parameters and/or inputs.
pub fn evaluate_sample(
    params: &ModelParams,
    visible: &Tensor,
    infrared: &Tensor,
    targets: Targets<'_>,
    spec: &LossSpec,
    param_grads: bool,
    input_grads: bool,
) -> Result<SampleEval> {
    let heads = spec.heads()?;
    let mut g = Graph::new();
    let mut b = Binder::new(params, param_grads);
    let v = g.leaf(visible, input_grads);
    let i = g.leaf(infrared, input_grads);
    let out = forward_graph(&mut g, &mut b, v, i, heads, &mut ())?;

    let mut seeds = Vec::with_capacity(2);
    let mut fusion = FusionLoss::default();
    if let Some(f) = out.fused {
        let (parts, mut grad) = losses::fusion_loss_grad(g.value(f), targets.vis_y, targets.infrared, spec.eta)?;
        fusion = parts;
        grad.scale(spec.lambda[0]);
        seeds.push((f, grad));
    }
    let mut l_count = 0.0;
    if let Some(d) = out.density {
        let dens = g.value(d);
        let (_, mh, mw) = dens.chw();
        let (_, ih, iw) = visible.chw();
        let cells = points_to_cells(targets.points, (ih, iw), (mh, mw));
        let (l, mut grad) = losses::bayesian_count_loss_grad(dens, &cells, spec.count_sigma)?;
        l_count = l;
        grad.scale(spec.lambda[1]);
        seeds.push((d, grad));
    }
    let breakdown = LossBreakdown::new(fusion, l_count, spec.eta, spec.lambda);

    if !(param_grads || input_grads) {
        return Ok(SampleEval {
            breakdown,
            param_grads: None,
            input_grads: None,
        });
    }
    let mut grads = g.backward(seeds);
    let pg = param_grads.then(|| {
        let mut out = params.zeroed();
        for (k, var) in b.bound().iter().enumerate() {
            if let Some(t) = var.and_then(|v| grads.take(v)) {
                *out.tensor_mut(k) = t;
            }
        }
        out
    });
    let ig = if input_grads {
        let gv = grads.take(v).unwrap_or_else(|| Tensor::zeros(visible.shape()));
        let gi = grads.take(i).unwrap_or_else(|| Tensor::zeros(infrared.shape()));
        Some((gv, gi))
    } else {
        None
    };
    Ok(SampleEval {
        breakdown,
        param_grads: pg,
        input_grads: ig,
    })
}

/// Clean targets of a sample, with the visible luminance computed once.
pub struct OwnedTargets {
    pub vis_y: Tensor,
    pub infrared: Tensor,
    pub points: Vec<Point>,
}

impl OwnedTargets {
    pub fn of(sample: &RgbtSample) -> Self {
        Self {
            vis_y: luminance(&sample.visible),
            infrared: sample.infrared.clone(),
            points: sample.points.clone(),
        }
    }

    pub fn view(&self) -> Targets<'_> {
        Targets {
            vis_y: &self.vis_y,
            infrared: &self.infrared,
            points: &self.points,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneConfig};
    use crate::model::{init_params_for, Mode};

    fn sample() -> RgbtSample {
        synth_scene(&SceneConfig {
            width: 32,
            height: 32,
            n_people: 3,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn heads_follow_lambda() {
        let mut s = LossSpec::default();
        assert_eq!(s.heads().unwrap(), Heads::Both);
        s.lambda = [1.0, 0.0];
        assert_eq!(s.heads().unwrap(), Heads::FusionOnly);
        s.lambda = [0.0, 2.0];
        assert_eq!(s.heads().unwrap(), Heads::CountOnly);
        s.lambda = [0.0, 0.0];
        assert!(s.heads().is_err());
        s.lambda = [f64::NAN, 1.0];
        assert!(s.heads().is_err());
    }

    #[test]
    fn total_matches_components() {
        let s = sample();
        let t = OwnedTargets::of(&s);
        let p = init_params_for(Mode::Multitask, 3);
        let spec = LossSpec {
            lambda: [0.7, 1.3],
            ..LossSpec::default()
        };
        let e = evaluate_sample(&p, &s.visible, &s.infrared, t.view(), &spec, true, true).unwrap();
        let b = e.breakdown;
        assert!((b.l_total - (0.7 * b.l_fusion + 1.3 * b.l_count)).abs() < 1e-9);
        let pg = e.param_grads.unwrap();
        assert_eq!(pg.len(), p.len());
        assert!(pg.entries().iter().any(|(_, t)| t.max_abs() > 0.0));
        let (gv, gi) = e.input_grads.unwrap();
        assert_eq!(gv.shape(), s.visible.shape());
        assert_eq!(gi.shape(), s.infrared.shape());
    }

    #[test]
    fn single_task_leaves_other_head_untouched() {
        let s = sample();
        let t = OwnedTargets::of(&s);
        let p = init_params_for(Mode::Multitask, 3);
        let spec = LossSpec {
            lambda: [1.0, 0.0],
            ..LossSpec::default()
        };
        let e = evaluate_sample(&p, &s.visible, &s.infrared, t.view(), &spec, true, false).unwrap();
        assert_eq!(e.breakdown.l_count, 0.0);
        let pg = e.param_grads.unwrap();
        assert_eq!(pg.get("count.2.weight").unwrap().max_abs(), 0.0);
        assert!(pg.get("fuse.head.2.weight").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn point_scaling() {
        let c = points_to_cells(&[Point::new(32.0, 16.0)], (64, 64), (4, 4));
        assert_eq!(c, vec![(2.0, 1.0)]);
    }
}
