//! Shared two-stream encoder with per-layer cross-modal mixing, the fusion
//! decoder and the counting decoder.
//!
//! Layer `k` (1-based) of each stream is a stride-2 3x3 convolution followed
//! by a leaky rectifier. Both streams of layer `k + 1` read their own layer-`k`
//! output plus the mixed feature `m^k`. The fusion decoder climbs back up
//! the pyramid with bilinear upsampling and skip concatenation of `m^k`;
//! the counting decoder reads the deepest stream and mixed features directly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::RgbtSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const LEAKY_SLOPE: f64 = 0.01;
const HEAD_WIDTH: usize = 16;
const COUNT_WIDTH: usize = 32;
/// Spatial reduction of the density map relative to the input.
pub const DENSITY_STRIDE: usize = 16;

/// Training/ablation mode. Also recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Multitask,
    StFusion,
    StCount,
    NoDw,
    Series,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Multitask, Mode::StFusion, Mode::StCount, Mode::NoDw, Mode::Series];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Multitask => "multitask",
            Mode::StFusion => "st_fusion",
            Mode::StCount => "st_count",
            Mode::NoDw => "no_dw",
            Mode::Series => "series",
        }
    }

    pub fn is_series(self) -> bool {
        self == Mode::Series
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Which decoder heads to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Both,
    FusionOnly,
    CountOnly,
}

impl Heads {
    pub fn fusion(self) -> bool {
        self != Heads::CountOnly
    }

    pub fn count(self) -> bool {
        self != Heads::FusionOnly
    }
}

/// All learnable tensors, in a fixed order. Values are kept on the `f32`
/// grid so checkpoints round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    mode: Mode,
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_entries(mode: Mode, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (name, t)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Model(format!("duplicate parameter {name}")));
            }
            if !t.all_finite() {
                return Err(Error::Model(format!("parameter {name} is not finite")));
            }
        }
        let params = Self { mode, entries, index };
        params.check_layout()?;
        Ok(params)
    }

    /// Verifies names and shapes against the architecture of `mode`.
    fn check_layout(&self) -> Result<()> {
        let expected = layout(self.mode);
        if expected.len() != self.entries.len() {
            return Err(Error::Model(format!(
                "{} mode expects {} parameter tensors, found {}",
                self.mode,
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(&self.entries) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Model(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {have} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters set to zero (same layout).
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in &mut z.entries {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }
}

fn conv_shape(out: usize, inp: usize, k: usize) -> Vec<usize> {
    vec![out, inp, k, k]
}

/// `(name, shape)` of every parameter for the given mode.
fn layout(mode: Mode) -> Vec<(String, Vec<usize>)> {
    let mut l = Vec::new();
    let mut conv = |name: String, out: usize, inp: usize, k: usize| {
        l.push((format!("{name}.weight"), conv_shape(out, inp, k)));
        l.push((format!("{name}.bias"), vec![out]));
    };
    for k in 0..4 {
        let vin = if k == 0 { 3 } else { WIDTHS[k - 1] };
        let iin = if k == 0 { 1 } else { WIDTHS[k - 1] };
        conv(format!("enc.vis.{}", k + 1), WIDTHS[k], vin, 3);
        conv(format!("enc.ir.{}", k + 1), WIDTHS[k], iin, 3);
        conv(format!("mix.{}", k + 1), WIDTHS[k], 2 * WIDTHS[k], 1);
    }
    for k in (0..3).rev() {
        conv(format!("fuse.dec.{}", k + 1), WIDTHS[k], WIDTHS[k + 1] + WIDTHS[k], 3);
    }
    conv("fuse.head.1".into(), HEAD_WIDTH, WIDTHS[0], 3);
    conv("fuse.head.2".into(), 1, HEAD_WIDTH, 3);
    if mode.is_series() {
        for k in 0..4 {
            let inp = if k == 0 { 1 } else { WIDTHS[k - 1] };
            conv(format!("series.enc.{}", k + 1), WIDTHS[k], inp, 3);
        }
        conv("series.count.1".into(), COUNT_WIDTH, WIDTHS[3], 3);
        conv("series.count.2".into(), 1, COUNT_WIDTH, 3);
    } else {
        conv("count.1".into(), COUNT_WIDTH, 3 * WIDTHS[3], 3);
        conv("count.2".into(), 1, COUNT_WIDTH, 3);
    }
    l
}

/// Parallel-architecture parameters for `seed`.
pub fn init_params(seed: u64) -> ModelParams {
    init_params_for(Mode::Multitask, seed)
}

/// Starting bias of the final counting layer, keeping the rectifier active.
pub const COUNT_BIAS_INIT: f64 = 0.5;

/// He-uniform weights `U(-b, b)`, `b = sqrt(6 / fan_in)`; zero biases except
/// the final counting layer, which starts at [`COUNT_BIAS_INIT`].
pub fn init_params_for(mode: Mode, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = layout(mode)
        .into_iter()
        .map(|(name, shape)| {
            let t = if shape.len() == 4 {
                let bound = init_bound(&shape);
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| rng.random_range(-bound..bound) as f32 as f64)
                    .collect();
                Tensor::from_vec(&shape, data)
            } else if name.ends_with("count.2.bias") {
                Tensor::full(&shape, COUNT_BIAS_INIT)
            } else {
                Tensor::zeros(&shape)
            };
            (name, t)
        })
        .collect();
    ModelParams::from_entries(mode, entries).expect("layout is self-consistent")
}

pub(crate) fn init_bound(shape: &[usize]) -> f64 {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    (6.0 / fan_in).sqrt()
}

/// Per-layer encoder features, `k = 1..4` stored at index `k - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub vis_feat: Vec<Tensor>,
    pub ir_feat: Vec<Tensor>,
    pub mixed: Vec<Tensor>,
}

/// Parameters bound lazily into one graph.
pub(crate) struct Binder<'p> {
    params: &'p ModelParams,
    vars: Vec<Option<Var>>,
    tracked: bool,
}

impl<'p> Binder<'p> {
    pub(crate) fn new(params: &'p ModelParams, tracked: bool) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
            tracked,
        }
    }

    fn var(&mut self, g: &mut Graph<'p>, name: &str) -> Result<Var> {
        let i = self.params.index_of(name)?;
        Ok(*self.vars[i].get_or_insert_with(|| g.leaf(self.params.tensor(i), self.tracked)))
    }

    fn conv(&mut self, g: &mut Graph<'p>, x: Var, layer: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(g, &format!("{layer}.weight"))?;
        let b = self.var(g, &format!("{layer}.bias"))?;
        g.conv2d(x, w, b, stride, pad)
    }

    fn conv_act(&mut self, g: &mut Graph<'p>, x: Var, layer: &str, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(g, x, layer, stride, pad)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Bound parameter vars, parallel to `ModelParams::entries`.
    pub(crate) fn bound(&self) -> &[Option<Var>] {
        &self.vars
    }
}

pub(crate) struct VarPyramid {
    pub vis: Vec<Var>,
    pub ir: Vec<Var>,
    pub mixed: Vec<Var>,
}

fn check_input(g: &Graph, vis: Var, ir: Var) -> Result<()> {
    let (vc, h, w) = g.value(vis).chw();
    let (ic, ih, iw) = g.value(ir).chw();
    if vc != 3 || ic != 1 || (h, w) != (ih, iw) {
        return Err(Error::Model(format!(
            "expected [3,H,W] visible and [1,H,W] infrared, got {:?} and {:?}",
            g.value(vis).shape(),
            g.value(ir).shape()
        )));
    }
    if h % DENSITY_STRIDE != 0 || w % DENSITY_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Model(format!("input {h}x{w} is not divisible by {DENSITY_STRIDE}")));
    }
    Ok(())
}

pub(crate) fn mix_graph<'p>(g: &mut Graph<'p>, b: &mut Binder<'p>, fv: Var, fi: Var, layer: usize) -> Result<Var> {
    if g.value(fv).shape() != g.value(fi).shape() {
        return Err(Error::Model(format!(
            "mix shape mismatch: {:?} vs {:?}",
            g.value(fv).shape(),
            g.value(fi).shape()
        )));
    }
    let cat = g.concat(&[fv, fi])?;
    b.conv_act(g, cat, &format!("mix.{layer}"), 1, 0)
}

pub(crate) fn encode_graph<'p>(g: &mut Graph<'p>, b: &mut Binder<'p>, vis: Var, ir: Var) -> Result<VarPyramid> {
    check_input(g, vis, ir)?;
    let mut pyr = VarPyramid {
        vis: Vec::with_capacity(4),
        ir: Vec::with_capacity(4),
        mixed: Vec::with_capacity(4),
    };
    let (mut xv, mut xi) = (vis, ir);
    for k in 1..=4 {
        let fv = b.conv_act(g, xv, &format!("enc.vis.{k}"), 2, 1)?;
        let fi = b.conv_act(g, xi, &format!("enc.ir.{k}"), 2, 1)?;
        let m = mix_graph(g, b, fv, fi, k)?;
        pyr.vis.push(fv);
        pyr.ir.push(fi);
        pyr.mixed.push(m);
        if k < 4 {
            xv = g.add(fv, m)?;
            xi = g.add(fi, m)?;
        }
    }
    Ok(pyr)
}

/// Returns the decoder states `A^1..A^4` and the fused image.
pub(crate) fn decode_fusion_graph<'p>(
    g: &mut Graph<'p>,
    b: &mut Binder<'p>,
    mixed: &[Var],
) -> Result<(Vec<Var>, Var)> {
    if mixed.len() != 4 {
        return Err(Error::Model(format!("fusion decoder needs 4 pyramid levels, got {}", mixed.len())));
    }
    let mut states = vec![mixed[3]];
    let mut a = mixed[3];
    for k in (1..=3).rev() {
        let up = g.upsample2x(a);
        let cat = g.concat(&[up, mixed[k - 1]])?;
        a = b.conv_act(g, cat, &format!("fuse.dec.{k}"), 1, 1)?;
        states.push(a);
    }
    states.reverse();
    let up = g.upsample2x(a);
    let hidden = b.conv_act(g, up, "fuse.head.1", 1, 1)?;
    let logits = b.conv(g, hidden, "fuse.head.2", 1, 1)?;
    Ok((states, g.sigmoid(logits)))
}

pub(crate) fn decode_count_graph<'p>(g: &mut Graph<'p>, b: &mut Binder<'p>, pyr: &VarPyramid) -> Result<Var> {
    if pyr.vis.len() != 4 || pyr.ir.len() != 4 || pyr.mixed.len() != 4 {
        return Err(Error::Model("counting decoder needs 4 pyramid levels".into()));
    }
    let cat = g.concat(&[pyr.vis[3], pyr.ir[3], pyr.mixed[3]])?;
    let hidden = b.conv_act(g, cat, "count.1", 1, 1)?;
    let out = b.conv(g, hidden, "count.2", 1, 1)?;
    Ok(g.relu(out))
}

/// Series ablation: a separate single-stream encoder re-extracts features
/// from the fused image before counting.
pub(crate) fn series_count_graph<'p>(g: &mut Graph<'p>, b: &mut Binder<'p>, fused: Var) -> Result<Var> {
    let mut x = fused;
    for k in 1..=4 {
        x = b.conv_act(g, x, &format!("series.enc.{k}"), 2, 1)?;
    }
    let hidden = b.conv_act(g, x, "series.count.1", 1, 1)?;
    let out = b.conv(g, hidden, "series.count.2", 1, 1)?;
    Ok(g.relu(out))
}

/// Graph-level forward pass shared by inference, training and attacks.
pub(crate) struct GraphOutputs {
    pub fused: Option<Var>,
    pub density: Option<Var>,
}

pub(crate) fn forward_graph<'p>(
    g: &mut Graph<'p>,
    b: &mut Binder<'p>,
    vis: Var,
    ir: Var,
    heads: Heads,
    observer: &mut dyn ForwardObserver,
) -> Result<GraphOutputs> {
    let pyr = encode_graph(g, b, vis, ir)?;
    observer.on_encode();
    if b.params.mode().is_series() {
        let (_, fused) = decode_fusion_graph(g, b, &pyr.mixed)?;
        let density = if heads.count() {
            Some(series_count_graph(g, b, fused)?)
        } else {
            None
        };
        return Ok(GraphOutputs {
            fused: heads.fusion().then_some(fused),
            density,
        });
    }
    let fused = if heads.fusion() {
        Some(decode_fusion_graph(g, b, &pyr.mixed)?.1)
    } else {
        None
    };
    let density = if heads.count() {
        Some(decode_count_graph(g, b, &pyr)?)
    } else {
        None
    };
    Ok(GraphOutputs { fused, density })
}

/// Instrumentation hook for forward passes.
pub trait ForwardObserver {
    fn on_encode(&mut self) {}
}

impl ForwardObserver for () {}

/// Counts shared-encoder passes.
#[derive(Debug, Default)]
pub struct EncodeCounter(pub usize);

impl ForwardObserver for EncodeCounter {
    fn on_encode(&mut self) {
        self.0 += 1;
    }
}

/// Cross-modal interaction `m^k` of two same-shape layer-`k` features.
pub fn mix(f_vis: &Tensor, f_ir: &Tensor, params: &ModelParams, layer: usize) -> Result<Tensor> {
    if !(1..=4).contains(&layer) {
        return Err(Error::Model(format!("layer must be in 1..=4, got {layer}")));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let (fv, fi) = (g.leaf(f_vis, false), g.leaf(f_ir, false));
    let m = mix_graph(&mut g, &mut b, fv, fi, layer)?;
    Ok(g.into_value(m))
}

pub fn encode(visible: &Tensor, infrared: &Tensor, params: &ModelParams) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let (v, i) = (g.leaf(visible, false), g.leaf(infrared, false));
    let pyr = encode_graph(&mut g, &mut b, v, i)?;
    let take = |vars: &[Var]| vars.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
    Ok(FeaturePyramid {
        vis_feat: take(&pyr.vis),
        ir_feat: take(&pyr.ir),
        mixed: take(&pyr.mixed),
    })
}

fn check_pyramid(p: &FeaturePyramid) -> Result<()> {
    if p.vis_feat.len() != 4 || p.ir_feat.len() != 4 || p.mixed.len() != 4 {
        return Err(Error::Model(format!(
            "incomplete pyramid: {}/{}/{} levels",
            p.vis_feat.len(),
            p.ir_feat.len(),
            p.mixed.len()
        )));
    }
    Ok(())
}

/// Fusion decoder states `A^1..A^4` (index `k - 1`) and the fused image.
pub fn decode_fusion_states(pyramid: &FeaturePyramid, params: &ModelParams) -> Result<(Vec<Tensor>, Tensor)> {
    check_pyramid(pyramid)?;
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let mixed: Vec<Var> = pyramid.mixed.iter().map(|t| g.leaf(t, false)).collect();
    let (states, fused) = decode_fusion_graph(&mut g, &mut b, &mixed)?;
    let states = states.iter().map(|&s| g.value(s).clone()).collect();
    Ok((states, g.into_value(fused)))
}

/// Fused luminance image `[1, H, W]` in `[0, 1]`.
pub fn decode_fusion(pyramid: &FeaturePyramid, params: &ModelParams) -> Result<Tensor> {
    decode_fusion_states(pyramid, params).map(|(_, f)| f)
}

/// Nonnegative density map `[1, H/16, W/16]`.
pub fn decode_count(pyramid: &FeaturePyramid, params: &ModelParams) -> Result<Tensor> {
    check_pyramid(pyramid)?;
    if params.mode().is_series() {
        return Err(Error::Model("series models count from the fused image; use forward".into()));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let lift = |g: &mut Graph<'_>, ts: &[Tensor]| -> Vec<Var> {
        // Cloned leaves: the pyramid outlives the graph only within this call.
        ts.iter().map(|t| g.leaf_owned(t.clone(), false)).collect()
    };
    let pyr = VarPyramid {
        vis: lift(&mut g, &pyramid.vis_feat),
        ir: lift(&mut g, &pyramid.ir_feat),
        mixed: lift(&mut g, &pyramid.mixed),
    };
    let d = decode_count_graph(&mut g, &mut b, &pyr)?;
    Ok(g.into_value(d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub fused: Option<Tensor>,
    pub density: Option<Tensor>,
}

impl Prediction {
    pub fn count(&self) -> Option<f64> {
        self.density.as_ref().map(Tensor::sum)
    }
}

pub fn forward_images(
    visible: &Tensor,
    infrared: &Tensor,
    params: &ModelParams,
    heads: Heads,
    observer: &mut dyn ForwardObserver,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let (v, i) = (g.leaf(visible, false), g.leaf(infrared, false));
    let out = forward_graph(&mut g, &mut b, v, i, heads, observer)?;
    Ok(Prediction {
        fused: out.fused.map(|f| g.value(f).clone()),
        density: out.density.map(|d| g.value(d).clone()),
    })
}

/// Both heads from one shared encoder pass.
pub fn forward(sample: &RgbtSample, params: &ModelParams) -> Result<(Tensor, Tensor)> {
    let p = forward_images(&sample.visible, &sample.infrared, params, Heads::Both, &mut ())?;
    Ok((p.fused.expect("fusion head"), p.density.expect("count head")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneConfig};

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params(1);
        assert_eq!(a, init_params(1));
        assert_ne!(a, init_params(2));
        for (name, t) in a.entries() {
            assert!(t.all_finite());
            if t.shape().len() == 4 {
                assert!(t.max_abs() <= init_bound(t.shape()), "{name}");
            } else if name.ends_with("count.2.bias") {
                assert_eq!(t.data(), &[COUNT_BIAS_INIT]);
            } else {
                assert_eq!(t.max_abs(), 0.0, "{name}");
            }
            assert!(t.data().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn mix_zero_in_zero_out_and_shape() {
        let p = init_params(3);
        for k in 1..=4 {
            let (c, s) = (WIDTHS[k - 1], 64 >> k);
            let z = Tensor::zeros(&[c, s, s]);
            let m = mix(&z, &z, &p, k).unwrap();
            assert_eq!(m.shape(), &[c, s, s]);
            assert!(m.data().iter().all(|&v| v == 0.0));
            let r = random_image(c, s, s, k as u64);
            assert_eq!(mix(&r, &r, &p, k).unwrap().shape(), r.shape());
        }
        let bad = Tensor::zeros(&[16, 8, 8]);
        assert!(mix(&bad, &Tensor::zeros(&[16, 4, 4]), &p, 1).is_err());
    }

    #[test]
    fn mix_hand_computed() {
        // Layer 1 has 16 channels; use a 2x2 spatial map and an
        // identity-like kernel: output channel o reads input o (vis) and
        // input 16 + o (ir) with weights 1 and 0.5.
        let mut p = init_params(0).zeroed();
        let idx = p.index_of("mix.1.weight").unwrap();
        let w = p.tensor_mut(idx);
        for o in 0..16 {
            w.data_mut()[o * 32 + o] = 1.0;
            w.data_mut()[o * 32 + 16 + o] = 0.5;
        }
        let bidx = p.index_of("mix.1.bias").unwrap();
        p.tensor_mut(bidx).data_mut()[0] = 0.25;
        let mut fv = Tensor::zeros(&[16, 2, 2]);
        let mut fi = Tensor::zeros(&[16, 2, 2]);
        fv.data_mut()[..4].copy_from_slice(&[1.0, -2.0, 0.5, 0.0]);
        fi.data_mut()[..4].copy_from_slice(&[2.0, 1.0, -3.0, 4.0]);
        let m = mix(&fv, &fi, &p, 1).unwrap();
        // channel 0: v + 0.5 i + 0.25 -> [2.25, -1.25, -0.75, 2.25], leaky below 0.
        let expect = [2.25, -1.25 * LEAKY_SLOPE, -0.75 * LEAKY_SLOPE, 2.25];
        for (a, e) in m.channel(0).iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
        assert!(m.channel(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_shapes() {
        let p = init_params(4);
        let vis = random_image(3, 64, 64, 1);
        let ir = random_image(1, 64, 64, 2);
        let pyr = encode(&vis, &ir, &p).unwrap();
        for k in 0..4 {
            let s = 32 >> k;
            assert_eq!(pyr.vis_feat[k].shape(), &[WIDTHS[k], s, s]);
            assert_eq!(pyr.ir_feat[k].shape(), &[WIDTHS[k], s, s]);
            assert_eq!(pyr.mixed[k].shape(), pyr.vis_feat[k].shape());
        }
        let (states, fused) = decode_fusion_states(&pyr, &p).unwrap();
        assert_eq!(states[3], pyr.mixed[3]);
        for k in 0..3 {
            assert_eq!(states[k].shape(), pyr.mixed[k].shape());
        }
        assert_eq!(fused.shape(), &[1, 64, 64]);
        assert!(fused.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let d = decode_count(&pyr, &p).unwrap();
        assert_eq!(d.shape(), &[1, 4, 4]);
        assert!(d.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn non_divisible_input_rejected() {
        let p = init_params(4);
        let err = encode(&random_image(3, 40, 64, 1), &random_image(1, 40, 64, 2), &p).unwrap_err();
        assert!(matches!(err, Error::Model(_)));
    }

    #[test]
    fn zero_everything_gives_zero_pyramid() {
        let p = init_params(5);
        let pyr = encode(&Tensor::zeros(&[3, 32, 32]), &Tensor::zeros(&[1, 32, 32]), &p).unwrap();
        for t in pyr.vis_feat.iter().chain(&pyr.ir_feat).chain(&pyr.mixed) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        let zp = p.zeroed();
        let pyr = encode(&random_image(3, 32, 32, 1), &random_image(1, 32, 32, 2), &zp).unwrap();
        let d = decode_count(&pyr, &zp).unwrap();
        assert_eq!(d.sum(), 0.0);
    }

    #[test]
    fn infrared_reaches_visible_stream() {
        let p = init_params(6);
        let vis = random_image(3, 32, 32, 1);
        let a = encode(&vis, &random_image(1, 32, 32, 2), &p).unwrap();
        let b = encode(&vis, &random_image(1, 32, 32, 3), &p).unwrap();
        assert_eq!(a.vis_feat[0], b.vis_feat[0]);
        for k in 1..4 {
            assert_ne!(a.vis_feat[k], b.vis_feat[k], "layer {}", k + 1);
        }
    }

    #[test]
    fn fused_checksum_is_stable() {
        let p = init_params(2024);
        let vis = random_image(3, 32, 32, 10);
        let ir = random_image(1, 32, 32, 11);
        let fused = decode_fusion(&encode(&vis, &ir, &p).unwrap(), &p).unwrap();
        let checksum: f64 = fused.data().iter().enumerate().map(|(i, v)| v * (1 + i % 7) as f64).sum();
        // Golden value recorded from the reference run.
        assert!((checksum - FUSED_CHECKSUM).abs() < 1e-9, "{checksum:.12}");
    }
    const FUSED_CHECKSUM: f64 = 2064.267254201480;

    #[test]
    fn single_encode_per_forward_and_head_independence() {
        let p = init_params(7);
        let s = synth_scene(&SceneConfig::default()).unwrap();
        let mut counter = EncodeCounter::default();
        let full = forward_images(&s.visible, &s.infrared, &p, Heads::Both, &mut counter).unwrap();
        assert_eq!(counter.0, 1);
        let fo = forward_images(&s.visible, &s.infrared, &p, Heads::FusionOnly, &mut ()).unwrap();
        let co = forward_images(&s.visible, &s.infrared, &p, Heads::CountOnly, &mut ()).unwrap();
        assert_eq!(fo.fused, full.fused);
        assert!(fo.density.is_none());
        assert_eq!(co.density, full.density);
        assert!(co.fused.is_none());
    }

    #[test]
    fn series_forward_shapes() {
        let p = init_params_for(Mode::Series, 8);
        let s = synth_scene(&SceneConfig::default()).unwrap();
        let mut counter = EncodeCounter::default();
        let out = forward_images(&s.visible, &s.infrared, &p, Heads::Both, &mut counter).unwrap();
        assert_eq!(counter.0, 1);
        assert_eq!(out.fused.unwrap().shape(), &[1, 64, 64]);
        assert_eq!(out.density.unwrap().shape(), &[1, 4, 4]);
    }

    #[test]
    fn mode_round_trips_through_str() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("parallel".parse::<Mode>().is_err());
    }
}
