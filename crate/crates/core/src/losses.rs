//! Fusion and counting losses with analytic gradients.
//!
//! Every map argument is a single-channel `[1, H, W]` tensor. The `*_grad`
//! variants return the loss together with its gradient with respect to the
//! first argument (the fused image or the predicted density), which is what
//! the training tape is seeded with.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default fusion-term weights (SSIM, texture, intensity, MSE).
pub const DEFAULT_ETA: [f64; 4] = [20.0, 30.0, 30.0, 100.0];
/// Posterior width of the counting loss, in density-map cells.
pub const DEFAULT_COUNT_SIGMA: f64 = 4.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FusionLoss {
    pub l_ssim: f64,
    pub l_text: f64,
    pub l_int: f64,
    pub l_mse: f64,
    pub l_fusion: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ssim: f64,
    pub l_text: f64,
    pub l_int: f64,
    pub l_mse: f64,
    pub l_fusion: f64,
    pub l_count: f64,
    pub l_total: f64,
    pub eta: [f64; 4],
    pub lambda: [f64; 2],
}

impl LossBreakdown {
    pub fn new(fusion: FusionLoss, l_count: f64, eta: [f64; 4], lambda: [f64; 2]) -> Self {
        Self {
            l_ssim: fusion.l_ssim,
            l_text: fusion.l_text,
            l_int: fusion.l_int,
            l_mse: fusion.l_mse,
            l_fusion: fusion.l_fusion,
            l_count,
            l_total: total_loss(fusion.l_fusion, l_count, lambda),
            eta,
            lambda,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_ssim", self.l_ssim),
            ("l_text", self.l_text),
            ("l_int", self.l_int),
            ("l_mse", self.l_mse),
            ("l_fusion", self.l_fusion),
            ("l_count", self.l_count),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub(crate) fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(Error::Loss(format!("expected a [1, H, W] map, got {s:?}"))),
    }
}

fn same_shape(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dims = plane(f)?;
    if plane(a)? != dims || plane(b)? != dims {
        return Err(Error::Loss(format!(
            "shape mismatch: {:?}, {:?}, {:?}",
            f.shape(),
            a.shape(),
            b.shape()
        )));
    }
    Ok(dims)
}

fn map_of(h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[1, h, w], data)
}

/// Horizontal and vertical Sobel responses with replicate-padded borders.
pub(crate) fn sobel_xy(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let at = |r: usize, c: usize| img[r * w + c];
    for r in 0..h {
        let (up, down) = (r.saturating_sub(1), (r + 1).min(h - 1));
        for c in 0..w {
            let (left, right) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (mut sx, mut sy) = (0.0, 0.0);
            for (k, s) in SMOOTH.iter().enumerate() {
                let rr = (r + k).saturating_sub(1).min(h - 1);
                let cc = (c + k).saturating_sub(1).min(w - 1);
                sx += s * (at(rr, right) - at(rr, left));
                sy += s * (at(down, cc) - at(up, cc));
            }
            gx[r * w + c] = sx;
            gy[r * w + c] = sy;
        }
    }
    (gx, gy)
}

fn magnitude(gx: &[f64], gy: &[f64]) -> Vec<f64> {
    gx.iter().zip(gy).map(|(x, y)| (x * x + y * y).sqrt()).collect()
}

/// Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)`.
pub fn sobel_grad(img: &Tensor) -> Result<Tensor> {
    let (h, w) = plane(img)?;
    if h < 3 || w < 3 {
        return Err(Error::Loss(format!("image {h}x{w} is smaller than the 3x3 Sobel kernel")));
    }
    let (gx, gy) = sobel_xy(img.data(), h, w);
    Ok(map_of(h, w, magnitude(&gx, &gy)))
}

/// Pulls a gradient on the Sobel magnitude back to the image.
fn sobel_backward(dmag: &[f64], gx: &[f64], gy: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut dimg = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let m = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
            if m == 0.0 || dmag[i] == 0.0 {
                continue;
            }
            let (dx_, dy_) = (dmag[i] * gx[i] / m, dmag[i] * gy[i] / m);
            for (dy, (krx, kry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let rr = (r + dy).saturating_sub(1).min(h - 1);
                for dx in 0..3 {
                    let cc = (c + dx).saturating_sub(1).min(w - 1);
                    dimg[rr * w + cc] += krx[dx] * dx_ + kry[dx] * dy_;
                }
            }
        }
    }
    dimg
}

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut taps = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable 11x11 Gaussian filter, zero-padded, same-size output. The
/// operator is symmetric, so it is also its own adjoint.
fn gauss_filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = c as isize + k as isize - r;
                if cc >= 0 && (cc as usize) < w {
                    s += t * img[row * w + cc as usize];
                }
            }
            tmp[row * w + c] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let rr = row as isize + k as isize - r;
                if rr >= 0 && (rr as usize) < h {
                    s += t * tmp[rr as usize * w + c];
                }
            }
            out[row * w + c] = s;
        }
    }
    out
}

/// Mean windowed SSIM of `x` against `y` and its gradient with respect to `x`.
pub(crate) fn ssim_with_grad(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, Vec<f64>) {
    let taps = gaussian_taps();
    let n = (h * w) as f64;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = gauss_filter(x, h, w, &taps);
    let mu_y = gauss_filter(y, h, w, &taps);
    let e_xx = gauss_filter(&xx, h, w, &taps);
    let e_yy = gauss_filter(&yy, h, w, &taps);
    let e_xy = gauss_filter(&xy, h, w, &taps);

    let mut total = 0.0;
    let mut d_mu = vec![0.0; h * w];
    let mut d_exx = vec![0.0; h * w];
    let mut d_exy = vec![0.0; h * w];
    for i in 0..h * w {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * (e_xy[i] - mx * my) + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = (e_xx[i] - mx * mx) + (e_yy[i] - my * my) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        d_mu[i] = s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2) / n;
        d_exx[i] = -s / b2 / n;
        d_exy[i] = 2.0 * s / a2 / n;
    }
    let g_mu = gauss_filter(&d_mu, h, w, &taps);
    let g_exx = gauss_filter(&d_exx, h, w, &taps);
    let g_exy = gauss_filter(&d_exy, h, w, &taps);
    let grad = (0..h * w)
        .map(|i| g_mu[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i])
        .collect();
    (total / n, grad)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), zero-padded borders,
/// dynamic range 1.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (h, w) = plane(x)?;
    if plane(y)? != (h, w) {
        return Err(Error::Loss(format!("shape mismatch: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(ssim_with_grad(x.data(), y.data(), h, w).0)
}

/// `1 - (SSIM(F, vis) + SSIM(F, ir)) / 2`.
pub fn ssim_loss_grad(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<(f64, Tensor)> {
    let (h, w) = same_shape(fused, vis_y, ir)?;
    let (sv, gv) = ssim_with_grad(fused.data(), vis_y.data(), h, w);
    let (si, gi) = ssim_with_grad(fused.data(), ir.data(), h, w);
    let grad = gv.iter().zip(&gi).map(|(a, b)| -0.5 * (a + b)).collect();
    Ok((1.0 - 0.5 * (sv + si), map_of(h, w, grad)))
}

pub fn ssim_loss(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<f64> {
    ssim_loss_grad(fused, vis_y, ir).map(|(l, _)| l)
}

/// `(1/HW) || |grad F| - max(|grad vis|, |grad ir|) ||_1`.
pub fn texture_loss_grad(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<(f64, Tensor)> {
    let (h, w) = same_shape(fused, vis_y, ir)?;
    if h < 3 || w < 3 {
        return Err(Error::Loss(format!("image {h}x{w} is smaller than the 3x3 Sobel kernel")));
    }
    let n = (h * w) as f64;
    let (fx, fy) = sobel_xy(fused.data(), h, w);
    let gf = magnitude(&fx, &fy);
    let gv = sobel_grad(vis_y)?;
    let gi = sobel_grad(ir)?;
    let mut loss = 0.0;
    let mut dmag = vec![0.0; h * w];
    for i in 0..h * w {
        let d = gf[i] - gv.data()[i].max(gi.data()[i]);
        loss += d.abs();
        dmag[i] = sign(d) / n;
    }
    let grad = sobel_backward(&dmag, &fx, &fy, h, w);
    Ok((loss / n, map_of(h, w, grad)))
}

pub fn texture_loss(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<f64> {
    texture_loss_grad(fused, vis_y, ir).map(|(l, _)| l)
}

/// `(1/HW) || F - max(vis, ir) ||_1`.
pub fn intensity_loss_grad(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<(f64, Tensor)> {
    let (h, w) = same_shape(fused, vis_y, ir)?;
    let n = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; h * w];
    for (i, g) in grad.iter_mut().enumerate() {
        let d = fused.data()[i] - vis_y.data()[i].max(ir.data()[i]);
        loss += d.abs();
        *g = sign(d) / n;
    }
    Ok((loss / n, map_of(h, w, grad)))
}

pub fn intensity_loss(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<f64> {
    intensity_loss_grad(fused, vis_y, ir).map(|(l, _)| l)
}

/// `(||F - vis||^2 + ||F - ir||^2) / 2`, summed over pixels without a
/// `1/HW` factor.
pub fn mse_loss_grad(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<(f64, Tensor)> {
    let (h, w) = same_shape(fused, vis_y, ir)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; h * w];
    for (i, g) in grad.iter_mut().enumerate() {
        let (dv, di) = (fused.data()[i] - vis_y.data()[i], fused.data()[i] - ir.data()[i]);
        loss += 0.5 * (dv * dv + di * di);
        *g = dv + di;
    }
    Ok((loss, map_of(h, w, grad)))
}

pub fn mse_loss(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<f64> {
    mse_loss_grad(fused, vis_y, ir).map(|(l, _)| l)
}

fn check_eta(eta: &[f64; 4]) -> Result<()> {
    if eta.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::Loss(format!("eta must be finite and nonnegative, got {eta:?}")));
    }
    Ok(())
}

/// Weighted fusion loss and its gradient with respect to `fused`.
pub fn fusion_loss_grad(
    fused: &Tensor,
    vis_y: &Tensor,
    ir: &Tensor,
    eta: [f64; 4],
) -> Result<(FusionLoss, Tensor)> {
    check_eta(&eta)?;
    let (h, w) = same_shape(fused, vis_y, ir)?;
    let terms = [
        ssim_loss_grad(fused, vis_y, ir)?,
        texture_loss_grad(fused, vis_y, ir)?,
        intensity_loss_grad(fused, vis_y, ir)?,
        mse_loss_grad(fused, vis_y, ir)?,
    ];
    let mut grad = vec![0.0; h * w];
    let mut total = 0.0;
    for ((l, g), e) in terms.iter().zip(eta) {
        total += e * l;
        for (acc, v) in grad.iter_mut().zip(g.data()) {
            *acc += e * v;
        }
    }
    let parts = FusionLoss {
        l_ssim: terms[0].0,
        l_text: terms[1].0,
        l_int: terms[2].0,
        l_mse: terms[3].0,
        l_fusion: total,
    };
    Ok((parts, map_of(h, w, grad)))
}

pub fn fusion_loss(fused: &Tensor, vis_y: &Tensor, ir: &Tensor, eta: [f64; 4]) -> Result<FusionLoss> {
    fusion_loss_grad(fused, vis_y, ir, eta).map(|(l, _)| l)
}

/// Bayesian counting loss `sum_n |1 - E[c_n]|` and its gradient with respect
/// to the density. `points` are `(x, y)` in density-map cell units, where
/// cell `(r, c)` is centred at `(c + 0.5, r + 0.5)`.
pub fn bayesian_count_loss_grad(density: &Tensor, points: &[(f64, f64)], sigma: f64) -> Result<(f64, Tensor)> {
    let (h, w) = plane(density)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Loss(format!("posterior sigma must be positive, got {sigma}")));
    }
    if let Some(v) = density.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Loss(format!("density contains negative or NaN value {v}")));
    }
    if points.is_empty() {
        return Ok((density.sum(), Tensor::full(&[1, h, w], 1.0)));
    }
    let posterior = posterior(points, h, w, sigma);
    let n = points.len();
    let mut expected = vec![0.0; n];
    for (cell, &d) in density.data().iter().enumerate() {
        if d != 0.0 {
            for (e, p) in expected.iter_mut().zip(&posterior[cell * n..(cell + 1) * n]) {
                *e += p * d;
            }
        }
    }
    let loss = expected.iter().map(|e| (1.0 - e).abs()).sum();
    let signs: Vec<f64> = expected.iter().map(|e| -sign(1.0 - e)).collect();
    let grad = (0..h * w)
        .map(|cell| {
            posterior[cell * n..(cell + 1) * n]
                .iter()
                .zip(&signs)
                .map(|(p, s)| p * s)
                .sum()
        })
        .collect();
    Ok((loss, map_of(h, w, grad)))
}

pub fn bayesian_count_loss(density: &Tensor, points: &[(f64, f64)], sigma: f64) -> Result<f64> {
    bayesian_count_loss_grad(density, points, sigma).map(|(l, _)| l)
}

/// Row-major `[cell][annotation]` posterior `p(n | x)`.
fn posterior(points: &[(f64, f64)], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let n = points.len();
    let mut post = vec![0.0; h * w * n];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in 0..h {
        for c in 0..w {
            let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
            let row = &mut post[(r * w + c) * n..(r * w + c + 1) * n];
            for (p, &(px, py)) in row.iter_mut().zip(points) {
                *p = -((cx - px).powi(2) + (cy - py).powi(2)) * inv;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in row.iter_mut() {
                *p = (*p - m).exp();
                z += *p;
            }
            for p in row.iter_mut() {
                *p /= z;
            }
        }
    }
    post
}

pub fn total_loss(l_fusion: f64, l_count: f64, lambda: [f64; 2]) -> f64 {
    lambda[0] * l_fusion + lambda[1] * l_count
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
