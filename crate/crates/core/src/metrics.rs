//! Fusion-quality and crowd-counting evaluation metrics.
//!
//! Fusion metrics take `[1, H, W]` maps in `[0, 1]`. PSNR, SD, AG and SF are
//! reported on the 8-bit scale `[0, 255]`.

use crate::data::Point;
use crate::error::{Error, Result};
use crate::losses::{self, sobel_xy};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const GAME_LEVELS: usize = 4;

/// Sigmoid constants of the edge-transfer metric. `gamma_*` defaults to the
/// value that makes perfect transfer score exactly 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QabfConfig {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
}

impl QabfConfig {
    /// Constants as commonly tabulated (perfect transfer scores ~0.975).
    pub fn literature() -> Self {
        Self {
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
        }
    }
}

impl Default for QabfConfig {
    fn default() -> Self {
        let lit = Self::literature();
        Self {
            gamma_g: 1.0 + (lit.kappa_g * (1.0 - lit.sigma_g)).exp(),
            gamma_a: 1.0 + (lit.kappa_a * (1.0 - lit.sigma_a)).exp(),
            ..lit
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FusionMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub qabf: f64,
    pub cc: f64,
    pub scd: f64,
    pub sd: f64,
    pub ag: f64,
    pub sf: f64,
}

/// Per-image (or dataset-mean) evaluation record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub fusion: FusionMetrics,
    pub game: [f64; GAME_LEVELS],
    pub rmse: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 13] = [
        "psnr", "ssim", "qabf", "cc", "scd", "sd", "ag", "sf", "game0", "game1", "game2", "game3", "rmse",
    ];

    pub fn values(&self) -> [f64; 13] {
        let f = &self.fusion;
        [
            f.psnr, f.ssim, f.qabf, f.cc, f.scd, f.sd, f.ag, f.sf, self.game[0], self.game[1], self.game[2],
            self.game[3], self.rmse,
        ]
    }
}

fn dims(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let d = losses::plane(f).map_err(|e| Error::Metric(e.to_string()))?;
    for t in [a, b] {
        if t.shape() != f.shape() {
            return Err(Error::Metric(format!("shape mismatch: {:?} vs {:?}", f.shape(), t.shape())));
        }
    }
    Ok(d)
}

pub fn fusion_quality(fused: &Tensor, vis_y: &Tensor, ir: &Tensor) -> Result<FusionMetrics> {
    let (h, w) = dims(fused, vis_y, ir)?;
    if h < 3 || w < 3 {
        return Err(Error::Metric(format!("image {h}x{w} too small for fusion metrics")));
    }
    let (f, a, b) = (fused.data(), vis_y.data(), ir.data());
    let diff = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p - q).collect() };
    Ok(FusionMetrics {
        psnr: 0.5 * (psnr(f, a) + psnr(f, b)),
        ssim: 0.5 * (losses::ssim_with_grad(f, a, h, w).0 + losses::ssim_with_grad(f, b, h, w).0),
        qabf: qabf(f, a, b, h, w, &QabfConfig::default()),
        cc: 0.5 * (correlation(f, a) + correlation(f, b)),
        scd: correlation(&diff(f, a), b) + correlation(&diff(f, b), a),
        sd: std_dev(f) * 255.0,
        ag: average_gradient(f, h, w) * 255.0,
        sf: spatial_frequency(f, h, w) * 255.0,
    })
}

/// PSNR in dB on the 8-bit scale, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[f64], y: &[f64]) -> f64 {
    let mse = x
        .iter()
        .zip(y)
        .map(|(p, q)| ((p - q) * 255.0).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Pearson correlation; 0 when either signal is constant.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (x0, y0) = (x[0], y[0]);
    let mx = x.iter().map(|v| v - x0).sum::<f64>() / n;
    let my = y.iter().map(|v| v - y0).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, q) in x.iter().zip(y) {
        let (dx, dy) = (p - x0 - mx, q - y0 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let shift = x[0];
    let m = x.iter().map(|v| v - shift).sum::<f64>() / n;
    (x.iter().map(|v| (v - shift - m).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn average_gradient(f: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let dx = f[r * w + c + 1] - f[r * w + c];
            let dy = f[(r + 1) * w + c] - f[r * w + c];
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    acc / ((h - 1) * (w - 1)) as f64
}

pub fn spatial_frequency(f: &[f64], h: usize, w: usize) -> f64 {
    let (mut rf, mut cf) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                rf += (f[r * w + c] - f[r * w + c - 1]).powi(2);
            }
            if r > 0 {
                cf += (f[r * w + c] - f[(r - 1) * w + c]).powi(2);
            }
        }
    }
    let n = (h * w) as f64;
    (rf / n + cf / n).sqrt()
}

struct EdgeMap {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edges(img: &[f64], h: usize, w: usize) -> EdgeMap {
    let (gx, gy) = sobel_xy(img, h, w);
    let strength = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let orientation = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| if x == 0.0 { std::f64::consts::FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    EdgeMap { strength, orientation }
}

/// Edge-information preservation of sources `a` and `b` in `f`.
pub fn qabf(f: &[f64], a: &[f64], b: &[f64], h: usize, w: usize, cfg: &QabfConfig) -> f64 {
    let (ef, ea, eb) = (edges(f, h, w), edges(a, h, w), edges(b, h, w));
    let transfer = |src: &EdgeMap, i: usize| -> f64 {
        let (gs, gf) = (src.strength[i], ef.strength[i]);
        let g = if gs > gf {
            gf / gs
        } else if gs < gf {
            gs / gf
        } else {
            1.0
        };
        let alpha = 1.0 - (src.orientation[i] - ef.orientation[i]).abs() / std::f64::consts::FRAC_PI_2;
        let qg = cfg.gamma_g / (1.0 + (cfg.kappa_g * (g - cfg.sigma_g)).exp());
        let qa = cfg.gamma_a / (1.0 + (cfg.kappa_a * (alpha - cfg.sigma_a)).exp());
        qg * qa
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h * w {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        if wa > 0.0 {
            num += transfer(&ea, i) * wa;
        }
        if wb > 0.0 {
            num += transfer(&eb, i) * wb;
        }
        den += wa + wb;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Index of the region containing coordinate `i` when `n` units are split
/// into `parts` floor-sized pieces, the last absorbing the remainder.
fn region(i: usize, n: usize, parts: usize) -> usize {
    (i / (n / parts)).min(parts - 1)
}

/// GAME(l): the density is spread uniformly over image pixels, both maps are
/// split into a `2^l x 2^l` grid and per-region absolute count errors summed.
/// `points` are image-pixel coordinates of an `img_h x img_w` image.
pub fn game(est: &Tensor, points: &[Point], img_h: usize, img_w: usize, level: usize) -> Result<f64> {
    if level >= GAME_LEVELS {
        return Err(Error::Metric(format!("GAME level must be 0..=3, got {level}")));
    }
    let (dh, dw) = losses::plane(est).map_err(|e| Error::Metric(e.to_string()))?;
    if dh == 0 || dw == 0 || img_h % dh != 0 || img_w % dw != 0 {
        return Err(Error::Metric(format!(
            "density {dh}x{dw} does not tile the {img_h}x{img_w} image"
        )));
    }
    let parts = 1usize << level;
    if img_h < parts || img_w < parts {
        return Err(Error::Metric(format!("image {img_h}x{img_w} too small for GAME({level})")));
    }
    if let Some(v) = est.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Metric(format!("density has negative value {v}")));
    }
    let (bh, bw) = (img_h / dh, img_w / dw);
    let share = 1.0 / (bh * bw) as f64;
    let mut diff = vec![0.0; parts * parts];
    for r in 0..img_h {
        let rr = region(r, img_h, parts);
        for c in 0..img_w {
            let cell = est.data()[(r / bh) * dw + c / bw];
            diff[rr * parts + region(c, img_w, parts)] += cell * share;
        }
    }
    for p in points {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x < img_w as f64 && p.y < img_h as f64) {
            return Err(Error::Metric(format!("point ({}, {}) outside image", p.x, p.y)));
        }
        let (r, c) = (p.y as usize, p.x as usize);
        diff[region(r, img_h, parts) * parts + region(c, img_w, parts)] -= 1.0;
    }
    Ok(diff.iter().map(|d| d.abs()).sum())
}

/// Dataset summary of counting accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CountingReport {
    pub game: [f64; GAME_LEVELS],
    pub rmse: f64,
}

pub fn counting_report(
    estimates: &[Tensor],
    points: &[Vec<Point>],
    img_h: usize,
    img_w: usize,
) -> Result<CountingReport> {
    if estimates.is_empty() {
        return Err(Error::Metric("empty dataset".into()));
    }
    if estimates.len() != points.len() {
        return Err(Error::Metric(format!(
            "{} estimates for {} annotation lists",
            estimates.len(),
            points.len()
        )));
    }
    let n = estimates.len() as f64;
    let mut report = CountingReport::default();
    let mut sq = 0.0;
    for (est, pts) in estimates.iter().zip(points) {
        for (l, g) in report.game.iter_mut().enumerate() {
            *g += game(est, pts, img_h, img_w, l)?;
        }
        sq += (est.sum() - pts.len() as f64).powi(2);
    }
    for g in &mut report.game {
        *g /= n;
    }
    report.rmse = (sq / n).sqrt();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn_2d(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn self_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_map(16, 16, &mut rng);
        let m = fusion_quality(&a, &a, &a).unwrap();
        assert_eq!(m.psnr, PSNR_CAP_DB);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert!((m.cc - 1.0).abs() < 1e-12);
        assert!((m.qabf - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_image_has_no_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::full(&[1, 16, 16], 0.4);
        let m = fusion_quality(&f, &random_map(16, 16, &mut rng), &random_map(16, 16, &mut rng)).unwrap();
        assert_eq!((m.sd, m.ag, m.sf), (0.0, 0.0, 0.0));
        assert_eq!(m.cc, 0.0);
        assert!(m.scd.is_finite());
    }

    #[test]
    fn literature_constants_cap_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_map(16, 16, &mut rng);
        let q = qabf(a.data(), a.data(), a.data(), 16, 16, &QabfConfig::literature());
        assert!((q - 0.9994 / (1.0 + (-7.5f64).exp()) * 0.9879 / (1.0 + (-4.4f64).exp())).abs() < 1e-9);
    }

    fn quadrant_map(sums: [f64; 4]) -> Tensor {
        // 4x4 map, each quadrant holds its sum in one cell.
        let mut t = Tensor::zeros(&[1, 4, 4]);
        t.data_mut()[0] = sums[0];
        t.data_mut()[3] = sums[1];
        t.data_mut()[12] = sums[2];
        t.data_mut()[15] = sums[3];
        t
    }

    fn quadrant_points(counts: [usize; 4]) -> Vec<Point> {
        let centres = [(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)];
        counts
            .iter()
            .zip(centres)
            .flat_map(|(&n, (x, y))| std::iter::repeat_n(Point::new(x, y), n))
            .collect()
    }

    #[test]
    fn game_examples() {
        let est = quadrant_map([1.0, 2.0, 0.0, 2.0]);
        assert_eq!(game(&est, &quadrant_points([2, 2, 2, 1]), 16, 16, 0).unwrap(), 2.0);

        let est = quadrant_map([1.0, 2.0, 0.0, 3.0]);
        let pts = quadrant_points([2, 2, 1, 1]);
        assert_eq!(game(&est, &pts, 16, 16, 1).unwrap(), 4.0);
        assert_eq!(game(&est, &pts, 16, 16, 0).unwrap(), 0.0);
        assert!(matches!(game(&est, &pts, 16, 16, 4), Err(Error::Metric(_))));
    }

    #[test]
    fn rasterized_truth_scores_zero() {
        // One unit of mass in the pixel of each point.
        let pts = vec![Point::new(1.5, 2.5), Point::new(30.2, 17.9), Point::new(9.0, 31.0)];
        let mut est = Tensor::zeros(&[1, 32, 32]);
        for p in &pts {
            est.data_mut()[p.y as usize * 32 + p.x as usize] += 1.0;
        }
        for l in 0..4 {
            assert_eq!(game(&est, &pts, 32, 32, l).unwrap(), 0.0);
        }
    }

    #[test]
    fn non_power_of_two_regions() {
        // 24 rows split in 8: regions of 3 rows.
        let est = Tensor::zeros(&[1, 24, 24]);
        let pts = vec![Point::new(23.5, 23.5)];
        assert_eq!(game(&est, &pts, 24, 24, 3).unwrap(), 1.0);
        assert_eq!(region(23, 24, 8), 7);
        assert_eq!(region(20, 21, 8), 7);
        assert_eq!(region(13, 21, 8), 6);
    }

    #[test]
    fn counting_report_examples() {
        let one = vec![quadrant_map([1.0, 1.0, 0.0, 0.0])];
        let r = counting_report(&one, &[quadrant_points([1, 1, 0, 0])], 16, 16).unwrap();
        assert_eq!((r.rmse, r.game[0]), (0.0, 0.0));

        let est = vec![quadrant_map([3.0, 0.0, 0.0, 0.0]), quadrant_map([0.0; 4])];
        let pts = vec![vec![], quadrant_points([4, 0, 0, 0])];
        let r = counting_report(&est, &pts, 16, 16).unwrap();
        assert_eq!(r.game[0], 3.5);
        assert!((r.rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(counting_report(&[], &[], 16, 16).is_err());
    }
}
