//! Synthetic aligned RGB-T crowd scenes, ground-truth density maps and the
//! per-sample on-disk layout (`vis.ppm`, `ir.pgm`, `points.csv`,
//! `gt_density.fcdm`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel width used for ground-truth density maps at 64x64.
pub const DEFAULT_DENSITY_SIGMA: f64 = 4.0;

pub const VIS_FILE: &str = "vis.ppm";
pub const IR_FILE: &str = "ir.pgm";
pub const POINTS_FILE: &str = "points.csv";
pub const DENSITY_FILE: &str = "gt_density.fcdm";
const FCDM_MAGIC: &[u8; 4] = b"FCDM";

/// A head annotation in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// One aligned visible/infrared pair with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbtSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub visible: Tensor,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub infrared: Tensor,
    pub points: Vec<Point>,
    /// `[1, H, W]`; every value is exactly representable as `f32`.
    pub gt_density: Tensor,
}

impl RgbtSample {
    pub fn height(&self) -> usize {
        self.infrared.chw().1
    }

    pub fn width(&self) -> usize {
        self.infrared.chw().2
    }

    /// Luminance `Y = 0.299 R + 0.587 G + 0.114 B` of the visible image.
    pub fn visible_luminance(&self) -> Tensor {
        luminance(&self.visible)
    }

    pub fn validate(&self) -> Result<()> {
        let (vc, vh, vw) = self.visible.chw();
        let (ic, ih, iw) = self.infrared.chw();
        if vc != 3 || ic != 1 {
            return Err(Error::Data(format!(
                "expected 3 visible and 1 infrared channel, got {vc} and {ic}"
            )));
        }
        if (vh, vw) != (ih, iw) {
            return Err(Error::Data(format!(
                "visible {vh}x{vw} and infrared {ih}x{iw} differ in size"
            )));
        }
        if self.gt_density.shape() != [1, ih, iw] {
            return Err(Error::Data(format!(
                "density shape {:?} does not match image {ih}x{iw}",
                self.gt_density.shape()
            )));
        }
        for p in &self.points {
            check_point(p, ih, iw)?;
        }
        Ok(())
    }
}

pub fn luminance(rgb: &Tensor) -> Tensor {
    let (_, h, w) = rgb.chw();
    let (r, g, b) = (rgb.channel(0), rgb.channel(1), rgb.channel(2));
    let y = (0..h * w)
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect();
    Tensor::from_vec(&[1, h, w], y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_people: usize,
    /// Person radius range in pixels, inclusive.
    pub person_radius_range: (f64, f64),
    /// Scales the visible channel, in `[0, 1]`.
    pub illumination: f64,
    /// Additive Gaussian pixel noise std, in `[0, 1]`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_people: 10,
            person_radius_range: (2.0, 4.0),
            illumination: 0.8,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v < 32 || v % 16 != 0 {
                return Err(Error::Config(format!(
                    "{name} must be >= 32 and divisible by 16, got {v}"
                )));
            }
        }
        let (lo, hi) = self.person_radius_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("invalid person radius range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.illumination) || !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::Config(
                "illumination and noise_sigma must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a deterministic synthetic scene: people are dim textured discs in
/// the visible image and bright Gaussian blobs in the infrared image.
pub fn synth_scene(cfg: &SceneConfig) -> Result<RgbtSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Low-frequency background: a tilted gradient plus two sinusoids.
    let tint = [
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
    ];
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let (fx, fy) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let ir_base = rng.random_range(0.25..0.35);

    let mut vis = vec![0.0; 3 * h * w];
    let mut ir = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (c as f64 / w as f64 - 0.5, r as f64 / h as f64 - 0.5);
            let texture = 0.06 * (fx * c as f64 + phase).sin() * (fy * r as f64).cos();
            let bg = 0.45 + gx * u + gy * v + texture;
            for ch in 0..3 {
                vis[ch * h * w + r * w + c] = bg * tint[ch] * cfg.illumination;
            }
            ir[r * w + c] = ir_base + 0.03 * (fy * c as f64 - phase).sin();
        }
    }

    let (rmin, rmax) = cfg.person_radius_range;
    let mut points = Vec::with_capacity(cfg.n_people);
    for _ in 0..cfg.n_people {
        let p = Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let radius = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
        let heat = rng.random_range(0.5..0.7);
        let shade = rng.random_range(0.75..0.9);
        let reach = (3.0 * radius).ceil() as isize;
        let (pc, pr) = (p.x.floor() as isize, p.y.floor() as isize);
        for r in (pr - reach).max(0)..(pr + reach + 1).min(h as isize) {
            for c in (pc - reach).max(0)..(pc + reach + 1).min(w as isize) {
                let (r, c) = (r as usize, c as usize);
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let d2 = dx * dx + dy * dy;
                let sigma = radius / 1.5;
                ir[r * w + c] += heat * (-d2 / (2.0 * sigma * sigma)).exp();
                if d2 <= radius * radius {
                    // Low-contrast disc with a checker texture.
                    let checker = if (r + c) % 2 == 0 { 1.0 } else { 0.94 };
                    for ch in 0..3 {
                        vis[ch * h * w + r * w + c] *= shade * checker;
                    }
                }
            }
        }
        points.push(p);
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in vis.iter_mut().chain(ir.iter_mut()) {
            *v += normal.sample(&mut rng);
        }
    }
    let visible = Tensor::from_vec(&[3, h, w], vis.into_iter().map(quantize).collect());
    let infrared = Tensor::from_vec(&[1, h, w], ir.into_iter().map(quantize).collect());
    let gt_density = density_from_points(&points, h, w, DEFAULT_DENSITY_SIGMA)?;
    Ok(RgbtSample {
        visible,
        infrared,
        points,
        gt_density,
    })
}

fn check_point(p: &Point, h: usize, w: usize) -> Result<()> {
    if p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64 {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "point ({}, {}) lies outside the {h}x{w} image",
            p.x, p.y
        )))
    }
}

/// Sum of unit-mass Gaussian kernels truncated at `3 sigma` (and at the image
/// border), each renormalized after truncation. Values are rounded to the
/// `f32` grid so the map survives the on-disk format bit-exactly.
pub fn density_from_points(points: &[Point], height: usize, width: usize, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("density sigma must be positive, got {sigma}")));
    }
    let mut map = vec![0.0f64; height * width];
    let reach = 3.0 * sigma;
    let mut kernel: Vec<(usize, f64)> = Vec::new();
    for p in points {
        check_point(p, height, width)?;
        kernel.clear();
        let r0 = (p.y - reach - 0.5).floor().max(0.0) as usize;
        let r1 = ((p.y + reach).ceil() as usize).min(height - 1);
        let c0 = (p.x - reach - 0.5).floor().max(0.0) as usize;
        let c1 = ((p.x + reach).ceil() as usize).min(width - 1);
        let mut mass = 0.0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let d2 = dx * dx + dy * dy;
                if d2 <= reach * reach {
                    let k = (-d2 / (2.0 * sigma * sigma)).exp();
                    mass += k;
                    kernel.push((r * width + c, k));
                }
            }
        }
        if kernel.is_empty() {
            // Sub-pixel sigma: all mass on the containing pixel.
            map[p.y as usize * width + p.x as usize] += 1.0;
            continue;
        }
        for &(i, k) in &kernel {
            map[i] += k / mass;
        }
    }
    Ok(Tensor::from_vec(
        &[1, height, width],
        map.into_iter().map(|v| v as f32 as f64).collect(),
    ))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Encodes a `[c, h, w]` image as binary PPM (c = 3) or PGM (c = 1).
pub fn encode_netpbm(img: &Tensor) -> Vec<u8> {
    let (c, h, w) = img.chw();
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(img.data()[ch * h * w + i]));
        }
    }
    out
}

/// Parses binary P6/P5 with maxval 255 into a `[c, h, w]` tensor.
pub fn decode_netpbm(bytes: &[u8], file: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(file, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::format(file, format!("bad magic {other:?}"))),
    };
    let mut number = |what: &str| -> Result<usize> {
        token()?
            .parse::<usize>()
            .map_err(|_| Error::format(file, format!("invalid {what}")))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(file, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = channels * h * w;
    if bytes.len() < start + need {
        return Err(Error::format(file, "truncated raster"));
    }
    let raster = &bytes[start..start + need];
    let mut data = vec![0.0; need];
    for i in 0..h * w {
        for ch in 0..channels {
            data[ch * h * w + i] = f64::from(raster[i * channels + ch]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[channels, h, w], data))
}

pub fn encode_fcdm(density: &Tensor) -> Vec<u8> {
    let (_, h, w) = density.chw();
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(FCDM_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in density.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fcdm(bytes: &[u8], file: &Path) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(Error::format(file, "truncated header"));
    }
    if &bytes[..4] != FCDM_MAGIC {
        return Err(Error::format(file, "bad magic, expected FCDM"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * h * w {
        return Err(Error::format(
            file,
            format!("expected {} data bytes for {h}x{w}, found {}", 4 * h * w, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Tensor::from_vec(&[1, h, w], data))
}

pub fn encode_points(points: &[Point]) -> String {
    let mut s = String::from("x,y\n");
    for p in points {
        // `{}` on f64 prints the shortest string that parses back exactly.
        s.push_str(&format!("{},{}\n", p.x, p.y));
    }
    s
}

pub fn decode_points(text: &str, file: &Path) -> Result<Vec<Point>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("x,y") => {}
        _ => return Err(Error::format(file, "missing `x,y` header")),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::format(file, format!("malformed line {}: {line:?}", i + 2));
            let (x, y) = line.split_once(',').ok_or_else(bad)?;
            Ok(Point::new(
                x.trim().parse().map_err(|_| bad())?,
                y.trim().parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

pub fn write_sample(sample: &RgbtSample, dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    write_file(&dir.join(VIS_FILE), &encode_netpbm(&sample.visible))?;
    write_file(&dir.join(IR_FILE), &encode_netpbm(&sample.infrared))?;
    write_file(&dir.join(POINTS_FILE), encode_points(&sample.points).as_bytes())?;
    write_file(&dir.join(DENSITY_FILE), &encode_fcdm(&sample.gt_density))
}

pub fn read_sample(dir: &Path) -> Result<RgbtSample> {
    let vis_path = dir.join(VIS_FILE);
    let ir_path = dir.join(IR_FILE);
    let pts_path = dir.join(POINTS_FILE);
    let den_path = dir.join(DENSITY_FILE);
    let visible = decode_netpbm(&read_file(&vis_path)?, &vis_path)?;
    let infrared = decode_netpbm(&read_file(&ir_path)?, &ir_path)?;
    let points_text = String::from_utf8(read_file(&pts_path)?)
        .map_err(|_| Error::format(&pts_path, "not UTF-8"))?;
    let points = decode_points(&points_text, &pts_path)?;
    let gt_density = decode_fcdm(&read_file(&den_path)?, &den_path)?;

    if visible.chw().0 != 3 {
        return Err(Error::format(&vis_path, "expected a P6 colour image"));
    }
    if infrared.chw().0 != 1 {
        return Err(Error::format(&ir_path, "expected a P5 greyscale image"));
    }
    let (_, h, w) = visible.chw();
    if infrared.chw() != (1, h, w) {
        return Err(Error::format(&ir_path, format!("dimension mismatch with {h}x{w} visible image")));
    }
    if gt_density.chw() != (1, h, w) {
        return Err(Error::format(&den_path, format!("dimension mismatch with {h}x{w} visible image")));
    }
    for p in &points {
        check_point(p, h, w).map_err(|e| Error::format(&pts_path, e.to_string()))?;
    }
    Ok(RgbtSample {
        visible,
        infrared,
        points,
        gt_density,
    })
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:04}")
}

/// Writes each sample to `root/sample_NNNN/`.
pub fn write_dataset(samples: &[RgbtSample], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(sample_dir_name(i));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_sample(s, &dir)?;
    }
    Ok(())
}

/// Reads every sample subdirectory of `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<RgbtSample>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no sample directories under {}", root.display())));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}

/// Scene configs for a synthetic dataset: people counts drawn uniformly
/// from `people` with a per-sample seed derived from `seed`.
pub fn dataset_configs(
    count: usize,
    height: usize,
    width: usize,
    people: (usize, usize),
    seed: u64,
) -> Vec<SceneConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| SceneConfig {
            width,
            height,
            n_people: rng.random_range(people.0..=people.1),
            illumination: rng.random_range(0.6..1.0),
            seed: rng.random(),
            ..SceneConfig::default()
        })
        .collect()
}

pub fn synth_dataset(
    count: usize,
    height: usize,
    width: usize,
    people: (usize, usize),
    seed: u64,
) -> Result<Vec<RgbtSample>> {
    dataset_configs(count, height, width, people, seed)
        .iter()
        .map(synth_scene)
        .collect()
}
