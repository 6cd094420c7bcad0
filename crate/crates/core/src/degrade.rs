//! Procedural clean images and synthetic degradations.
//!
//! Images are `[H, W, 3]` tensors in `[0, 1]`. Every generator is a pure
//! function of its parameters and seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

/// Degradation family; the discriminant is the stable label index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DegradationKind {
    Noise = 0,
    Haze = 1,
    Rain = 2,
    Blur = 3,
    LowLight = 4,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        Self::Noise,
        Self::Haze,
        Self::Rain,
        Self::Blur,
        Self::LowLight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Haze => "haze",
            Self::Rain => "rain",
            Self::Blur => "blur",
            Self::LowLight => "lowlight",
        }
    }
}

/// A task in a training or evaluation set. Noise may pin its level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: DegradationKind,
    /// Noise level on the 0-255 scale; `None` draws from {15, 25, 50}.
    pub sigma: Option<f64>,
}

impl Task {
    pub fn new(kind: DegradationKind) -> Self {
        Self { kind, sigma: None }
    }

    pub fn noise(sigma: f64) -> Self {
        Self {
            kind: DegradationKind::Noise,
            sigma: Some(sigma),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sigma {
            Some(s) => write!(f, "{}:{}", self.kind.name(), s),
            None => f.write_str(self.kind.name()),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.trim().split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.trim(), None),
        };
        let kind = DegradationKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                config_err!("unknown task {name:?}; expected noise, haze, rain, blur or lowlight")
            })?;
        let sigma = match (kind, arg) {
            (_, None) => None,
            (DegradationKind::Noise, Some(a)) => {
                let v: f64 = a
                    .parse()
                    .map_err(|_| config_err!("bad noise level {a:?}"))?;
                if !(v >= 0.0) {
                    return Err(config_err!("noise level must be >= 0, got {v}"));
                }
                Some(v)
            }
            (_, Some(_)) => return Err(config_err!("task {name} takes no parameter")),
        };
        Ok(Self { kind, sigma })
    }
}

pub fn parse_tasks(s: &str) -> Result<Vec<Task>> {
    let tasks = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Task>>>()?;
    if tasks.is_empty() {
        return Err(config_err!("empty task set"));
    }
    Ok(tasks)
}

/// Blur kernels; all are normalized to sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Delta,
    Gaussian {
        sigma: f64,
    },
    /// Line of `length` pixels at `angle` degrees from horizontal.
    Motion {
        length: usize,
        angle: f64,
    },
}

impl Kernel {
    /// Odd side length and row-major weights.
    pub fn weights(&self) -> (usize, Vec<f64>) {
        let (k, mut w) = match *self {
            Kernel::Delta => (1, vec![1.0]),
            Kernel::Gaussian { sigma } => {
                let r = (3.0 * sigma).ceil().max(1.0) as usize;
                let k = 2 * r + 1;
                let w = (0..k * k)
                    .map(|i| {
                        let (y, x) = ((i / k) as f64 - r as f64, (i % k) as f64 - r as f64);
                        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
                    })
                    .collect();
                (k, w)
            }
            Kernel::Motion { length, angle } => {
                let r = length / 2;
                let k = 2 * r + 1;
                let mut w = vec![0.0; k * k];
                let (dy, dx) = angle.to_radians().sin_cos();
                let steps = 4 * length.max(1);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64 * (length.max(1) - 1) as f64
                        - (length.max(1) - 1) as f64 / 2.0;
                    let x = (r as f64 + t * dx).round() as usize;
                    let y = (r as f64 + t * dy).round() as usize;
                    w[y.min(k - 1) * k + x.min(k - 1)] = 1.0;
                }
                (k, w)
            }
        };
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        (k, w)
    }
}

/// Parameters actually used for one degraded sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GenParams {
    Noise {
        sigma: f64,
    },
    Haze {
        airlight: f64,
        t_min: f64,
        t_max: f64,
    },
    Rain {
        density: f64,
        angle: f64,
    },
    Blur {
        kernel: Kernel,
    },
    #[serde(rename = "lowlight")]
    LowLight {
        gamma: f64,
        gain: f64,
    },
}

#[derive(Clone, Debug)]
pub struct DegradedSample {
    pub clean: Image,
    pub degraded: Image,
    pub kind: DegradationKind,
    pub params: GenParams,
    pub seed: u64,
}

fn hw(img: &Image) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(dim_err!("expected an [H, W, 3] image, got {s:?}")),
    }
}

fn to_image(h: usize, w: usize, data: Vec<f64>) -> Image {
    Tensor::new(
        &[h, w, 3],
        data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
    .expect("sized")
}

/// Deterministic image with smooth gradients, band-limited texture and
/// flat-colored shapes.
pub fn synth_clean(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1ea);
    let mut img = vec![0.0f64; h * w * 3];
    let grad: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.2..0.8),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ]
        })
        .collect();
    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..6)
        .map(|i| {
            let f = 2.0f64.powi(i / 2 + 1) * rng.gen_range(0.7..1.3);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            Wave {
                fx: f * a.cos(),
                fy: f * a.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: [0, 1, 2].map(|_| rng.gen_range(-0.12..0.12)),
            }
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            for c in 0..3 {
                let g = &grad[c];
                let mut val = g[0] + g[1] * (u - 0.5) + g[2] * (v - 0.5);
                for wv in &waves {
                    val += wv.amp[c]
                        * (std::f64::consts::TAU * (wv.fx * u + wv.fy * v) + wv.phase).sin();
                }
                img[(y * w + x) * 3 + c] = val;
            }
        }
    }
    let n_shapes = rng.gen_range(3..7);
    for _ in 0..n_shapes {
        let color = [0, 1, 2].map(|_| rng.gen_range(0.0..1.0));
        let alpha = rng.gen_range(0.5..1.0);
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let size = rng.gen_range(0.08..0.3) * h.min(w) as f64;
        let circle = rng.gen_bool(0.5);
        let aspect = rng.gen_range(0.5..2.0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if circle {
                    dx * dx + dy * dy <= size * size
                } else {
                    dx.abs() <= size * aspect && dy.abs() <= size / aspect
                };
                if inside {
                    for c in 0..3 {
                        let p = &mut img[(y * w + x) * 3 + c];
                        *p = (1.0 - alpha) * *p + alpha * color[c];
                    }
                }
            }
        }
    }
    to_image(h, w, img)
}

/// i.i.d. standard normal draws scaled by `std`.
pub fn gaussian_noise(len: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect()
}

/// Additive Gaussian noise with standard deviation `sigma / 255`.
pub fn add_noise(clean: &Image, sigma: f64, seed: u64) -> Result<Image> {
    let (h, w) = hw(clean)?;
    if !(sigma >= 0.0) {
        return Err(config_err!("noise sigma must be >= 0, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let n = gaussian_noise(clean.numel(), sigma / 255.0, seed);
    Ok(to_image(
        h,
        w,
        clean
            .data()
            .iter()
            .zip(n)
            .map(|(&c, e)| c as f64 + e)
            .collect(),
    ))
}

/// Smooth transmission field in `[t_min, t_max]`: bilinear interpolation of a
/// coarse random grid.
pub fn transmission_map(seed: u64, h: usize, w: usize, t_min: f64, t_max: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a2e);
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut t = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h.max(2) - 1) as f64 * (G - 1) as f64;
            let gx = x as f64 / (w.max(2) - 1) as f64 * (G - 1) as f64;
            let (y0, x0) = (
                (gy.floor() as usize).min(G - 2),
                (gx.floor() as usize).min(G - 2),
            );
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |yy: usize, xx: usize| grid[yy * G + xx];
            let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            t.push(t_min + (t_max - t_min) * v);
        }
    }
    t
}

/// Atmospheric scattering: `I = J·t + A·(1 − t)` per pixel.
pub fn add_haze(clean: &Image, airlight: f64, t_map: &[f64]) -> Result<Image> {
    let (h, w) = hw(clean)?;
    if t_map.len() != h * w {
        return Err(dim_err!(
            "transmission map has {} entries for {h}x{w}",
            t_map.len()
        ));
    }
    let data = clean
        .data()
        .chunks_exact(3)
        .zip(t_map)
        .flat_map(|(px, &t)| {
            px.iter()
                .map(move |&c| c as f64 * t + airlight * (1.0 - t))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(to_image(h, w, data))
}

/// Additive bright streaks. `density` is streaks per 1000 pixels; `angle` in
/// degrees from vertical.
pub fn add_rain(clean: &Image, density: f64, angle: f64, seed: u64) -> Result<Image> {
    let (h, w) = hw(clean)?;
    if !(density > 0.0) {
        return Err(config_err!("rain density must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = vec![0.0f64; h * w];
    let n = ((density * (h * w) as f64 / 1000.0).round() as usize).max(1);
    let (sx, sy) = angle.to_radians().sin_cos();
    for _ in 0..n {
        let len = rng.gen_range(8..=24);
        let bright = rng.gen_range(0.2..0.8);
        let (x0, y0) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        for s in 0..len {
            let x = (x0 + s as f64 * sx).round();
            let y = (y0 + s as f64 * sy).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let p = &mut layer[y as usize * w + x as usize];
                *p = p.max(bright);
            }
        }
    }
    let data = clean
        .data()
        .chunks_exact(3)
        .zip(&layer)
        .flat_map(|(px, &r)| px.iter().map(move |&c| c as f64 + r).collect::<Vec<_>>())
        .collect();
    Ok(to_image(h, w, data))
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// 2D convolution with reflect padding.
pub fn add_blur(clean: &Image, kernel: &Kernel) -> Result<Image> {
    let (h, w) = hw(clean)?;
    let (k, wt) = kernel.weights();
    let r = (k / 2) as isize;
    let src = clean.data();
    let mut out = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * 3;
            for ky in 0..k {
                let iy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..k {
                    let wv = wt[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ix = reflect(x as isize + kx as isize - r, w);
                    let s = (iy * w + ix) * 3;
                    for c in 0..3 {
                        out[o + c] += wv * src[s + c] as f64;
                    }
                }
            }
        }
    }
    Ok(to_image(h, w, out))
}

/// `gain · clean^gamma`.
pub fn add_lowlight(clean: &Image, gamma: f64, gain: f64) -> Result<Image> {
    let (h, w) = hw(clean)?;
    if !(gamma > 0.0) || !(0.0..=1.0).contains(&gain) {
        return Err(config_err!("lowlight needs gamma > 0 and gain in [0, 1]"));
    }
    Ok(to_image(
        h,
        w,
        clean
            .data()
            .iter()
            .map(|&c| gain * (c as f64).powf(gamma))
            .collect(),
    ))
}

/// Draw parameters for `task` and apply the degradation.
pub fn degrade(clean: &Image, task: Task, seed: u64) -> Result<DegradedSample> {
    let (h, w) = hw(clean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = rng.gen::<u64>();
    let (degraded, params) = match task.kind {
        DegradationKind::Noise => {
            let sigma = task
                .sigma
                .unwrap_or([15.0, 25.0, 50.0][rng.gen_range(0..3)]);
            (add_noise(clean, sigma, sub)?, GenParams::Noise { sigma })
        }
        DegradationKind::Haze => {
            let airlight = rng.gen_range(0.7..=1.0);
            let (t_min, t_max) = (0.2, 0.9);
            let t = transmission_map(sub, h, w, t_min, t_max);
            (
                add_haze(clean, airlight, &t)?,
                GenParams::Haze {
                    airlight,
                    t_min,
                    t_max,
                },
            )
        }
        DegradationKind::Rain => {
            let density = rng.gen_range(4.0..10.0);
            let angle = rng.gen_range(-20.0..20.0);
            (
                add_rain(clean, density, angle, sub)?,
                GenParams::Rain { density, angle },
            )
        }
        DegradationKind::Blur => {
            let kernel = if rng.gen_bool(0.5) {
                Kernel::Gaussian {
                    sigma: rng.gen_range(0.8..2.0),
                }
            } else {
                Kernel::Motion {
                    length: rng.gen_range(5..=11),
                    angle: rng.gen_range(0.0..180.0),
                }
            };
            (add_blur(clean, &kernel)?, GenParams::Blur { kernel })
        }
        DegradationKind::LowLight => {
            let gamma = rng.gen_range(1.5..3.0);
            let gain = rng.gen_range(0.4..0.8);
            (
                add_lowlight(clean, gamma, gain)?,
                GenParams::LowLight { gamma, gain },
            )
        }
    };
    Ok(DegradedSample {
        clean: clean.clone(),
        degraded,
        kind: task.kind,
        params,
        seed,
    })
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (w, c) = (img.shape()[1], img.shape()[2]);
    Tensor::from_fn(img.shape(), |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        img.data()[(y * w + (w - 1 - x)) * c + ch]
    })
}

pub fn flip_vertical(img: &Image) -> Image {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let row = w * c;
    let mut out = Vec::with_capacity(img.numel());
    for y in (0..h).rev() {
        out.extend_from_slice(&img.data()[y * row..(y + 1) * row]);
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

fn crop(img: &Image, y0: usize, x0: usize, size: usize) -> Image {
    let (w, c) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        out.extend_from_slice(&img.data()[(y * w + x0) * c..(y * w + x0 + size) * c]);
    }
    Tensor::new(&[size, size, c], out).expect("crop")
}

/// A training or evaluation batch, `[N, crop, crop, 3]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub clean: Tensor<f32>,
    pub degraded: Tensor<f32>,
    /// Position of each sample's task in the task set.
    pub labels: Vec<usize>,
    pub tasks: Vec<Task>,
    pub params: Vec<GenParams>,
}

/// Side of the synthesized image a crop is taken from.
pub fn source_size(crop: usize) -> usize {
    crop + crop / 2
}

/// One sample: synthesize, degrade, crop and optionally flip.
pub fn make_sample(task: Task, crop_size: usize, seed: u64, flips: bool) -> Result<DegradedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = source_size(crop_size);
    let clean = synth_clean(rng.gen(), size, size);
    let s = degrade(&clean, task, rng.gen())?;
    let (y0, x0) = (
        rng.gen_range(0..=size - crop_size),
        rng.gen_range(0..=size - crop_size),
    );
    let (mut c, mut d) = (
        crop(&s.clean, y0, x0, crop_size),
        crop(&s.degraded, y0, x0, crop_size),
    );
    if flips {
        if rng.gen_bool(0.5) {
            c = flip_horizontal(&c);
            d = flip_horizontal(&d);
        }
        if rng.gen_bool(0.5) {
            c = flip_vertical(&c);
            d = flip_vertical(&d);
        }
    }
    Ok(DegradedSample {
        clean: c,
        degraded: d,
        ..s
    })
}

fn assemble(tasks: &[Task], samples: Vec<(usize, DegradedSample)>) -> Result<Batch> {
    let stack = |f: &dyn Fn(&DegradedSample) -> &Image| {
        let parts: Vec<Image> = samples
            .iter()
            .map(|(_, s)| {
                let t = f(s);
                t.clone()
                    .reshape(&[1, t.shape()[0], t.shape()[1], 3])
                    .expect("reshape")
            })
            .collect();
        Tensor::stack_batch(&parts)
    };
    Ok(Batch {
        clean: stack(&|s| &s.clean)?,
        degraded: stack(&|s| &s.degraded)?,
        labels: samples.iter().map(|(l, _)| *l).collect(),
        tasks: samples.iter().map(|(l, _)| tasks[*l]).collect(),
        params: samples.iter().map(|(_, s)| s.params.clone()).collect(),
    })
}

fn check_crop(crop: usize) -> Result<()> {
    if crop == 0 || !crop.is_multiple_of(8) {
        return Err(config_err!("crop {crop} must be a positive multiple of 8"));
    }
    Ok(())
}

/// Batch with each sample's task drawn uniformly from `tasks`.
pub fn make_batch(
    tasks: &[Task],
    batch: usize,
    crop: usize,
    seed: u64,
    flips: bool,
) -> Result<Batch> {
    check_crop(crop)?;
    if tasks.is_empty() || batch == 0 {
        return Err(config_err!(
            "make_batch needs a non-empty task set and batch >= 1"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..batch)
        .map(|_| {
            let l = rng.gen_range(0..tasks.len());
            Ok((l, make_sample(tasks[l], crop, rng.gen(), flips)?))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(tasks, samples)
}

/// Held-out set with exactly `per_task` samples per task, grouped by task.
pub fn make_eval_set(tasks: &[Task], per_task: usize, crop: usize, seed: u64) -> Result<Batch> {
    check_crop(crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e7a_15e7);
    let mut samples = Vec::new();
    for (l, &t) in tasks.iter().enumerate() {
        for _ in 0..per_task {
            samples.push((l, make_sample(t, crop, rng.gen(), false)?));
        }
    }
    assemble(tasks, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_parsing() {
        assert_eq!("noise:25".parse::<Task>().unwrap(), Task::noise(25.0));
        assert_eq!("haze".parse::<Task>().unwrap().kind, DegradationKind::Haze);
        assert!("fog".parse::<Task>().is_err());
        assert!("rain:3".parse::<Task>().is_err());
        let ts = parse_tasks("noise,haze,rain").unwrap();
        assert_eq!(ts.len(), 3);
        assert_eq!(ts[0].to_string(), "noise");
    }

    #[test]
    fn label_indices_are_stable() {
        let idx: Vec<usize> = DegradationKind::ALL.iter().map(|k| k.index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn kernels_are_normalized() {
        for k in [
            Kernel::Delta,
            Kernel::Gaussian { sigma: 1.3 },
            Kernel::Motion {
                length: 9,
                angle: 30.0,
            },
        ] {
            let (n, w) = k.weights();
            assert_eq!(n % 2, 1);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }
}
