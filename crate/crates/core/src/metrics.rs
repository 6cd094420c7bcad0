//! PSNR, SSIM and routing statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::moe::routing_purity;
use crate::tensor::{Float, Tensor};
use crate::trace::RoutingTrace;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10·log10(1 / MSE)` on unit-range data, capped at 100 dB.
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "psnr shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filtering over valid positions of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(y + k) * wo + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions, computed per channel and averaged.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "ssim shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (h, w, c) = match a.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(dim_err!("ssim expects [H, W, C], got {s:?}")),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(config_err!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        ));
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor<T>| -> Vec<f64> {
            t.data()
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|v| v.as_f64())
                .collect()
        };
        let (pa, pb) = (plane(a), plane(b));
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&pa, h, w, &g);
        let mu_b = filter_valid(&pb, h, w, &g);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &g);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &g);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &g);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
}

/// Per-task means in task-set order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<TaskMetrics>,
}

impl MetricReport {
    pub fn average_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn average_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Task columns with PSNR/SSIM pairs and a trailing average.
    pub fn to_table(&self, method: &str) -> String {
        let mut s = String::from("| Method |");
        for r in &self.rows {
            write!(s, " {} PSNR/SSIM |", r.task).expect("string write");
        }
        s.push_str(" Average |\n|---|");
        for _ in 0..=self.rows.len() {
            s.push_str("---|");
        }
        write!(s, "\n| {method} |").expect("string write");
        for r in &self.rows {
            write!(s, " {:.2}/{:.4} |", r.psnr_db, r.ssim).expect("string write");
        }
        writeln!(
            s,
            " {:.2}/{:.4} |",
            self.average_psnr(),
            self.average_ssim()
        )
        .expect("string write");
        s
    }
}

/// Routing purity of every layer in a trace, ordered by layer index.
pub fn purity_table(trace: &RoutingTrace) -> Result<Vec<f64>> {
    if trace.rows.is_empty() {
        return Err(Error::Usage("purity_table needs a non-empty trace".into()));
    }
    let layers = trace.layer_count();
    let mut chosen = vec![Vec::new(); layers];
    let mut labels = vec![Vec::new(); layers];
    for r in &trace.rows {
        let l = r.true_label.ok_or_else(|| {
            Error::Data(format!(
                "trace row for sample {} lacks a label",
                r.sample_id
            ))
        })?;
        chosen[r.layer_index].push(r.chosen_expert);
        labels[r.layer_index].push(l);
    }
    Ok(chosen
        .iter()
        .zip(&labels)
        .map(|(c, l)| routing_purity(c, l))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_uniform_offset() {
        let a = Tensor::<f64>::full(&[4, 4, 3], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = a.map(|v| v + 1.0 / 255.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((p - 48.13).abs() < 1e-3);
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let a = crate::degrade::synth_clean(1, 24, 20);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let small = Tensor::<f32>::zeros(&[8, 30, 3]);
        assert!(matches!(ssim(&small, &small), Err(Error::Config(_))));
    }

    #[test]
    fn window_is_normalized() {
        assert!((gaussian_window().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
