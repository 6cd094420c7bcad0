//! Optimization loop, learning-rate schedule and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, config_hash};
use crate::controller::ema_update;
use crate::degrade::{make_batch, parse_tasks, Batch, Task};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{psnr, ssim, MetricReport, TaskMetrics};
use crate::model::{ForwardOptions, ModelConfig, Restorer};
use crate::moe::routing_purity;
use crate::param::ParamStore;
use crate::tensor::{Float, Tensor};
use crate::trace::RoutingTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub lambda_aux: f64,
    pub seed: u64,
    pub tasks: Vec<Task>,
    pub crop: usize,
    pub flips: bool,
    /// Record per-layer routing purity every this many steps (0 disables).
    pub purity_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale run: 1500 steps of batch 8 at 32×32 on three tasks.
    fn default() -> Self {
        Self {
            epochs: 3,
            steps_per_epoch: 500,
            batch: 8,
            // 1500 steps at the full-scale 2e-4 leave the shallow routers
            // undertrained.
            lr0: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            lambda_aux: 0.1,
            seed: 0,
            tasks: parse_tasks("noise,haze,rain").expect("static task list"),
            crop: 32,
            flips: true,
            purity_every: 50,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 120 epochs of batch 32 at 128×128. With synthetic
    /// data an epoch is a fixed step count.
    pub fn paper() -> Self {
        Self {
            epochs: 120,
            steps_per_epoch: 1000,
            batch: 32,
            lr0: 2e-4,
            crop: 128,
            ..Self::default()
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return Err(config_err!("train.lr0 must exceed train.lr_min >= 0"));
        }
        for (k, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(config_err!("{k} must lie in (0, 1), got {b}"));
            }
        }
        if self.eps_adam <= 0.0 {
            return Err(config_err!("train.eps_adam must be > 0"));
        }
        if self.lambda_aux < 0.0 {
            return Err(config_err!("train.lambda_aux must be >= 0"));
        }
        if self.batch == 0 || self.total_steps() == 0 {
            return Err(config_err!(
                "train.batch, train.epochs and train.steps_per_epoch must be >= 1"
            ));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return Err(config_err!(
                "train.crop must be a positive multiple of 8, got {}",
                self.crop
            ));
        }
        if self.tasks.is_empty() {
            return Err(config_err!("train.tasks must not be empty"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let tasks: Vec<String> = self.tasks.iter().map(|t| t.to_string()).collect();
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            (
                "train.steps_per_epoch".into(),
                self.steps_per_epoch.to_string(),
            ),
            ("train.batch".into(), self.batch.to_string()),
            ("train.lr0".into(), self.lr0.to_string()),
            ("train.lr_min".into(), self.lr_min.to_string()),
            ("train.beta1".into(), self.beta1.to_string()),
            ("train.beta2".into(), self.beta2.to_string()),
            ("train.eps_adam".into(), self.eps_adam.to_string()),
            ("train.lambda_aux".into(), self.lambda_aux.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.tasks".into(), tasks.join(",")),
            ("train.crop".into(), self.crop.to_string()),
            ("train.flips".into(), self.flips.to_string()),
            ("train.purity_every".into(), self.purity_every.to_string()),
        ]
    }

    /// Apply one key. Returns `Ok(false)` for keys outside this config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = |what: &str| config_err!("{key}: cannot parse {value:?} as {what}");
        let int = || v.parse::<usize>().map_err(|_| bad("an integer"));
        let real = || v.parse::<f64>().map_err(|_| bad("a number"));
        match key {
            "train.epochs" => self.epochs = int()?,
            "train.steps_per_epoch" => self.steps_per_epoch = int()?,
            "train.batch" => self.batch = int()?,
            "train.lr0" => self.lr0 = real()?,
            "train.lr_min" => self.lr_min = real()?,
            "train.beta1" => self.beta1 = real()?,
            "train.beta2" => self.beta2 = real()?,
            "train.eps_adam" => self.eps_adam = real()?,
            "train.lambda_aux" => self.lambda_aux = real()?,
            "train.seed" => self.seed = v.parse().map_err(|_| bad("an integer"))?,
            "train.tasks" => self.tasks = parse_tasks(v)?,
            "train.crop" => self.crop = int()?,
            "train.flips" => self.flips = v.parse().map_err(|_| bad("true/false"))?,
            "train.purity_every" => self.purity_every = int()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Adam moments for every parameter (frozen ones stay zero).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Float> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Float> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam on every trainable parameter. Rejects the whole step
/// if any gradient is non-finite, naming the first offender.
pub fn adam_step<T: Float>(
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (_, p) in store.iter() {
        if p.trainable && !p.grad.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {}",
                p.name
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
    let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
    let (ic1, ic2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
    let (lr, eps) = (T::lit(lr), T::lit(eps));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + ob1 * g[i];
            v[i] = b2 * v[i] + ob2 * g[i] * g[i];
            let mh = m[i] * ic1;
            let vh = v[i] * ic2;
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    let frac = step.min(total) as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `mean|y − target| + λ·aux`; returns the total and the L1 term.
pub fn loss_total<T: Float>(
    g: &Graph<T>,
    y: Var,
    target: Var,
    aux: Option<Var>,
    lambda: f64,
) -> Result<(Var, Var)> {
    let l1 = g.mean(g.abs(g.sub(y, target)?));
    let total = match aux {
        Some(a) if lambda != 0.0 => g.add(l1, g.scale(a, T::lit(lambda)))?,
        _ => l1,
    };
    Ok((total, l1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityRecord {
    pub step: usize,
    pub purity: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub purity: Vec<PurityRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Digest of the model and training configuration; artifacts carry it in
/// their header line.
pub fn run_hash(model: &ModelConfig, cfg: &TrainConfig) -> String {
    config_hash(&(model.to_text() + &cfg.to_text()))
}

/// Seed of the training batch at `step`.
pub fn batch_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One optimization step on `batch`, followed by the controller EMA.
pub fn train_step(
    model: &mut Restorer<f32>,
    optim: &mut OptimState<f32>,
    cfg: &TrainConfig,
    batch: &Batch,
    lr: f64,
) -> Result<(StepRecord, Vec<f64>)> {
    let g = Graph::new();
    let x = g.input(batch.degraded.clone());
    let target = g.input(batch.clean.clone());
    let out = model.forward(
        &g,
        x,
        ForwardOptions {
            labels: Some(&batch.labels),
            forced_routing: None,
        },
    )?;
    let (total, l1) = loss_total(&g, out.y, target, out.aux, cfg.lambda_aux)?;
    let rec = StepRecord {
        step: 0,
        lr,
        l1: g.value(l1).item()? as f64,
        aux: out.aux.map_or(Ok(0.0), |a| g.value(a).item())? as f64,
        total: g.value(total).item()? as f64,
    };
    if !rec.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", rec.total)));
    }
    let purity = out
        .routers
        .iter()
        .map(|r| {
            let chosen: Vec<usize> = r.decisions.iter().map(|d| d.chosen_expert).collect();
            routing_purity(&chosen, &batch.labels)
        })
        .collect();
    model.store.zero_grad();
    g.backward(total, &mut model.store)?;
    drop(g);
    adam_step(
        &mut model.store,
        optim,
        lr,
        cfg.beta1,
        cfg.beta2,
        cfg.eps_adam,
    )?;
    let alpha = model.config.controller_alpha;
    for c in model.controllers.iter().flatten() {
        ema_update(&mut model.store, c, alpha)?;
    }
    Ok((rec, purity))
}

/// Run the whole schedule. With `out_dir`, writes `report.jsonl` as it goes
/// and `checkpoint.bin` after every epoch; a numerical abort leaves the last
/// epoch's checkpoint in place.
pub fn train_loop(
    model: &mut Restorer<f32>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if cfg.tasks.len() > model.config.n_degradations {
        return Err(config_err!(
            "{} tasks but the model has {} degradation experts",
            cfg.tasks.len(),
            model.config.n_degradations
        ));
    }
    let hash = run_hash(&model.config, cfg);
    let mut report = TrainingReport {
        config_hash: hash.clone(),
        ..Default::default()
    };
    let mut log = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let mut f = std::io::BufWriter::new(fs::File::create(d.join("report.jsonl"))?);
            writeln!(f, "{}", serde_json::json!({ "config_hash": hash }))?;
            Some(f)
        }
        None => None,
    };
    let mut optim = OptimState::new(&model.store);
    let total = cfg.total_steps();
    for step in 0..total {
        let batch = make_batch(
            &cfg.tasks,
            cfg.batch,
            cfg.crop,
            batch_seed(cfg.seed, step),
            cfg.flips,
        )?;
        let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min);
        let (mut rec, purity) = match train_step(model, &mut optim, cfg, &batch, lr) {
            Ok(r) => r,
            Err(e) => {
                if let Some(f) = log.as_mut() {
                    f.flush()?;
                }
                return Err(e);
            }
        };
        rec.step = step;
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&rec).map_err(|e| Error::Internal(e.to_string()))?
            )?;
        }
        report.steps.push(rec);
        if cfg.purity_every > 0 && (step + 1) % cfg.purity_every == 0 && !purity.is_empty() {
            let pr = PurityRecord { step, purity };
            if let Some(f) = log.as_mut() {
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&pr).map_err(|e| Error::Internal(e.to_string()))?
                )?;
            }
            report.purity.push(pr);
        }
        if (step + 1) % cfg.steps_per_epoch == 0 {
            if let Some(d) = out_dir {
                let path = d.join("checkpoint.bin");
                checkpoint::save(&path, model, Some(&optim), (step + 1) as u64)?;
                report.checkpoint = Some(path);
            }
        }
    }
    if let Some(mut f) = log {
        f.flush()?;
    }
    Ok(report)
}

/// Metrics of restored outputs and of the degraded inputs, plus the routing
/// trace of every learner.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub output: MetricReport,
    pub input: MetricReport,
    pub trace: RoutingTrace,
}

/// Frozen-model evaluation in chunks of `chunk` samples. Outputs are clamped
/// to `[0, 1]` before scoring.
pub fn evaluate(model: &Restorer<f32>, set: &Batch, chunk: usize) -> Result<EvalResult> {
    let n = set.labels.len();
    let chunk = chunk.max(1);
    let mut trace = RoutingTrace::default();
    let n_tasks = set.labels.iter().max().map_or(0, |m| m + 1);
    let mut acc_out = vec![(0.0f64, 0.0f64, 0usize); n_tasks];
    let mut acc_in = acc_out.clone();
    let names: Vec<String> = (0..n_tasks)
        .map(|l| {
            set.labels
                .iter()
                .position(|&x| x == l)
                .map_or_else(|| format!("task{l}"), |i| set.tasks[i].to_string())
        })
        .collect();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let x = set.degraded.select_batch(&idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let (y, routers) = model.run(&x, Some(&labels))?;
        trace.extend_from(&routers, start);
        let y = y.map(|v| v.clamp(0.0, 1.0));
        for (j, &i) in idx.iter().enumerate() {
            let clean = image_at(&set.clean, i)?;
            let out = image_at(&y, j)?;
            let inp = image_at(&set.degraded, i)?;
            let l = set.labels[i];
            let a = &mut acc_out[l];
            a.0 += psnr(&out, &clean)?;
            a.1 += ssim(&out, &clean)?;
            a.2 += 1;
            let b = &mut acc_in[l];
            b.0 += psnr(&inp, &clean)?;
            b.1 += ssim(&inp, &clean)?;
            b.2 += 1;
        }
        start += chunk;
    }
    let report = |acc: &[(f64, f64, usize)]| MetricReport {
        rows: acc
            .iter()
            .zip(&names)
            .filter(|(a, _)| a.2 > 0)
            .map(|(a, name)| TaskMetrics {
                task: name.clone(),
                psnr_db: a.0 / a.2 as f64,
                ssim: a.1 / a.2 as f64,
                n_images: a.2,
            })
            .collect(),
    };
    Ok(EvalResult {
        output: report(&acc_out),
        input: report(&acc_in),
        trace,
    })
}

/// Sample `i` of an NHWC batch as an `[H, W, C]` image.
pub fn image_at<T: Float>(batch: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let (_, h, w, c) = batch.nhwc()?;
    batch.select_batch(&[i])?.reshape(&[h, w, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 0.0), 2e-4);
        assert!(cosine_lr(100, 100, 2e-4, 0.0).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 2e-4, 0.0) - 1e-4).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 2e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.0), true);
        let mut st = OptimState::new(&store);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        adam_step(&mut store, &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        let want = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((store.value(id).data()[0] - want).abs() < 1e-15);
        assert_eq!(st.t, 1);

        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.7), true);
        let mut st = OptimState::new(&store);
        adam_step(&mut store, &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.value(id).data()[0], 0.7);
    }

    #[test]
    fn adam_rejects_nan_naming_parameter() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("enc1.0.attn.wq.weight", Tensor::scalar(0.0), true);
        store.get_mut(id).grad = Tensor::scalar(f32::NAN);
        let mut st = OptimState::new(&store);
        let e = adam_step(&mut store, &mut st, 1e-3, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(matches!(&e, Error::Numerical(m) if m.contains("enc1.0.attn.wq.weight")));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn loss_examples() {
        let g = Graph::<f64>::new();
        let y = g.input(Tensor::full(&[1, 2, 2, 3], 0.6));
        let t = g.input(Tensor::full(&[1, 2, 2, 3], 0.5));
        let (tot, _) = loss_total(&g, y, t, None, 0.0).unwrap();
        assert!((g.value(tot).item().unwrap() - 0.1).abs() < 1e-12);
        let (z, _) = loss_total(&g, t, t, Some(g.input(Tensor::scalar(0.0))), 0.1).unwrap();
        assert_eq!(g.value(z).item().unwrap(), 0.0);

        let y = g.input(Tensor::full(&[1, 2, 2, 3], 0.55));
        let aux = g.input(Tensor::scalar(3f64.ln()));
        let (tot, l1) = loss_total(&g, y, t, Some(aux), 0.1).unwrap();
        assert!((g.value(l1).item().unwrap() - 0.05).abs() < 1e-12);
        assert!((g.value(tot).item().unwrap() - (0.05 + 0.109_861_228_866_810_97)).abs() < 1e-12);
    }

    #[test]
    fn train_config_kv_roundtrip() {
        let mut c = TrainConfig {
            lambda_aux: 0.0,
            ..TrainConfig::default()
        };
        c.tasks = parse_tasks("noise:25").unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in c.to_kv() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, c);
    }
}
