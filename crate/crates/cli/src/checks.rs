//! Finite-difference suites behind the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use restore_core::blocks::{
    channel_attention, conv2former_block, gated_ffn, AttentionParams, Conv2FormerParams,
    Downsample, FfnParams, Init, Upsample,
};
use restore_core::controller::{controller_forward, ControllerParams};
use restore_core::gradcheck::{finite_diff_check, FdOptions};
use restore_core::graph::{Graph, Var};
use restore_core::model::{ForwardOptions, ModelConfig, Restorer};
use restore_core::moe::{aux_loss, learner_forward, ExpertMode, LearnerParams};
use restore_core::param::{uniform, ParamStore};
use restore_core::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Blocks,
    Learner,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "blocks" => Ok(Scope::Blocks),
            "dale" | "learner" => Ok(Scope::Learner),
            "model" => Ok(Scope::Model),
            _ => Err(format!(
                "unknown scope {s:?}; expected blocks, dale or model"
            )),
        }
    }
}

impl Scope {
    /// Default pass threshold on the maximum relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Scope::Blocks | Scope::Learner => 1e-4,
            Scope::Model => 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub component: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub worst: String,
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

/// Smooth scalar readout `sum(y ⊙ r)` with a fixed random `r`.
fn readout(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(rand_tensor(&g.shape(y), seed));
    Ok(g.sum(g.mul(y, r)?))
}

fn check(
    name: &str,
    store: &mut ParamStore<f64>,
    coords: usize,
    f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<CheckRow> {
    check_with(
        name,
        store,
        FdOptions {
            coords_per_param: coords,
            ..FdOptions::default()
        },
        f,
    )
}

fn check_with(
    name: &str,
    store: &mut ParamStore<f64>,
    opts: FdOptions,
    f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<CheckRow> {
    let r = finite_diff_check(store, f, &opts)?;
    Ok(CheckRow {
        component: name.to_string(),
        max_rel_err: r.max_rel_err,
        coords: r.coords_checked,
        worst: r.worst.map_or_else(String::new, |(n, i)| {
            format!(
                "{n}[{i}] analytic {:.3e} numeric {:.3e}",
                r.worst_values.0, r.worst_values.1
            )
        }),
    })
}

struct Bench {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Bench {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn init(&mut self) -> Init<'_, f64> {
        Init {
            store: &mut self.store,
            rng: &mut self.rng,
            trainable: true,
        }
    }

    /// Randomize every bias, gamma and temperature so no parameter sits at a
    /// special value.
    fn jitter(&mut self) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let shape = self.store.value(id).shape().to_vec();
            if shape.len() == 1 {
                let name = &self.store.get(id).name;
                let centre = if name.ends_with(".bias") || name.ends_with(".beta") {
                    0.0
                } else {
                    1.0
                };
                let t = uniform(&mut self.rng, &shape, 0.5).map(|v| v + centre);
                self.store.set_value(id, t).expect("same shape");
            }
        }
    }
}

fn blocks_suite() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let x0 = rand_tensor(&[2, 6, 6, 4], 100);

    // Every block is fed through a learnable 1×1 projection so the check also
    // covers the gradient with respect to the block's input.
    {
        let mut b = Bench::new(1);
        let pre = b.init().linear("pre", 4, 8);
        let conv = b.init().conv("conv3", 3, 8, 6, 1);
        let grouped = b.init().conv("grouped", 3, 8, 6, 2);
        let dw = b.init().depthwise("dw3", 3, 8);
        let dw_large = b.init().depthwise("dw11", 11, 8);
        b.jitter();
        let x = x0.clone();
        rows.push(check(
            "conv 3x3 dense",
            &mut b.store.clone(),
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                readout(g, conv.forward(g, s, h)?, 7)
            },
        )?);
        let x7 = rand_tensor(&[2, 7, 7, 4], 102);
        rows.push(check(
            "conv 3x3 stride 2",
            &mut b.store.clone(),
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x7.clone()))?;
                let y = g.conv2d(h, g.param(s, conv.w), Some(g.param(s, conv.b)), 2, 1, 1)?;
                readout(g, y, 8)
            },
        )?);
        rows.push(check(
            "conv 3x3 grouped",
            &mut b.store.clone(),
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                readout(g, grouped.forward(g, s, h)?, 9)
            },
        )?);
        rows.push(check("depthwise 3x3", &mut b.store.clone(), 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            readout(g, dw.forward(g, s, h)?, 10)
        })?);
        rows.push(check(
            "depthwise 11x11",
            &mut b.store.clone(),
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                readout(g, dw_large.forward(g, s, h)?, 11)
            },
        )?);
    }
    {
        let mut b = Bench::new(2);
        let pre = b.init().linear("pre", 4, 8);
        let ln = b.init().layer_norm("ln", 8);
        b.jitter();
        let x = x0.clone();
        rows.push(check("layer norm", &mut b.store, 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            readout(g, ln.forward(g, s, h)?, 12)
        })?);
    }
    {
        let mut b = Bench::new(3);
        let pre = b.init().linear("pre", 4, 8);
        b.jitter();
        let x = x0.clone();
        rows.push(check(
            "gelu, sigmoid, softmax",
            &mut b.store,
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                let a = g.gelu(h);
                let sg = g.sigmoid(h);
                let sm = g.softmax(h, 3)?;
                let y = g.add(g.mul(a, sg)?, sm)?;
                readout(g, y, 13)
            },
        )?);
    }
    {
        let mut b = Bench::new(4);
        let pre = b.init().linear("pre", 4, 8);
        let pre_k = b.init().linear("pre_k", 4, 8);
        let attn = AttentionParams::new(&mut b.init(), "attn", 8, 2)?;
        b.jitter();
        let x = x0.clone();
        let xk = rand_tensor(&[2, 6, 6, 4], 101);
        rows.push(check(
            "channel self-attention",
            &mut b.store.clone(),
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                readout(g, channel_attention(g, s, h, &attn, h)?, 14)
            },
        )?);
        rows.push(check(
            "channel cross-attention",
            &mut b.store,
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                let k = pre_k.forward(g, s, g.input(xk.clone()))?;
                readout(g, channel_attention(g, s, h, &attn, k)?, 15)
            },
        )?);
    }
    {
        let mut b = Bench::new(5);
        let pre = b.init().linear("pre", 4, 8);
        let ffn = FfnParams::new(&mut b.init(), "ffn", 8, 2.0)?;
        b.jitter();
        let x = x0.clone();
        rows.push(check("gated feed-forward", &mut b.store, 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            readout(g, gated_ffn(g, s, h, &ffn)?, 16)
        })?);
    }
    {
        let mut b = Bench::new(6);
        let pre = b.init().linear("pre", 4, 8);
        let c2f = Conv2FormerParams::new(&mut b.init(), "c2f", 8, 11)?;
        b.jitter();
        let x = x0.clone();
        rows.push(check(
            "large-kernel modulation",
            &mut b.store,
            20,
            |g, s| {
                let h = pre.forward(g, s, g.input(x.clone()))?;
                readout(g, conv2former_block(g, s, h, &c2f)?, 17)
            },
        )?);
    }
    {
        let mut b = Bench::new(7);
        let pre = b.init().linear("pre", 4, 8);
        let down = Downsample::new(&mut b.init(), "down", 8)?;
        let up = Upsample::new(&mut b.init(), "up", 16);
        let fuse = b.init().linear("fuse", 16, 8);
        b.jitter();
        let x = x0.clone();
        rows.push(check("down/up, concat skip", &mut b.store, 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            let d = down.forward(g, s, h)?;
            let u = up.forward(g, s, d)?;
            let cat = g.concat_channels(u, h)?;
            readout(g, fuse.forward(g, s, cat)?, 18)
        })?);
    }
    {
        let mut b = Bench::new(8);
        let pre = b.init().linear("pre", 4, 8);
        let head = b.init().linear("head", 8, 3);
        b.jitter();
        let x = x0.clone();
        rows.push(check("pool, cross-entropy", &mut b.store, 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            let logits = head.forward(g, s, g.global_avg_pool(h)?)?;
            let ce = g.cross_entropy(logits, &[2, 0])?;
            let l1 = g.mean(g.abs(h));
            g.add(ce, l1)
        })?);
    }
    Ok(rows)
}

fn learner_suite() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let x0 = rand_tensor(&[4, 6, 6, 4], 200);
    let labels = [0usize, 1, 0, 2];
    let forced = [0usize, 1, 0, 2];
    for (name, mode) in [
        ("learner, full", ExpertMode::Full),
        ("learner, agnostic only", ExpertMode::AgnosticOnly),
        ("learner, specialized only", ExpertMode::SpecializedOnly),
    ] {
        let mut b = Bench::new(20);
        let pre = b.init().linear("pre", 4, 8);
        let learner = LearnerParams::new(&mut b.init(), "learner", 8, 4, 3, 7, mode)?;
        b.jitter();
        let x = x0.clone();
        rows.push(check(name, &mut b.store, 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            let out = learner_forward(g, s, h, &learner, Some(&forced))?;
            let r = readout(g, out.out, 21)?;
            let logits: Vec<Var> = out.logits.into_iter().collect();
            let aux = aux_loss(g, &logits, &labels)?;
            g.add(r, aux)
        })?);
    }
    {
        let mut b = Bench::new(22);
        let pre = b.init().linear("pre", 4, 8);
        let learner = LearnerParams::new(&mut b.init(), "learner", 8, 4, 3, 7, ExpertMode::Full)?;
        let ctrl = ControllerParams::from_source(&mut b.init(), "ctrl", &learner, 7)?;
        let x = x0.clone();
        rows.push(check("controller input path", &mut b.store, 20, |g, s| {
            let h = pre.forward(g, s, g.input(x.clone()))?;
            readout(g, controller_forward(g, s, h, &ctrl)?, 23)
        })?);
    }
    Ok(rows)
}

fn model_suite() -> Result<Vec<CheckRow>> {
    let mut model = Restorer::<f64>::build(ModelConfig::toy(), 30)?;
    // The zero-initialized output conv would hide every upstream gradient.
    let w = uniform(
        &mut ChaCha8Rng::seed_from_u64(31),
        model.store.value(model.out_conv.w).shape(),
        0.2,
    );
    model.store.set_value(model.out_conv.w, w)?;
    let x = rand_tensor(&[1, 8, 8, 3], 32).map(|v| 0.5 + 0.5 * v);
    let labels = [1usize];
    let routing: Vec<Vec<usize>> = {
        let (_, routers) = model.run(&x, None)?;
        routers
            .iter()
            .map(|r| r.decisions.iter().map(|d| d.chosen_expert).collect())
            .collect()
    };
    let mut store = model.store.clone();
    // The 1x1 bottleneck normalizes queries and keys over a single position,
    // so their projections have exactly zero gradient there; the floor keeps
    // those coordinates from comparing central-difference roundoff (~1e-10)
    // against zero.
    let opts = FdOptions {
        coords_per_param: 3,
        abs_floor: 1e-6,
        ..FdOptions::default()
    };
    let row = check_with("toy model, 1x8x8x3", &mut store, opts, |g, s| {
        let opts = ForwardOptions {
            labels: Some(&labels),
            forced_routing: Some(&routing),
        };
        let out = model.forward_with(g, s, g.input(x.clone()), opts)?;
        let r = readout(g, out.y, 33)?;
        g.add(r, g.scale(out.aux.expect("labels given"), 0.1))
    })?;
    Ok(vec![row])
}

pub fn run_scope(scope: Scope) -> Result<Vec<CheckRow>> {
    match scope {
        Scope::Blocks => blocks_suite(),
        Scope::Learner => learner_suite(),
        Scope::Model => model_suite(),
    }
}

pub fn format_rows(rows: &[CheckRow], threshold: f64) -> String {
    let mut s = format!(
        "{:<28} {:>12} {:>7}  {:<6} worst\n",
        "component", "max_rel_err", "coords", "result"
    );
    for r in rows {
        let verdict = if r.max_rel_err < threshold {
            "PASS"
        } else {
            "FAIL"
        };
        s.push_str(&format!(
            "{:<28} {:>12.3e} {:>7}  {:<6} {}\n",
            r.component, r.max_rel_err, r.coords, verdict, r.worst
        ));
    }
    s
}
