//! Finite-difference checks of every differentiable op, in double precision
//! with inputs drawn from [-1, 1]. Inputs are stored as trainable parameters
//! so input gradients are checked along with weight gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restore_core::gradcheck::{finite_diff_check, FdOptions};
use restore_core::graph::{Graph, Var};
use restore_core::param::{uniform, ParamStore};
use restore_core::{ParamId, Result, Tensor};

const TOL: f64 = 1e-4;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

struct Case {
    store: ParamStore<f64>,
    next_seed: u64,
}

impl Case {
    fn new() -> Self {
        Self {
            store: ParamStore::new(),
            next_seed: 1,
        }
    }

    fn p(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.next_seed += 1;
        self.store.add(name, rand(shape, self.next_seed), true)
    }

    fn check(mut self, f: impl Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> f64 {
        let opts = FdOptions {
            h: 1e-5,
            coords_per_param: 24,
            ..FdOptions::default()
        };
        let r = finite_diff_check(&mut self.store, f, &opts).unwrap();
        assert!(
            r.coords_checked >= 20,
            "only {} coordinates",
            r.coords_checked
        );
        r.max_rel_err
    }
}

/// Weighted sum with fixed random weights, so every output element carries a
/// distinct gradient.
fn readout(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(rand(&g.shape(y), seed));
    Ok(g.sum(g.mul(y, r)?))
}

#[test]
fn conv2d_weight_grad_on_5x5_input() {
    let mut c = Case::new();
    let x = rand(&[1, 5, 5, 2], 77);
    let w = c.p("w", &[3, 3, 2, 4]);
    let b = c.p("b", &[4]);
    let opts = FdOptions {
        h: 1e-4,
        coords_per_param: 72,
        ..FdOptions::default()
    };
    let r = finite_diff_check(
        &mut c.store,
        |g, s| {
            let y = g.conv2d(
                g.input(x.clone()),
                g.param(s, w),
                Some(g.param(s, b)),
                1,
                1,
                1,
            )?;
            Ok(g.sum(y))
        },
        &opts,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn conv2d_variants() {
    for (stride, pad, groups, k, cin, cout, hw) in [
        (1, 1, 1, 3, 3, 4, 6),
        (2, 1, 1, 3, 4, 3, 7),
        (1, 0, 2, 3, 4, 6, 5),
        (1, 1, 4, 3, 4, 4, 6),
        (1, 5, 4, 11, 4, 4, 6),
        (1, 0, 1, 1, 5, 3, 4),
    ] {
        let mut c = Case::new();
        let x = c.p("x", &[2, hw, hw, cin]);
        let w = c.p("w", &[k, k, cin / groups, cout]);
        let b = c.p("b", &[cout]);
        let e = c.check(|g, s| {
            let y = g.conv2d(
                g.param(s, x),
                g.param(s, w),
                Some(g.param(s, b)),
                stride,
                pad,
                groups,
            )?;
            readout(g, y, 5)
        });
        assert!(
            e < TOL,
            "conv stride {stride} pad {pad} groups {groups} k {k}: {e}"
        );
    }
}

#[test]
fn linear_over_leading_dims() {
    let mut c = Case::new();
    let x = c.p("x", &[2, 3, 3, 5]);
    let w = c.p("w", &[5, 4]);
    let b = c.p("b", &[4]);
    let e = c.check(|g, s| {
        let y = g.linear(g.param(s, x), g.param(s, w), Some(g.param(s, b)))?;
        readout(g, y, 6)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn layer_norm_grad() {
    let mut c = Case::new();
    let x = c.p("x", &[2, 3, 3, 6]);
    let gamma = c.p("gamma", &[6]);
    let beta = c.p("beta", &[6]);
    let e = c.check(|g, s| {
        let y = g.layer_norm(g.param(s, x), g.param(s, gamma), g.param(s, beta), 1e-5)?;
        readout(g, y, 7)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn softmax_along_each_axis() {
    for axis in 0..3 {
        let mut c = Case::new();
        let x = c.p("x", &[3, 4, 5]);
        let e = c.check(|g, s| {
            let y = g.softmax(g.param(s, x), axis)?;
            readout(g, y, 8)
        });
        assert!(e < TOL, "axis {axis}: {e}");
    }
}

#[test]
fn composed_elementwise_mean_abs() {
    let mut c = Case::new();
    let a = c.p("a", &[4, 6]);
    let b = c.p("b", &[4, 6]);
    let cc = c.p("c", &[4, 6]);
    let e = c.check(|g, s| {
        let ab = g.mul(g.param(s, a), g.param(s, b))?;
        let y = g.add(ab, g.param(s, cc))?;
        Ok(g.mean(g.abs(y)))
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn remaining_elementwise_ops() {
    let mut c = Case::new();
    let a = c.p("a", &[3, 5]);
    let b = c.p("b", &[3, 5]);
    let e = c.check(|g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let d = g.sub(a, b)?;
        let y = g.add(g.gelu(d), g.mul(g.sigmoid(a), g.scale(b, 0.7))?)?;
        let y = g.reshape(y, &[5, 3])?;
        readout(g, y, 9)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn shuffle_concat_slice_pool() {
    let mut c = Case::new();
    let x = c.p("x", &[2, 4, 4, 3]);
    let z = c.p("z", &[2, 2, 2, 12]);
    let e = c.check(|g, s| {
        let x = g.param(s, x);
        let u = g.pixel_unshuffle(x, 2)?;
        let cat = g.concat_channels(u, g.param(s, z))?;
        let part = g.slice_channels(cat, 5, 14)?;
        let sh = g.pixel_shuffle(g.slice_channels(cat, 0, 12)?, 2)?;
        let pooled = g.global_avg_pool(part)?;
        let a = readout(g, sh, 10)?;
        let b = readout(g, pooled, 11)?;
        g.add(a, b)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn gather_and_combine() {
    let mut c = Case::new();
    let x = c.p("x", &[5, 2, 2, 3]);
    let groups = vec![vec![0, 3], vec![1, 2, 4]];
    let e = c.check(|g, s| {
        let x = g.param(s, x);
        let parts: Vec<Var> = groups
            .iter()
            .enumerate()
            .map(|(i, idx)| {
                let sub = g.gather_batch(x, idx)?;
                Ok(g.scale(g.gelu(sub), 1.0 + i as f64))
            })
            .collect::<Result<_>>()?;
        let y = g.combine(&parts, &groups, 5)?;
        readout(g, y, 12)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn channel_attention_core_grad() {
    let mut c = Case::new();
    let q = c.p("q", &[2, 3, 3, 8]);
    let k = c.p("k", &[2, 3, 3, 8]);
    let v = c.p("v", &[2, 3, 3, 8]);
    let t = c.p("t", &[2]);
    let e = c.check(|g, s| {
        let y = g.channel_attention_core(
            g.param(s, q),
            g.param(s, k),
            g.param(s, v),
            g.param(s, t),
            2,
        )?;
        readout(g, y, 13)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn cross_entropy_grad() {
    let mut c = Case::new();
    let l = c.p("logits", &[8, 3]);
    let e = c.check(|g, s| g.cross_entropy(g.param(s, l), &[0, 2, 1, 2, 1, 0, 0, 2]));
    assert!(e < TOL, "{e}");
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut c = Case::new();
    let x = c.p("x", &[1, 4, 4, 2]);
    let w = c.p("w", &[3, 3, 2, 2]);
    let g = Graph::new();
    let y = g
        .conv2d(g.param(&c.store, x), g.param(&c.store, w), None, 1, 1, 1)
        .unwrap();
    let loss = g.mean(g.abs(y));
    g.backward(loss, &mut c.store).unwrap();
    let once = c.store.grad(w).clone();
    g.backward(loss, &mut c.store).unwrap();
    for (a, b) in c.store.grad(w).data().iter().zip(once.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut c = Case::new();
        let x = c.p("x", &[2, 4, 4, 4]);
        let w = c.p("w", &[3, 3, 1, 4]);
        let g = Graph::new();
        let y = g
            .conv2d(g.param(&c.store, x), g.param(&c.store, w), None, 1, 1, 4)
            .unwrap();
        let y = g.softmax(g.gelu(y), 3).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &mut c.store).unwrap();
        (g.value(y).data().to_vec(), c.store.grad(x).data().to_vec())
    };
    assert_eq!(run(), run());
}
