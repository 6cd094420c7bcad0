//! Assembly-level invariants of the restoration network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restore_core::blocks::Init;
use restore_core::controller::{controller_forward, ema_update};
use restore_core::graph::Graph;
use restore_core::model::{ForwardOptions, LayerRole, ModelConfig, Restorer};
use restore_core::moe::ExpertMode;
use restore_core::param::{uniform, ParamStore};
use restore_core::{Error, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0).map(|v| 0.5 + 0.5 * v)
}

fn toy(seed: u64) -> Restorer<f64> {
    Restorer::build(ModelConfig::toy(), seed).unwrap()
}

fn randomize_out_conv(m: &mut Restorer<f64>, seed: u64) {
    let shape = m.store.value(m.out_conv.w).shape().to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 0.3);
    m.store.set_value(m.out_conv.w, w).unwrap();
}

fn zero_linear(store: &mut ParamStore<f64>, l: &restore_core::blocks::Linear) {
    for id in [l.w, l.b] {
        let s = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&s)).unwrap();
    }
}

#[test]
fn presets_build_and_sizes() {
    let paper = Restorer::<f32>::build(ModelConfig::paper(), 0).unwrap();
    assert_eq!(paper.router_count(), 20);
    assert_eq!(paper.config.dim(4), 256);
    let mut cfg = ModelConfig::toy();
    cfg.n_degradations = 2;
    let small = Restorer::<f32>::build(cfg, 0).unwrap();
    assert!(small.param_count() < 500_000, "{}", small.param_count());
}

#[test]
fn invalid_rank_is_a_config_error() {
    let cfg = ModelConfig {
        base_dim: 8,
        reduction_ratio: 16,
        ..ModelConfig::toy()
    };
    match Restorer::<f32>::build(cfg, 0) {
        Err(Error::Config(m)) => assert!(m.contains("low-rank"), "{m}"),
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn identity_at_initialization() {
    let m = toy(1);
    let x = rand(&[2, 32, 32, 3], 2);
    let (y, routers) = m.run(&x, None).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
    assert_eq!(routers.len(), m.router_count());
    assert!(m.run(&rand(&[1, 12, 16, 3], 3), None).is_err());
}

#[test]
fn router_layout_follows_execution_order() {
    let m = Restorer::<f32>::build(ModelConfig::paper(), 0).unwrap();
    let layout = m.router_layout();
    let roles: Vec<LayerRole> = layout.iter().map(|r| r.0).collect();
    let levels: Vec<usize> = layout.iter().map(|r| r.1).collect();
    assert_eq!(
        roles.iter().filter(|r| **r == LayerRole::Encoder).count(),
        8
    );
    assert_eq!(
        roles
            .iter()
            .filter(|r| **r == LayerRole::Bottleneck)
            .count(),
        4
    );
    assert_eq!(
        roles.iter().filter(|r| **r == LayerRole::Decoder).count(),
        8
    );
    assert_eq!(
        levels,
        vec![1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4, 4, 3, 3, 3, 2, 2, 2, 1, 1]
    );
}

/// With every inner sub-block silenced the network is the bare U-Net
/// skeleton, which is rebuilt here from its public parts.
#[test]
fn silenced_blocks_leave_the_skeleton() {
    let mut m = toy(4);
    randomize_out_conv(&mut m, 5);
    let mut all: Vec<_> = m.encoder.iter().flatten().cloned().collect();
    all.extend(m.bottleneck.iter().cloned());
    all.extend(m.decoder.iter().flatten().cloned());
    all.extend(m.refine.iter().cloned());
    for b in &all {
        if let Some((_, d)) = &b.learner {
            zero_linear(&mut m.store, &d.w_up);
        }
        zero_linear(&mut m.store, &b.attn.w_out);
        zero_linear(&mut m.store, &b.ffn.w_out);
    }
    let x = rand(&[1, 16, 16, 3], 6);
    let (y, _) = m.run(&x, None).unwrap();

    let g = Graph::new();
    let s = &m.store;
    let xv = g.input(x.clone());
    let f0 = m.shallow.forward(&g, s, xv).unwrap();
    let mut skips = Vec::new();
    let mut cur = f0;
    for d in &m.downs {
        skips.push(cur);
        cur = d.forward(&g, s, cur).unwrap();
    }
    for l in (0..3).rev() {
        let up = m.ups[l].forward(&g, s, cur).unwrap();
        let cat = g.concat_channels(up, skips[l]).unwrap();
        cur = m.fuses[l].forward(&g, s, cat).unwrap();
    }
    let feat = g.add(cur, f0).unwrap();
    let expect = g.add(m.out_conv.forward(&g, s, feat).unwrap(), xv).unwrap();
    assert_eq!(y.data(), g.value(expect).data());
}

#[test]
fn each_residual_branch_contributes() {
    let x = rand(&[1, 16, 16, 3], 7);
    let mut base = toy(8);
    randomize_out_conv(&mut base, 9);
    let (y0, _) = base.run(&x, None).unwrap();
    let block = base.encoder[0][0].clone();
    let zeroings: Vec<Box<dyn Fn(&mut ParamStore<f64>)>> = vec![
        Box::new(|s| zero_linear(s, &block.learner.as_ref().unwrap().1.w_up)),
        Box::new(|s| zero_linear(s, &block.attn.w_out)),
        Box::new(|s| zero_linear(s, &block.ffn.w_out)),
    ];
    for (i, z) in zeroings.iter().enumerate() {
        let mut m = base.clone();
        z(&mut m.store);
        let (y, _) = m.run(&x, None).unwrap();
        assert_ne!(y.data(), y0.data(), "branch {i} had no effect");
    }
}

#[test]
fn output_depends_on_skip_features() {
    let x = rand(&[1, 16, 16, 3], 10);
    let mut m = toy(11);
    randomize_out_conv(&mut m, 12);
    let (y0, _) = m.run(&x, None).unwrap();
    // Zero the fuse rows that read the skip half of the concatenation.
    let fuse = m.fuses[0].clone();
    let w = m.store.value(fuse.w).clone();
    let c = fuse.cout;
    let masked = Tensor::from_fn(w.shape(), |i| {
        if i / c >= fuse.cin / 2 {
            0.0
        } else {
            w.data()[i]
        }
    });
    m.store.set_value(fuse.w, masked).unwrap();
    let (y1, _) = m.run(&x, None).unwrap();
    let diff = y0
        .data()
        .iter()
        .zip(y1.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "max change {diff}");
}

#[test]
fn more_degradations_grow_only_routers_and_specialized_experts() {
    let counts = |n: usize| {
        let cfg = ModelConfig {
            n_degradations: n,
            ..ModelConfig::toy()
        };
        Restorer::<f32>::build(cfg, 0).unwrap().component_counts()
    };
    let (a, b) = (counts(3), counts(6));
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        match *name {
            "router" | "specialized experts" => assert!(y > x, "{name}"),
            _ => assert_eq!(x, y, "{name}"),
        }
    }
    let spec3 = a.iter().find(|c| c.0 == "specialized experts").unwrap().1;
    let spec6 = b.iter().find(|c| c.0 == "specialized experts").unwrap().1;
    assert_eq!(spec6, 2 * spec3);
}

#[test]
fn ablations_remove_exactly_their_components() {
    let full = Restorer::<f32>::build(ModelConfig::toy(), 0).unwrap();
    let get =
        |m: &Restorer<f32>, k: &str| m.component_counts().iter().find(|c| c.0 == k).unwrap().1;
    let no_spec = Restorer::<f32>::build(
        ModelConfig {
            experts: ExpertMode::AgnosticOnly,
            ..ModelConfig::toy()
        },
        0,
    )
    .unwrap();
    assert_eq!(
        full.param_count() - no_spec.param_count(),
        get(&full, "router") + get(&full, "specialized experts")
    );
    let no_agn = Restorer::<f32>::build(
        ModelConfig {
            experts: ExpertMode::SpecializedOnly,
            ..ModelConfig::toy()
        },
        0,
    )
    .unwrap();
    assert_eq!(
        full.param_count() - no_agn.param_count(),
        get(&full, "agnostic experts")
    );
    let no_ctrl = Restorer::<f32>::build(
        ModelConfig {
            use_controller: false,
            ..ModelConfig::toy()
        },
        0,
    )
    .unwrap();
    assert_eq!(full.param_count(), no_ctrl.param_count());
    assert_eq!(get(&no_ctrl, "controllers (frozen)"), 0);
    assert_eq!(
        full.store.len() - no_ctrl.store.len(),
        full.controllers
            .iter()
            .flatten()
            .map(|c| c.params().len())
            .sum::<usize>()
    );
}

#[test]
fn restoration_loss_never_reaches_routers_or_controllers() {
    let mut m = toy(13);
    randomize_out_conv(&mut m, 14);
    let x = rand(&[3, 16, 16, 3], 15);
    let target = rand(&[3, 16, 16, 3], 16);
    let g = Graph::new();
    let out = m
        .forward(&g, g.input(x), ForwardOptions::default())
        .unwrap();
    let diff = g.sub(out.y, g.input(target)).unwrap();
    let l1 = g.mean(g.abs(diff));
    g.backward(l1, &mut m.store).unwrap();
    let mut routers = 0;
    for (id, p) in m.store.iter() {
        if p.name.contains(".router.") || p.name.starts_with("ctrl") {
            routers += 1;
            assert!(
                m.store.grad(id).data().iter().all(|&v| v == 0.0),
                "{} has gradient",
                p.name
            );
        }
    }
    assert!(routers > 0);
    let shallow = m.store.grad(m.shallow.w);
    assert!(shallow.data().iter().any(|&v| v != 0.0));
}

#[test]
fn controllers_track_their_encoder_source() {
    let m = toy(17);
    for (l, c) in m.controllers.iter().enumerate() {
        let c = c.as_ref().unwrap();
        let src = m.encoder[l]
            .last()
            .unwrap()
            .learner
            .as_ref()
            .unwrap()
            .1
            .clone();
        let agn = src.agnostic.as_ref().unwrap();
        // Synced copy reproduces the encoder's agnostic path bitwise.
        let dim = m.config.dim(l + 1);
        let x = rand(&[2, 8, 8, dim], 18 + l as u64);
        let g = Graph::new();
        let xv = g.input(x);
        let a = agn.forward(&g, &m.store, xv).unwrap();
        let path = src.w_up.forward(&g, &m.store, a).unwrap();
        let ctrl = controller_forward(&g, &m.store, xv, c).unwrap();
        assert_eq!(g.value(path).data(), g.value(ctrl).data());
        let n_src: usize = agn
            .params()
            .iter()
            .chain(&src.w_up.params())
            .map(|&id| m.store.value(id).numel())
            .sum();
        let n_ctrl: usize = c.params().iter().map(|&id| m.store.value(id).numel()).sum();
        assert_eq!(n_src, n_ctrl);
        assert!(c.params().iter().all(|&id| !m.store.get(id).trainable));
    }
}

#[test]
fn ema_moves_controllers_only_towards_source() {
    let mut m = toy(19);
    let c = m.controllers[0].clone().unwrap();
    let (ctrl_id, src_id) = c.pairs[0];
    let before = m.store.value(ctrl_id).clone();
    let src = m.store.value(src_id).map(|v| v + 1.0);
    m.store.set_value(src_id, src.clone()).unwrap();
    ema_update(&mut m.store, &c, 0.9).unwrap();
    for ((a, b), s) in m
        .store
        .value(ctrl_id)
        .data()
        .iter()
        .zip(before.data())
        .zip(src.data())
    {
        assert!((a - (0.9 * b + 0.1 * s)).abs() < 1e-12);
    }
}

#[test]
fn mac_estimate_matches_counted_operations() {
    for cfg in [
        ModelConfig::toy(),
        ModelConfig {
            use_controller: false,
            ..ModelConfig::toy()
        },
    ] {
        let m = Restorer::<f32>::build(cfg, 0).unwrap();
        let g = Graph::new();
        let x = g.input(Tensor::<f32>::full(&[1, 16, 24, 3], 0.5));
        m.forward(&g, x, ForwardOptions::default()).unwrap();
        assert_eq!(g.macs(), m.mac_estimate(16, 24));
    }
}

#[test]
fn single_conv_counts() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
        trainable: true,
    };
    init.conv("c", 3, 3, 32, 1);
    assert_eq!(store.trainable_count(), 896);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
        trainable: true,
    };
    let l = init.linear("l", 8, 8);
    let g = Graph::new();
    let x = g.input(Tensor::<f32>::zeros(&[1, 5, 7, 8]));
    l.forward(&g, &store, x).unwrap();
    assert_eq!(g.macs(), 5 * 7 * 8 * 8);
}
