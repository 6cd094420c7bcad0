//! Properties of the degradation-aware learner: dispatch/combine, routing
//! equivariance, modulation identities and gradient isolation of the router.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use restore_core::blocks::Init;
use restore_core::graph::Graph;
use restore_core::moe::{aux_loss, learner_forward, DispatchPlan, ExpertMode, LearnerParams};
use restore_core::param::{uniform, ParamStore};
use restore_core::Tensor;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

fn learner(
    seed: u64,
    c: usize,
    rr: usize,
    n: usize,
    mode: ExpertMode,
) -> (ParamStore<f64>, LearnerParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = LearnerParams::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        },
        "learner",
        c,
        rr,
        n,
        7,
        mode,
    )
    .unwrap();
    // Random biases so routing and outputs depend on every parameter.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        if shape.len() == 1 {
            let t = rand(&shape, 1000 + id.index() as u64).map(|v| 0.3 * v);
            store.set_value(id, t).unwrap();
        }
    }
    (store, p)
}

fn forward(
    store: &ParamStore<f64>,
    p: &LearnerParams,
    x: &Tensor<f64>,
    forced: Option<&[usize]>,
) -> (Tensor<f64>, Vec<usize>) {
    let g = Graph::new();
    let out = learner_forward(&g, store, g.input(x.clone()), p, forced).unwrap();
    let chosen = out.decisions.iter().map(|d| d.chosen_expert).collect();
    ((*g.value(out.out)).clone(), chosen)
}

fn assignments() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (1usize..7).prop_flat_map(|n| (prop::collection::vec(0..n, 1..24), Just(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dispatch_then_combine_is_identity((a, _n) in assignments(), seed in any::<u64>()) {
        let x = rand(&[a.len(), 2, 3, 2], seed);
        let plan = DispatchPlan::from_assignments(&a);
        plan.validate().unwrap();
        let parts = plan.split(&x).unwrap();
        prop_assert_eq!(parts.iter().map(|(_, t)| t.shape()[0]).sum::<usize>(), a.len());
        let back = plan.merge(&parts).unwrap();
        prop_assert_eq!(back.data(), x.data());

        // Same round trip through the tape ops used in the forward pass.
        let g = Graph::new();
        let xv = g.input(x.clone());
        let groups: Vec<Vec<usize>> = plan.groups.values().cloned().collect();
        let subs: Vec<_> = groups.iter().map(|idx| g.gather_batch(xv, idx).unwrap()).collect();
        let merged = g.combine(&subs, &groups, a.len()).unwrap();
        let merged = g.value(merged);
        prop_assert_eq!(merged.data(), x.data());
    }

    #[test]
    fn learner_is_batch_permutation_equivariant(
        perm in (1usize..7).prop_flat_map(|b| Just((0..b).collect::<Vec<_>>()).prop_shuffle()),
        seed in 0u64..1_000_000,
    ) {
        let (store, p) = learner(seed % 7, 8, 4, 3, ExpertMode::Full);
        let b = perm.len();
        let x = rand(&[b, 4, 4, 8], seed);
        let xp = x.select_batch(&perm).unwrap();
        let (y, chosen) = forward(&store, &p, &x, None);
        let (yp, chosen_p) = forward(&store, &p, &xp, None);
        let yperm = y.select_batch(&perm).unwrap();
        prop_assert_eq!(yp.data(), yperm.data());
        let expect: Vec<usize> = perm.iter().map(|&i| chosen[i]).collect();
        prop_assert_eq!(chosen_p, expect);
    }
}

#[test]
fn partition_examples() {
    let plan = DispatchPlan::from_assignments(&[0, 1, 0]);
    assert_eq!(plan.groups[&0], vec![0, 2]);
    assert_eq!(plan.groups[&1], vec![1]);
    let single = DispatchPlan::from_assignments(&[2; 5]);
    assert_eq!(single.groups.len(), 1);
    assert_eq!(single.groups[&2], vec![0, 1, 2, 3, 4]);
}

#[test]
fn identical_experts_make_routing_irrelevant() {
    let (mut store, p) = learner(3, 8, 4, 3, ExpertMode::Full);
    for e in 1..3 {
        for (&src, &dst) in p.specialized[0]
            .params()
            .iter()
            .zip(&p.specialized[e].params())
        {
            let v = store.value(src).clone();
            store.set_value(dst, v).unwrap();
        }
    }
    let x = rand(&[6, 4, 4, 8], 9);
    let (a, _) = forward(&store, &p, &x, Some(&[0, 0, 0, 0, 0, 0]));
    let (b, _) = forward(&store, &p, &x, Some(&[2, 1, 0, 1, 2, 2]));
    let (c, _) = forward(&store, &p, &x, None);
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), c.data());
}

#[test]
fn unit_agnostic_output_passes_specialized_path_through() {
    let (mut store, p) = learner(4, 8, 4, 3, ExpertMode::Full);
    let ag = p.agnostic.as_ref().unwrap();
    // Zero output weights and unit bias: the agnostic expert returns ones.
    let w = store.value(ag.c2f.w_out.w).shape().to_vec();
    store.set_value(ag.c2f.w_out.w, Tensor::zeros(&w)).unwrap();
    store.set_value(ag.c2f.w_out.b, Tensor::ones(&[2])).unwrap();
    let x = rand(&[3, 4, 4, 8], 10);
    let forced = [1, 0, 1];
    let (y, _) = forward(&store, &p, &x, Some(&forced));
    for (i, &e) in forced.iter().enumerate() {
        let g = Graph::new();
        let xi = g.input(x.select_batch(&[i]).unwrap());
        let spec = p.specialized[e].forward(&g, &store, xi).unwrap();
        let expect = p.w_up.forward(&g, &store, spec).unwrap();
        let got = y.select_batch(&[i]).unwrap();
        for (a, b) in got.data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn output_shape_with_rank_two() {
    let (store, p) = learner(5, 32, 16, 3, ExpertMode::Full);
    assert_eq!(p.low_rank, 2);
    let (y, d) = forward(&store, &p, &rand(&[4, 16, 16, 32], 11), None);
    assert_eq!(y.shape(), &[4, 16, 16, 32]);
    assert_eq!(d.len(), 4);
}

#[test]
fn router_gradient_comes_only_from_aux_loss() {
    let (mut store, p) = learner(6, 8, 4, 3, ExpertMode::Full);
    let router = p.router.as_ref().unwrap().w_r.clone();
    let x = rand(&[4, 4, 4, 8], 12);

    let g = Graph::new();
    let out = learner_forward(&g, &store, g.input(x.clone()), &p, None).unwrap();
    let l1 = g.mean(g.abs(out.out));
    g.backward(l1, &mut store).unwrap();
    assert!(store.grad(router.w).data().iter().all(|&v| v == 0.0));
    assert!(store.grad(router.b).data().iter().all(|&v| v == 0.0));
    // The restoration loss does reach the experts that were used.
    let used = out.decisions[0].chosen_expert;
    assert!(store
        .grad(p.specialized[used].w_down.w)
        .data()
        .iter()
        .any(|&v| v != 0.0));

    store.zero_grad();
    let g = Graph::new();
    let out = learner_forward(&g, &store, g.input(x), &p, None).unwrap();
    let aux = aux_loss(&g, &[out.logits.unwrap()], &[0, 1, 2, 0]).unwrap();
    assert!(g.value(aux).item().unwrap() > 1e-3);
    g.backward(aux, &mut store).unwrap();
    assert!(store.grad(router.w).data().iter().any(|&v| v != 0.0));
}

#[test]
fn learner_size_grows_linearly_in_degradation_count() {
    let count = |n: usize| {
        let (store, _) = learner(0, 16, 4, n, ExpertMode::Full);
        store.trainable_count()
    };
    let c: Vec<usize> = (1..=4).map(count).collect();
    let step = c[1] - c[0];
    assert!(c.windows(2).all(|w| w[1] - w[0] == step), "{c:?}");
    // One specialized expert (w_down 16x4+4, conv2former at width 4 with an
    // 7x7 depthwise kernel) plus one router row (16 weights + 1 bias).
    let expert = (16 * 4 + 4) + 3 * (4 * 4 + 4) + (7 * 7 * 4 + 4);
    assert_eq!(step, expert + 16 + 1);
}

#[test]
fn ablated_learners_skip_the_missing_parts() {
    let x = rand(&[3, 4, 4, 8], 13);
    let (store, p) = learner(7, 8, 4, 3, ExpertMode::AgnosticOnly);
    assert!(p.router.is_none() && p.specialized.is_empty());
    let g = Graph::new();
    let out = learner_forward(&g, &store, g.input(x.clone()), &p, None).unwrap();
    assert!(out.logits.is_none() && out.decisions.is_empty());
    assert_eq!(g.shape(out.out), vec![3, 4, 4, 8]);

    let (store, p) = learner(7, 8, 4, 3, ExpertMode::SpecializedOnly);
    assert!(p.agnostic.is_none());
    let (y, d) = forward(&store, &p, &x, None);
    assert_eq!(y.shape(), &[3, 4, 4, 8]);
    assert_eq!(d.len(), 3);
}
