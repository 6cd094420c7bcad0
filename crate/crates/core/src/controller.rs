//! Decoder controllers: frozen copies of an encoder agnostic expert path that
//! follow their source by exponential moving average.

use crate::blocks::Linear;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::moe::{ExpertParams, LearnerParams};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Float;

/// Same structure as an agnostic expert plus the learner's shared expansion.
#[derive(Clone, Debug)]
pub struct ControllerParams {
    pub expert: ExpertParams,
    pub w_up: Linear,
    /// `(controller, source)` parameter pairs; empty when there is no source
    /// to track.
    pub pairs: Vec<(ParamId, ParamId)>,
}

impl ControllerParams {
    /// Frozen controller initialized as an exact copy of the agnostic path of
    /// `source`. Without an agnostic expert in `source` the controller keeps
    /// its own initialization and never updates.
    pub fn from_source<T: Float>(
        init: &mut crate::blocks::Init<'_, T>,
        name: &str,
        source: &LearnerParams,
        kernel: usize,
    ) -> Result<Self> {
        let was = init.trainable;
        init.trainable = false;
        let built = (|| {
            let expert = ExpertParams::new(
                init,
                &format!("{name}.expert"),
                source.channels,
                source.low_rank,
                kernel,
            )?;
            let w_up = init.linear(&format!("{name}.w_up"), source.low_rank, source.channels);
            Ok::<_, crate::Error>((expert, w_up))
        })();
        init.trainable = was;
        let (expert, w_up) = built?;
        let mut ctrl = Self {
            expert,
            w_up,
            pairs: Vec::new(),
        };
        if let Some(src) = &source.agnostic {
            let mine = ctrl.params();
            let theirs: Vec<ParamId> = src
                .params()
                .into_iter()
                .chain(source.w_up.params())
                .collect();
            ctrl.pairs = mine.into_iter().zip(theirs).collect();
            for &(c, s) in &ctrl.pairs {
                let v = init.store.value(s).clone();
                init.store.set_value(c, v)?;
            }
        }
        Ok(ctrl)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.expert.params();
        v.extend(self.w_up.params());
        v
    }
}

/// `θc ← α·θc + (1−α)·θs` for every tracked pair.
pub fn ema_update<T: Float>(
    store: &mut ParamStore<T>,
    ctrl: &ControllerParams,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err!(
            "controller alpha must lie in [0, 1], got {alpha}"
        ));
    }
    let a = T::lit(alpha);
    let b = T::lit(1.0 - alpha);
    for &(c, s) in &ctrl.pairs {
        if store.value(c).shape() != store.value(s).shape() {
            return Err(dim_err!(
                "controller {} shape {:?} differs from source {:?}",
                store.get(c).name,
                store.value(c).shape(),
                store.value(s).shape()
            ));
        }
        let src = store.value(s).clone();
        for (tc, &ts) in store.value_mut(c).data_mut().iter_mut().zip(src.data()) {
            *tc = a * *tc + b * ts;
        }
    }
    Ok(())
}

pub fn controller_forward<T: Float>(
    g: &Graph<T>,
    s: &ParamStore<T>,
    x: Var,
    ctrl: &ControllerParams,
) -> Result<Var> {
    let h = ctrl.expert.forward(g, s, x)?;
    ctrl.w_up.forward(g, s, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Init;
    use crate::moe::ExpertMode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(mode: ExpertMode) -> (ParamStore<f64>, LearnerParams, ControllerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        };
        let d = LearnerParams::new(&mut init, "d", 8, 4, 3, 7, mode).unwrap();
        let c = ControllerParams::from_source(&mut init, "c", &d, 7).unwrap();
        (store, d, c)
    }

    fn agnostic_path(g: &Graph<f64>, s: &ParamStore<f64>, x: Var, d: &LearnerParams) -> Var {
        let a = d.agnostic.as_ref().unwrap().forward(g, s, x).unwrap();
        d.w_up.forward(g, s, a).unwrap()
    }

    #[test]
    fn init_copy_is_bitwise_and_frozen() {
        let (store, d, c) = setup(ExpertMode::Full);
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = g.input(crate::param::uniform(&mut rng, &[2, 6, 6, 8], 1.0));
        let yc = controller_forward(&g, &store, x, &c).unwrap();
        let ya = agnostic_path(&g, &store, x, &d);
        assert_eq!(g.value(yc).data(), g.value(ya).data());
        assert!(c.params().iter().all(|&p| !store.get(p).trainable));
        let n_ctrl: usize = c.params().iter().map(|&p| store.value(p).numel()).sum();
        let n_src: usize = c.pairs.iter().map(|&(_, s)| store.value(s).numel()).sum();
        assert_eq!(n_ctrl, n_src);
    }

    #[test]
    fn ema_endpoints_are_exact() {
        let (mut store, _d, c) = setup(ExpertMode::Full);
        let (cid, sid) = c.pairs[0];
        let shape = store.value(sid).shape().to_vec();
        store.set_value(sid, Tensor::full(&shape, 0.37)).unwrap();
        let before = store.value(cid).clone();
        ema_update(&mut store, &c, 1.0).unwrap();
        assert_eq!(store.value(cid).data(), before.data());
        ema_update(&mut store, &c, 0.0).unwrap();
        assert_eq!(store.value(cid).data(), store.value(sid).data());
    }

    #[test]
    fn ema_follows_geometric_series() {
        let (mut store, _d, c) = setup(ExpertMode::Full);
        let (cid, sid) = c.pairs[0];
        let shape = store.value(sid).shape().to_vec();
        store.set_value(cid, Tensor::zeros(&shape)).unwrap();
        store.set_value(sid, Tensor::ones(&shape)).unwrap();
        for _ in 0..10 {
            ema_update(&mut store, &c, 0.9).unwrap();
        }
        let want = 1.0 - 0.9f64.powi(10);
        assert!((want - 0.651_321_559_9).abs() < 1e-9);
        for &v in store.value(cid).data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn ema_rejects_bad_alpha() {
        let (mut store, _d, c) = setup(ExpertMode::Full);
        assert!(matches!(
            ema_update(&mut store, &c, 1.5),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn no_source_means_no_tracking() {
        let (mut store, _d, c) = setup(ExpertMode::SpecializedOnly);
        assert!(c.pairs.is_empty());
        let before: Vec<_> = c.params().iter().map(|&p| store.value(p).clone()).collect();
        ema_update(&mut store, &c, 0.5).unwrap();
        for (p, b) in c.params().iter().zip(before) {
            assert_eq!(store.value(*p).data(), b.data());
        }
    }
}
