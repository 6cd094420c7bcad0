//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Step for the central difference.
    pub h: f64,
    /// Coordinates sampled per parameter; parameters smaller than this are
    /// checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Restrict the check to these parameters (all trainable ones if `None`).
    pub only: Option<Vec<ParamId>>,
    /// Added to the relative-error denominator. Coordinates whose true
    /// derivative is zero otherwise compare roundoff against roundoff.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            coords_per_param: 20,
            seed: 0,
            only: None,
            abs_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
}

/// Relative error used throughout: `|a - n| / (|a| + |n| + 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, 1e-12)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + floor)
}

/// Compare reverse-mode gradients of the scalar `f` against central
/// differences over sampled parameter coordinates.
///
/// `f` builds its computation on the graph it is given and returns the scalar
/// loss; it must be deterministic.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let g = Graph::new();
        let loss = f(&g, store)?;
        g.backward(loss, store)?;
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let loss = f(&g, s)?;
        g.value(loss).item()
    };

    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => store.ids().filter(|&id| store.get(id).trainable).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords_checked: 0,
    };
    for id in ids {
        if !store.get(id).trainable {
            return Err(Error::Usage(format!(
                "finite_diff_check on frozen parameter {}",
                store.get(id).name
            )));
        }
        let n = store.value(id).numel();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        for c in coords {
            let analytic = store.grad(id).data()[c];
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - opts.h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let e = rel_err_floor(analytic, numeric, opts.abs_floor);
            report.coords_checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = e;
                report.worst = Some((store.get(id).name.clone(), c));
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_matches_closed_form() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(3.0), true);
        let opts = FdOptions {
            h: 1e-5,
            ..FdOptions::default()
        };
        let r = finite_diff_check(
            &mut store,
            |g, s| {
                let w = g.param(s, s.lookup("w").unwrap());
                let sq = g.mul(w, w)?;
                Ok(g.sum(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        // Closed form: d(w²)/dw = 2w = 6.
        assert_eq!(store.grad(store.lookup("w").unwrap()).data(), &[6.0]);
    }

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![0.5, -0.25, 1.0]).unwrap(), true);
        let r = finite_diff_check(
            &mut store,
            |g, s| {
                let w = g.param(s, s.lookup("w").unwrap());
                let c = g.input(Tensor::new(&[3], vec![2.0, 4.0, -8.0])?);
                let p = g.mul(w, c)?;
                Ok(g.sum(p))
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }
}
