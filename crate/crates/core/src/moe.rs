//! Degradation-aware learner: a router, one low-rank specialized expert per
//! degradation type, one agnostic expert that sees the whole batch, and a
//! shared expansion back to full width.
//!
//! Routing is hard top-1: each sample goes to the argmax expert of its router
//! logits. The decision is not differentiable; the router only learns through
//! the auxiliary classification loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{conv2former_block, Conv2FormerParams, Init, Linear};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Which expert paths a learner contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertMode {
    /// Specialized experts modulated by the agnostic expert.
    Full,
    /// Agnostic expert only; no router, no specialized experts.
    AgnosticOnly,
    /// Routed specialized experts without agnostic modulation.
    SpecializedOnly,
}

impl ExpertMode {
    pub fn has_router(self) -> bool {
        !matches!(self, ExpertMode::AgnosticOnly)
    }

    pub fn has_agnostic(self) -> bool {
        !matches!(self, ExpertMode::SpecializedOnly)
    }
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub w_r: Linear,
    pub n_deg: usize,
}

/// Low-rank expert: `Conv2Former(W · x)` with `W: C -> C_R`.
#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub w_down: Linear,
    pub c2f: Conv2FormerParams,
}

impl ExpertParams {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        c_r: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_down: init.linear(&format!("{name}.w_down"), c, c_r),
            c2f: Conv2FormerParams::new(init, &format!("{name}.c2f"), c_r, kernel)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.w_down.params();
        v.extend(self.c2f.params());
        v
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let low = self.w_down.forward(g, s, x)?;
        conv2former_block(g, s, low, &self.c2f)
    }
}

#[derive(Clone, Debug)]
pub struct LearnerParams {
    pub router: Option<RouterParams>,
    pub specialized: Vec<ExpertParams>,
    pub agnostic: Option<ExpertParams>,
    /// Shared `C_R -> C` expansion.
    pub w_up: Linear,
    pub mode: ExpertMode,
    pub channels: usize,
    pub low_rank: usize,
}

impl LearnerParams {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        channels: usize,
        reduction_ratio: usize,
        n_deg: usize,
        kernel: usize,
        mode: ExpertMode,
    ) -> Result<Self> {
        if n_deg == 0 {
            return Err(config_err!("{name}: need at least one degradation type"));
        }
        if reduction_ratio == 0
            || !channels.is_multiple_of(reduction_ratio)
            || channels / reduction_ratio == 0
        {
            return Err(config_err!(
                "{name}: channels {channels} with reduction ratio {reduction_ratio} gives low-rank width < 1 or non-integral"
            ));
        }
        let c_r = channels / reduction_ratio;
        let router = if mode.has_router() {
            Some(RouterParams {
                w_r: init.linear(&format!("{name}.router"), channels, n_deg),
                n_deg,
            })
        } else {
            None
        };
        let specialized = if mode.has_router() {
            (0..n_deg)
                .map(|i| {
                    ExpertParams::new(init, &format!("{name}.spec.{i}"), channels, c_r, kernel)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let agnostic = if mode.has_agnostic() {
            Some(ExpertParams::new(
                init,
                &format!("{name}.agnostic"),
                channels,
                c_r,
                kernel,
            )?)
        } else {
            None
        };
        Ok(Self {
            router,
            specialized,
            agnostic,
            w_up: init.linear(&format!("{name}.w_up"), c_r, channels),
            mode,
            channels,
            low_rank: c_r,
        })
    }
}

/// One sample's routing outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub sample_index: usize,
    pub chosen_expert: usize,
    pub logits: Vec<f64>,
    pub true_label: Option<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample router logits over globally pooled features, plus the top-1
/// decisions.
pub fn route<T: Float>(
    g: &Graph<T>,
    s: &ParamStore<T>,
    x: Var,
    p: &RouterParams,
) -> Result<(Var, Vec<RoutingDecision>)> {
    let pooled = g.global_avg_pool(x)?;
    let logits = p.w_r.forward(g, s, pooled)?;
    let decisions = decisions_from_logits(&g.value(logits), p.n_deg);
    Ok((logits, decisions))
}

pub fn decisions_from_logits<T: Float>(logits: &Tensor<T>, n_deg: usize) -> Vec<RoutingDecision> {
    logits
        .data()
        .chunks_exact(n_deg)
        .enumerate()
        .map(|(i, row)| {
            let l: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            RoutingDecision {
                sample_index: i,
                chosen_expert: argmax(&l),
                logits: l,
                true_label: None,
            }
        })
        .collect()
}

/// Partition of batch positions by assigned expert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchPlan {
    /// Expert id to batch positions in original order; empty groups are absent.
    pub groups: BTreeMap<usize, Vec<usize>>,
    pub batch: usize,
}

impl DispatchPlan {
    pub fn from_assignments(assignments: &[usize]) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &e) in assignments.iter().enumerate() {
            groups.entry(e).or_default().push(i);
        }
        Self {
            groups,
            batch: assignments.len(),
        }
    }

    pub fn from_decisions(decisions: &[RoutingDecision]) -> Self {
        let a: Vec<usize> = decisions.iter().map(|d| d.chosen_expert).collect();
        Self::from_assignments(&a)
    }

    /// Check the groups partition `0..batch` with ascending order inside each group.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.batch];
        for idx in self.groups.values() {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Internal("dispatch group not in batch order".into()));
            }
            for &i in idx {
                if i >= self.batch || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Internal(format!(
                        "dispatch index {i} invalid or repeated"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Internal("incomplete dispatch plan".into()));
        }
        Ok(())
    }

    /// Split a batch tensor into per-expert sub-batches.
    pub fn split<T: Float>(&self, x: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        self.groups
            .iter()
            .map(|(&e, idx)| Ok((e, x.select_batch(idx)?)))
            .collect()
    }

    /// Inverse of [`DispatchPlan::split`].
    pub fn merge<T: Float>(&self, parts: &[(usize, Tensor<T>)]) -> Result<Tensor<T>> {
        self.validate()?;
        let first = &parts
            .first()
            .ok_or_else(|| Error::Internal("merge of empty plan".into()))?
            .1;
        let stride = first.numel() / first.shape()[0];
        let mut shape = first.shape().to_vec();
        shape[0] = self.batch;
        let mut out = vec![T::zero(); self.batch * stride];
        for (e, t) in parts {
            let idx = self
                .groups
                .get(e)
                .ok_or_else(|| Error::Internal(format!("no group for expert {e}")))?;
            for (j, &dst) in idx.iter().enumerate() {
                out[dst * stride..(dst + 1) * stride]
                    .copy_from_slice(&t.data()[j * stride..(j + 1) * stride]);
            }
        }
        Tensor::new(&shape, out)
    }
}

/// Output of one learner.
pub struct LearnerOutput {
    pub out: Var,
    /// Router logits `[N, N_deg]`, absent without a router.
    pub logits: Option<Var>,
    pub decisions: Vec<RoutingDecision>,
}

/// Route, run experts on their sub-batches, modulate by the agnostic path,
/// merge and expand. `forced` overrides the router's choices (its logits are
/// still computed).
pub fn learner_forward<T: Float>(
    g: &Graph<T>,
    s: &ParamStore<T>,
    x: Var,
    p: &LearnerParams,
    forced: Option<&[usize]>,
) -> Result<LearnerOutput> {
    let batch = g.shape(x)[0];
    let agnostic = match &p.agnostic {
        Some(e) => Some(e.forward(g, s, x)?),
        None => None,
    };
    let Some(router) = &p.router else {
        let a = agnostic.ok_or_else(|| Error::Internal("learner without any expert".into()))?;
        return Ok(LearnerOutput {
            out: p.w_up.forward(g, s, a)?,
            logits: None,
            decisions: Vec::new(),
        });
    };
    let (logits, mut decisions) = route(g, s, x, router)?;
    if let Some(f) = forced {
        if f.len() != batch {
            return Err(Error::Usage(format!(
                "forced routing has {} entries for batch {}",
                f.len(),
                batch
            )));
        }
        for (d, &e) in decisions.iter_mut().zip(f) {
            if e >= router.n_deg {
                return Err(Error::Usage(format!("forced expert {e} out of range")));
            }
            d.chosen_expert = e;
        }
    }
    let plan = DispatchPlan::from_decisions(&decisions);
    let mut parts = Vec::with_capacity(plan.groups.len());
    let mut groups = Vec::with_capacity(plan.groups.len());
    for (&e, idx) in &plan.groups {
        let sub = if idx.len() == batch {
            x
        } else {
            g.gather_batch(x, idx)?
        };
        let mut y = p.specialized[e].forward(g, s, sub)?;
        if let Some(a) = agnostic {
            let a_sub = if idx.len() == batch {
                a
            } else {
                g.gather_batch(a, idx)?
            };
            y = g.mul(y, a_sub)?;
        }
        parts.push(y);
        groups.push(idx.clone());
    }
    let merged = if parts.len() == 1 && groups[0].len() == batch {
        parts[0]
    } else {
        g.combine(&parts, &groups, batch)?
    };
    Ok(LearnerOutput {
        out: p.w_up.forward(g, s, merged)?,
        logits: Some(logits),
        decisions,
    })
}

/// Mean cross-entropy of every router against the true labels, averaged
/// with equal weight over routers. Zero when there are no routers.
pub fn aux_loss<T: Float>(g: &Graph<T>, router_logits: &[Var], labels: &[usize]) -> Result<Var> {
    if router_logits.is_empty() {
        return Ok(g.input(Tensor::scalar(T::zero())));
    }
    let mut total: Option<Var> = None;
    for &l in router_logits {
        let ce = g.cross_entropy(l, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let n = router_logits.len() as f64;
    Ok(g.scale(total.expect("non-empty"), T::lit(1.0 / n)))
}

/// Fraction of samples whose expert equals the majority expert of their
/// label class. Label-to-expert assignment is arbitrary, so this measures
/// consistency only. Majority ties resolve to the lowest expert id.
pub fn routing_purity(chosen: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(chosen.len(), labels.len(), "purity: length mismatch");
    if chosen.is_empty() {
        return 1.0;
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&e, &l) in chosen.iter().zip(labels) {
        *counts.entry(l).or_default().entry(e).or_default() += 1;
    }
    let agree: usize = counts
        .values()
        .map(|by_expert| {
            by_expert
                .iter()
                .fold(
                    (usize::MAX, 0usize),
                    |(be, bc), (&e, &c)| if c > bc { (e, c) } else { (be, bc) },
                )
                .1
        })
        .sum();
    agree as f64 / chosen.len() as f64
}
