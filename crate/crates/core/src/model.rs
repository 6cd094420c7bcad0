//! Four-level U-shaped restorer with expert-augmented transformer blocks.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    channel_attention, gated_ffn, AttentionParams, Conv, Downsample, FfnParams, Init, LayerNorm,
    Linear, Upsample,
};
use crate::controller::{controller_forward, ControllerParams};
use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{aux_loss, learner_forward, ExpertMode, LearnerParams, RoutingDecision};
use crate::param::ParamStore;
use crate::tensor::{Float, Tensor};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_dim: usize,
    /// Level 1 (full resolution) to level 4 (bottleneck).
    pub blocks_per_level: [usize; LEVELS],
    pub n_degradations: usize,
    pub reduction_ratio: usize,
    pub heads: [usize; LEVELS],
    pub ffn_expansion: f64,
    pub c2f_kernel: usize,
    pub refinement_blocks: usize,
    pub controller_alpha: f64,
    pub experts: ExpertMode,
    /// Decoder attention takes keys from controllers; otherwise it is
    /// plain self-attention.
    pub use_controller: bool,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        Self {
            base_dim: 32,
            blocks_per_level: [2, 3, 3, 4],
            n_degradations: 3,
            reduction_ratio: 16,
            heads: [1, 2, 4, 8],
            ffn_expansion: 2.0,
            c2f_kernel: 11,
            refinement_blocks: 2,
            controller_alpha: 0.9,
            experts: ExpertMode::Full,
            use_controller: true,
        }
    }

    /// Desk-scale configuration used by the training tests.
    pub fn toy() -> Self {
        Self {
            base_dim: 16,
            blocks_per_level: [1, 1, 1, 1],
            reduction_ratio: 4,
            ..Self::paper()
        }
    }

    pub fn dim(&self, level: usize) -> usize {
        self.base_dim << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_dim == 0 {
            return Err(config_err!("model.base_dim must be >= 1"));
        }
        if self.reduction_ratio == 0 {
            return Err(config_err!("model.reduction_ratio must be >= 1"));
        }
        for l in 1..=LEVELS {
            let c = self.dim(l);
            if c < self.reduction_ratio {
                return Err(config_err!(
                    "level {l} width {c} / reduction ratio {} gives low-rank width < 1",
                    self.reduction_ratio
                ));
            }
            if !c.is_multiple_of(self.reduction_ratio) {
                return Err(config_err!(
                    "level {l} width {c} not divisible by reduction ratio {}",
                    self.reduction_ratio
                ));
            }
            let h = self.heads[l - 1];
            if h == 0 || !c.is_multiple_of(h) {
                return Err(config_err!(
                    "level {l} width {c} not divisible by heads {h}"
                ));
            }
            if self.blocks_per_level[l - 1] == 0 {
                return Err(config_err!("model.blocks level {l} must be >= 1"));
            }
        }
        if self.n_degradations == 0 {
            return Err(config_err!("model.n_degradations must be >= 1"));
        }
        if self.c2f_kernel < 7 || self.c2f_kernel.is_multiple_of(2) {
            return Err(config_err!("model.c2f_kernel must be odd and >= 7"));
        }
        if !(self.ffn_expansion > 0.0) {
            return Err(config_err!("model.ffn_expansion must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.controller_alpha) {
            return Err(config_err!("controller.alpha must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Flat `key = value` lines; the inverse of repeated [`ModelConfig::set`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("model.base_dim".into(), self.base_dim.to_string()),
            ("model.blocks".into(), list(&self.blocks_per_level)),
            (
                "model.n_degradations".into(),
                self.n_degradations.to_string(),
            ),
            (
                "model.reduction_ratio".into(),
                self.reduction_ratio.to_string(),
            ),
            ("model.heads".into(), list(&self.heads)),
            ("model.ffn_expansion".into(), self.ffn_expansion.to_string()),
            ("model.c2f_kernel".into(), self.c2f_kernel.to_string()),
            (
                "model.refinement_blocks".into(),
                self.refinement_blocks.to_string(),
            ),
            ("model.experts".into(), self.experts.to_string()),
            ("model.controller".into(), self.use_controller.to_string()),
            ("controller.alpha".into(), self.controller_alpha.to_string()),
        ]
    }

    /// Apply one key. Returns `Ok(false)` for keys outside this config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| config_err!("{key}: cannot parse {value:?} as {what}");
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad("an integer"));
        let four = |v: &str| -> Result<[usize; LEVELS]> {
            let parts = v.split(',').map(&num).collect::<Result<Vec<_>>>()?;
            parts
                .try_into()
                .map_err(|_| bad("four comma-separated integers"))
        };
        match key {
            "model.base_dim" => self.base_dim = num(value)?,
            "model.blocks" => self.blocks_per_level = four(value)?,
            "model.n_degradations" => self.n_degradations = num(value)?,
            "model.reduction_ratio" => self.reduction_ratio = num(value)?,
            "model.heads" => self.heads = four(value)?,
            "model.ffn_expansion" => {
                self.ffn_expansion = value.trim().parse().map_err(|_| bad("a number"))?
            }
            "model.c2f_kernel" => self.c2f_kernel = num(value)?,
            "model.refinement_blocks" => self.refinement_blocks = num(value)?,
            "model.experts" => self.experts = value.trim().parse()?,
            "model.controller" => {
                self.use_controller = value.trim().parse().map_err(|_| bad("true/false"))?
            }
            "controller.alpha" => {
                self.controller_alpha = value.trim().parse().map_err(|_| bad("a number"))?
            }
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

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::paper();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("malformed config line {line:?}"))?;
            if !c.set(k.trim(), v.trim())? {
                return Err(config_err!("unknown model key {:?}", k.trim()));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for ExpertMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertMode::Full => "full",
            ExpertMode::AgnosticOnly => "agnostic_only",
            ExpertMode::SpecializedOnly => "specialized_only",
        })
    }
}

impl FromStr for ExpertMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "agnostic_only" => Ok(Self::AgnosticOnly),
            "specialized_only" => Ok(Self::SpecializedOnly),
            _ => Err(config_err!(
                "model.experts: expected full, agnostic_only or specialized_only, got {s:?}"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerRole {
    Encoder,
    Bottleneck,
    Decoder,
}

impl LayerRole {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerRole::Encoder => "encoder",
            LayerRole::Bottleneck => "bottleneck",
            LayerRole::Decoder => "decoder",
        }
    }
}

impl FromStr for LayerRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "bottleneck" => Ok(Self::Bottleneck),
            "decoder" => Ok(Self::Decoder),
            _ => Err(Error::Data(format!("unknown layer role {s:?}"))),
        }
    }
}

/// Pre-normed residual transformer block, optionally preceded by a learner.
#[derive(Clone, Debug)]
pub struct Block {
    pub level: usize,
    pub learner: Option<(LayerNorm, LearnerParams)>,
    pub ln_attn: LayerNorm,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: FfnParams,
}

impl Block {
    fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        cfg: &ModelConfig,
        level: usize,
        learner: bool,
    ) -> Result<Self> {
        let c = cfg.dim(level);
        let learner = if learner {
            Some((
                init.layer_norm(&format!("{name}.ln_learner"), c),
                LearnerParams::new(
                    init,
                    &format!("{name}.learner"),
                    c,
                    cfg.reduction_ratio,
                    cfg.n_degradations,
                    cfg.c2f_kernel,
                    cfg.experts,
                )?,
            ))
        } else {
            None
        };
        Ok(Self {
            level,
            learner,
            ln_attn: init.layer_norm(&format!("{name}.ln_attn"), c),
            attn: AttentionParams::new(init, &format!("{name}.attn"), c, cfg.heads[level - 1])?,
            ln_ffn: init.layer_norm(&format!("{name}.ln_ffn"), c),
            ffn: FfnParams::new(init, &format!("{name}.ffn"), c, cfg.ffn_expansion)?,
        })
    }

    fn learner_params(&self) -> Option<&LearnerParams> {
        self.learner.as_ref().map(|(_, d)| d)
    }
}

/// Output of one learner during a forward pass.
#[derive(Clone, Debug)]
pub struct RouterRecord {
    /// Dense index in execution order.
    pub layer: usize,
    pub role: LayerRole,
    pub level: usize,
    pub logits: Var,
    pub decisions: Vec<RoutingDecision>,
}

pub struct ForwardOutput {
    pub y: Var,
    pub routers: Vec<RouterRecord>,
    /// Mean router cross-entropy, present when labels were given.
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub labels: Option<&'a [usize]>,
    /// Expert per sample for each router layer, overriding the argmax.
    pub forced_routing: Option<&'a [Vec<usize>]>,
}

#[derive(Clone, Debug)]
pub struct Restorer<T: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub shallow: Conv,
    /// Levels 1..=3.
    pub encoder: Vec<Vec<Block>>,
    pub downs: Vec<Downsample>,
    pub bottleneck: Vec<Block>,
    /// Index `l - 1` holds the transition into decoder level `l`.
    pub ups: Vec<Upsample>,
    pub fuses: Vec<Linear>,
    pub decoder: Vec<Vec<Block>>,
    pub controllers: Vec<Option<ControllerParams>>,
    pub refine: Vec<Block>,
    pub out_conv: Conv,
}

struct Walk<'a, 'g, T: Float> {
    g: &'g Graph<T>,
    s: &'a ParamStore<T>,
    opts: ForwardOptions<'a>,
    routers: Vec<RouterRecord>,
}

impl<T: Float> Walk<'_, '_, T> {
    fn block(
        &mut self,
        x: Var,
        b: &Block,
        role: LayerRole,
        ctrl: Option<&ControllerParams>,
    ) -> Result<Var> {
        let (g, s) = (self.g, self.s);
        let mut x = x;
        if let Some((ln, learner)) = &b.learner {
            let h = ln.forward(g, s, x)?;
            let layer = self.routers.len();
            let forced = match self.opts.forced_routing {
                Some(f) => Some(
                    f.get(layer)
                        .ok_or_else(|| {
                            Error::Usage(format!("forced routing missing for layer {layer}"))
                        })?
                        .as_slice(),
                ),
                None => None,
            };
            let out = learner_forward(g, s, h, learner, forced)?;
            if let Some(logits) = out.logits {
                let mut decisions = out.decisions;
                if let Some(labels) = self.opts.labels {
                    for d in &mut decisions {
                        d.true_label = labels.get(d.sample_index).copied();
                    }
                }
                self.routers.push(RouterRecord {
                    layer,
                    role,
                    level: b.level,
                    logits,
                    decisions,
                });
            }
            x = g.add(x, out.out)?;
        }
        let h = b.ln_attn.forward(g, s, x)?;
        let keys = match ctrl {
            Some(c) => controller_forward(g, s, h, c)?,
            None => h,
        };
        x = g.add(x, channel_attention(g, s, h, &b.attn, keys)?)?;
        let h = b.ln_ffn.forward(g, s, x)?;
        g.add(x, gated_ffn(g, s, h, &b.ffn)?)
    }
}

impl<T: Float> Restorer<T> {
    /// Deterministic construction from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        };
        let cfg = &config;
        let c1 = cfg.dim(1);
        let shallow = init.conv("shallow", 3, 3, c1, 1);

        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for l in 1..LEVELS {
            let blocks = (0..cfg.blocks_per_level[l - 1])
                .map(|b| Block::new(&mut init, &format!("enc{l}.{b}"), cfg, l, true))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
            downs.push(Downsample::new(&mut init, &format!("down{l}"), cfg.dim(l))?);
        }
        let bottleneck = (0..cfg.blocks_per_level[LEVELS - 1])
            .map(|b| Block::new(&mut init, &format!("bottleneck.{b}"), cfg, LEVELS, true))
            .collect::<Result<Vec<_>>>()?;

        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoder = Vec::new();
        let mut controllers = Vec::new();
        for l in 1..LEVELS {
            let c = cfg.dim(l);
            ups.push(Upsample::new(&mut init, &format!("up{l}"), 2 * c));
            fuses.push(init.linear(&format!("fuse{l}"), 2 * c, c));
            let blocks = (0..cfg.blocks_per_level[l - 1])
                .map(|b| Block::new(&mut init, &format!("dec{l}.{b}"), cfg, l, true))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(blocks);
            controllers.push(if cfg.use_controller {
                let source = encoder[l - 1]
                    .last()
                    .and_then(Block::learner_params)
                    .expect("level has blocks");
                Some(ControllerParams::from_source(
                    &mut init,
                    &format!("ctrl{l}"),
                    source,
                    cfg.c2f_kernel,
                )?)
            } else {
                None
            });
        }
        let refine = (0..cfg.refinement_blocks)
            .map(|b| Block::new(&mut init, &format!("refine.{b}"), cfg, 1, false))
            .collect::<Result<Vec<_>>>()?;
        let out_conv = init.conv("out_conv", 3, c1, 3, 1);
        store.set_value(out_conv.w, Tensor::zeros(&[3, 3, c1, 3]))?;

        Ok(Self {
            config,
            store,
            shallow,
            encoder,
            downs,
            bottleneck,
            ups,
            fuses,
            decoder,
            controllers,
            refine,
            out_conv,
        })
    }

    /// Number of learners with a router, in execution order.
    pub fn router_count(&self) -> usize {
        if !self.config.experts.has_router() {
            return 0;
        }
        let b = &self.config.blocks_per_level;
        b.iter().sum::<usize>() + b[..LEVELS - 1].iter().sum::<usize>()
    }

    /// Role and level of every router layer in execution order.
    pub fn router_layout(&self) -> Vec<(LayerRole, usize)> {
        if !self.config.experts.has_router() {
            return Vec::new();
        }
        let mut v = Vec::new();
        for (i, blocks) in self.encoder.iter().enumerate() {
            v.extend(blocks.iter().map(|_| (LayerRole::Encoder, i + 1)));
        }
        v.extend(
            self.bottleneck
                .iter()
                .map(|_| (LayerRole::Bottleneck, LEVELS)),
        );
        for l in (1..LEVELS).rev() {
            v.extend(self.decoder[l - 1].iter().map(|_| (LayerRole::Decoder, l)));
        }
        v
    }

    pub fn forward(&self, g: &Graph<T>, x: Var, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.forward_with(g, &self.store, x, opts)
    }

    /// Forward pass reading parameter values from `s`, which must share this
    /// model's layout.
    pub fn forward_with(
        &self,
        g: &Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let shape = g.shape(x);
        let (n, h, w, c) = match shape.as_slice() {
            [n, h, w, c] => (*n, *h, *w, *c),
            _ => return Err(dim_err!("model input must be NHWC, got {shape:?}")),
        };
        if c != 3 {
            return Err(dim_err!("model input must have 3 channels, got {c}"));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(dim_err!("model input {h}x{w} must be divisible by 8"));
        }
        if let Some(labels) = opts.labels {
            if labels.len() != n {
                return Err(dim_err!("{} labels for batch {n}", labels.len()));
            }
        }
        let mut walk = Walk {
            g,
            s,
            opts,
            routers: Vec::new(),
        };

        let f0 = self.shallow.forward(g, s, x)?;
        let mut skips = Vec::new();
        let mut cur = f0;
        for (blocks, down) in self.encoder.iter().zip(&self.downs) {
            for b in blocks {
                cur = walk.block(cur, b, LayerRole::Encoder, None)?;
            }
            skips.push(cur);
            cur = down.forward(g, s, cur)?;
        }
        for b in &self.bottleneck {
            cur = walk.block(cur, b, LayerRole::Bottleneck, None)?;
        }
        for l in (1..LEVELS).rev() {
            let up = self.ups[l - 1].forward(g, s, cur)?;
            let cat = g.concat_channels(up, skips[l - 1])?;
            cur = self.fuses[l - 1].forward(g, s, cat)?;
            let ctrl = self.controllers[l - 1].as_ref();
            for b in &self.decoder[l - 1] {
                cur = walk.block(cur, b, LayerRole::Decoder, ctrl)?;
            }
        }
        for b in &self.refine {
            cur = walk.block(cur, b, LayerRole::Decoder, None)?;
        }
        let feat = g.add(cur, f0)?;
        let y = g.add(self.out_conv.forward(g, s, feat)?, x)?;

        let aux = match opts.labels {
            Some(labels) => {
                let logits: Vec<Var> = walk.routers.iter().map(|r| r.logits).collect();
                Some(aux_loss(g, &logits, labels)?)
            }
            None => None,
        };
        Ok(ForwardOutput {
            y,
            routers: walk.routers,
            aux,
        })
    }

    /// Inference on a concrete batch, returning the output tensor and routers.
    pub fn run(
        &self,
        x: &Tensor<T>,
        labels: Option<&[usize]>,
    ) -> Result<(Tensor<T>, Vec<RouterRecord>)> {
        let g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.forward(
            &g,
            xv,
            ForwardOptions {
                labels,
                forced_routing: None,
            },
        )?;
        Ok(((*g.value(out.y)).clone(), out.routers))
    }

    /// Exact trainable-parameter total.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Parameter totals grouped by role; controllers are listed separately
    /// because they are never trained.
    pub fn component_counts(&self) -> Vec<(&'static str, usize)> {
        const KINDS: [&str; 10] = [
            "router",
            "specialized experts",
            "agnostic experts",
            "expert expansion",
            "attention",
            "feed-forward",
            "layer norms",
            "level transitions",
            "input/output convs",
            "controllers (frozen)",
        ];
        let mut totals = [0usize; KINDS.len()];
        for (_, p) in self.store.iter() {
            let n = &p.name;
            let k = if n.starts_with("ctrl") {
                9
            } else if n.contains(".learner.router.") {
                0
            } else if n.contains(".learner.spec.") {
                1
            } else if n.contains(".learner.agnostic.") {
                2
            } else if n.contains(".learner.w_up.") {
                3
            } else if n.contains(".attn.") {
                4
            } else if n.contains(".ffn.") {
                5
            } else if n.contains(".ln_") {
                6
            } else if n.starts_with("down") || n.starts_with("up") || n.starts_with("fuse") {
                7
            } else {
                8
            };
            totals[k] += p.value.numel();
        }
        KINDS.iter().copied().zip(totals).collect()
    }

    /// Analytic multiply-accumulate count of one forward pass on a single
    /// `h x w` image. Counts the same operations as [`Graph::macs`].
    pub fn mac_estimate(&self, h: usize, w: usize) -> u64 {
        let cfg = &self.config;
        let mut total = 0u64;
        let k = cfg.c2f_kernel as u64;
        let conv = |px: u64, k: u64, cin_g: u64, cout: u64| px * k * k * cin_g * cout;
        let block = |px: u64, c: u64, heads: u64, b: &Block, ctrl: bool| -> u64 {
            let mut m = 0;
            if let Some(d) = b.learner_params() {
                let cr = d.low_rank as u64;
                let expert = px * c * cr + 3 * px * cr * cr + conv(px, k, 1, cr);
                let n_paths = d.mode.has_router() as u64 + d.mode.has_agnostic() as u64;
                m += n_paths * expert + px * cr * c;
                if let Some(r) = &d.router {
                    m += c * r.n_deg as u64;
                }
            }
            let d = c / heads;
            m += 4 * px * c * c + 3 * conv(px, 3, 1, c) + px * heads * d * d * 2;
            if ctrl {
                let cr = c / cfg.reduction_ratio as u64;
                m += px * c * cr + 3 * px * cr * cr + conv(px, k, 1, cr) + px * cr * c;
            }
            let hid = b.ffn.hidden as u64;
            m + px * c * 2 * hid + conv(px, 3, 1, 2 * hid) + px * hid * c
        };
        let px = |l: usize| ((h >> (l - 1)) * (w >> (l - 1))) as u64;
        let c1 = cfg.dim(1) as u64;
        total += conv(px(1), 3, 3, c1);
        for l in 1..LEVELS {
            let c = cfg.dim(l) as u64;
            let heads = cfg.heads[l - 1] as u64;
            for b in &self.encoder[l - 1] {
                total += block(px(l), c, heads, b, false);
            }
            total += px(l) * c * (c / 2);
            for b in &self.decoder[l - 1] {
                total += block(px(l), c, heads, b, self.controllers[l - 1].is_some());
            }
            // Upsample from level l+1 (1×1 at 2C -> 4C) and skip fusion 2C -> C.
            total += px(l + 1) * (2 * c) * (4 * c) + px(l) * (2 * c) * c;
        }
        for b in &self.bottleneck {
            total += block(
                px(LEVELS),
                cfg.dim(LEVELS) as u64,
                cfg.heads[LEVELS - 1] as u64,
                b,
                false,
            );
        }
        for b in &self.refine {
            total += block(px(1), c1, cfg.heads[0] as u64, b, false);
        }
        total + conv(px(1), 3, c1, 3)
    }
}
