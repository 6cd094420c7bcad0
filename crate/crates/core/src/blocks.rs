//! Reusable network blocks.
//!
//! Every block holds [`ParamId`]s into a shared [`ParamStore`] and exposes a
//! `forward` that records onto a [`Graph`]. Residual connections are left to
//! the caller.

use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::param::{uniform, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Parameter factory that names parameters hierarchically and draws
/// initial values from a seeded stream.
pub struct Init<'a, T: Float> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub trainable: bool,
}

impl<T: Float> Init<'_, T> {
    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.store.add(name, value, self.trainable)
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = uniform(self.rng, &[cin, cout], bound);
        Linear {
            w: self.tensor(&format!("{name}.weight"), w),
            b: self.tensor(&format!("{name}.bias"), Tensor::zeros(&[cout])),
            cin,
            cout,
        }
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, groups: usize) -> Conv {
        let cig = cin / groups;
        let bound = 1.0 / ((k * k * cig) as f64).sqrt();
        let w = uniform(self.rng, &[k, k, cig, cout], bound);
        Conv {
            w: self.tensor(&format!("{name}.weight"), w),
            b: self.tensor(&format!("{name}.bias"), Tensor::zeros(&[cout])),
            k,
            pad: k / 2,
            groups,
        }
    }

    pub fn depthwise(&mut self, name: &str, k: usize, c: usize) -> Conv {
        self.conv(name, k, c, c, c)
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.tensor(&format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: self.tensor(&format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }
}

/// Affine map over channels; equivalent to a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn forward<T: Float>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.linear(x, w, Some(b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Stride-1 "same" convolution with square odd kernel.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv {
    pub fn forward<T: Float>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv2d(x, w, Some(b), 1, self.pad, self.groups)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward<T: Float>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head transposed (channel) attention.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub dw_q: Conv,
    pub dw_k: Conv,
    pub dw_v: Conv,
    pub w_out: Linear,
    pub temperature: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(config_err!(
                "{name}: channels {c} not divisible by heads {heads}"
            ));
        }
        Ok(Self {
            wq: init.linear(&format!("{name}.wq"), c, c),
            wk: init.linear(&format!("{name}.wk"), c, c),
            wv: init.linear(&format!("{name}.wv"), c, c),
            dw_q: init.depthwise(&format!("{name}.dw_q"), 3, c),
            dw_k: init.depthwise(&format!("{name}.dw_k"), 3, c),
            dw_v: init.depthwise(&format!("{name}.dw_v"), 3, c),
            w_out: init.linear(&format!("{name}.w_out"), c, c),
            temperature: init.tensor(&format!("{name}.temperature"), Tensor::ones(&[heads])),
            heads,
        })
    }
}

/// Queries and values from `x`, keys from `kv_source`; passing `x` as the
/// key source gives self-attention.
pub fn channel_attention<T: Float>(
    g: &Graph<T>,
    s: &ParamStore<T>,
    x: Var,
    p: &AttentionParams,
    kv_source: Var,
) -> Result<Var> {
    if g.shape(x) != g.shape(kv_source) {
        return Err(dim_err!(
            "key source shape {:?} differs from input {:?}",
            g.shape(kv_source),
            g.shape(x)
        ));
    }
    let q = p.dw_q.forward(g, s, p.wq.forward(g, s, x)?)?;
    let k = p.dw_k.forward(g, s, p.wk.forward(g, s, kv_source)?)?;
    let v = p.dw_v.forward(g, s, p.wv.forward(g, s, x)?)?;
    let temp = g.param(s, p.temperature);
    let o = g.channel_attention_core(q, k, v, temp, p.heads)?;
    p.w_out.forward(g, s, o)
}

/// Gated depthwise feed-forward.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w_in: Linear,
    pub dw: Conv,
    pub w_out: Linear,
    pub hidden: usize,
}

impl FfnParams {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        expansion: f64,
    ) -> Result<Self> {
        if expansion <= 0.0 {
            return Err(config_err!("{name}: ffn expansion must be > 0"));
        }
        let hidden = ((c as f64 * expansion).round() as usize).max(1);
        Ok(Self {
            w_in: init.linear(&format!("{name}.w_in"), c, 2 * hidden),
            dw: init.depthwise(&format!("{name}.dw"), 3, 2 * hidden),
            w_out: init.linear(&format!("{name}.w_out"), hidden, c),
            hidden,
        })
    }
}

/// `w_out(gelu(a) ⊙ b)` where `[a, b]` is the depthwise-filtered expansion.
pub fn gated_ffn<T: Float>(g: &Graph<T>, s: &ParamStore<T>, x: Var, p: &FfnParams) -> Result<Var> {
    let h = p.dw.forward(g, s, p.w_in.forward(g, s, x)?)?;
    let a = g.slice_channels(h, 0, p.hidden)?;
    let b = g.slice_channels(h, p.hidden, p.hidden)?;
    let gated = g.mul(g.gelu(a), b)?;
    p.w_out.forward(g, s, gated)
}

/// Large-kernel convolutional modulation block.
#[derive(Clone, Debug)]
pub struct Conv2FormerParams {
    pub w_a: Linear,
    pub dw_large: Conv,
    pub w_v: Linear,
    pub w_out: Linear,
}

impl Conv2FormerParams {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        name: &str,
        c: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel < 7 {
            return Err(config_err!(
                "{name}: large kernel must be odd and >= 7, got {kernel}"
            ));
        }
        Ok(Self {
            w_a: init.linear(&format!("{name}.w_a"), c, c),
            dw_large: init.depthwise(&format!("{name}.dw_large"), kernel, c),
            w_v: init.linear(&format!("{name}.w_v"), c, c),
            w_out: init.linear(&format!("{name}.w_out"), c, c),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.w_a, &self.w_v, &self.w_out]
            .iter()
            .flat_map(|l| l.params())
            .chain(self.dw_large.params())
            .collect()
    }
}

/// `w_out(dw_large(w_a(x)) ⊙ w_v(x))`.
pub fn conv2former_block<T: Float>(
    g: &Graph<T>,
    s: &ParamStore<T>,
    x: Var,
    p: &Conv2FormerParams,
) -> Result<Var> {
    let a = p.dw_large.forward(g, s, p.w_a.forward(g, s, x)?)?;
    let v = p.w_v.forward(g, s, x)?;
    let m = g.mul(a, v)?;
    p.w_out.forward(g, s, m)
}

/// Halve resolution, double channels: 1×1 conv `C -> C/2`, then unshuffle.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub proj: Linear,
}

impl Downsample {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c: usize) -> Result<Self> {
        if !c.is_multiple_of(2) {
            return Err(config_err!(
                "{name}: downsample needs even channels, got {c}"
            ));
        }
        Ok(Self {
            proj: init.linear(&format!("{name}.proj"), c, c / 2),
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, h, w, _) = g.value(x).nhwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("downsample needs even spatial dims, got {h}x{w}"));
        }
        let p = self.proj.forward(g, s, x)?;
        g.pixel_unshuffle(p, 2)
    }
}

/// Double resolution, halve channels: 1×1 conv `C -> 2C`, then shuffle.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub proj: Linear,
}

impl Upsample {
    pub fn new<T: Float>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        Self {
            proj: init.linear(&format!("{name}.proj"), c, 2 * c),
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = self.proj.forward(g, s, x)?;
        g.pixel_shuffle(p, 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(7))
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, shape, 1.0)
    }

    #[test]
    fn attention_preserves_shape_and_self_equals_cross() {
        let (mut store, mut rng) = setup();
        let p = AttentionParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            },
            "a",
            8,
            2,
        )
        .unwrap();
        let g = Graph::new();
        let x = g.input(rand_input(&[2, 4, 5, 8], 1));
        let y1 = channel_attention(&g, &store, x, &p, x).unwrap();
        let x2 = g.input(rand_input(&[2, 4, 5, 8], 1));
        let y2 = channel_attention(&g, &store, x, &p, x2).unwrap();
        assert_eq!(g.shape(y1), vec![2, 4, 5, 8]);
        assert_eq!(g.value(y1).data(), g.value(y2).data());
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let (mut store, mut rng) = setup();
        let r = AttentionParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            },
            "a",
            6,
            4,
        );
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn ffn_zero_in_zero_out() {
        let (mut store, mut rng) = setup();
        let p = FfnParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            },
            "f",
            32,
            2.0,
        )
        .unwrap();
        let g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 16, 16, 32]));
        let y = gated_ffn(&g, &store, x, &p).unwrap();
        assert_eq!(g.shape(y), vec![2, 16, 16, 32]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2former_modulation_identity() {
        let (mut store, mut rng) = setup();
        let p = Conv2FormerParams::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
                trainable: true,
            },
            "c",
            4,
            11,
        )
        .unwrap();
        // dw_large output forced to ones: zero weights, unit bias.
        store
            .set_value(p.dw_large.w, Tensor::zeros(&[11, 11, 1, 4]))
            .unwrap();
        store.set_value(p.dw_large.b, Tensor::ones(&[4])).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        store.set_value(p.w_out.w, eye).unwrap();
        let g = Graph::new();
        let x = g.input(rand_input(&[2, 8, 8, 4], 3));
        let y = conv2former_block(&g, &store, x, &p).unwrap();
        let wv = p.w_v.forward(&g, &store, x).unwrap();
        assert_eq!(g.shape(y), vec![2, 8, 8, 4]);
        assert_eq!(g.value(y).data(), g.value(wv).data());
    }

    #[test]
    fn conv2former_rejects_small_or_even_kernels() {
        let (mut store, mut rng) = setup();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        };
        assert!(Conv2FormerParams::new(&mut init, "a", 4, 5).is_err());
        assert!(Conv2FormerParams::new(&mut init, "b", 4, 8).is_err());
    }

    #[test]
    fn down_up_shapes() {
        let (mut store, mut rng) = setup();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        };
        let d = Downsample::new(&mut init, "d", 32).unwrap();
        let u = Upsample::new(&mut init, "u", 64);
        let g = Graph::new();
        let x = g.input(rand_input(&[1, 16, 16, 32], 4));
        let y = d.forward(&g, &store, x).unwrap();
        assert_eq!(g.shape(y), vec![1, 8, 8, 64]);
        let z = u.forward(&g, &store, y).unwrap();
        assert_eq!(g.shape(z), vec![1, 16, 16, 32]);
        let odd = g.input(rand_input(&[1, 5, 4, 32], 5));
        assert!(matches!(
            d.forward(&g, &store, odd),
            Err(crate::Error::Dimension(_))
        ));
    }
}
