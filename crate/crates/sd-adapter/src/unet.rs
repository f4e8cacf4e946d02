//! Conditional UNet with the diffusers block layout, evaluated with a fixed context.

use std::collections::BTreeSet;

use cellstyle_core::attention::{AttentionControl, AttentionSite, LayerId, Qkv};
use cellstyle_core::{Error, Result, Scalar};
use ndarray::{Array1, Array2, Array3, Axis};

use crate::nn::{
    concat_channels, from_tokens, gelu, silu, to_tokens, upsample_nearest2, Attention, Conv, GroupNorm, LayerNorm,
    Linear, ResnetBlock,
};
use crate::weights::Weights;

const EPS_RESNET: f64 = 1e-5;
const EPS_TRANSFORMER: f64 = 1e-6;

struct TransformerBlock<T> {
    id: LayerId,
    norm1: LayerNorm<T>,
    attn1: Attention<T>,
    norm2: LayerNorm<T>,
    attn2: Attention<T>,
    norm3: LayerNorm<T>,
    ff_in: Linear<T>,
    ff_out: Linear<T>,
}

/// 1x1 convolution in v1 checkpoints, a linear layer in later ones;
/// both act per token.
struct Transformer<T> {
    norm: GroupNorm<T>,
    proj_in: Linear<T>,
    blocks: Vec<TransformerBlock<T>>,
    proj_out: Linear<T>,
}

/// Attention evaluation context for one forward pass.
pub struct Hooks<'a, T> {
    pub t: usize,
    pub context: &'a Array2<T>,
    pub exposed: &'a BTreeSet<LayerId>,
    pub control: &'a mut dyn AttentionControl<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    fn load(w: &Weights<T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            id: LayerId::new(format!("{prefix}.attn1")),
            norm1: LayerNorm::load(w, &format!("{prefix}.norm1"))?,
            attn1: Attention::load(w, &format!("{prefix}.attn1"), heads)?,
            norm2: LayerNorm::load(w, &format!("{prefix}.norm2"))?,
            attn2: Attention::load(w, &format!("{prefix}.attn2"), heads)?,
            norm3: LayerNorm::load(w, &format!("{prefix}.norm3"))?,
            ff_in: Linear::load(w, &format!("{prefix}.ff.net.0.proj"))?,
            ff_out: Linear::load(w, &format!("{prefix}.ff.net.2"))?,
        })
    }

    fn self_attention(&self, x: &Array2<T>, hooks: &mut Hooks<'_, T>) -> Result<Array2<T>> {
        let (mut q, mut k, mut v) = self.attn1.project(x, None)?;
        let mut alpha = T::one();
        let site = AttentionSite {
            timestep: hooks.t,
            layer: &self.id,
        };
        if hooks.exposed.contains(&self.id) && hooks.control.wants(site) {
            let live = Qkv { q, k, v };
            let rep = hooks.control.on_attention(site, &live)?;
            Qkv { q, k, v } = live;
            if let Some(rep) = rep {
                let (h, n, d) = q.dim();
                if let Some(rq) = rep.q {
                    if rq.dim() != (h, n, d) {
                        return Err(Error::ShapeMismatch(format!(
                            "replacement Q {:?} at {} must match live {:?}",
                            rq.dim(),
                            self.id,
                            (h, n, d)
                        )));
                    }
                    q = rq;
                }
                if let Some(rk) = rep.k {
                    k = rk;
                }
                if let Some(rv) = rep.v {
                    v = rv;
                }
                alpha = rep.alpha;
            }
        }
        self.attn1.finish(&q, &k, &v, alpha)
    }

    fn forward(&self, x: Array2<T>, hooks: &mut Hooks<'_, T>) -> Result<Array2<T>> {
        let x = &x + &self.self_attention(&self.norm1.forward(&x), hooks)?;
        let (q, k, v) = self.attn2.project(&self.norm2.forward(&x), Some(hooks.context))?;
        let x = &x + &self.attn2.finish(&q, &k, &v, T::one())?;
        let hidden = self.ff_in.forward(&self.norm3.forward(&x))?;
        let half = hidden.ncols() / 2;
        let gated = Array2::from_shape_fn((hidden.nrows(), half), |(i, j)| hidden[[i, j]] * gelu(hidden[[i, half + j]]));
        Ok(&x + &self.ff_out.forward(&gated)?)
    }
}

impl<T: Scalar> Transformer<T> {
    fn load(w: &Weights<T>, prefix: &str, groups: usize, heads: usize) -> Result<Self> {
        let blocks = w
            .indices(&format!("{prefix}.transformer_blocks."))
            .into_iter()
            .map(|i| TransformerBlock::load(w, &format!("{prefix}.transformer_blocks.{i}"), heads))
            .collect::<Result<Vec<_>>>()?;
        if blocks.is_empty() {
            return Err(Error::Checkpoint(format!("{prefix} has no transformer blocks")));
        }
        Ok(Self {
            norm: GroupNorm::load(w, &format!("{prefix}.norm"), groups, EPS_TRANSFORMER)?,
            proj_in: Linear::load(w, &format!("{prefix}.proj_in"))?,
            blocks,
            proj_out: Linear::load(w, &format!("{prefix}.proj_out"))?,
        })
    }

    fn forward(&self, x: &Array3<T>, hooks: &mut Hooks<'_, T>) -> Result<Array3<T>> {
        let (_, h, w) = x.dim();
        let mut tokens = self.proj_in.forward(&to_tokens(&self.norm.forward(x)?))?;
        for b in &self.blocks {
            tokens = b.forward(tokens, hooks)?;
        }
        Ok(x + &from_tokens(&self.proj_out.forward(&tokens)?, h, w))
    }
}

struct Stage<T> {
    resnets: Vec<ResnetBlock<T>>,
    attentions: Vec<Transformer<T>>,
    resample: Option<Conv<T>>,
}

impl<T: Scalar> Stage<T> {
    fn load(w: &Weights<T>, prefix: &str, groups: usize, heads: usize, resample: Option<(&str, usize)>) -> Result<Self> {
        let resnets = w
            .indices(&format!("{prefix}.resnets."))
            .into_iter()
            .map(|j| ResnetBlock::load(w, &format!("{prefix}.resnets.{j}"), groups, EPS_RESNET))
            .collect::<Result<Vec<_>>>()?;
        let attentions = w
            .indices(&format!("{prefix}.attentions."))
            .into_iter()
            .map(|j| Transformer::load(w, &format!("{prefix}.attentions.{j}"), groups, heads))
            .collect::<Result<Vec<_>>>()?;
        // Mid blocks interleave: resnet, attention, resnet.
        let paired = attentions.is_empty() || attentions.len() == resnets.len();
        let mid = resample.is_none() && attentions.len() + 1 == resnets.len();
        if resnets.is_empty() || !(paired || mid) {
            return Err(Error::Checkpoint(format!(
                "{prefix}: {} resnets with {} attentions",
                resnets.len(),
                attentions.len()
            )));
        }
        let resample = match resample {
            Some((kind, stride)) if w.contains(&format!("{prefix}.{kind}.0.conv.weight")) => {
                Some(Conv::load(w, &format!("{prefix}.{kind}.0.conv"), stride, [1; 4])?)
            }
            _ => None,
        };
        Ok(Self {
            resnets,
            attentions,
            resample,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &LayerId> {
        self.attentions.iter().flat_map(|a| a.blocks.iter().map(|b| &b.id))
    }
}

pub struct UNet<T> {
    conv_in: Conv<T>,
    time1: Linear<T>,
    time2: Linear<T>,
    down: Vec<Stage<T>>,
    mid: Stage<T>,
    up: Vec<Stage<T>>,
    norm_out: GroupNorm<T>,
    conv_out: Conv<T>,
}

/// Sinusoidal features with cosines first and no frequency shift.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let arg = t as f64 * (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::of(arg.cos());
        out[half + i] = T::of(arg.sin());
    }
    out
}

impl<T: Scalar> UNet<T> {
    pub fn load(w: &Weights<T>, groups: usize, heads: usize) -> Result<Self> {
        let stages = |name: &str, resample: Option<(&str, usize)>| {
            w.indices(&format!("unet.{name}."))
                .into_iter()
                .map(|i| Stage::load(w, &format!("unet.{name}.{i}"), groups, heads, resample))
                .collect::<Result<Vec<_>>>()
        };
        let down = stages("down_blocks", Some(("downsamplers", 2)))?;
        let up = stages("up_blocks", Some(("upsamplers", 1)))?;
        if down.is_empty() || up.len() != down.len() {
            return Err(Error::Checkpoint(format!(
                "UNet has {} down and {} up blocks",
                down.len(),
                up.len()
            )));
        }
        Ok(Self {
            conv_in: Conv::same(w, "unet.conv_in")?,
            time1: Linear::load(w, "unet.time_embedding.linear_1")?,
            time2: Linear::load(w, "unet.time_embedding.linear_2")?,
            down,
            mid: Stage::load(w, "unet.mid_block", groups, heads, None)?,
            up,
            norm_out: GroupNorm::load(w, "unet.conv_norm_out", groups, EPS_RESNET)?,
            conv_out: Conv::same(w, "unet.conv_out")?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv_in.in_channels()
    }

    /// Every self-attention sub-layer in forward order.
    pub fn all_layers(&self) -> Vec<LayerId> {
        self.down
            .iter()
            .chain(std::iter::once(&self.mid))
            .chain(&self.up)
            .flat_map(Stage::layers)
            .cloned()
            .collect()
    }

    /// Self-attention sub-layers of the up (decoder) path in forward order.
    pub fn decoder_layers(&self) -> Vec<LayerId> {
        self.up.iter().flat_map(Stage::layers).cloned().collect()
    }

    pub fn forward(&self, x: &Array3<T>, hooks: &mut Hooks<'_, T>) -> Result<Array3<T>> {
        let temb = {
            let f = timestep_embedding::<T>(hooks.t, self.time1.in_features()).insert_axis(Axis(0));
            let mut e = self.time1.forward(&f)?;
            e.mapv_inplace(|v| v / (T::one() + (-v).exp()));
            self.time2.forward(&e)?.row(0).to_owned()
        };
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for stage in &self.down {
            for (j, r) in stage.resnets.iter().enumerate() {
                h = r.forward(&h, Some(&temb))?;
                if let Some(a) = stage.attentions.get(j) {
                    h = a.forward(&h, hooks)?;
                }
                skips.push(h.clone());
            }
            if let Some(c) = &stage.resample {
                h = c.forward(&h)?;
                skips.push(h.clone());
            }
        }

        h = self.mid.resnets[0].forward(&h, Some(&temb))?;
        for (a, r) in self.mid.attentions.iter().zip(&self.mid.resnets[1..]) {
            h = a.forward(&h, hooks)?;
            h = r.forward(&h, Some(&temb))?;
        }

        for stage in &self.up {
            for (j, r) in stage.resnets.iter().enumerate() {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::Checkpoint("up path consumes more skips than the down path made".into()))?;
                h = r.forward(&concat_channels(&h, &skip)?, Some(&temb))?;
                if let Some(a) = stage.attentions.get(j) {
                    h = a.forward(&h, hooks)?;
                }
            }
            if let Some(c) = &stage.resample {
                h = c.forward(&upsample_nearest2(&h))?;
            }
        }
        if !skips.is_empty() {
            return Err(Error::Checkpoint(format!("{} skip connections left unused", skips.len())));
        }
        let mut h = self.norm_out.forward(&h)?;
        silu(&mut h);
        self.conv_out.forward(&h)
    }
}
