//! KL autoencoder between RGB images in `[-1, 1]` and latents.

use cellstyle_core::{Error, Result, Scalar};
use ndarray::{s, Array3};

use crate::nn::{from_tokens, silu, to_tokens, upsample_nearest2, Conv, GroupNorm, Linear, ResnetBlock};
use crate::weights::Weights;

const EPS: f64 = 1e-6;

/// Single-head spatial self-attention of the autoencoder mid blocks.
struct MidAttention<T> {
    norm: GroupNorm<T>,
    q: Linear<T>,
    k: Linear<T>,
    v: Linear<T>,
    out: Linear<T>,
}

impl<T: Scalar> MidAttention<T> {
    fn load(w: &Weights<T>, prefix: &str, groups: usize) -> Result<Self> {
        // Older snapshots name the projections query/key/value/proj_attn.
        let legacy = !w.contains(&format!("{prefix}.to_q.weight"));
        let names = if legacy {
            ["query", "key", "value", "proj_attn"]
        } else {
            ["to_q", "to_k", "to_v", "to_out.0"]
        };
        let lin = |n: &str| Linear::load(w, &format!("{prefix}.{n}"));
        Ok(Self {
            norm: GroupNorm::load(w, &format!("{prefix}.group_norm"), groups, EPS)?,
            q: lin(names[0])?,
            k: lin(names[1])?,
            v: lin(names[2])?,
            out: lin(names[3])?,
        })
    }

    fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let (_, h, w) = x.dim();
        let tokens = to_tokens(&self.norm.forward(x)?);
        let one = |m: ndarray::Array2<T>| m.insert_axis(ndarray::Axis(0));
        let (q, k, v) = (
            one(self.q.forward(&tokens)?),
            one(self.k.forward(&tokens)?),
            one(self.v.forward(&tokens)?),
        );
        let a = cellstyle_core::attention::injected_attention(&q, &k, &v, T::one())?;
        let o = self.out.forward(&a.index_axis_move(ndarray::Axis(0), 0))?;
        Ok(x + &from_tokens(&o, h, w))
    }
}

struct Mid<T> {
    first: ResnetBlock<T>,
    attn: MidAttention<T>,
    second: ResnetBlock<T>,
}

impl<T: Scalar> Mid<T> {
    fn load(w: &Weights<T>, prefix: &str, groups: usize) -> Result<Self> {
        Ok(Self {
            first: ResnetBlock::load(w, &format!("{prefix}.resnets.0"), groups, EPS)?,
            attn: MidAttention::load(w, &format!("{prefix}.attentions.0"), groups)?,
            second: ResnetBlock::load(w, &format!("{prefix}.resnets.1"), groups, EPS)?,
        })
    }

    fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let h = self.first.forward(x, None)?;
        let h = self.attn.forward(&h)?;
        self.second.forward(&h, None)
    }
}

struct Level<T> {
    resnets: Vec<ResnetBlock<T>>,
    resample: Option<Conv<T>>,
}

fn levels<T: Scalar>(w: &Weights<T>, prefix: &str, groups: usize, down: bool) -> Result<Vec<Level<T>>> {
    w.indices(&format!("{prefix}."))
        .into_iter()
        .map(|i| {
            let p = format!("{prefix}.{i}");
            let resnets = w
                .indices(&format!("{p}.resnets."))
                .into_iter()
                .map(|j| ResnetBlock::load(w, &format!("{p}.resnets.{j}"), groups, EPS))
                .collect::<Result<Vec<_>>>()?;
            let resample = if down && w.contains(&format!("{p}.downsamplers.0.conv.weight")) {
                // Asymmetric padding: one row/column after, none before.
                Some(Conv::load(w, &format!("{p}.downsamplers.0.conv"), 2, [0, 1, 0, 1])?)
            } else if !down && w.contains(&format!("{p}.upsamplers.0.conv.weight")) {
                Some(Conv::same(w, &format!("{p}.upsamplers.0.conv"))?)
            } else {
                None
            };
            Ok(Level { resnets, resample })
        })
        .collect()
}

pub struct Autoencoder<T> {
    enc_in: Conv<T>,
    enc_levels: Vec<Level<T>>,
    enc_mid: Mid<T>,
    enc_norm: GroupNorm<T>,
    enc_out: Conv<T>,
    quant: Option<Conv<T>>,
    post_quant: Option<Conv<T>>,
    dec_in: Conv<T>,
    dec_mid: Mid<T>,
    dec_levels: Vec<Level<T>>,
    dec_norm: GroupNorm<T>,
    dec_out: Conv<T>,
    scaling: f64,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn load(w: &Weights<T>, groups: usize, scaling: f64) -> Result<Self> {
        let optional = |name: &str| -> Result<Option<Conv<T>>> {
            if w.contains(&format!("{name}.weight")) {
                Conv::same(w, name).map(Some)
            } else {
                Ok(None)
            }
        };
        let vae = Self {
            enc_in: Conv::same(w, "vae.encoder.conv_in")?,
            enc_levels: levels(w, "vae.encoder.down_blocks", groups, true)?,
            enc_mid: Mid::load(w, "vae.encoder.mid_block", groups)?,
            enc_norm: GroupNorm::load(w, "vae.encoder.conv_norm_out", groups, EPS)?,
            enc_out: Conv::same(w, "vae.encoder.conv_out")?,
            quant: optional("vae.quant_conv")?,
            post_quant: optional("vae.post_quant_conv")?,
            dec_in: Conv::same(w, "vae.decoder.conv_in")?,
            dec_mid: Mid::load(w, "vae.decoder.mid_block", groups)?,
            dec_levels: levels(w, "vae.decoder.up_blocks", groups, false)?,
            dec_norm: GroupNorm::load(w, "vae.decoder.conv_norm_out", groups, EPS)?,
            dec_out: Conv::same(w, "vae.decoder.conv_out")?,
            scaling,
        };
        if vae.enc_out.out_channels() != 2 * vae.latent_channels() {
            return Err(Error::Checkpoint(format!(
                "encoder emits {} channels for a {}-channel latent",
                vae.enc_out.out_channels(),
                vae.latent_channels()
            )));
        }
        if vae.downsampling() != vae.upsampling() {
            return Err(Error::Checkpoint(format!(
                "encoder downsamples by {} but decoder upsamples by {}",
                vae.downsampling(),
                vae.upsampling()
            )));
        }
        Ok(vae)
    }

    pub fn latent_channels(&self) -> usize {
        match &self.post_quant {
            Some(c) => c.in_channels(),
            None => self.dec_in.in_channels(),
        }
    }

    pub fn image_channels(&self) -> usize {
        self.enc_in.in_channels()
    }

    /// Pixel size of one latent cell.
    pub fn downsampling(&self) -> usize {
        1 << self.enc_levels.iter().filter(|l| l.resample.is_some()).count()
    }

    fn upsampling(&self) -> usize {
        1 << self.dec_levels.iter().filter(|l| l.resample.is_some()).count()
    }

    /// `(C, H, W)` in `[-1, 1]` to the scaled posterior mean.
    pub fn encode(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let mut h = self.enc_in.forward(x)?;
        for level in &self.enc_levels {
            for r in &level.resnets {
                h = r.forward(&h, None)?;
            }
            if let Some(c) = &level.resample {
                h = c.forward(&h)?;
            }
        }
        h = self.enc_mid.forward(&h)?;
        h = self.enc_norm.forward(&h)?;
        silu(&mut h);
        let mut moments = self.enc_out.forward(&h)?;
        if let Some(q) = &self.quant {
            moments = q.forward(&moments)?;
        }
        let latent = moments.dim().0 / 2;
        Ok(moments.slice(s![..latent, .., ..]).mapv(|v| v * T::of(self.scaling)))
    }

    /// Scaled latent to `(C, H, W)` roughly in `[-1, 1]`.
    pub fn decode(&self, z: &Array3<T>) -> Result<Array3<T>> {
        let mut h = z.mapv(|v| v / T::of(self.scaling));
        if let Some(c) = &self.post_quant {
            h = c.forward(&h)?;
        }
        h = self.dec_in.forward(&h)?;
        h = self.dec_mid.forward(&h)?;
        for level in &self.dec_levels {
            for r in &level.resnets {
                h = r.forward(&h, None)?;
            }
            if let Some(c) = &level.resample {
                h = c.forward(&upsample_nearest2(&h))?;
            }
        }
        h = self.dec_norm.forward(&h)?;
        silu(&mut h);
        self.dec_out.forward(&h)
    }
}
