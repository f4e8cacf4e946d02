//! Randomly initialised checkpoints with the v1.x layout at toy widths.
//!
//! Used to exercise the loader and the backbone contract without the
//! multi-gigabyte pretrained weights.

use std::path::Path;

use cellstyle_core::Result;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::weights::save_weights;

#[derive(Debug, Clone)]
pub struct TinySpec {
    pub unet_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub vae_channels: Vec<usize>,
    pub vae_layers_per_block: usize,
    pub latent_channels: usize,
    pub heads: usize,
    pub norm_groups: usize,
    pub context_tokens: usize,
    pub context_dim: usize,
    pub seed: u64,
}

impl Default for TinySpec {
    /// Smallest layout with six up-path self-attention layers.
    fn default() -> Self {
        Self {
            unet_channels: vec![8, 16, 16],
            layers_per_block: 2,
            vae_channels: vec![8, 8],
            vae_layers_per_block: 1,
            latent_channels: 4,
            heads: 2,
            norm_groups: 4,
            context_tokens: 4,
            context_dim: 8,
            seed: 0,
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    tensors: Vec<(String, ArrayD<f32>)>,
}

impl Builder {
    fn random(&mut self, name: String, shape: &[usize], bound: f32) {
        let n = shape.iter().product();
        let vals: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.tensors.push((name, ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape")));
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f32) {
        self.tensors.push((name, ArrayD::from_elem(IxDyn(shape), v)));
    }

    fn conv(&mut self, p: &str, cout: usize, cin: usize, k: usize) {
        let bound = 1.0 / ((cin * k * k) as f32).sqrt();
        self.random(format!("{p}.weight"), &[cout, cin, k, k], bound);
        self.random(format!("{p}.bias"), &[cout], bound);
    }

    fn linear(&mut self, p: &str, dout: usize, din: usize, bias: bool) {
        let bound = 1.0 / (din as f32).sqrt();
        self.random(format!("{p}.weight"), &[dout, din], bound);
        if bias {
            self.random(format!("{p}.bias"), &[dout], bound);
        }
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.constant(format!("{p}.weight"), &[c], 1.0);
        self.constant(format!("{p}.bias"), &[c], 0.0);
    }

    fn resnet(&mut self, p: &str, cin: usize, cout: usize, temb: Option<usize>) {
        self.norm(&format!("{p}.norm1"), cin);
        self.conv(&format!("{p}.conv1"), cout, cin, 3);
        if let Some(t) = temb {
            self.linear(&format!("{p}.time_emb_proj"), cout, t, true);
        }
        self.norm(&format!("{p}.norm2"), cout);
        self.conv(&format!("{p}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{p}.conv_shortcut"), cout, cin, 1);
        }
    }

    fn transformer(&mut self, p: &str, c: usize, ctx: usize) {
        self.norm(&format!("{p}.norm"), c);
        self.conv(&format!("{p}.proj_in"), c, c, 1);
        let b = format!("{p}.transformer_blocks.0");
        for (attn, kv) in [("attn1", c), ("attn2", ctx)] {
            self.linear(&format!("{b}.{attn}.to_q"), c, c, false);
            self.linear(&format!("{b}.{attn}.to_k"), c, kv, false);
            self.linear(&format!("{b}.{attn}.to_v"), c, kv, false);
            self.linear(&format!("{b}.{attn}.to_out.0"), c, c, true);
        }
        for n in ["norm1", "norm2", "norm3"] {
            self.norm(&format!("{b}.{n}"), c);
        }
        self.linear(&format!("{b}.ff.net.0.proj"), 8 * c, c, true);
        self.linear(&format!("{b}.ff.net.2"), c, 4 * c, true);
        self.conv(&format!("{p}.proj_out"), c, c, 1);
    }

    fn vae_mid(&mut self, p: &str, c: usize) {
        self.resnet(&format!("{p}.resnets.0"), c, c, None);
        let a = format!("{p}.attentions.0");
        self.norm(&format!("{a}.group_norm"), c);
        for n in ["to_q", "to_k", "to_v", "to_out.0"] {
            self.linear(&format!("{a}.{n}"), c, c, true);
        }
        self.resnet(&format!("{p}.resnets.1"), c, c, None);
    }

    fn unet(&mut self, s: &TinySpec) {
        let ch = &s.unet_channels;
        let (n, l) = (ch.len(), s.layers_per_block);
        let temb = 4 * ch[0];
        self.conv("unet.conv_in", ch[0], s.latent_channels, 3);
        self.linear("unet.time_embedding.linear_1", temb, ch[0], true);
        self.linear("unet.time_embedding.linear_2", temb, temb, true);
        for i in 0..n {
            let (cin, cout) = (if i == 0 { ch[0] } else { ch[i - 1] }, ch[i]);
            let p = format!("unet.down_blocks.{i}");
            for j in 0..l {
                self.resnet(&format!("{p}.resnets.{j}"), if j == 0 { cin } else { cout }, cout, Some(temb));
                if i + 1 < n {
                    self.transformer(&format!("{p}.attentions.{j}"), cout, s.context_dim);
                }
            }
            if i + 1 < n {
                self.conv(&format!("{p}.downsamplers.0.conv"), cout, cout, 3);
            }
        }
        let last = ch[n - 1];
        self.resnet("unet.mid_block.resnets.0", last, last, Some(temb));
        self.transformer("unet.mid_block.attentions.0", last, s.context_dim);
        self.resnet("unet.mid_block.resnets.1", last, last, Some(temb));
        let rev: Vec<usize> = ch.iter().rev().copied().collect();
        for i in 0..n {
            let out = rev[i];
            let prev = rev[i.saturating_sub(1)];
            let skip_in = rev[(i + 1).min(n - 1)];
            let p = format!("unet.up_blocks.{i}");
            for j in 0..=l {
                let skip = if j == l { skip_in } else { out };
                let res_in = if j == 0 { prev } else { out };
                self.resnet(&format!("{p}.resnets.{j}"), res_in + skip, out, Some(temb));
                if i > 0 {
                    self.transformer(&format!("{p}.attentions.{j}"), out, s.context_dim);
                }
            }
            if i + 1 < n {
                self.conv(&format!("{p}.upsamplers.0.conv"), out, out, 3);
            }
        }
        self.norm("unet.conv_norm_out", ch[0]);
        self.conv("unet.conv_out", s.latent_channels, ch[0], 3);
    }

    fn vae(&mut self, s: &TinySpec) {
        let ch = &s.vae_channels;
        let (m, l, z) = (ch.len(), s.vae_layers_per_block, s.latent_channels);
        self.conv("vae.encoder.conv_in", ch[0], 3, 3);
        for i in 0..m {
            let (cin, cout) = (if i == 0 { ch[0] } else { ch[i - 1] }, ch[i]);
            for j in 0..l {
                let p = format!("vae.encoder.down_blocks.{i}.resnets.{j}");
                self.resnet(&p, if j == 0 { cin } else { cout }, cout, None);
            }
            if i + 1 < m {
                self.conv(&format!("vae.encoder.down_blocks.{i}.downsamplers.0.conv"), cout, cout, 3);
            }
        }
        let last = ch[m - 1];
        self.vae_mid("vae.encoder.mid_block", last);
        self.norm("vae.encoder.conv_norm_out", last);
        self.conv("vae.encoder.conv_out", 2 * z, last, 3);
        self.conv("vae.quant_conv", 2 * z, 2 * z, 1);
        self.conv("vae.post_quant_conv", z, z, 1);
        self.conv("vae.decoder.conv_in", last, z, 3);
        self.vae_mid("vae.decoder.mid_block", last);
        let rev: Vec<usize> = ch.iter().rev().copied().collect();
        for i in 0..m {
            let (prev, out) = (rev[i.saturating_sub(1)], rev[i]);
            for j in 0..=l {
                let p = format!("vae.decoder.up_blocks.{i}.resnets.{j}");
                self.resnet(&p, if j == 0 { prev } else { out }, out, None);
            }
            if i + 1 < m {
                self.conv(&format!("vae.decoder.up_blocks.{i}.upsamplers.0.conv"), out, out, 3);
            }
        }
        self.norm("vae.decoder.conv_norm_out", ch[0]);
        self.conv("vae.decoder.conv_out", 3, ch[0], 3);
    }
}

/// Every tensor of a random checkpoint following `spec`.
pub fn tiny_tensors(spec: &TinySpec) -> Vec<(String, ArrayD<f32>)> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        tensors: Vec::new(),
    };
    b.unet(spec);
    b.vae(spec);
    b.random("text.empty_context".into(), &[spec.context_tokens, spec.context_dim], 1.0);
    b.tensors
}

/// Writes a random checkpoint following `spec` to `path`.
pub fn write_tiny_checkpoint(path: &Path, spec: &TinySpec) -> Result<()> {
    save_weights(
        path,
        &tiny_tensors(spec),
        &[
            ("heads", spec.heads.to_string()),
            ("norm_groups", spec.norm_groups.to_string()),
            ("scaling_factor", "0.18215".to_string()),
        ],
    )
}
