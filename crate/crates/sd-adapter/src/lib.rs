//! Pretrained latent diffusion backbone (Stable Diffusion v1.x layout).
//!
//! The checkpoint is one safetensors file holding the UNet under `unet.`,
//! the autoencoder under `vae.` (diffusers parameter names after those
//! prefixes) and the text-encoder output for the empty prompt as
//! `text.empty_context` with shape `(tokens, dim)`. Conditioning is always
//! that empty prompt, so no text encoder is needed at run time. String
//! metadata must carry `format = cellstyle-sd` and `version = 1`; optional
//! keys `heads`, `norm_groups` and `scaling_factor` default to the v1.5
//! values. Nothing is downloaded; fetch and convert the weights beforehand.
//!
//! Exposed attention layers are the `attn1` sub-layers of the up path in
//! forward order, named by parameter prefix, e.g.
//! `unet.up_blocks.1.attentions.0.transformer_blocks.0.attn1`. v1.5 has
//! nine; the last six are those of `up_blocks.2` and `up_blocks.3`.
//! [`AdapterConfig::attention_layers`] replaces the enumeration.

mod nn;
mod unet;
mod vae;
mod weights;

pub mod synthetic;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use cellstyle_core::attention::{AttentionControl, LayerId};
use cellstyle_core::diffusion::{Backbone, NoiseSchedule, ScheduleConfig, ScheduleKind, State};
use cellstyle_core::imaging::Image;
use cellstyle_core::{Error, Result, Scalar};
use ndarray::{Array2, Array3, Ix2};

pub use weights::{save_weights, Weights, FORMAT, FORMAT_VERSION};

use unet::{Hooks, UNet};
use vae::Autoencoder;

/// Fewest exposed self-attention layers the pipeline accepts.
pub const MIN_ATTENTION_LAYERS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Device {
    #[default]
    Cpu,
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu" => Ok(Device::Cpu),
            other => Err(Error::InvalidArgument(format!("device {other:?} is not supported; use cpu"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// Empty-prompt embedding at every step.
    #[default]
    Unconditional,
}

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub checkpoint: PathBuf,
    pub device: Device,
    /// Latent side length; 64 gives 512-pixel images with v1.5.
    pub latent_size: usize,
    pub conditioning: Conditioning,
    pub schedule: ScheduleConfig,
    /// Replaces the default decoder enumeration; every entry must name an
    /// `attn1` sub-layer of the checkpoint.
    pub attention_layers: Option<Vec<LayerId>>,
    /// Declared bound on the codec round trip error.
    pub reconstruction_tolerance: f64,
}

impl AdapterConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            device: Device::Cpu,
            latent_size: 64,
            conditioning: Conditioning::Unconditional,
            schedule: ScheduleConfig {
                train_timesteps: 1000,
                beta_start: 0.00085,
                beta_end: 0.012,
                kind: ScheduleKind::ScaledLinear,
                ddim_steps: 50,
            },
            attention_layers: None,
            reconstruction_tolerance: 0.1,
        }
    }
}

pub struct SdBackbone<T: Scalar> {
    unet: UNet<T>,
    vae: Autoencoder<T>,
    context: Array2<T>,
    schedule: NoiseSchedule<T>,
    layers: Vec<LayerId>,
    exposed: BTreeSet<LayerId>,
    latent_size: usize,
    tolerance: f64,
}

/// Loads the checkpoint named by `cfg`.
pub fn load_pretrained<T: Scalar>(cfg: &AdapterConfig) -> Result<SdBackbone<T>> {
    let w = Weights::<T>::load(&cfg.checkpoint)?;
    let groups = w.meta_or("norm_groups", 32usize)?;
    let heads = w.meta_or("heads", 8usize)?;
    let scaling = w.meta_or("scaling_factor", 0.18215f64)?;

    let unet = UNet::load(&w, groups, heads)?;
    let vae = Autoencoder::load(&w, groups, scaling)?;
    if unet.in_channels() != vae.latent_channels() {
        return Err(Error::Checkpoint(format!(
            "UNet takes {} channels, autoencoder latents have {}",
            unet.in_channels(),
            vae.latent_channels()
        )));
    }
    let context = w
        .get("text.empty_context")?
        .clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Checkpoint("text.empty_context must be (tokens, dim)".into()))?;

    let all = unet.all_layers();
    let layers = match &cfg.attention_layers {
        None => unet.decoder_layers(),
        Some(chosen) => {
            if let Some(bad) = chosen.iter().find(|l| !all.contains(l)) {
                return Err(Error::InvalidArgument(format!("{bad} is not a self-attention layer of the checkpoint")));
            }
            all.iter().filter(|l| chosen.contains(l)).cloned().collect()
        }
    };
    if layers.len() < MIN_ATTENTION_LAYERS {
        return Err(Error::Checkpoint(format!(
            "{} exposes {} self-attention layers, need at least {MIN_ATTENTION_LAYERS}",
            cfg.checkpoint.display(),
            layers.len()
        )));
    }
    if cfg.latent_size == 0 {
        return Err(Error::InvalidArgument("latent_size must be positive".into()));
    }
    log::info!(
        "loaded {} with {} exposed attention layers, {}px working size",
        cfg.checkpoint.display(),
        layers.len(),
        cfg.latent_size * vae.downsampling()
    );
    Ok(SdBackbone {
        unet,
        vae,
        context,
        schedule: cfg.schedule.build()?,
        exposed: layers.iter().cloned().collect(),
        layers,
        latent_size: cfg.latent_size,
        tolerance: cfg.reconstruction_tolerance,
    })
}

impl<T: Scalar> SdBackbone<T> {
    /// Every `attn1` sub-layer, down path first; candidates for
    /// [`AdapterConfig::attention_layers`].
    pub fn all_attention_layers(&self) -> Vec<LayerId> {
        self.unet.all_layers()
    }
}

impl<T: Scalar> Backbone<T> for SdBackbone<T> {
    fn name(&self) -> &str {
        "stable-diffusion"
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn state_shape(&self) -> (usize, usize, usize) {
        (self.vae.latent_channels(), self.latent_size, self.latent_size)
    }

    fn working_size(&self) -> (usize, usize) {
        let s = self.latent_size * self.vae.downsampling();
        (s, s)
    }

    fn encode(&self, image: &Image<T>) -> Result<State<T>> {
        if image.dims() != self.working_size() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} does not match working size {:?}",
                image.dims(),
                self.working_size()
            )));
        }
        let (h, w) = image.dims();
        let c = self.vae.image_channels();
        let px = image.pixels();
        let two = T::of(2.0);
        let x = if image.channels() == c {
            Array3::from_shape_fn((c, h, w), |(k, y, x)| px[[y, x, k]] * two - T::one())
        } else {
            let g = image.luminance();
            Array3::from_shape_fn((c, h, w), |(_, y, x)| g[[y, x]] * two - T::one())
        };
        self.vae.encode(&x)
    }

    fn decode(&self, state: &State<T>) -> Result<Image<T>> {
        self.check_state(state)?;
        let y = self.vae.decode(state)?;
        let half = T::of(0.5);
        let hwc = y.mapv(|v| (v + T::one()) * half).permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
        Image::from_unclamped(hwc)
    }

    fn attention_layers(&self) -> Vec<LayerId> {
        self.layers.clone()
    }

    fn predict_noise(&self, x: &State<T>, t: usize, control: &mut dyn AttentionControl<T>) -> Result<State<T>> {
        self.check_state(x)?;
        let mut hooks = Hooks {
            t,
            context: &self.context,
            exposed: &self.exposed,
            control,
        };
        self.unet.forward(x, &mut hooks)
    }

    fn reconstruction_tolerance(&self) -> f64 {
        self.tolerance
    }
}
