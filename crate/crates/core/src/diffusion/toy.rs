//! Small pixel-space UNet: two resolutions, residual blocks, and a stack of
//! multi-head self-attention layers in the decoder half.

use ndarray::{Array2, ArrayD, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{pixel_decode, pixel_encode};
use super::{Backbone, NoiseSchedule, ScheduleConfig, State, Trainable};
use crate::attention::{merge_heads, split_heads, AttentionControl, AttentionSite, LayerId, NoControl, Qkv};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::imaging::Image;
use crate::scalar::Scalar;

/// Layer widths and counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArch {
    pub image_size: usize,
    pub channels: usize,
    /// Width at full resolution.
    pub outer_width: usize,
    /// Width at half resolution, where attention runs.
    pub inner_width: usize,
    pub heads: usize,
    /// Self-attention layers in the decoder; a residual block precedes every pair.
    pub decoder_attention: usize,
    pub time_dim: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            outer_width: 16,
            inner_width: 32,
            heads: 2,
            decoder_attention: 6,
            time_dim: 64,
        }
    }
}

impl ToyArch {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 4 || self.image_size % 2 != 0 {
            return bad(format!("image size must be even and >= 4, got {}", self.image_size));
        }
        if self.channels == 0 || self.outer_width == 0 || self.inner_width == 0 || self.time_dim < 2 {
            return bad("widths must be positive".into());
        }
        if self.heads == 0 || self.inner_width % self.heads != 0 {
            return bad(format!("{} heads do not divide width {}", self.heads, self.inner_width));
        }
        if self.decoder_attention == 0 {
            return bad("need at least one decoder attention layer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    temb: Lin,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct AttnLayer {
    id: LayerId,
    q: Lin,
    k: Lin,
    v: Lin,
    out: Lin,
}

#[derive(Debug, Clone)]
enum DecoderItem {
    Res(ResBlock),
    Attn(AttnLayer),
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Lin,
    time2: Lin,
    conv_in: Conv,
    enc_outer: ResBlock,
    down: Conv,
    enc_inner: ResBlock,
    mid: ResBlock,
    decoder: Vec<DecoderItem>,
    up: Conv,
    dec_outer: [ResBlock; 2],
    conv_out: Conv,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let rng = &mut self.rng;
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(rng.random_range(-bound..=bound)));
        self.store.push(name, v)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.push(name, ArrayD::zeros(IxDyn(shape)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let shape = [cout, cin, k, k];
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = if zero {
            self.zeros(format!("{name}.weight"), &shape)
        } else {
            self.uniform(format!("{name}.weight"), &shape, bound)
        };
        let b = self.zeros(format!("{name}.bias"), &[cout]);
        Conv { w, b, stride, pad: k / 2 }
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Lin {
        let bound = 1.0 / (din as f64).sqrt();
        let w = if zero {
            self.zeros(format!("{name}.weight"), &[din, dout])
        } else {
            self.uniform(format!("{name}.weight"), &[din, dout], bound)
        };
        let b = self.zeros(format!("{name}.bias"), &[dout]);
        Lin { w, b }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, time_dim: usize) -> ResBlock {
        ResBlock {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            temb: self.lin(&format!("{name}.temb"), time_dim, cout, false),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }

    fn attn(&mut self, name: &str, width: usize) -> AttnLayer {
        AttnLayer {
            id: LayerId::new(name),
            q: self.lin(&format!("{name}.q"), width, width, false),
            k: self.lin(&format!("{name}.k"), width, width, false),
            v: self.lin(&format!("{name}.v"), width, width, false),
            out: self.lin(&format!("{name}.out"), width, width, true),
        }
    }
}

fn build_layout<T: Scalar>(arch: &ToyArch, store: &mut ParamStore<T>, seed: u64) -> Layout {
    let (c, o, i, td) = (arch.channels, arch.outer_width, arch.inner_width, arch.time_dim);
    let mut b = Builder {
        store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let time1 = b.lin("time.0", td / 2 * 2, td, false);
    let time2 = b.lin("time.1", td, td, false);
    let conv_in = b.conv("conv_in", c, o, 3, 1, false);
    let enc_outer = b.res("enc.outer", o, o, td);
    let down = b.conv("down", o, i, 3, 2, false);
    let enc_inner = b.res("enc.inner", i, i, td);
    let mid = b.res("mid", i, i, td);
    let mut decoder = Vec::new();
    for a in 0..arch.decoder_attention {
        if a % 2 == 0 {
            let cin = if a == 0 { 2 * i } else { i };
            decoder.push(DecoderItem::Res(b.res(&format!("dec.inner.res{}", a / 2), cin, i, td)));
        }
        decoder.push(DecoderItem::Attn(b.attn(&format!("dec.inner.attn{a}"), i)));
    }
    let up = b.conv("up", i, o, 3, 1, false);
    let dec_outer = [b.res("dec.outer.res0", 2 * o, o, td), b.res("dec.outer.res1", o, o, td)];
    let conv_out = b.conv("conv_out", o, c, 3, 1, true);
    Layout {
        time1,
        time2,
        conv_in,
        enc_outer,
        down,
        enc_inner,
        mid,
        decoder,
        up,
        dec_outer,
        conv_out,
    }
}

/// Sinusoidal timestep features, `(1, dim)`.
pub(crate) fn timestep_features<T: Scalar>(t: usize, dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, 2 * half));
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[[0, k]] = T::of(arg.sin());
        out[[0, half + k]] = T::of(arg.cos());
    }
    out
}

/// The trainable toy denoiser.
#[derive(Debug, Clone)]
pub struct ToyUNet<T: Scalar> {
    arch: ToyArch,
    schedule_config: ScheduleConfig,
    schedule: NoiseSchedule<T>,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> ToyUNet<T> {
    /// Freshly initialised weights drawn from `seed`.
    pub fn new(arch: ToyArch, schedule_config: ScheduleConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let schedule = schedule_config.build()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&arch, &mut params, seed);
        Ok(Self {
            arch,
            schedule_config,
            schedule,
            params,
            layout,
        })
    }

    /// Rebuilds the layout and installs stored values, checking names and shapes.
    pub fn from_parts(arch: ToyArch, schedule_config: ScheduleConfig, values: Vec<(String, ArrayD<T>)>) -> Result<Self> {
        let mut model = Self::new(arch, schedule_config, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (idx, (name, value)) in values.into_iter().enumerate() {
            let want = &model.params.names()[idx];
            if *want != name || model.params.get(idx).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {idx}: expected {want} {:?}, found {name} {:?}",
                    model.params.get(idx).shape(),
                    value.shape()
                )));
            }
            *model.params.get_mut(idx) = value;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ToyArch {
        &self.arch
    }

    pub fn schedule_config(&self) -> &ScheduleConfig {
        &self.schedule_config
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, c: Conv) -> NodeId {
        let w = g.param(&self.params, c.w);
        let b = g.param(&self.params, c.b);
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    fn lin(&self, g: &mut Graph<T>, x: NodeId, l: Lin) -> NodeId {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.linear(x, w, b)
    }

    fn res(&self, g: &mut Graph<T>, x: NodeId, temb: NodeId, r: &ResBlock) -> NodeId {
        let a = g.silu(x);
        let h = self.conv(g, a, r.conv1);
        let tb = self.lin(g, temb, r.temb);
        let h = g.add_channel(h, tb);
        let h = g.silu(h);
        let h = self.conv(g, h, r.conv2);
        let skip = match r.skip {
            Some(c) => self.conv(g, x, c),
            None => x,
        };
        g.add(skip, h)
    }

    fn attn(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        t: usize,
        layer: &AttnLayer,
        control: &mut dyn AttentionControl<T>,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let heads = self.arch.heads;
        let tokens = g.to_tokens(x);
        let mut q = self.lin(g, tokens, layer.q);
        let mut k = self.lin(g, tokens, layer.k);
        let mut v = self.lin(g, tokens, layer.v);
        let mut alpha = T::one();
        let site = AttentionSite {
            timestep: t,
            layer: &layer.id,
        };
        if control.wants(site) {
            let heads_of = |g: &Graph<T>, n: NodeId| {
                split_heads(&g.value(n).view().into_dimensionality::<Ix2>().expect("tokens").to_owned(), heads)
            };
            let live = Qkv {
                q: heads_of(g, q),
                k: heads_of(g, k),
                v: heads_of(g, v),
            };
            if let Some(rep) = control.on_attention(site, &live)? {
                let (lh, ln, ld) = live.q.dim();
                if let Some(rq) = rep.q {
                    if rq.dim() != (lh, ln, ld) {
                        return Err(Error::ShapeMismatch(format!(
                            "replacement Q {:?} at layer {} must match live {:?}",
                            rq.dim(),
                            layer.id,
                            live.q.dim()
                        )));
                    }
                    q = g.input(merge_heads(&rq).into_dyn());
                }
                for (slot, rep_t, role) in [(&mut k, rep.k, "K"), (&mut v, rep.v, "V")] {
                    if let Some(r) = rep_t {
                        if r.dim().0 != lh || r.dim().2 != ld {
                            return Err(Error::ShapeMismatch(format!(
                                "replacement {role} {:?} at layer {} has wrong heads/dim",
                                r.dim(),
                                layer.id
                            )));
                        }
                        *slot = g.input(merge_heads(&r).into_dyn());
                    }
                }
                if g.value(k).shape()[0] != g.value(v).shape()[0] {
                    return Err(Error::ShapeMismatch(format!("K/V token counts differ at layer {}", layer.id)));
                }
                alpha = rep.alpha;
            }
        }
        let a = g.attention(q, k, v, heads, alpha);
        let o = self.lin(g, a, layer.out);
        let o = g.from_tokens(o, h, w);
        Ok(g.add(x, o))
    }

    /// Records the full forward pass; `control` sees every attention layer.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        t: usize,
        control: &mut dyn AttentionControl<T>,
    ) -> Result<NodeId> {
        let l = &self.layout;
        let tf = g.input(timestep_features::<T>(t, self.arch.time_dim / 2 * 2).into_dyn());
        let te = self.lin(g, tf, l.time1);
        let te = g.silu(te);
        let te = self.lin(g, te, l.time2);
        let temb = g.silu(te);

        let h0 = self.conv(g, x, l.conv_in);
        let skip_outer = self.res(g, h0, temb, &l.enc_outer);
        let h = self.conv(g, skip_outer, l.down);
        let skip_inner = self.res(g, h, temb, &l.enc_inner);
        let mut h = self.res(g, skip_inner, temb, &l.mid);
        h = g.concat(h, skip_inner);
        for item in &l.decoder {
            h = match item {
                DecoderItem::Res(r) => self.res(g, h, temb, r),
                DecoderItem::Attn(a) => self.attn(g, h, t, a, control)?,
            };
        }
        let h = g.upsample2(h);
        let h = self.conv(g, h, l.up);
        let h = g.concat(h, skip_outer);
        let h = self.res(g, h, temb, &l.dec_outer[0]);
        let h = self.res(g, h, temb, &l.dec_outer[1]);
        let h = g.silu(h);
        Ok(self.conv(g, h, l.conv_out))
    }
}

impl<T: Scalar> Backbone<T> for ToyUNet<T> {
    fn name(&self) -> &str {
        "toy-unet"
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn state_shape(&self) -> (usize, usize, usize) {
        (self.arch.channels, self.arch.image_size, self.arch.image_size)
    }

    fn working_size(&self) -> (usize, usize) {
        (self.arch.image_size, self.arch.image_size)
    }

    fn encode(&self, image: &Image<T>) -> Result<State<T>> {
        pixel_encode(image, self.arch.channels, self.working_size())
    }

    fn decode(&self, state: &State<T>) -> Result<Image<T>> {
        pixel_decode(state)
    }

    fn attention_layers(&self) -> Vec<LayerId> {
        self.layout
            .decoder
            .iter()
            .filter_map(|d| match d {
                DecoderItem::Attn(a) => Some(a.id.clone()),
                DecoderItem::Res(_) => None,
            })
            .collect()
    }

    fn predict_noise(&self, x: &State<T>, t: usize, control: &mut dyn AttentionControl<T>) -> Result<State<T>> {
        self.check_state(x)?;
        let mut g = Graph::new(false);
        let xi = g.input(x.clone().into_dyn());
        let out = self.forward(&mut g, xi, t, control)?;
        let eps = g.value(out).clone().into_dimensionality::<Ix3>().expect("(C,H,W) output");
        Ok(eps)
    }
}

impl<T: Scalar> Trainable<T> for ToyUNet<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, t: usize) -> Result<NodeId> {
        self.forward(g, x, t, &mut NoControl)
    }
}
