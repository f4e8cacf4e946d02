//! Small analytic backbones for contract tests and diagnostics.

use ndarray::{Array2, ArrayD, IxDyn};

use super::backbone::{pixel_decode, pixel_encode};
use super::{Backbone, NoiseSchedule, State, Trainable};
use crate::attention::{merge_heads, split_heads, AttentionControl, AttentionSite, LayerId, Qkv};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::imaging::Image;
use crate::scalar::Scalar;

/// `eps_hat = w x + b` with two scalar parameters and no attention.
#[derive(Debug, Clone)]
pub struct LinearDenoiser<T: Scalar> {
    params: ParamStore<T>,
    schedule: NoiseSchedule<T>,
    size: (usize, usize),
}

impl<T: Scalar> LinearDenoiser<T> {
    pub fn new(weight: T, bias: T, schedule: NoiseSchedule<T>, size: (usize, usize)) -> Self {
        let mut params = ParamStore::new();
        params.push("weight", ArrayD::from_elem(IxDyn(&[1]), weight));
        params.push("bias", ArrayD::from_elem(IxDyn(&[1]), bias));
        Self { params, schedule, size }
    }

    pub fn weight(&self) -> T {
        self.params.get(0)[[0]]
    }

    pub fn bias(&self) -> T {
        self.params.get(1)[[0]]
    }
}

impl<T: Scalar> Backbone<T> for LinearDenoiser<T> {
    fn name(&self) -> &str {
        "linear-denoiser"
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn state_shape(&self) -> (usize, usize, usize) {
        (1, self.size.0, self.size.1)
    }

    fn working_size(&self) -> (usize, usize) {
        self.size
    }

    fn encode(&self, image: &Image<T>) -> Result<State<T>> {
        pixel_encode(image, 1, self.size)
    }

    fn decode(&self, state: &State<T>) -> Result<Image<T>> {
        pixel_decode(state)
    }

    fn attention_layers(&self) -> Vec<LayerId> {
        Vec::new()
    }

    fn predict_noise(&self, x: &State<T>, _t: usize, _control: &mut dyn AttentionControl<T>) -> Result<State<T>> {
        self.check_state(x)?;
        let (w, b) = (self.weight(), self.bias());
        Ok(x.mapv(|v| w * v + b))
    }
}

impl<T: Scalar> Trainable<T> for LinearDenoiser<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, _t: usize) -> Result<NodeId> {
        let w = g.param(&self.params, 0);
        let b = g.param(&self.params, 1);
        let scaled = g.mul_scalar(x, w);
        Ok(g.add_scalar(scaled, b))
    }
}

/// Predicts zero noise, so inversion and sampling are pure rescaling, and
/// exposes attention layers whose keys are linear in the pixel values:
/// scaling an image by `c` scales every recorded key by exactly `c`.
///
/// Queries carry a fixed positional component so query-key scores vary
/// across tokens even for flat images.
#[derive(Debug, Clone)]
pub struct ProjectionStub<T: Scalar> {
    schedule: NoiseSchedule<T>,
    size: (usize, usize),
    layers: Vec<LayerId>,
    head_dim: usize,
}

impl<T: Scalar> ProjectionStub<T> {
    pub fn new(schedule: NoiseSchedule<T>, size: (usize, usize), n_layers: usize) -> Self {
        Self {
            schedule,
            size,
            layers: (0..n_layers).map(|i| LayerId::new(format!("stub.attn{i}"))).collect(),
            head_dim: 4,
        }
    }

    fn projections(&self, x: &State<T>, layer: usize) -> (Array2<T>, Array2<T>, Array2<T>) {
        let (h, w) = self.size;
        let n = h * w;
        let d = self.head_dim;
        let px: Vec<T> = x.iter().copied().collect();
        let gain = |j: usize| T::of(0.5 + 0.25 * ((j + layer) % 3) as f64);
        let q = Array2::from_shape_fn((n, d), |(i, j)| {
            let pos = T::of(((i * (j + 1) + layer) % 7) as f64 / 7.0 - 0.4);
            px[i] * gain(j) + pos
        });
        let k = Array2::from_shape_fn((n, d), |(i, j)| px[i] * gain(j + 1) * T::of(if j % 2 == 0 { 1.0 } else { -1.0 }));
        let v = Array2::from_shape_fn((n, d), |(i, j)| px[i] * gain(j + 2));
        (q, k, v)
    }
}

impl<T: Scalar> Backbone<T> for ProjectionStub<T> {
    fn name(&self) -> &str {
        "projection-stub"
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn state_shape(&self) -> (usize, usize, usize) {
        (1, self.size.0, self.size.1)
    }

    fn working_size(&self) -> (usize, usize) {
        self.size
    }

    fn encode(&self, image: &Image<T>) -> Result<State<T>> {
        pixel_encode(image, 1, self.size)
    }

    fn decode(&self, state: &State<T>) -> Result<Image<T>> {
        pixel_decode(state)
    }

    fn attention_layers(&self) -> Vec<LayerId> {
        self.layers.clone()
    }

    fn predict_noise(&self, x: &State<T>, t: usize, control: &mut dyn AttentionControl<T>) -> Result<State<T>> {
        self.check_state(x)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let site = AttentionSite { timestep: t, layer };
            if !control.wants(site) {
                continue;
            }
            let (q, k, v) = self.projections(x, li);
            let live = Qkv {
                q: split_heads(&q, 1),
                k: split_heads(&k, 1),
                v: split_heads(&v, 1),
            };
            if let Some(rep) = control.on_attention(site, &live)? {
                let q = rep.q.unwrap_or(live.q);
                let k = rep.k.unwrap_or(live.k);
                let v = rep.v.unwrap_or(live.v);
                let out = crate::attention::injected_attention(&q, &k, &v, rep.alpha)?;
                if merge_heads(&out).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("stub attention output at timestep {t}")));
                }
            }
        }
        Ok(State::zeros(x.raw_dim()))
    }
}
