use ndarray::{Array3, Axis};

use crate::attention::{AttentionControl, LayerId};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::imaging::Image;
use crate::scalar::Scalar;

/// Diffusion state tensor, `(C, H, W)`.
pub type State<T> = Array3<T>;

/// A noise-predicting denoiser plus the codec between images and states.
///
/// Implementations must be deterministic: the same `(x, t, control state)`
/// always yields the same prediction. A backbone is shared read-only across
/// jobs; all per-job mutable state lives in the [`AttentionControl`].
pub trait Backbone<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn schedule(&self) -> &NoiseSchedule<T>;

    /// `(C, H, W)` of the states this backbone consumes.
    fn state_shape(&self) -> (usize, usize, usize);

    /// Image size `encode` accepts.
    fn working_size(&self) -> (usize, usize);

    fn encode(&self, image: &Image<T>) -> Result<State<T>>;

    fn decode(&self, state: &State<T>) -> Result<Image<T>>;

    /// Self-attention sub-layers in forward-pass order.
    fn attention_layers(&self) -> Vec<LayerId>;

    fn predict_noise(&self, x: &State<T>, t: usize, control: &mut dyn AttentionControl<T>) -> Result<State<T>>;

    /// Declared bound on the relative L2 error of `decode(encode(x))`.
    fn reconstruction_tolerance(&self) -> f64 {
        0.0
    }

    fn check_state(&self, x: &State<T>) -> Result<()> {
        if x.dim() != self.state_shape() {
            return Err(Error::ShapeMismatch(format!(
                "state {:?} does not match backbone shape {:?}",
                x.dim(),
                self.state_shape()
            )));
        }
        Ok(())
    }
}

/// A backbone whose noise prediction can be differentiated.
pub trait Trainable<T: Scalar>: Backbone<T> {
    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Records the noise prediction for input node `x` at timestep `t`.
    fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, t: usize) -> Result<NodeId>;
}

/// Pixel-space codec shared by the in-crate backbones: identity on values,
/// RGB reduced to luminance when the backbone is single-channel.
pub(crate) fn pixel_encode<T: Scalar>(image: &Image<T>, channels: usize, size: (usize, usize)) -> Result<State<T>> {
    if image.dims() != size {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} does not match working size {size:?}",
            image.dims()
        )));
    }
    let planes = if channels == 1 {
        image.luminance().insert_axis(Axis(2))
    } else if image.channels() == channels {
        image.pixels().clone()
    } else {
        let g = image.luminance();
        ndarray::stack(Axis(2), &vec![g.view(); channels]).expect("stack planes")
    };
    Ok(planes.permuted_axes([2, 0, 1]).as_standard_layout().into_owned())
}

pub(crate) fn pixel_decode<T: Scalar>(state: &State<T>) -> Result<Image<T>> {
    let hwc = state.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
    Image::from_unclamped(hwc)
}
