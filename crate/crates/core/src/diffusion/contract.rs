//! Behaviour every [`Backbone`] must show, as a reusable check.
//!
//! Backends outside this crate run the same checks in their own tests.

use std::collections::BTreeSet;

use ndarray::Array3;

use super::{relative_l2, Backbone, State};
use crate::attention::{
    AttentionCache, AttentionControl, AttentionSite, InjectionPlan, Injector, LayerId, Qkv, RecordRoles, Recorder,
    Replacement,
};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scalar::Scalar;

struct SiteLog(Vec<(usize, LayerId)>);

impl<T: Scalar> AttentionControl<T> for SiteLog {
    fn on_attention(&mut self, site: AttentionSite<'_>, _live: &Qkv<T>) -> Result<Option<Replacement<T>>> {
        self.0.push((site.timestep, site.layer.clone()));
        Ok(None)
    }
}

fn fail(what: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("backbone contract: {}", what.into()))
}

/// Runs the contract on `image`, which must have the working size.
///
/// `injection_tol` bounds the relative change of a noise prediction when
/// every layer is fed its own recorded keys and values at alpha 1; exact
/// arithmetic would give 0.
pub fn check_backbone<T: Scalar, B: Backbone<T> + ?Sized>(backbone: &B, image: &Image<T>, injection_tol: f64) -> Result<()> {
    let x = backbone.encode(image)?;
    if x.dim() != backbone.state_shape() {
        return Err(fail(format!("encode gave {:?}, state_shape is {:?}", x.dim(), backbone.state_shape())));
    }
    let decoded = backbone.decode(&x)?;
    if decoded.dims() != backbone.working_size() {
        return Err(fail(format!("decode gave {:?}, working size is {:?}", decoded.dims(), backbone.working_size())));
    }
    let again = backbone.encode(&decoded)?;
    let rec = relative_l2(&again.view(), &x.view());
    if rec > backbone.reconstruction_tolerance() + 1e-6 {
        return Err(fail(format!(
            "codec round trip {rec:.3e} exceeds declared {:.3e}",
            backbone.reconstruction_tolerance()
        )));
    }

    let (c, h, w) = backbone.state_shape();
    if backbone.check_state(&Array3::zeros((c, h + 1, w))).is_ok() {
        return Err(fail("check_state accepted a wrong shape"));
    }

    let layers = backbone.attention_layers();
    let unique: BTreeSet<&LayerId> = layers.iter().collect();
    if layers.is_empty() || unique.len() != layers.len() {
        return Err(fail(format!("attention layers must be non-empty and unique: {layers:?}")));
    }

    let sched = backbone.schedule();
    let t = sched.ddim_steps()[sched.ddim_steps().len() / 2];
    let eps = backbone.predict_noise(&x, t, &mut crate::attention::NoControl)?;
    if eps.dim() != x.dim() || eps.iter().any(|v| !v.is_finite()) {
        return Err(fail("noise prediction must be finite with the state's shape"));
    }
    let eps2 = backbone.predict_noise(&x, t, &mut crate::attention::NoControl)?;
    if eps2 != eps {
        return Err(fail("noise prediction is not deterministic"));
    }

    let mut log = SiteLog(Vec::new());
    let observed = backbone.predict_noise(&x, t, &mut log)?;
    if observed != eps {
        return Err(fail("a passive control changed the prediction"));
    }
    let expected: Vec<(usize, LayerId)> = layers.iter().map(|l| (t, l.clone())).collect();
    if log.0 != expected {
        return Err(fail(format!("attention sites {:?} differ from declared order {:?}", log.0, expected)));
    }

    self_injection_change(backbone, &x, t, &layers)
        .and_then(|d| {
            if d <= injection_tol {
                Ok(())
            } else {
                Err(fail(format!("self-injection changed the prediction by {d:.3e}")))
            }
        })
}

fn self_injection_change<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    x: &State<T>,
    t: usize,
    layers: &[LayerId],
) -> Result<f64> {
    let mut cache = AttentionCache::new();
    let plain = backbone.predict_noise(
        x,
        t,
        &mut Recorder {
            roles: RecordRoles::KEYS_VALUES,
            layers: None,
            cache: &mut cache,
        },
    )?;
    let plan = InjectionPlan {
        layers: layers.to_vec(),
        alpha: T::one(),
        source_cache: AttentionCache::new(),
        target_cache: cache,
        replay_source_queries: false,
    };
    let injected = backbone.predict_noise(x, t, &mut Injector::new(&plan))?;
    Ok(relative_l2(&injected.view(), &plain.view()))
}
