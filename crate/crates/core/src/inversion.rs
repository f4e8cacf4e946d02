//! Deterministic DDIM inversion from a clean state up to the last DDIM step.

use std::collections::BTreeSet;

use crate::attention::{AttentionCache, AttentionControl, InjectionPlan, Injector, LayerId, NoControl, RecordRoles, Recorder};
use crate::diffusion::{ddim_sample, ddim_transfer, ensure_finite, Backbone, NoiseSchedule, State};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scalar::Scalar;

/// The algebraic inverse of `ddim_step`: moves `x_t` up to `t_next`.
pub fn ddim_invert_step<T: Scalar>(
    x_t: &State<T>,
    eps_hat: &State<T>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule<T>,
) -> Result<State<T>> {
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::ShapeMismatch(format!(
            "x_t and eps_hat: {:?} vs {:?}",
            x_t.dim(),
            eps_hat.dim()
        )));
    }
    if t_next < t {
        return Err(Error::Timestep(format!("ddim_invert_step needs t_next >= t, got {t_next} < {t}")));
    }
    if t == t_next {
        sched.alpha_bar_at(t)?;
        return Ok(x_t.clone());
    }
    Ok(ddim_transfer(x_t, eps_hat, sched.alpha_bar_at(t)?, sched.alpha_bar_at(t_next)?))
}

#[derive(Debug, Clone)]
pub struct InversionResult<T> {
    pub z_t: State<T>,
    /// States after each of the S steps, paired with their timestep.
    pub trajectory: Option<Vec<(usize, State<T>)>>,
    pub cache: AttentionCache<T>,
}

/// What to keep from an inversion.
#[derive(Debug, Clone, Copy, Default)]
pub struct InversionOptions<'a> {
    pub record: RecordRoles,
    /// Restricts recording to these layers; all layers when `None`.
    pub layers: Option<&'a BTreeSet<LayerId>>,
    pub keep_trajectory: bool,
}

/// Inverts an already-encoded state.
///
/// The step from `tau_i` to `tau_{i+1}` uses the noise predicted at the
/// current state and timestep, with the first step (from the clean state)
/// predicted at `tau_1`. Attention is recorded from the prediction made at
/// each DDIM timestep `tau` on the state reached at `tau`, so a recording
/// run spends one extra prediction on the final state. Generation at `tau`
/// therefore reads tensors computed from the inverted state at `tau`.
pub fn invert_state<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    x0: &State<T>,
    sched: &NoiseSchedule<T>,
    opts: InversionOptions<'_>,
) -> Result<InversionResult<T>> {
    backbone.check_state(x0)?;
    ensure_finite(x0, "encoded state", 0)?;
    let steps = sched.ddim_steps();
    let mut cache = AttentionCache::new();
    let mut trajectory = opts.keep_trajectory.then(|| Vec::with_capacity(steps.len()));
    let mut x = x0.clone();
    let mut t = 0usize;
    for (i, &t_next) in steps.iter().enumerate() {
        let eps = if i == 0 {
            backbone.predict_noise(&x, t_next, &mut NoControl)?
        } else {
            let mut rec = Recorder {
                roles: opts.record,
                layers: opts.layers,
                cache: &mut cache,
            };
            backbone.predict_noise(&x, t, &mut rec)?
        };
        x = ddim_invert_step(&x, &eps, t, t_next, sched)?;
        ensure_finite(&x, "inversion state", t_next)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push((t_next, x.clone()));
        }
        t = t_next;
    }
    if opts.record.any() && t > 0 {
        let mut rec = Recorder {
            roles: opts.record,
            layers: opts.layers,
            cache: &mut cache,
        };
        backbone.predict_noise(&x, t, &mut rec)?;
    }
    Ok(InversionResult { z_t: x, trajectory, cache })
}

/// Encodes `image` and inverts it.
pub fn invert<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    image: &Image<T>,
    sched: &NoiseSchedule<T>,
    opts: InversionOptions<'_>,
) -> Result<InversionResult<T>> {
    let x0 = backbone.encode(image)?;
    invert_state(backbone, &x0, sched, opts)
}

/// Samples from `x_t` while the plan's layers attend to the cached target
/// keys and values.
pub fn run_with_injection<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    x_t: &State<T>,
    plan: &InjectionPlan<T>,
    sched: &NoiseSchedule<T>,
) -> Result<State<T>> {
    plan.validate(sched.ddim_steps())?;
    let known: BTreeSet<LayerId> = backbone.attention_layers().into_iter().collect();
    if let Some(l) = plan.layers.iter().find(|l| !known.contains(*l)) {
        return Err(Error::InvalidArgument(format!("backbone {} has no attention layer {l}", backbone.name())));
    }
    if plan.layers.is_empty() {
        return ddim_sample(backbone, x_t, sched, None);
    }
    let mut injector = Injector::new(plan);
    ddim_sample(backbone, x_t, sched, Some(&mut injector as &mut dyn AttentionControl<T>))
}
