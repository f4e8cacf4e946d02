use ndarray::Zip;

use super::{Backbone, NoiseSchedule, State};
use crate::attention::{AttentionControl, NoControl};
use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

fn same_shape<T>(a: &State<T>, b: &State<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `sqrt(a_t) x0 + sqrt(1 - a_t) eps`.
pub fn add_noise<T: Scalar>(x0: &State<T>, eps: &State<T>, t: usize, sched: &NoiseSchedule<T>) -> Result<State<T>> {
    same_shape(x0, eps, "x0 and eps")?;
    let ab = sched.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Moves a state from signal level `ab_from` to `ab_to` along the
/// deterministic DDIM path defined by `eps`.
pub(crate) fn ddim_transfer<T: Scalar>(x: &State<T>, eps: &State<T>, ab_from: T, ab_to: T) -> State<T> {
    let (sa, sb) = (ab_from.sqrt(), (T::one() - ab_from).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (T::one() - ab_to).sqrt());
    Zip::from(x).and(eps).map_collect(|&xv, &e| {
        let x0 = (xv - sb * e) / sa;
        ta * x0 + tb * e
    })
}

/// One deterministic (eta = 0) DDIM update from `t` down to `t_prev`.
pub fn ddim_step<T: Scalar>(
    x_t: &State<T>,
    eps_hat: &State<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule<T>,
) -> Result<State<T>> {
    same_shape(x_t, eps_hat, "x_t and eps_hat")?;
    if t_prev > t {
        return Err(Error::Timestep(format!("ddim_step needs t_prev <= t, got {t_prev} > {t}")));
    }
    if t == t_prev {
        sched.alpha_bar_at(t)?;
        return Ok(x_t.clone());
    }
    Ok(ddim_transfer(x_t, eps_hat, sched.alpha_bar_at(t)?, sched.alpha_bar_at(t_prev)?))
}

pub(crate) fn ensure_finite<T: Scalar>(x: &State<T>, what: &str, t: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} at timestep {t}")));
    }
    Ok(())
}

/// Runs the DDIM update over the schedule's steps from `tau_S` down to 0.
///
/// The control, when given, sees every noise prediction; this is how
/// attention injection rides along.
pub fn ddim_sample<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    x_t: &State<T>,
    sched: &NoiseSchedule<T>,
    control: Option<&mut dyn AttentionControl<T>>,
) -> Result<State<T>> {
    backbone.check_state(x_t)?;
    let mut none = NoControl;
    let control: &mut dyn AttentionControl<T> = match control {
        Some(c) => c,
        None => &mut none,
    };
    let steps = sched.ddim_steps();
    let mut x = x_t.clone();
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let eps = backbone.predict_noise(&x, t, control)?;
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
        ensure_finite(&x, "sampling state", t_prev)?;
    }
    Ok(x)
}

/// `mean((eps - eps_theta(x_t, t))^2)` with `x_t = add_noise(x0, eps, t)`.
pub fn diffusion_loss<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    x0: &State<T>,
    eps: &State<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<T> {
    let x_t = add_noise(x0, eps, t, sched)?;
    let pred = backbone.predict_noise(&x_t, t, &mut NoControl)?;
    same_shape(&pred, eps, "prediction and eps")?;
    let sum = Zip::from(&pred).and(eps).fold(T::zero(), |acc, &p, &e| acc + (p - e) * (p - e));
    Ok(sum / cast::<T>(eps.len()))
}

/// Relative L2 distance `|a - b| / |b|`; 0 when `a == b`, even for `b = 0`.
pub fn relative_l2<T: Scalar>(a: &ndarray::ArrayView3<'_, T>, b: &ndarray::ArrayView3<'_, T>) -> f64 {
    let num: f64 = Zip::from(a).and(b).fold(0.0, |acc, &x, &y| {
        let d = (x - y).as_f64();
        acc + d * d
    });
    if num == 0.0 {
        return 0.0;
    }
    let den: f64 = b.iter().map(|v| v.as_f64() * v.as_f64()).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::stubs::LinearDenoiser;
    use crate::diffusion::{make_noise_schedule, ScheduleKind};
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched() -> NoiseSchedule<f64> {
        make_noise_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear, 50).unwrap()
    }

    #[test]
    fn add_noise_at_zero_is_clean() {
        let x0 = Array3::from_elem((1, 2, 2), 0.4);
        let eps = Array3::from_elem((1, 2, 2), 5.0);
        assert_eq!(add_noise(&x0, &eps, 0, &sched()).unwrap(), x0);
    }

    #[test]
    fn add_noise_mixes_by_alpha_bar() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.64], vec![1]).unwrap();
        let x = add_noise(&Array3::from_elem((1, 1, 1), 1.0), &Array3::from_elem((1, 1, 1), 2.0), 1, &s).unwrap();
        assert!((x[[0, 0, 0]] - (0.8f64 + 0.6 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Array3::<f64>::zeros((1, 2, 2));
        let b = Array3::<f64>::zeros((1, 2, 3));
        assert!(matches!(add_noise(&a, &b, 1, &sched()), Err(Error::ShapeMismatch(_))));
        assert!(matches!(ddim_step(&a, &b, 2, 1, &sched()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn step_rejects_increasing_time() {
        let a = Array3::<f64>::zeros((1, 1, 1));
        assert!(matches!(ddim_step(&a, &a, 1, 2, &sched()), Err(Error::Timestep(_))));
    }

    #[test]
    fn step_with_true_noise_recovers_clean_state() {
        let s = sched();
        let x0 = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| i as f64 * 0.2 - j as f64 * 0.1);
        let eps = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| ((i + 2 * j) as f64).cos());
        let xt = add_noise(&x0, &eps, 700, &s).unwrap();
        let back = ddim_step(&xt, &eps, 700, 0, &s).unwrap();
        assert!(relative_l2(&back.view(), &x0.view()) < 1e-12);
        let mid = ddim_step(&xt, &eps, 700, 300, &s).unwrap();
        assert!(relative_l2(&mid.view(), &add_noise(&x0, &eps, 300, &s).unwrap().view()) < 1e-12);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // With x0 = 0 and alpha_bar = 0.75, x_t = eps / 2.
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.75], vec![1]).unwrap();
        let model = LinearDenoiser::new(2.0, 0.0, s.clone(), (2, 2));
        let eps = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| i as f64 - j as f64 + 0.5);
        let loss = diffusion_loss(&model, &Array3::zeros((1, 2, 2)), &eps, 1, &s).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn zero_predictor_loss_is_unit_in_expectation() {
        let s = sched();
        let model = LinearDenoiser::new(0.0, 0.0, s.clone(), (16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Array3::from_elem((1, 16, 16), 0.3);
        let n = 64;
        let mean: f64 = (0..n)
            .map(|_| {
                let eps = Array3::from_shape_simple_fn((1, 16, 16), || StandardNormal.sample(&mut rng));
                diffusion_loss(&model, &x0, &eps, 500, &s).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        // 64 * 256 unit-variance squares: standard error ~ 0.011.
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn relative_l2_of_equal_states_is_zero() {
        let a = Array3::from_elem((1, 2, 2), 1.5);
        assert_eq!(relative_l2(&a.view(), &a.view()), 0.0);
        let b = a.mapv(|v| v * 1.1);
        assert!((relative_l2(&b.view(), &a.view()) - 0.1).abs() < 1e-12);
    }
}
