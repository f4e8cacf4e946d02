use ndarray::{Array3, ArrayD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ddim::add_noise;
use super::toy::{ToyArch, ToyUNet};
use super::{NoiseSchedule, ScheduleConfig, State, Trainable};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamGrads, ParamStore};
use crate::imaging::Image;
use crate::scalar::Scalar;

/// Fewest images `train_toy_backbone` accepts.
pub const MIN_TRAINING_IMAGES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random flips and transposes of each sample.
    pub augment: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Decay of the weight average that becomes the final model; 0 keeps
    /// the raw weights.
    pub ema_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    pub arch: ToyArch,
    pub schedule: ScheduleConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            epochs: 150,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 0,
            augment: true,
            grad_clip: 1.0,
            ema_decay: 0.995,
            cosine_decay: true,
            arch: ToyArch::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size > 0
            && self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.grad_clip >= 0.0
            && (0.0..1.0).contains(&self.ema_decay);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "training settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loss trace of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros = || params.values().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.learning_rate), T::of(self.epsilon));
        for (idx, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            Zip::from(params.get_mut(idx)).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Loss and parameter gradients of one noised sample.
pub fn loss_and_grad<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &M,
    x0: &State<T>,
    eps: &State<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<(T, ParamGrads<T>)> {
    let x_t = add_noise(x0, eps, t, sched)?;
    let mut g = Graph::new(true);
    let x = g.input(x_t.into_dyn());
    let pred = model.forward_graph(&mut g, x, t)?;
    if g.value(pred).shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs noise {:?}",
            g.value(pred).shape(),
            eps.shape()
        )));
    }
    let target = g.input(eps.clone().into_dyn());
    let loss = g.mse(pred, target);
    let value = g.value(loss)[[]];
    Ok((value, g.backward(loss, model.params().len())))
}

fn accumulate<T: Scalar>(acc: &mut ParamGrads<T>, add: ParamGrads<T>) {
    if acc.grads.len() < add.grads.len() {
        acc.grads.resize(add.grads.len(), None);
    }
    for (slot, g) in acc.grads.iter_mut().zip(add.grads) {
        match (slot.as_mut(), g) {
            (Some(a), Some(g)) => *a += &g,
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

fn scale_and_clip<T: Scalar>(grads: &mut ParamGrads<T>, scale: f64, clip: f64) {
    let norm: f64 = grads
        .grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| (v.as_f64() * scale).powi(2))
        .sum::<f64>()
        .sqrt();
    let factor = if clip > 0.0 && norm > clip { scale * clip / norm } else { scale };
    let f = T::of(factor);
    for g in grads.grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * f);
    }
}

/// One of the eight flips/transposes of a square `(C, H, W)` state.
pub(crate) fn dihedral<T: Scalar>(x: &State<T>, which: u8) -> State<T> {
    let mut v = x.view();
    if which & 1 != 0 {
        v.invert_axis(Axis(1));
    }
    if which & 2 != 0 {
        v.invert_axis(Axis(2));
    }
    if which & 4 != 0 {
        v.swap_axes(1, 2);
    }
    v.as_standard_layout().into_owned()
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<T> {
    Array3::from_shape_simple_fn(shape, || T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Minimises the noise-prediction loss over `data` with Adam.
///
/// Samples within a batch are processed in a fixed order and their
/// gradients summed sequentially, so a fixed seed reproduces the run bit for
/// bit. `on_epoch` sees `(epoch, mean loss)` after every epoch; the losses
/// are those of the raw weights, while the returned model holds the weight
/// average when `ema_decay > 0`.
pub fn train<T: Scalar, M: Trainable<T> + ?Sized>(
    model: &mut M,
    data: &[State<T>],
    cfg: &ToyTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    for x in data {
        model.check_state(x)?;
    }
    let sched = model.schedule().clone();
    let t_max = sched.train_timesteps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut report = TrainReport::default();
    let square = data[0].dim().1 == data[0].dim().2;
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut ema: Option<Vec<ArrayD<T>>> = (cfg.ema_decay > 0.0).then(|| model.params().values().to_vec());
    let decay = T::of(cfg.ema_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = ParamGrads { grads: Vec::new() };
            for &idx in chunk {
                let x0 = if cfg.augment && square {
                    dihedral(&data[idx], rng.random_range(0..8u8))
                } else {
                    data[idx].clone()
                };
                let t = rng.random_range(1..=t_max);
                let eps = gaussian::<T>(&mut rng, x0.dim());
                let (loss, grads) = loss_and_grad(model, &x0, &eps, t, &sched)?;
                let loss = loss.as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {loss} at epoch {epoch}, batch {b}, sample {idx}, timestep {t} \
                         (learning rate {}; try lowering it)",
                        cfg.learning_rate
                    )));
                }
                total += loss;
                accumulate(&mut acc, grads);
            }
            scale_and_clip(&mut acc, 1.0 / chunk.len() as f64, cfg.grad_clip);
            if cfg.cosine_decay {
                let progress = report.steps as f64 / total_steps as f64;
                adam.learning_rate = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            adam.update(model.params_mut(), &acc);
            if let Some(ema) = ema.as_mut() {
                for (avg, p) in ema.iter_mut().zip(model.params().values()) {
                    Zip::from(avg).and(p).for_each(|a, &p| *a = decay * *a + (T::one() - decay) * p);
                }
            }
            report.steps += 1;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        on_epoch(epoch, mean);
        report.epoch_losses.push(mean);
    }
    if let Some(ema) = ema {
        for (idx, v) in ema.into_iter().enumerate() {
            *model.params_mut().get_mut(idx) = v;
        }
    }
    Ok(report)
}

/// Builds and trains a [`ToyUNet`] on `dataset`.
pub fn train_toy_backbone<T: Scalar>(
    dataset: &[Image<T>],
    cfg: &ToyTrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(ToyUNet<T>, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    if dataset.len() < MIN_TRAINING_IMAGES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_TRAINING_IMAGES} training images, got {}",
            dataset.len()
        )));
    }
    let arch = ToyArch {
        image_size: cfg.image_size,
        ..cfg.arch
    };
    let mut model = ToyUNet::new(arch, cfg.schedule, cfg.seed)?;
    let data = dataset
        .iter()
        .map(|im| crate::diffusion::Backbone::encode(&model, im))
        .collect::<Result<Vec<_>>>()?;
    let report = train(&mut model, &data, cfg, on_epoch)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::stubs::LinearDenoiser;
    use crate::diffusion::{diffusion_loss, make_noise_schedule, ScheduleKind};
    use ndarray::{Array2, IxDyn};

    fn sched() -> NoiseSchedule<f64> {
        make_noise_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear, 50).unwrap()
    }

    fn sample(shape: (usize, usize, usize), seed: u64) -> State<f64> {
        gaussian(&mut ChaCha8Rng::seed_from_u64(seed), shape)
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let s = sched();
        let x0 = sample((1, 6, 6), 1).mapv(|v| 0.3 * v);
        let eps = sample((1, 6, 6), 2);
        let model = LinearDenoiser::new(0.4, -0.2, s.clone(), (6, 6));
        let (loss, grads) = loss_and_grad(&model, &x0, &eps, 400, &s).unwrap();
        assert!((loss - diffusion_loss(&model, &x0, &eps, 400, &s).unwrap()).abs() < 1e-12);
        let h = 1e-5;
        for idx in 0..2 {
            let perturbed = |d: f64| {
                let (mut w, mut b) = (model.weight(), model.bias());
                if idx == 0 { w += d } else { b += d }
                diffusion_loss(&LinearDenoiser::new(w, b, s.clone(), (6, 6)), &x0, &eps, 400, &s).unwrap()
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let an = grads.grads[idx].as_ref().unwrap()[[0]];
            assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-4, "param {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn dihedral_maps_are_permutations() {
        let x = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f64);
        for w in 0..8 {
            let mut v: Vec<f64> = dihedral(&x, w).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            assert_eq!(v, (0..9).map(f64::from).collect::<Vec<_>>());
        }
        assert_eq!(dihedral(&x, 0), x);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = ParamGrads {
            grads: vec![Some(ArrayD::from_elem(IxDyn(&[4]), 3.0)), None],
        };
        scale_and_clip(&mut g, 1.0, 2.0);
        let norm: f64 = g.grads[0].as_ref().unwrap().iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.0).abs() < 1e-12);
    }

    fn tiny_config(seed: u64) -> ToyTrainConfig {
        ToyTrainConfig {
            image_size: 8,
            epochs: 2,
            batch_size: 4,
            seed,
            arch: ToyArch {
                outer_width: 4,
                inner_width: 8,
                heads: 2,
                decoder_attention: 2,
                time_dim: 8,
                ..ToyArch::default()
            },
            ..ToyTrainConfig::default()
        }
    }

    fn tiny_data() -> Vec<Image<f64>> {
        (0..MIN_TRAINING_IMAGES)
            .map(|k| Image::from_gray(Array2::from_shape_fn((8, 8), |(i, j)| ((i + j + k) % 5) as f64 / 4.0)).unwrap())
            .collect()
    }

    #[test]
    fn training_is_reproducible_for_a_seed() {
        let (a, ra) = train_toy_backbone(&tiny_data(), &tiny_config(5), |_, _| {}).unwrap();
        let (b, rb) = train_toy_backbone(&tiny_data(), &tiny_config(5), |_, _| {}).unwrap();
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(a.params().values(), b.params().values());
        let (c, _) = train_toy_backbone(&tiny_data(), &tiny_config(6), |_, _| {}).unwrap();
        assert_ne!(a.params().values(), c.params().values());
    }

    #[test]
    fn training_reports_every_epoch() {
        let mut seen = Vec::new();
        let (_, rep) = train_toy_backbone(&tiny_data(), &tiny_config(1), |e, l| seen.push((e, l))).unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(rep.epoch_losses.len(), 2);
        assert!(rep.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn dataset_size_is_checked() {
        let cfg = tiny_config(0);
        assert!(matches!(train_toy_backbone::<f64>(&[], &cfg, |_, _| {}), Err(Error::EmptyDataset(_))));
        let few = &tiny_data()[..3];
        assert!(matches!(train_toy_backbone(few, &cfg, |_, _| {}), Err(Error::InvalidArgument(_))));
    }
}
