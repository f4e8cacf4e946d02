//! The adaptive score-scaling ratio: how much sharper source-on-source
//! attention scores are than source-on-target ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{linalg::general_mat_mul, Array2, Array3, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, LayerId, RecordRoles, Role};
use crate::diffusion::{Backbone, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::inversion::{invert, InversionOptions};
use crate::scalar::Scalar;

/// Running population moments in f64.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn merge(&mut self, o: Moments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn std(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        let mean = self.sum / self.n;
        (self.sum_sq / self.n - mean * mean).max(0.0).sqrt()
    }
}

fn check_qk<T>(q: &Array3<T>, k: &Array3<T>) -> Result<()> {
    let (qh, _, qd) = q.dim();
    let (kh, _, kd) = k.dim();
    if qh != kh || qd != kd {
        return Err(Error::ShapeMismatch(format!("Q {:?} and K {:?} disagree on heads/dim", q.dim(), k.dim())));
    }
    if qd == 0 {
        return Err(Error::ShapeMismatch("head dimension is zero".into()));
    }
    Ok(())
}

fn scores<T: Scalar>(q: &Array3<T>, k: &Array3<T>) -> Vec<Array2<T>> {
    let (heads, nq, d) = q.dim();
    let nk = k.dim().1;
    let scale = T::one() / T::of(d as f64).sqrt();
    (0..heads)
        .map(|h| {
            let mut s = Array2::<T>::zeros((nq, nk));
            general_mat_mul(scale, &q.index_axis(Axis(0), h), &k.index_axis(Axis(0), h).t(), T::zero(), &mut s);
            s
        })
        .collect()
}

fn score_moments<T: Scalar>(q: &Array3<T>, k: &Array3<T>) -> Moments {
    let mut m = Moments::default();
    for s in scores(q, k) {
        for &v in &s {
            let v = v.as_f64();
            m.n += 1.0;
            m.sum += v;
            m.sum_sq += v * v;
        }
    }
    m
}

/// Population standard deviation over every entry of `Q Kᵀ / sqrt(d)`,
/// all heads together.
pub fn attention_score_std<T: Scalar>(q: &Array3<T>, k: &Array3<T>) -> Result<f64> {
    check_qk(q, k)?;
    let all: Vec<f64> = scores(q, k).iter().flat_map(|s| s.iter().map(|v| v.as_f64())).collect();
    if all.is_empty() {
        return Ok(0.0);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    Ok((all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub alpha: f64,
    pub n_pairs_sampled: usize,
    /// `(source index, target index)` of every sampled pair.
    pub pairs: Vec<(usize, usize)>,
    pub timesteps: Vec<usize>,
    /// Mean ratio at each entry of `timesteps`, over pairs and layers.
    pub per_timestep_ratios: Vec<f64>,
    pub layers_used: Vec<LayerId>,
    /// Mean ratio per layer; diagnostic only.
    pub per_layer_alpha: BTreeMap<LayerId, f64>,
    /// Ratio of standard deviations pooled over all layers; diagnostic only.
    pub pooled_alpha: Option<f64>,
    /// Ratios dropped because the cross-score spread was zero.
    pub degenerate_ratios: usize,
}

/// Sampling settings for [`compute_alpha`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphaSampling {
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for AlphaSampling {
    fn default() -> Self {
        Self { n_pairs: 8, seed: 0 }
    }
}

/// Draws `n` distinct positions below `max(n_src, n_tgt)` and maps each to
/// a source and a target index by wrapping. Equal-length lists are thus
/// paired index by index.
pub fn sample_alpha_pairs(n_src: usize, n_tgt: usize, sampling: AlphaSampling) -> Vec<(usize, usize)> {
    let pool = n_src.max(n_tgt);
    if n_src == 0 || n_tgt == 0 || sampling.n_pairs == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut picks = sample(&mut rng, pool, sampling.n_pairs.min(pool)).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|p| (p % n_src, p % n_tgt)).collect()
}

/// Estimates the score-scaling ratio from a few source/target pairs.
///
/// For every pair, DDIM step and layer the ratio is
/// `std(Q_src K_srcᵀ/√d) / std(Q_src K_tgtᵀ/√d)`. Ratios are averaged over
/// pairs and layers at each timestep, and alpha is the mean over timesteps.
/// Target images must already be size-matched.
pub fn compute_alpha<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    src_samples: &[Image<T>],
    tgt_samples: &[Image<T>],
    sched: &NoiseSchedule<T>,
    layers: &[LayerId],
    sampling: AlphaSampling,
) -> Result<AlphaEstimate> {
    if src_samples.is_empty() || tgt_samples.is_empty() {
        return Err(Error::InvalidArgument("alpha needs at least one source and one target sample".into()));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument("alpha needs at least one attention layer".into()));
    }
    if sampling.n_pairs == 0 {
        return Err(Error::InvalidArgument("alpha needs at least one sampled pair".into()));
    }
    let pairs = sample_alpha_pairs(src_samples.len(), tgt_samples.len(), sampling);
    let layer_set: BTreeSet<LayerId> = layers.iter().cloned().collect();

    let mut src_caches: HashMap<usize, AttentionCache<T>> = HashMap::new();
    let mut tgt_caches: HashMap<usize, AttentionCache<T>> = HashMap::new();
    for &(i, j) in &pairs {
        if !src_caches.contains_key(&i) {
            let opts = InversionOptions {
                record: RecordRoles::QUERIES_KEYS,
                layers: Some(&layer_set),
                keep_trajectory: false,
            };
            src_caches.insert(i, invert(backbone, &src_samples[i], sched, opts)?.cache);
        }
        if !tgt_caches.contains_key(&j) {
            let opts = InversionOptions {
                record: RecordRoles::KEYS_VALUES,
                layers: Some(&layer_set),
                keep_trajectory: false,
            };
            tgt_caches.insert(j, invert(backbone, &tgt_samples[j], sched, opts)?.cache);
        }
    }

    let timesteps = sched.ddim_steps().to_vec();
    let mut per_t_sum = vec![0.0; timesteps.len()];
    let mut per_t_n = vec![0usize; timesteps.len()];
    let mut per_layer: BTreeMap<LayerId, (f64, usize)> = BTreeMap::new();
    let mut pooled = (0.0, 0usize);
    let mut degenerate = 0usize;
    for &(i, j) in &pairs {
        let (sc, tc) = (&src_caches[&i], &tgt_caches[&j]);
        for (ti, &t) in timesteps.iter().enumerate() {
            let (mut pool_self, mut pool_cross) = (Moments::default(), Moments::default());
            for layer in layers {
                let q = sc.get(t, layer, Role::Query)?;
                let k_src = sc.get(t, layer, Role::Key)?;
                let k_tgt = tc.get(t, layer, Role::Key)?;
                check_qk(q, k_tgt)?;
                let m_self = score_moments(q, k_src);
                let m_cross = score_moments(q, k_tgt);
                pool_self.merge(m_self);
                pool_cross.merge(m_cross);
                let num = attention_score_std(q, k_src)?;
                let den = attention_score_std(q, k_tgt)?;
                if den == 0.0 || !(num / den).is_finite() {
                    degenerate += 1;
                    continue;
                }
                let ratio = num / den;
                per_t_sum[ti] += ratio;
                per_t_n[ti] += 1;
                let e = per_layer.entry(layer.clone()).or_insert((0.0, 0));
                e.0 += ratio;
                e.1 += 1;
            }
            let den = pool_cross.std();
            if den > 0.0 {
                pooled.0 += pool_self.std() / den;
                pooled.1 += 1;
            }
        }
    }
    let mut kept_t = Vec::new();
    let mut per_timestep_ratios = Vec::new();
    for (ti, &t) in timesteps.iter().enumerate() {
        if per_t_n[ti] > 0 {
            kept_t.push(t);
            per_timestep_ratios.push(per_t_sum[ti] / per_t_n[ti] as f64);
        }
    }
    if per_timestep_ratios.is_empty() {
        return Err(Error::AlphaUndefined(format!(
            "all {degenerate} ratios had zero cross-score spread"
        )));
    }
    let alpha = per_timestep_ratios.iter().sum::<f64>() / per_timestep_ratios.len() as f64;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::AlphaUndefined(format!("estimate {alpha} is not a positive number")));
    }
    Ok(AlphaEstimate {
        alpha,
        n_pairs_sampled: pairs.len(),
        pairs,
        timesteps: kept_t,
        per_timestep_ratios,
        layers_used: layers.to_vec(),
        per_layer_alpha: per_layer.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect(),
        pooled_alpha: (pooled.1 > 0).then(|| pooled.0 / pooled.1 as f64),
        degenerate_ratios: degenerate,
    })
}
