//! Hooks into backbone self-attention: recording Q/K/V during inversion and
//! substituting cross-image keys/values with score scaling during generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::attend;
use crate::scalar::{cast, Scalar};

/// Identifier of one self-attention sub-layer, unique within a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub String);

impl LayerId {
    pub fn new(s: impl Into<String>) -> Self {
        LayerId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Query,
    Key,
    Value,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Query => 0,
            Role::Key => 1,
            Role::Value => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Role::Query),
            1 => Some(Role::Key),
            2 => Some(Role::Value),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "Q",
            Role::Key => "K",
            Role::Value => "V",
        })
    }
}

/// Which roles an inversion records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordRoles {
    pub query: bool,
    pub key: bool,
    pub value: bool,
}

impl RecordRoles {
    pub const NONE: Self = Self { query: false, key: false, value: false };
    pub const QUERIES: Self = Self { query: true, key: false, value: false };
    pub const KEYS_VALUES: Self = Self { query: false, key: true, value: true };
    /// What adaptive scaling needs from a source image.
    pub const QUERIES_KEYS: Self = Self { query: true, key: true, value: false };
    pub const ALL: Self = Self { query: true, key: true, value: true };

    pub fn any(self) -> bool {
        self.query || self.key || self.value
    }
}

/// Where an attention evaluation happens.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSite<'a> {
    pub timestep: usize,
    pub layer: &'a LayerId,
}

/// Live per-head tensors of one attention evaluation, each `(heads, tokens, head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<T> {
    pub q: Array3<T>,
    pub k: Array3<T>,
    pub v: Array3<T>,
}

/// What a control substitutes for one attention evaluation. `None` keeps the live tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Replacement<T> {
    pub q: Option<Array3<T>>,
    pub k: Option<Array3<T>>,
    pub v: Option<Array3<T>>,
    /// Multiplier on pre-softmax scores.
    pub alpha: T,
}

/// Per-job hook consulted by a backbone at every self-attention evaluation.
pub trait AttentionControl<T: Scalar> {
    /// Cheap pre-check; backbones skip building [`Qkv`] when this is false.
    fn wants(&self, _site: AttentionSite<'_>) -> bool {
        true
    }

    fn on_attention(&mut self, site: AttentionSite<'_>, live: &Qkv<T>) -> Result<Option<Replacement<T>>>;
}

/// Leaves every layer untouched.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoControl;

impl<T: Scalar> AttentionControl<T> for NoControl {
    fn wants(&self, _site: AttentionSite<'_>) -> bool {
        false
    }

    fn on_attention(&mut self, _site: AttentionSite<'_>, _live: &Qkv<T>) -> Result<Option<Replacement<T>>> {
        Ok(None)
    }
}

/// Cached attention tensors keyed by `(timestep, layer, role)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache<T> {
    entries: BTreeMap<(usize, LayerId, Role), Array3<T>>,
}

impl<T: Scalar> Default for AttentionCache<T> {
    fn default() -> Self {
        Self { entries: BTreeMap::new() }
    }
}

impl<T: Scalar> AttentionCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects non-finite tensors and K/V pairs whose `(heads, tokens)` disagree.
    pub fn insert(&mut self, timestep: usize, layer: LayerId, role: Role, tensor: Array3<T>) -> Result<()> {
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{role} tensor at timestep {timestep}, layer {layer}"
            )));
        }
        let partner = match role {
            Role::Key => Some(Role::Value),
            Role::Value => Some(Role::Key),
            Role::Query => None,
        };
        if let Some(other) = partner.and_then(|r| self.entries.get(&(timestep, layer.clone(), r))) {
            let (h, n, _) = tensor.dim();
            let (oh, on, _) = other.dim();
            if (h, n) != (oh, on) {
                return Err(Error::ShapeMismatch(format!(
                    "K/V at timestep {timestep}, layer {layer}: ({h}, {n}) vs ({oh}, {on})"
                )));
            }
        }
        self.entries.insert((timestep, layer, role), tensor);
        Ok(())
    }

    pub fn get(&self, timestep: usize, layer: &LayerId, role: Role) -> Result<&Array3<T>> {
        self.entries
            .get(&(timestep, layer.clone(), role))
            .ok_or_else(|| Error::CacheMiss {
                timestep,
                layer: layer.to_string(),
                role: role.to_string(),
            })
    }

    pub fn contains(&self, timestep: usize, layer: &LayerId, role: Role) -> bool {
        self.entries.contains_key(&(timestep, layer.clone(), role))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.entries.keys().filter(|(_, _, r)| *r == role).count()
    }

    pub fn timesteps(&self) -> BTreeSet<usize> {
        self.entries.keys().map(|(t, _, _)| *t).collect()
    }

    pub fn layers(&self) -> BTreeSet<LayerId> {
        self.entries.keys().map(|(_, l, _)| l.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, LayerId, Role), &Array3<T>)> {
        self.entries.iter()
    }

    /// Streams every entry as one shape-tagged record.
    ///
    /// Layout (little endian): magic `CSAC`, u32 version, u8 dtype width,
    /// u64 record count, then per record u64 timestep, u32 layer-id length,
    /// layer-id bytes, u8 role, three u32 dims, and the values.
    pub fn write_spill(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(SPILL_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(SPILL_VERSION).map_err(io)?;
        w.write_u8(std::mem::size_of::<T>() as u8).map_err(io)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64).map_err(io)?;
        for ((t, layer, role), tensor) in &self.entries {
            w.write_u64::<LittleEndian>(*t as u64).map_err(io)?;
            w.write_u32::<LittleEndian>(layer.0.len() as u32).map_err(io)?;
            w.write_all(layer.0.as_bytes()).map_err(io)?;
            w.write_u8(role.code()).map_err(io)?;
            let (a, b, c) = tensor.dim();
            for d in [a, b, c] {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for v in tensor.iter() {
                if std::mem::size_of::<T>() == 4 {
                    w.write_f32::<LittleEndian>(v.as_f64() as f32).map_err(io)?;
                } else {
                    w.write_f64::<LittleEndian>(v.as_f64()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_spill(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let bad = |m: &str| Error::Decode {
            path: path.to_path_buf(),
            reason: m.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SPILL_MAGIC {
            return Err(bad("not an attention cache spill file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != SPILL_VERSION {
            return Err(bad(&format!("unsupported spill version {version}")));
        }
        let width = r.read_u8().map_err(io)?;
        if width != 4 && width != 8 {
            return Err(bad(&format!("unsupported value width {width}")));
        }
        let count = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut cache = Self::new();
        for _ in 0..count {
            let t = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let layer = LayerId(String::from_utf8(name).map_err(|_| bad("layer id is not utf-8"))?);
            let role = Role::from_code(r.read_u8().map_err(io)?).ok_or_else(|| bad("unknown role"))?;
            let mut dims = [0usize; 3];
            for d in &mut dims {
                *d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            }
            let n = dims[0] * dims[1] * dims[2];
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let v = if width == 4 {
                    r.read_f32::<LittleEndian>().map_err(io)? as f64
                } else {
                    r.read_f64::<LittleEndian>().map_err(io)?
                };
                vals.push(T::of(v));
            }
            let tensor = Array3::from_shape_vec((dims[0], dims[1], dims[2]), vals).map_err(|e| bad(&e.to_string()))?;
            cache.insert(t, layer, role, tensor)?;
        }
        Ok(cache)
    }
}

const SPILL_MAGIC: &[u8; 4] = b"CSAC";
const SPILL_VERSION: u32 = 1;

/// Splits `(tokens, heads * d)` into `(heads, tokens, d)`.
pub fn split_heads<T: Scalar>(x: &Array2<T>, heads: usize) -> Array3<T> {
    let (n, c) = x.dim();
    let d = c / heads;
    Array3::from_shape_fn((heads, n, d), |(h, i, j)| x[[i, h * d + j]])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (heads, n, d) = x.dim();
    Array2::from_shape_fn((n, heads * d), |(i, c)| x[[c / d, i, c % d]])
}

fn check_qkv<T>(q: &Array3<T>, k: &Array3<T>, v: &Array3<T>) -> Result<()> {
    let ((hq, _, dq), (hk, nk, dk), (hv, nv, dv)) = (q.dim(), k.dim(), v.dim());
    if hq != hk || hk != hv || dq != dk || dk != dv || nk != nv {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if nk == 0 || dq == 0 {
        return Err(Error::ShapeMismatch("attention needs at least one key and one channel".into()));
    }
    Ok(())
}

/// `softmax(alpha Q K^T / sqrt(d)) V` per head; output `(heads, n_q, d)`.
pub fn injected_attention<T: Scalar>(q: &Array3<T>, k: &Array3<T>, v: &Array3<T>, alpha: T) -> Result<Array3<T>> {
    Ok(injected_attention_with_weights(q, k, v, alpha)?.0)
}

/// Like [`injected_attention`] but also returns the softmax weights `(heads, n_q, n_k)`.
pub fn injected_attention_with_weights<T: Scalar>(
    q: &Array3<T>,
    k: &Array3<T>,
    v: &Array3<T>,
    alpha: T,
) -> Result<(Array3<T>, Array3<T>)> {
    check_qkv(q, k, v)?;
    if !(alpha > T::zero()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let (heads, nq, d) = q.dim();
    let nk = k.dim().1;
    let scale = alpha / cast::<T>(d).sqrt();
    let mut out = Array3::zeros((heads, nq, d));
    let mut weights = Array3::zeros((heads, nq, nk));
    for h in 0..heads {
        let (o, p) = attend(q.slice(s![h, .., ..]), k.slice(s![h, .., ..]), v.slice(s![h, .., ..]), scale);
        out.slice_mut(s![h, .., ..]).assign(&o);
        weights.slice_mut(s![h, .., ..]).assign(&p);
    }
    Ok((out, weights))
}

/// The final `n_last` layers of `layers`, in forward order.
pub fn select_injection_layers(layers: &[LayerId], n_last: usize) -> Result<Vec<LayerId>> {
    if n_last == 0 || n_last > layers.len() {
        return Err(Error::InvalidArgument(format!(
            "n_last must be in 1..={}, got {n_last}",
            layers.len()
        )));
    }
    Ok(layers[layers.len() - n_last..].to_vec())
}

/// Stores the requested roles of every (or every selected) layer.
pub struct Recorder<'a, T> {
    pub roles: RecordRoles,
    pub layers: Option<&'a BTreeSet<LayerId>>,
    pub cache: &'a mut AttentionCache<T>,
}

impl<T: Scalar> AttentionControl<T> for Recorder<'_, T> {
    fn wants(&self, site: AttentionSite<'_>) -> bool {
        self.roles.any() && self.layers.is_none_or(|set| set.contains(site.layer))
    }

    fn on_attention(&mut self, site: AttentionSite<'_>, live: &Qkv<T>) -> Result<Option<Replacement<T>>> {
        if !self.wants(site) {
            return Ok(None);
        }
        for (on, role, tensor) in [
            (self.roles.query, Role::Query, &live.q),
            (self.roles.key, Role::Key, &live.k),
            (self.roles.value, Role::Value, &live.v),
        ] {
            if on {
                self.cache.insert(site.timestep, site.layer.clone(), role, tensor.clone())?;
            }
        }
        Ok(None)
    }
}

/// Layers to inject into, the score multiplier, and the caches feeding them.
#[derive(Debug, Clone)]
pub struct InjectionPlan<T> {
    pub layers: Vec<LayerId>,
    pub alpha: T,
    /// Queries of the source inversion; read only when replaying queries.
    pub source_cache: AttentionCache<T>,
    /// Keys and values of the target inversion.
    pub target_cache: AttentionCache<T>,
    /// Replay cached source queries instead of using the live ones.
    pub replay_source_queries: bool,
}

impl<T: Scalar> InjectionPlan<T> {
    /// Checks alpha and that every `(timestep, layer)` has the entries it will read.
    pub fn validate(&self, timesteps: &[usize]) -> Result<()> {
        if !(self.alpha > T::zero() && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        for &t in timesteps {
            for layer in &self.layers {
                self.target_cache.get(t, layer, Role::Key)?;
                self.target_cache.get(t, layer, Role::Value)?;
                if self.replay_source_queries {
                    self.source_cache.get(t, layer, Role::Query)?;
                }
            }
        }
        Ok(())
    }
}

/// Substitutes cached target keys/values (and optionally source queries)
/// in the planned layers.
pub struct Injector<'a, T> {
    plan: &'a InjectionPlan<T>,
    planned: BTreeSet<LayerId>,
}

impl<'a, T: Scalar> Injector<'a, T> {
    pub fn new(plan: &'a InjectionPlan<T>) -> Self {
        Self {
            plan,
            planned: plan.layers.iter().cloned().collect(),
        }
    }
}

impl<T: Scalar> AttentionControl<T> for Injector<'_, T> {
    fn wants(&self, site: AttentionSite<'_>) -> bool {
        self.planned.contains(site.layer)
    }

    fn on_attention(&mut self, site: AttentionSite<'_>, live: &Qkv<T>) -> Result<Option<Replacement<T>>> {
        if !self.planned.contains(site.layer) {
            return Ok(None);
        }
        let k = self.plan.target_cache.get(site.timestep, site.layer, Role::Key)?;
        let v = self.plan.target_cache.get(site.timestep, site.layer, Role::Value)?;
        let q = if self.plan.replay_source_queries {
            Some(self.plan.source_cache.get(site.timestep, site.layer, Role::Query)?.clone())
        } else {
            None
        };
        let (lh, _, ld) = live.q.dim();
        let (kh, _, kd) = k.dim();
        if (lh, ld) != (kh, kd) {
            return Err(Error::ShapeMismatch(format!(
                "cached K at timestep {}, layer {} has (heads, dim) ({kh}, {kd}); live is ({lh}, {ld})",
                site.timestep, site.layer
            )));
        }
        Ok(Some(Replacement {
            q,
            k: Some(k.clone()),
            v: Some(v.clone()),
            alpha: self.plan.alpha,
        }))
    }
}
