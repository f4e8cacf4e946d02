//! Inference-only layers on `(C, H, W)` feature maps and `(tokens, C)` matrices.

use cellstyle_core::attention::{injected_attention, merge_heads, split_heads};
use cellstyle_core::{Error, Result, Scalar};
use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};

use crate::weights::Weights;

fn dims<T: Scalar, D: ndarray::Dimension>(a: &ArrayD<T>, name: &str) -> Result<ndarray::Array<T, D>> {
    a.clone()
        .into_dimensionality::<D>()
        .map_err(|_| Error::Checkpoint(format!("tensor {name} has unexpected rank {:?}", a.shape())))
}

fn vector<T: Scalar>(w: &Weights<T>, name: &str) -> Result<Array1<T>> {
    dims::<T, Ix1>(w.get(name)?, name)
}

fn optional_vector<T: Scalar>(w: &Weights<T>, name: &str) -> Result<Option<Array1<T>>> {
    if w.contains(name) {
        vector(w, name).map(Some)
    } else {
        Ok(None)
    }
}

pub fn silu<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| v / (T::one() + (-v).exp()));
}

pub fn gelu<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    T::of(0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)))
}

pub struct Conv<T> {
    w: Array2<T>,
    b: Option<Array1<T>>,
    out: usize,
    k: usize,
    stride: usize,
    /// top, bottom, left, right
    pad: [usize; 4],
}

impl<T: Scalar> Conv<T> {
    pub fn load(w: &Weights<T>, prefix: &str, stride: usize, pad: [usize; 4]) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let k4: Array4<T> = dims::<T, Ix4>(w.get(&name)?, &name)?;
        let (o, i, kh, kw) = k4.dim();
        if kh != kw {
            return Err(Error::Checkpoint(format!("{name}: non-square kernel {kh}x{kw}")));
        }
        Ok(Self {
            w: k4.into_shape_with_order((o, i * kh * kw)).expect("contiguous"),
            b: optional_vector(w, &format!("{prefix}.bias"))?,
            out: o,
            k: kh,
            stride,
            pad,
        })
    }

    /// Same-size convolution (odd kernel, stride 1).
    pub fn same(w: &Weights<T>, prefix: &str) -> Result<Self> {
        let mut c = Self::load(w, prefix, 1, [0; 4])?;
        c.pad = [c.k / 2; 4];
        Ok(c)
    }

    pub fn in_channels(&self) -> usize {
        self.w.ncols() / (self.k * self.k)
    }

    pub fn out_channels(&self) -> usize {
        self.out
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let (c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "convolution expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let [pt, pb, pl, pr] = self.pad;
        let (hp, wp) = (h + pt + pb, w + pl + pr);
        if hp < self.k || wp < self.k {
            return Err(Error::ShapeMismatch(format!("{h}x{w} input is smaller than the kernel")));
        }
        let ho = (hp - self.k) / self.stride + 1;
        let wo = (wp - self.k) / self.stride + 1;
        let mut padded = Array3::zeros((c, hp, wp));
        padded.slice_mut(s![.., pt..pt + h, pl..pl + w]).assign(x);
        let k = self.k;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    let src = padded.slice(s![
                        ci,
                        dy..dy + (ho - 1) * self.stride + 1;self.stride,
                        dx..dx + (wo - 1) * self.stride + 1;self.stride
                    ]);
                    for (dst, v) in cols.row_mut(row).iter_mut().zip(src.iter()) {
                        *dst = *v;
                    }
                }
            }
        }
        let mut out = self.w.dot(&cols);
        if let Some(b) = &self.b {
            out += &b.view().insert_axis(Axis(1));
        }
        Ok(out.into_shape_with_order((self.out, ho, wo)).expect("contiguous"))
    }
}

/// Dense layer; 1x1 convolution weights are accepted and flattened.
pub struct Linear<T> {
    /// `(in, out)`
    wt: Array2<T>,
    b: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn load(w: &Weights<T>, prefix: &str) -> Result<Self> {
        let name = format!("{prefix}.weight");
        let raw = w.get(&name)?;
        let m: Array2<T> = match raw.ndim() {
            2 => dims::<T, Ix2>(raw, &name)?,
            4 if raw.shape()[2] == 1 && raw.shape()[3] == 1 => {
                let (o, i) = (raw.shape()[0], raw.shape()[1]);
                raw.clone().into_shape_with_order((o, i)).expect("contiguous")
            }
            _ => return Err(Error::Checkpoint(format!("{name}: not a dense weight {:?}", raw.shape()))),
        };
        Ok(Self {
            wt: m.reversed_axes().as_standard_layout().into_owned(),
            b: optional_vector(w, &format!("{prefix}.bias"))?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.wt.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.wt.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "linear layer expects {} features, got {}",
                self.in_features(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.wt);
        if let Some(b) = &self.b {
            y += b;
        }
        Ok(y)
    }
}

pub struct GroupNorm<T> {
    gamma: Array1<T>,
    beta: Array1<T>,
    groups: usize,
    eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn load(w: &Weights<T>, prefix: &str, groups: usize, eps: f64) -> Result<Self> {
        let gamma = vector(w, &format!("{prefix}.weight"))?;
        let beta = vector(w, &format!("{prefix}.bias"))?;
        if groups == 0 || gamma.len() % groups != 0 || beta.len() != gamma.len() {
            return Err(Error::Checkpoint(format!(
                "{prefix}: {} channels do not split into {groups} groups",
                gamma.len()
            )));
        }
        Ok(Self { gamma, beta, groups, eps })
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let c = x.dim().0;
        if c != self.gamma.len() {
            return Err(Error::ShapeMismatch(format!("group norm expects {} channels, got {c}", self.gamma.len())));
        }
        let per = c / self.groups;
        let mut out = x.clone();
        for g in 0..self.groups {
            let mut block = out.slice_mut(s![g * per..(g + 1) * per, .., ..]);
            let n = block.len() as f64;
            let mean = block.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = block.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (j, mut plane) in block.outer_iter_mut().enumerate() {
                let ch = g * per + j;
                let (a, b) = (self.gamma[ch], self.beta[ch]);
                plane.mapv_inplace(|v| T::of((v.as_f64() - mean) * inv) * a + b);
            }
        }
        Ok(out)
    }
}

pub struct LayerNorm<T> {
    gamma: Array1<T>,
    beta: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn load(w: &Weights<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: vector(w, &format!("{prefix}.weight"))?,
            beta: vector(w, &format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = T::of((v.as_f64() - mean) * inv) * self.gamma[j] + self.beta[j];
            }
        }
        out
    }
}

/// `(C, H, W)` to `(H*W, C)`.
pub fn to_tokens<T: Scalar>(x: &Array3<T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous")
        .t()
        .as_standard_layout()
        .into_owned()
}

pub fn from_tokens<T: Scalar>(x: &Array2<T>, h: usize, w: usize) -> Array3<T> {
    let c = x.ncols();
    x.t().as_standard_layout().into_owned().into_shape_with_order((c, h, w)).expect("contiguous")
}

pub fn upsample_nearest2<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, y, x_)| x[[k, y / 2, x_ / 2]])
}

pub fn concat_channels<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> Result<Array3<T>> {
    concatenate(Axis(0), &[a.view(), b.view()])
        .map_err(|_| Error::ShapeMismatch(format!("cannot concatenate {:?} with skip {:?}", a.dim(), b.dim())))
}

pub struct ResnetBlock<T> {
    norm1: GroupNorm<T>,
    conv1: Conv<T>,
    time: Option<Linear<T>>,
    norm2: GroupNorm<T>,
    conv2: Conv<T>,
    shortcut: Option<Conv<T>>,
}

impl<T: Scalar> ResnetBlock<T> {
    pub fn load(w: &Weights<T>, prefix: &str, groups: usize, eps: f64) -> Result<Self> {
        let shortcut_name = format!("{prefix}.conv_shortcut");
        let time_name = format!("{prefix}.time_emb_proj");
        Ok(Self {
            norm1: GroupNorm::load(w, &format!("{prefix}.norm1"), groups, eps)?,
            conv1: Conv::same(w, &format!("{prefix}.conv1"))?,
            time: if w.contains(&format!("{time_name}.weight")) {
                Some(Linear::load(w, &time_name)?)
            } else {
                None
            },
            norm2: GroupNorm::load(w, &format!("{prefix}.norm2"), groups, eps)?,
            conv2: Conv::same(w, &format!("{prefix}.conv2"))?,
            shortcut: if w.contains(&format!("{shortcut_name}.weight")) {
                Some(Conv::same(w, &shortcut_name)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Array3<T>, temb: Option<&Array1<T>>) -> Result<Array3<T>> {
        let mut h = self.norm1.forward(x)?;
        silu(&mut h);
        let mut h = self.conv1.forward(&h)?;
        if let (Some(proj), Some(e)) = (&self.time, temb) {
            let mut e = e.clone();
            e.mapv_inplace(|v| v / (T::one() + (-v).exp()));
            let shift = proj.forward(&e.insert_axis(Axis(0)))?;
            h += &shift.row(0).into_shape_with_order((h.dim().0, 1, 1)).expect("per-channel");
        }
        let mut h = self.norm2.forward(&h)?;
        silu(&mut h);
        let h = self.conv2.forward(&h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        if skip.dim() != h.dim() {
            return Err(Error::ShapeMismatch(format!("residual {:?} vs {:?}", skip.dim(), h.dim())));
        }
        Ok(skip + h)
    }
}

/// Multi-head attention projections; keys and values come from `context`
/// when given, otherwise from the queries' tokens.
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn load(w: &Weights<T>, prefix: &str, heads: usize) -> Result<Self> {
        let a = Self {
            q: Linear::load(w, &format!("{prefix}.to_q"))?,
            k: Linear::load(w, &format!("{prefix}.to_k"))?,
            v: Linear::load(w, &format!("{prefix}.to_v"))?,
            out: Linear::load(w, &format!("{prefix}.to_out.0"))?,
            heads,
        };
        if heads == 0 || a.q.out_features() % heads != 0 {
            return Err(Error::Checkpoint(format!(
                "{prefix}: width {} does not split into {heads} heads",
                a.q.out_features()
            )));
        }
        Ok(a)
    }

    /// Per-head `(heads, tokens, d)` projections.
    pub fn project(&self, x: &Array2<T>, context: Option<&Array2<T>>) -> Result<(Array3<T>, Array3<T>, Array3<T>)> {
        let kv_src = context.unwrap_or(x);
        Ok((
            split_heads(&self.q.forward(x)?, self.heads),
            split_heads(&self.k.forward(kv_src)?, self.heads),
            split_heads(&self.v.forward(kv_src)?, self.heads),
        ))
    }

    pub fn finish(&self, q: &Array3<T>, k: &Array3<T>, v: &Array3<T>, alpha: T) -> Result<Array2<T>> {
        self.out.forward(&merge_heads(&injected_attention(q, k, v, alpha)?))
    }
}
