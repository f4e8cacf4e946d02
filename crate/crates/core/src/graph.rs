//! Minimal reverse-mode differentiation over `ndarray` values.
//!
//! Feature maps are `(C, H, W)`, token matrices `(N, C)`. Every op computes
//! its value eagerly; when the graph tracks gradients it also keeps what the
//! backward pass needs (im2col buffers, attention probabilities).

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn, Zip};

use crate::scalar::{cast, Scalar};

pub type NodeId = usize;

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &ArrayD<T> {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ArrayD<T> {
        &mut self.values[idx]
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        cols: Option<Array2<T>>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    AddChannel {
        x: NodeId,
        bias: NodeId,
    },
    Silu(NodeId),
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Upsample2(NodeId),
    ToTokens(NodeId),
    FromTokens {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: T,
        probs: Option<Vec<Array2<T>>>,
    },
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    AddScalar {
        x: NodeId,
        s: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to every parameter touched.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<ArrayD<T>>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track: bool,
}

fn d2<T>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

/// One head of `softmax(scale * q k^T) v`; returns output and probabilities.
pub(crate) fn attend<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    scale: T,
) -> (Array2<T>, Array2<T>) {
    let mut p = q.dot(&k.t());
    for mut row in p.rows_mut() {
        let mut max = T::neg_infinity();
        for &s in row.iter() {
            max = max.max(s * scale);
        }
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s * scale - max).exp();
            sum = sum + *s;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|e| e * inv);
    }
    (p.dot(&v), p)
}

impl<T: Scalar> Graph<T> {
    /// `track = false` skips the buffers needed for `backward`.
    pub fn new(track: bool) -> Self {
        Self {
            nodes: Vec::new(),
            track,
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id].value
    }

    pub fn input(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, idx: usize) -> NodeId {
        self.push(store.get(idx).clone(), Op::Param(idx))
    }

    /// `x: (Cin, H, W)`, `w: (Cout, Cin, k, k)`, `b: (Cout)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("conv input (C,H,W)");
        let wv = self.value(w);
        let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(xv.dim().0, cin, "conv channel mismatch");
        let cols = im2col(&xv, k, stride, pad);
        let (_, h, wd) = xv.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let w2 = wv.view().into_shape_with_order((cout, cin * k * k)).expect("contiguous weights");
        let mut out = w2.dot(&cols);
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias (C)");
        for (mut row, &bb) in out.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bb);
        }
        let out = out.into_shape_with_order(IxDyn(&[cout, ho, wo])).expect("reshape");
        let cols = self.track.then_some(cols);
        self.push(out, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    /// `x: (N, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mut out = d2(self.value(x)).dot(&d2(self.value(w)));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias (out)");
        for mut row in out.rows_mut() {
            row += &bv;
        }
        self.push(out.into_dyn(), Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds `bias` (any shape holding C values) to every pixel of channel c.
    pub fn add_channel(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let bv: Vec<T> = self.value(bias).iter().copied().collect();
        for (mut plane, &bb) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
            plane.mapv_inplace(|v| v + bb);
        }
        self.push(out, Op::AddChannel { x, bias })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).mapv(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x))
    }

    /// Channel concatenation of two `(C, H, W)` maps.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat spatial dims match");
        self.push(out, Op::Concat { a, b })
    }

    /// Nearest-neighbour 2x upsampling of `(C, H, W)`.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).view().into_dimensionality::<Ix3>().expect("(C,H,W)");
        let (c, h, w) = v.dim();
        let out = Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| v[[ch, y / 2, xx / 2]]);
        self.push(out.into_dyn(), Op::Upsample2(x))
    }

    /// `(C, H, W)` to `(H W, C)`.
    pub fn to_tokens(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let out = v
            .view()
            .into_shape_with_order((c, h * w))
            .expect("contiguous map")
            .t()
            .to_owned();
        self.push(out.into_dyn(), Op::ToTokens(x))
    }

    /// `(H W, C)` back to `(C, H, W)`.
    pub fn from_tokens(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let v = d2(self.value(x));
        let c = v.dim().1;
        let out = v
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[c, h, w]))
            .expect("token count matches h*w");
        self.push(out, Op::FromTokens { x })
    }

    /// Multi-head `softmax(alpha q k^T / sqrt(d)) v` over `(N, C)` token
    /// matrices; heads split the channel axis into equal groups.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, alpha: T) -> NodeId {
        let (qv, kv, vv) = (d2(self.value(q)), d2(self.value(k)), d2(self.value(v)));
        let c = qv.dim().1;
        assert_eq!(c % heads, 0, "channels divisible by heads");
        let d = c / heads;
        let scale = alpha / cast::<T>(d).sqrt();
        let mut out = Array2::zeros((qv.dim().0, c));
        let mut probs = Vec::with_capacity(heads);
        for j in 0..heads {
            let cols = s![.., j * d..(j + 1) * d];
            let (o, p) = attend(qv.slice(cols), kv.slice(cols), vv.slice(cols), scale);
            out.slice_mut(cols).assign(&o);
            if self.track {
                probs.push(p);
            }
        }
        let probs = self.track.then_some(probs);
        self.push(out.into_dyn(), Op::Attention { q, k, v, heads, scale, probs })
    }

    /// `x * s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = *self.value(s).iter().next().expect("scalar");
        let out = self.value(x).mapv(|v| v * sv);
        self.push(out, Op::MulScalar { x, s })
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = *self.value(s).iter().next().expect("scalar");
        let out = self.value(x).mapv(|v| v + sv);
        self.push(out, Op::AddScalar { x, s })
    }

    /// Mean squared error, a 0-d value.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "mse shapes");
        let n = cast::<T>(p.len());
        let sum = Zip::from(p).and(t).fold(T::zero(), |acc, &a, &b| acc + (a - b) * (a - b));
        self.push(ArrayD::from_elem(IxDyn(&[]), sum / n), Op::Mse { pred, target })
    }

    fn accumulate(grads: &mut [Option<ArrayD<T>>], id: NodeId, g: ArrayD<T>) {
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from a 0-d loss node.
    pub fn backward(&self, loss: NodeId, n_params: usize) -> ParamGrads<T> {
        assert!(self.track, "graph was built without gradient tracking");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(ArrayD::from_elem(self.nodes[loss].value.raw_dim(), T::one()));
        let mut out = ParamGrads {
            grads: vec![None; n_params],
        };
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(i) => match &mut out.grads[*i] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    let cols = cols.as_ref().expect("tracked conv");
                    let wv = self.value(*w);
                    let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let g2 = g.view().into_shape_with_order((cout, cols.dim().1)).expect("grad map");
                    let dw = g2.dot(&cols.t()).into_shape_with_order(IxDyn(&[cout, cin, k, k])).expect("w");
                    let db = g2.sum_axis(Axis(1)).into_dyn();
                    let w2 = wv.view().into_shape_with_order((cout, cin * k * k)).expect("w");
                    let dcols = w2.t().dot(&g2);
                    let xs = self.value(*x).shape();
                    let dx = col2im(&dcols, (xs[0], xs[1], xs[2]), k, *stride, *pad);
                    Self::accumulate(&mut grads, *w, dw);
                    Self::accumulate(&mut grads, *b, db);
                    Self::accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::Linear { x, w, b } => {
                    let g2 = d2(&g);
                    let dx = g2.dot(&d2(self.value(*w)).t());
                    let dw = d2(self.value(*x)).t().dot(&g2);
                    let db = g2.sum_axis(Axis(0));
                    Self::accumulate(&mut grads, *x, dx.into_dyn());
                    Self::accumulate(&mut grads, *w, dw.into_dyn());
                    Self::accumulate(&mut grads, *b, db.into_dyn());
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, *a, g.clone());
                    Self::accumulate(&mut grads, *b, g);
                }
                Op::AddChannel { x, bias } => {
                    let sums: Array1<T> = g.axis_iter(Axis(0)).map(|p| p.sum()).collect();
                    let shape = self.value(*bias).raw_dim();
                    let db = sums.into_shape_with_order(shape).expect("bias shape");
                    Self::accumulate(&mut grads, *bias, db);
                    Self::accumulate(&mut grads, *x, g);
                }
                Op::Silu(x) => {
                    let mut dx = self.value(*x).clone();
                    Zip::from(&mut dx).and(&g).for_each(|v, &gg| {
                        let sig = T::one() / (T::one() + (-*v).exp());
                        *v = gg * sig * (T::one() + *v * (T::one() - sig));
                    });
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[0];
                    let ga = g.slice_axis(Axis(0), (0..ca).into()).to_owned();
                    let gb = g.slice_axis(Axis(0), (ca..).into()).to_owned();
                    Self::accumulate(&mut grads, *a, ga);
                    Self::accumulate(&mut grads, *b, gb);
                }
                Op::Upsample2(x) => {
                    let gv = g.view().into_dimensionality::<Ix3>().expect("(C,H,W)");
                    let (c, h2, w2) = gv.dim();
                    let mut dx = Array3::<T>::zeros((c, h2 / 2, w2 / 2));
                    for ((ch, y, xx), &val) in gv.indexed_iter() {
                        dx[[ch, y / 2, xx / 2]] = dx[[ch, y / 2, xx / 2]] + val;
                    }
                    Self::accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::ToTokens(x) => {
                    let shape = self.value(*x).raw_dim();
                    let dx = d2(&g)
                        .t()
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(shape)
                        .expect("tokens");
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::FromTokens { x } => {
                    let s = g.shape();
                    let dx = g
                        .view()
                        .into_shape_with_order((s[0], s[1] * s[2]))
                        .expect("map")
                        .t()
                        .to_owned();
                    Self::accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::Attention { q, k, v, heads, scale, probs } => {
                    let probs = probs.as_ref().expect("tracked attention");
                    let (qv, kv, vv) = (d2(self.value(*q)), d2(self.value(*k)), d2(self.value(*v)));
                    let g2 = d2(&g);
                    let d = qv.dim().1 / heads;
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for (j, p) in probs.iter().enumerate() {
                        let cols = s![.., j * d..(j + 1) * d];
                        let go = g2.slice(cols);
                        let dp = go.dot(&vv.slice(cols).t());
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let mut ds = p * &dp;
                        let row_dot = ds.sum_axis(Axis(1));
                        Zip::from(&mut ds).and(p).and_broadcast(&row_dot.insert_axis(Axis(1))).for_each(
                            |dsv, &pv, &rd| *dsv = (*dsv - pv * rd) * *scale,
                        );
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    Self::accumulate(&mut grads, *q, dq.into_dyn());
                    Self::accumulate(&mut grads, *k, dk.into_dyn());
                    Self::accumulate(&mut grads, *v, dv.into_dyn());
                }
                Op::MulScalar { x, s } => {
                    let sv = *self.value(*s).iter().next().expect("scalar");
                    let ds = Zip::from(&g).and(self.value(*x)).fold(T::zero(), |a, &gg, &xv| a + gg * xv);
                    let shape = self.value(*s).raw_dim();
                    Self::accumulate(&mut grads, *s, ArrayD::from_elem(shape, ds));
                    Self::accumulate(&mut grads, *x, g.mapv(|v| v * sv));
                }
                Op::AddScalar { x, s } => {
                    let shape = self.value(*s).raw_dim();
                    Self::accumulate(&mut grads, *s, ArrayD::from_elem(shape, g.sum()));
                    Self::accumulate(&mut grads, *x, g);
                }
                Op::Mse { pred, target } => {
                    let gs = *g.iter().next().expect("scalar grad");
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let k = gs * T::of(2.0) / cast::<T>(p.len());
                    let mut dp = p - t;
                    dp.mapv_inplace(|v| v * k);
                    let dt = dp.mapv(|v| -v);
                    Self::accumulate(&mut grads, *pred, dp);
                    Self::accumulate(&mut grads, *target, dt);
                }
            }
        }
        out
    }
}

fn im2col<T: Scalar>(x: &ndarray::ArrayView3<'_, T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((ci * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("row-major cols");
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, iy as usize, ..]);
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &Array2<T>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let cell = &mut x[[ci, iy as usize, ix as usize]];
                            *cell = *cell + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Builds a scalar loss exercising every op, as a function of the params.
    fn build(g: &mut Graph<f64>, store: &ParamStore<f64>, x: &ArrayD<f64>, target: &ArrayD<f64>) -> NodeId {
        let xi = g.input(x.clone());
        let p: Vec<NodeId> = (0..store.len()).map(|i| g.param(store, i)).collect();
        let c1 = g.conv2d(xi, p[0], p[1], 1, 1);
        let a1 = g.silu(c1);
        let c2 = g.conv2d(a1, p[2], p[3], 2, 1);
        let c2 = g.add_channel(c2, p[4]);
        let tok = g.to_tokens(c2);
        let q = g.linear(tok, p[5], p[6]);
        let k = g.linear(tok, p[7], p[8]);
        let v = g.linear(tok, p[9], p[10]);
        let at = g.attention(q, k, v, 2, 1.3);
        let back = g.from_tokens(at, 3, 3);
        let res = g.add(back, c2);
        let up = g.upsample2(res);
        let cat = g.concat(up, a1);
        let sc = g.mul_scalar(cat, p[11]);
        let sc = g.add_scalar(sc, p[12]);
        let out = g.conv2d(sc, p[13], p[14], 1, 0);
        let ti = g.input(target.clone());
        g.mse(out, ti)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shapes: Vec<Vec<usize>> = vec![
            vec![3, 2, 3, 3],
            vec![3],
            vec![4, 3, 3, 3],
            vec![4],
            vec![4],
            vec![4, 4],
            vec![4],
            vec![4, 4],
            vec![4],
            vec![4, 4],
            vec![4],
            vec![1],
            vec![1],
            vec![2, 7, 1, 1],
            vec![2],
        ];
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.push(format!("p{i}"), rand_array(&mut rng, s));
        }
        let x = rand_array(&mut rng, &[2, 6, 6]);
        let target = rand_array(&mut rng, &[2, 6, 6]);

        let mut g = Graph::new(true);
        let loss = build(&mut g, &store, &x, &target);
        let grads = g.backward(loss, store.len());

        let eval = |s: &ParamStore<f64>| {
            let mut g = Graph::new(false);
            let l = build(&mut g, s, &x, &target);
            *g.value(l).iter().next().unwrap()
        };
        let h = 1e-6;
        for pi in 0..store.len() {
            let analytic = grads.grads[pi].as_ref().expect("every param used");
            for idx in 0..store.get(pi).len().min(6) {
                let mut plus = store.clone();
                plus.get_mut(pi).as_slice_mut().unwrap()[idx] += h;
                let mut minus = store.clone();
                minus.get_mut(pi).as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                // Key biases shift every score of a query equally, so their
                // exact gradient is zero; compare those absolutely.
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-5, "param {pi}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let q = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.7);
        let k = Array2::from_shape_fn((4, 3), |(i, j)| (i * j) as f64 * 0.3);
        let v = Array2::from_shape_fn((4, 3), |(i, _)| i as f64);
        let (_, p) = attend(q.view(), k.view(), v.view(), 2.0);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
