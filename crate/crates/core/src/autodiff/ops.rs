//! Differentiable kernels recorded on the tape.

use std::sync::Arc;

use crate::autodiff::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Float, Tensor};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

impl Activation {
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    pub fn derivative<T: Float>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Gelu => {
                let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
                let t = u.tanh();
                let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
                T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// Memory layout of a 3D feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapLayout {
    /// `[C, H, W]`
    Chw,
    /// `[H, W, C]`, one row per token.
    Hwc,
}

impl MapLayout {
    /// `(C, H, W)` for a rank-3 shape.
    pub fn dims(self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match (self, shape) {
            (MapLayout::Chw, &[c, h, w]) => Ok((c, h, w)),
            (MapLayout::Hwc, &[h, w, c]) => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected a rank-3 feature map, got {shape:?}"))),
        }
    }

    /// Element strides `(c, h, w)`.
    fn strides(self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        match self {
            MapLayout::Chw => (h * w, w, 1),
            MapLayout::Hwc => (1, w * c, c),
        }
    }
}

fn same_shape<T: Float>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, T: Float> Var<'t, T> {
    fn binary(
        &self,
        other: &Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&[T], &[T], &[T], bool, bool) -> (Option<Vec<T>>, Option<Vec<T>>) + 'static,
    ) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            let b = other.value();
            same_shape(op, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.record(value, &[*self, *other], move |args| {
            let (ga, gb) = backward(args.inputs[0].data(), args.inputs[1].data(), args.grad, args.wants[0], args.wants[1]);
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |x, y| x + y, |_, _, g, wa, wb| {
            (wa.then(|| g.to_vec()), wb.then(|| g.to_vec()))
        })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g, wa, wb| {
            (wa.then(|| g.to_vec()), wb.then(|| g.iter().map(|&v| -v).collect()))
        })
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |x, y| x * y, |a, b, g, wa, wb| {
            let ga = wa.then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect());
            let gb = wb.then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect());
            (ga, gb)
        })
    }

    /// Adds a `[N]` vector along the last axis.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let b = bias.value();
            let n = x.last_dim();
            if b.shape() != [n] {
                return Err(Error::Shape(format!("add_bias: bias {:?} does not match last axis of {:?}", b.shape(), x.shape())));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        self.tape.record(value, &[*self, *bias], move |args| {
            let n = args.inputs[1].numel();
            let gb = args.wants[1].then(|| {
                let mut gb = vec![T::zero(); n];
                for row in args.grad.chunks(n) {
                    for (a, &g) in gb.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                gb
            });
            vec![args.wants[0].then(|| args.grad.to_vec()), gb]
        })
    }

    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        let value = self.value().map(|v| v * s);
        self.tape.record(value, &[*self], move |args| vec![Some(args.grad.iter().map(|&g| g * s).collect())])
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let (value, n) = {
            let x = self.value();
            (Tensor::scalar(x.data().iter().copied().sum()), x.numel())
        };
        self.tape.record(value, &[*self], move |args| vec![Some(vec![args.grad[0]; n])])
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(T::one() / T::c(n as f64))
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t, T>> {
        let value = self.value().map(|v| kind.apply(v));
        self.tape.record(value, &[*self], move |args| {
            let x = args.inputs[0].data();
            vec![Some(x.iter().zip(args.grad).map(|(&x, &g)| g * kind.derivative(x)).collect())]
        })
    }

    pub fn silu(&self) -> Result<Var<'t, T>> {
        self.activation(Activation::Silu)
    }

    pub fn gelu(&self) -> Result<Var<'t, T>> {
        self.activation(Activation::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<'t, T>> {
        self.activation(Activation::Softplus)
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, m, k, n) = {
            let a = self.value();
            let b = other.value();
            let (m, k, k2, n) = match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) => (m, k, k2, n),
                (sa, sb) => {
                    return Err(Error::Shape(format!("matmul: expected rank-2 operands, got {sa:?} and {sb:?}")))
                }
            };
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul: inner extents differ for {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            (Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)), m, k, n)
        };
        self.tape.record(value, &[*self, *other], move |args| {
            let a = args.inputs[0].data();
            let b = args.inputs[1].data();
            let ga = args.wants[0].then(|| matmul_nt(args.grad, b, m, n, k));
            let gb = args.wants[1].then(|| matmul_tn(a, args.grad, m, k, n));
            vec![ga, gb]
        })
    }

    /// `x W (+ b)` over the last axis; `x: [..., K]`, `W: [K, N]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let k = *shape.last().unwrap();
        let rows = self.value().numel() / k;
        let flat = if shape.len() == 2 { *self } else { self.reshape(&[rows, k])? };
        let mut y = flat.matmul(weight)?;
        if let Some(b) = bias {
            y = y.add_bias(b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape.clone();
            *out_shape.last_mut().unwrap() = y.value().last_dim();
            y.reshape(&out_shape)
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().clone().reshape(shape)?;
        self.tape.record(value, &[*self], |args| vec![Some(args.grad.to_vec())])
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let value = self.value().transpose2()?;
        let [r, c] = value.dims2()?;
        self.tape.record(value, &[*self], move |args| {
            let g = Tensor::from_parts(vec![r, c], args.grad.to_vec());
            vec![Some(g.transpose2().unwrap().into_data())]
        })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let eps = T::c(eps);
        let value = {
            let x = self.value();
            let d = x.last_dim();
            for p in [&gamma.value(), &beta.value()] {
                if p.shape() != [d] {
                    return Err(Error::Shape(format!("layer_norm: affine {:?} does not match {:?}", p.shape(), x.shape())));
                }
            }
            let g = gamma.value();
            let b = beta.value();
            let mut out = vec![T::zero(); x.numel()];
            for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let (mean, inv) = row_moments(row, eps);
                for i in 0..d {
                    orow[i] = (row[i] - mean) * inv * g.data()[i] + b.data()[i];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        self.tape.record(value, &[*self, *gamma, *beta], move |args| {
            let x = args.inputs[0].data();
            let g = args.inputs[1].data();
            let d = g.len();
            let dn = T::c(d as f64);
            let mut gx = vec![T::zero(); x.len()];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            let mut xhat = vec![T::zero(); d];
            let mut dxhat = vec![T::zero(); d];
            for ((row, grow), gxrow) in x.chunks(d).zip(args.grad.chunks(d)).zip(gx.chunks_mut(d)) {
                let (mean, inv) = row_moments(row, eps);
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for i in 0..d {
                    xhat[i] = (row[i] - mean) * inv;
                    dxhat[i] = grow[i] * g[i];
                    s1 += dxhat[i];
                    s2 += dxhat[i] * xhat[i];
                    gg[i] += grow[i] * xhat[i];
                    gb[i] += grow[i];
                }
                for i in 0..d {
                    gxrow[i] = inv / dn * (dn * dxhat[i] - s1 - xhat[i] * s2);
                }
            }
            vec![args.wants[0].then_some(gx), args.wants[1].then_some(gg), args.wants[2].then_some(gb)]
        })
    }

    /// Per-channel convolution with zero ("same") padding.
    ///
    /// `kernel: [C, kh, kw]` with odd extents, `bias: [C]`.
    pub fn depthwise_conv2d(&self, kernel: &Var<'t, T>, bias: Option<&Var<'t, T>>, layout: MapLayout) -> Result<Var<'t, T>> {
        let (c, h, w) = layout.dims(&self.shape())?;
        let kshape = kernel.shape();
        let (kh, kw) = match kshape[..] {
            [kc, kh, kw] if kc == c => (kh, kw),
            _ => return Err(Error::Shape(format!("depthwise_conv2d: kernel {kshape:?} does not fit {c} channels"))),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("depthwise_conv2d: kernel extents must be odd, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if b.shape() != [c] {
                return Err(Error::Shape(format!("depthwise_conv2d: bias {:?} for {c} channels", b.shape())));
            }
        }
        let geo = ConvGeometry { c, h, w, kh, kw, layout };
        let value = {
            let x = self.value();
            let k = kernel.value();
            let b = bias.map(|b| b.value().data().to_vec());
            Tensor::from_parts(x.shape().to_vec(), geo.forward(x.data(), k.data(), b.as_deref()))
        };
        let mut parents = vec![*self, *kernel];
        if let Some(b) = bias {
            parents.push(*b);
        }
        self.tape.record(value, &parents, move |args| {
            let (gx, gk, gb) = geo.backward(args.inputs[0].data(), args.inputs[1].data(), args.grad);
            let mut out = vec![args.wants[0].then_some(gx), args.wants[1].then_some(gk)];
            if args.inputs.len() == 3 {
                out.push(args.wants[2].then_some(gb));
            }
            out
        })
    }

    /// `y[i] = x[indices[i]]` over the flattened input, reshaped to `shape`.
    pub fn gather(&self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if shape.iter().product::<usize>() != indices.len() {
                return Err(Error::Shape(format!("gather: {} indices for shape {shape:?}", indices.len())));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
                return Err(Error::Shape(format!("gather: index {bad} out of range for {:?}", x.shape())));
            }
            Tensor::from_parts(shape.to_vec(), indices.iter().map(|&i| x.data()[i]).collect())
        };
        self.tape.record(value, &[*self], move |args| {
            let mut gx = vec![T::zero(); args.inputs[0].numel()];
            for (&i, &g) in indices.iter().zip(args.grad) {
                gx[i] += g;
            }
            vec![Some(gx)]
        })
    }

    /// Row gather for a `[R, C]` input: `y[i, :] = x[rows[i], :]`.
    pub fn gather_rows(&self, rows: Arc<Vec<usize>>) -> Result<Var<'t, T>> {
        let (value, c) = {
            let x = self.value();
            let [r, c] = x.dims2()?;
            if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
                return Err(Error::Shape(format!("gather_rows: row {bad} out of range for {:?}", x.shape())));
            }
            let mut out = Vec::with_capacity(rows.len() * c);
            for &i in rows.iter() {
                out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            (Tensor::from_parts(vec![rows.len(), c], out), c)
        };
        self.tape.record(value, &[*self], move |args| {
            let mut gx = vec![T::zero(); args.inputs[0].numel()];
            for (k, &i) in rows.iter().enumerate() {
                for (a, &g) in gx[i * c..(i + 1) * c].iter_mut().zip(&args.grad[k * c..(k + 1) * c]) {
                    *a += g;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(items: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = items.first().ok_or_else(|| Error::Shape("stack: no inputs".into()))?;
        let inner = first.shape();
        let mut data = Vec::new();
        for v in items {
            let t = v.value();
            if t.shape() != inner.as_slice() {
                return Err(Error::Shape(format!("stack: {:?} vs {:?}", t.shape(), inner)));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        let n = first.value().numel();
        first.tape.record(Tensor::from_parts(shape, data), items, move |args| {
            args.grad.chunks(n).zip(&args.wants).map(|(g, &w)| w.then(|| g.to_vec())).collect()
        })
    }

    /// Mean over the leading axis of `[R, C]`, giving `[C]`.
    pub fn mean_rows(&self) -> Result<Var<'t, T>> {
        let (value, r, c) = {
            let x = self.value();
            let [r, c] = x.dims2()?;
            let mut out = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = T::one() / T::c(r as f64);
            out.iter_mut().for_each(|v| *v *= inv);
            (Tensor::from_parts(vec![c], out), r, c)
        };
        self.tape.record(value, &[*self], move |args| {
            let inv = T::one() / T::c(r as f64);
            let mut gx = Vec::with_capacity(r * c);
            for _ in 0..r {
                gx.extend(args.grad.iter().map(|&g| g * inv));
            }
            vec![Some(gx)]
        })
    }
}

fn row_moments<T: Float>(row: &[T], eps: T) -> (T, T) {
    let n = T::c(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    layout: MapLayout,
}

impl ConvGeometry {
    /// Calls `f(out_offset, in_offset, kernel_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (sc, sh, sw) = self.layout.strides(self.c, self.h, self.w);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let ksz = self.kh * self.kw;
        for y in 0..self.h {
            for x in 0..self.w {
                for i in 0..self.kh {
                    let yy = y + i;
                    if yy < ph || yy - ph >= self.h {
                        continue;
                    }
                    for j in 0..self.kw {
                        let xx = x + j;
                        if xx < pw || xx - pw >= self.w {
                            continue;
                        }
                        let out_base = y * sh + x * sw;
                        let in_base = (yy - ph) * sh + (xx - pw) * sw;
                        for ch in 0..self.c {
                            f(out_base + ch * sc, in_base + ch * sc, ch * ksz + i * self.kw + j);
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Float>(&self, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        self.for_each_tap(|o, i, kk| out[o] += k[kk] * x[i]);
        if let Some(b) = bias {
            let (sc, sh, sw) = self.layout.strides(self.c, self.h, self.w);
            for y in 0..self.h {
                for xx in 0..self.w {
                    for ch in 0..self.c {
                        out[y * sh + xx * sw + ch * sc] += b[ch];
                    }
                }
            }
        }
        out
    }

    fn backward<T: Float>(&self, x: &[T], k: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut gx = vec![T::zero(); x.len()];
        let mut gk = vec![T::zero(); k.len()];
        self.for_each_tap(|o, i, kk| {
            gx[i] += g[o] * k[kk];
            gk[kk] += g[o] * x[i];
        });
        let (sc, sh, sw) = self.layout.strides(self.c, self.h, self.w);
        let mut gb = vec![T::zero(); self.c];
        for y in 0..self.h {
            for xx in 0..self.w {
                for (ch, b) in gb.iter_mut().enumerate() {
                    *b += g[y * sh + xx * sw + ch * sc];
                }
            }
        }
        (gx, gk, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::Tape;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(&m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(p.matmul(&b).unwrap().value().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let y = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().to_tensor();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel_and_box_sum() {
        let tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(&[1, 4, 5], -1.0, 1.0, &mut rng);
        let xv = tape.constant(x.clone());
        let k = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = xv.depthwise_conv2d(&k, None, MapLayout::Chw).unwrap();
        assert_eq!(y.value().data(), x.data());

        let ones = tape.constant(Tensor::ones(&[1, 5, 5]));
        let k3 = tape.constant(Tensor::ones(&[1, 3, 3]));
        let y = ones.depthwise_conv2d(&k3, None, MapLayout::Chw).unwrap();
        assert_eq!(y.value().data()[2 * 5 + 2], 9.0);
        assert_eq!(y.value().data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 2, 3]));
        assert!(matches!(x.depthwise_conv2d(&k, None, MapLayout::Chw), Err(Error::Config(_))));
    }

    fn sliding_window(x: &Tensor<f32>, k: &Tensor<f32>) -> Vec<f32> {
        let [c, h, w] = x.dims3().unwrap();
        let [_, kh, kw] = k.dims3().unwrap();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for i in 0..kh as isize {
                        for j in 0..kw as isize {
                            let sy = y + i - kh as isize / 2;
                            let sx = xx + j - kw as isize / 2;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k.data()[ch * kh * kw + (i * kw as isize + j) as usize]
                                * x.data()[ch * h * w + (sy * w as isize + sx) as usize];
                        }
                    }
                    out[ch * h * w + (y * w as isize + xx) as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window_in_both_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let k = Tensor::<f32>::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let oracle = sliding_window(&x, &k);
        let tape = Tape::new();
        let kv = tape.constant(k.clone());
        let y = tape.constant(x.clone()).depthwise_conv2d(&kv, None, MapLayout::Chw).unwrap().to_tensor();
        let diff = y.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "{diff}");

        // Same map stored token-major.
        let hwc = x.clone().reshape(&[2, 25]).unwrap().transpose2().unwrap().reshape(&[5, 5, 2]).unwrap();
        let y2 = tape.constant(hwc).depthwise_conv2d(&kv, None, MapLayout::Hwc).unwrap().to_tensor();
        let back = y2.reshape(&[25, 2]).unwrap().transpose2().unwrap();
        let diff = back.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn layer_norm_fixed_cases() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.constant(Tensor::ones(&[3])).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.constant(Tensor::new(&[2], vec![-1.0, 1.0]).unwrap()).layer_norm(&g, &b, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.value().data()[0] + expect).abs() < 1e-12);
        assert!((y.value().data()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::randn(&[4, 96], 3.0, &mut rng).map(|v| v + 5.0);
        let tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[96]));
        let b = tape.constant(Tensor::zeros(&[96]));
        let y = tape.constant(x).layer_norm(&g, &b, 1e-5).unwrap().to_tensor();
        for row in y.data().chunks(96) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 96.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 96.0;
            assert!(mean.abs() < 1e-6, "{mean}");
            assert!((var - 1.0).abs() < 1e-4, "{var}");
        }
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        // log(1 + e^20) = 20 + 2.0611536e-9
        assert!((softplus(20.0f64) - 20.000_000_002_061_153_6).abs() < 1e-12);
        assert!(softplus(1000.0f64).is_finite());
        assert!((softplus(-50.0f64) - (-50.0f64).exp()).abs() < 1e-30);
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[4, 2], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut rng),
        ];
        let r = check_gradients(&inputs, &cfg, |v| v[0].linear(&v[1], Some(&v[2]))?.silu()?.sum()).unwrap();
        assert!(r.passed(), "{r:?}");

        let inputs = vec![
            Tensor::<f64>::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[2], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng),
        ];
        let r = check_gradients(&inputs, &cfg, |v| {
            v[0].depthwise_conv2d(&v[1], Some(&v[2]), MapLayout::Chw)?.mul(&v[3])?.sum()
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");

        let inputs = vec![
            Tensor::<f64>::uniform(&[3, 6], -2.0, 2.0, &mut rng),
            Tensor::<f64>::uniform(&[6], 0.5, 1.5, &mut rng),
            Tensor::<f64>::uniform(&[6], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[3, 6], -1.0, 1.0, &mut rng),
        ];
        let r = check_gradients(&inputs, &cfg, |v| v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&v[3])?.sum()).unwrap();
        assert!(r.passed(), "{r:?}");

        for kind in [Activation::Silu, Activation::Gelu, Activation::Sigmoid, Activation::Softplus] {
            let inputs = vec![
                Tensor::<f64>::uniform(&[7], -3.0, 3.0, &mut rng),
                Tensor::<f64>::uniform(&[7], -1.0, 1.0, &mut rng),
            ];
            let r = check_gradients(&inputs, &cfg, |v| v[0].activation(kind)?.mul(&v[1])?.sum()).unwrap();
            assert!(r.passed(), "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn structural_op_gradients() {
        let cfg = GradCheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = Arc::new(vec![3usize, 0, 3, 5, 1, 2]);
        let rows = Arc::new(vec![2usize, 0, 1, 1]);
        let inputs = vec![
            Tensor::<f64>::uniform(&[3, 2], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut rng),
            Tensor::<f64>::uniform(&[4, 2], -1.0, 1.0, &mut rng),
        ];
        let r = check_gradients(&inputs, &cfg, |v| {
            let a = v[0].gather(idx.clone(), &[2, 3])?.mul(&v[1])?;
            let b = v[0].gather_rows(rows.clone())?.mul(&v[2])?;
            let c = Var::stack(&[a.transpose()?, v[0]])?.mean()?;
            b.mean_rows()?.sum()?.add(&c)?.add(&a.sum()?)
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn gradients_are_bit_identical_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        let run = || {
            let tape = Tape::new();
            let av = tape.var(a.clone());
            let wv = tape.var(w.clone());
            let y = av.matmul(&wv).unwrap().gelu().unwrap().matmul(&wv).unwrap().sum().unwrap();
            tape.backward(y).unwrap();
            (av.grad().unwrap(), wv.grad().unwrap())
        };
        let (a1, w1) = run();
        let (a2, w2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(w1.data(), w2.data());
    }
}
