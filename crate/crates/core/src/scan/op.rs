//! Differentiable selective scan.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::scan::kernel::{scan_chunked_impl, ScanTerms};
use crate::tensor::{matmul_raw, Float, Tensor};

static ADJOINT_FAULT: AtomicBool = AtomicBool::new(false);

/// Negative-control hook for the gradient checker: when set, the scan adjoint
/// returns a wrong input gradient.
#[doc(hidden)]
pub fn set_adjoint_fault(on: bool) {
    ADJOINT_FAULT.store(on, Ordering::SeqCst);
}

/// Default chunk length of the blocked scan.
pub const DEFAULT_CHUNK: usize = 64;

/// Learnable parameters of one selective scan over `D` channels with `N`
/// states and a rank-`R` step-size projection.
#[derive(Clone, Debug)]
pub struct ScanParams<T: Float> {
    /// `[D, N]`; `A = -exp(A_log)`.
    pub a_log: Tensor<T>,
    /// `[D]`
    pub d_skip: Tensor<T>,
    /// `[D, R]`
    pub delta_down: Tensor<T>,
    /// `[R, D]`
    pub delta_up: Tensor<T>,
    /// `[D]`
    pub delta_bias: Tensor<T>,
    /// `[D, N]`
    pub b_proj: Tensor<T>,
    /// `[D, N]`
    pub c_proj: Tensor<T>,
}

/// Inverse of softplus: `softplus(inv_softplus(y)) == y` for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `A_log[d, n] = ln(n + 1)`, giving decays `-1, -2, ..., -N` per channel.
pub fn a_log_init<T: Float>(dim: usize, state: usize) -> Tensor<T> {
    Tensor::from_fn(&[dim, state], |i| T::c(((i % state) + 1) as f64).ln())
}

/// Step-size bias so that `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`.
pub fn delta_bias_init<T: Float, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tensor<T> {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    Tensor::from_fn(&[dim], |_| T::c(inv_softplus(rng.random_range(lo..hi).exp())))
}

impl<T: Float> ScanParams<T> {
    pub fn init<R: Rng + ?Sized>(dim: usize, state: usize, rank: usize, rng: &mut R) -> Self {
        let lim_d = 1.0 / (dim as f64).sqrt();
        let lim_r = 1.0 / (rank as f64).sqrt();
        Self {
            a_log: a_log_init(dim, state),
            d_skip: Tensor::ones(&[dim]),
            delta_down: Tensor::uniform(&[dim, rank], -lim_d, lim_d, rng),
            delta_up: Tensor::uniform(&[rank, dim], -lim_r, lim_r, rng),
            delta_bias: delta_bias_init(dim, rng),
            b_proj: Tensor::uniform(&[dim, state], -lim_d, lim_d, rng),
            c_proj: Tensor::uniform(&[dim, state], -lim_d, lim_d, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.d_skip.numel()
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.delta_down.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 7] {
        [&self.a_log, &self.d_skip, &self.delta_down, &self.delta_up, &self.delta_bias, &self.b_proj, &self.c_proj]
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> ScanVars<'t, T> {
        ScanVars {
            a_log: tape.var(self.a_log.clone()),
            d_skip: tape.var(self.d_skip.clone()),
            delta_down: tape.var(self.delta_down.clone()),
            delta_up: tape.var(self.delta_up.clone()),
            delta_bias: tape.var(self.delta_bias.clone()),
            b_proj: tape.var(self.b_proj.clone()),
            c_proj: tape.var(self.c_proj.clone()),
        }
    }

    /// Input-dependent terms for `x: [L, D]` without a tape.
    pub fn terms(&self, x: &Tensor<T>) -> Result<ScanTerms<T>> {
        let [l, d] = x.dims2()?;
        if d != self.dim() {
            return Err(Error::Shape(format!("scan input has {d} channels, parameters expect {}", self.dim())));
        }
        let (n, r) = (self.state(), self.rank());
        let low = matmul_raw(x.data(), self.delta_down.data(), l, d, r);
        let mut delta = matmul_raw(&low, self.delta_up.data(), l, r, d);
        for row in delta.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(self.delta_bias.data()) {
                *v = softplus(*v + b);
            }
        }
        Ok(ScanTerms {
            len: l,
            dim: d,
            state: n,
            x: x.data().to_vec(),
            delta,
            a: self.a_log.data().iter().map(|&v| -v.exp()).collect(),
            b: matmul_raw(x.data(), self.b_proj.data(), l, d, n),
            c: matmul_raw(x.data(), self.c_proj.data(), l, d, n),
            d_skip: self.d_skip.data().to_vec(),
        })
    }
}

/// Scan parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScanVars<'t, T: Float> {
    pub a_log: Var<'t, T>,
    pub d_skip: Var<'t, T>,
    pub delta_down: Var<'t, T>,
    pub delta_up: Var<'t, T>,
    pub delta_bias: Var<'t, T>,
    pub b_proj: Var<'t, T>,
    pub c_proj: Var<'t, T>,
}

/// The fused recurrence as one tape operation.
///
/// `x, delta: [L, D]`, `a_log: [D, N]`, `b, c: [L, N]`, `d_skip: [D]`.
/// Forward uses the blocked scan; the adjoint runs the recurrence backwards
/// over the stored states.
pub fn selective_scan<'t, T: Float>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    a_log: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    d_skip: Var<'t, T>,
    chunk: usize,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let parents = [x, delta, a_log, b, c, d_skip];
    let needs_grad = parents.iter().any(|p| p.requires_grad());
    let (l, d, n) = {
        let xs = x.value();
        let [l, d] = xs.dims2()?;
        let [_, n] = a_log.value().dims2()?;
        (l, d, n)
    };
    let terms = ScanTerms {
        len: l,
        dim: d,
        state: n,
        x: x.value().data().to_vec(),
        delta: delta.value().data().to_vec(),
        a: a_log.value().data().iter().map(|&v| -v.exp()).collect(),
        b: b.value().data().to_vec(),
        c: c.value().data().to_vec(),
        d_skip: d_skip.value().data().to_vec(),
    };
    let (y, states) = scan_chunked_impl(&terms, chunk, needs_grad)?;
    let value = Tensor::from_parts(vec![l, d], y);
    let states = states.unwrap_or_default();
    let terms_a = terms.a;
    tape.record(value, &parents, move |args| {
        let xs = args.inputs[0].data();
        let dts = args.inputs[1].data();
        let bs = args.inputs[3].data();
        let cs = args.inputs[4].data();
        let ds = args.inputs[5].data();
        let a = &terms_a;
        let g = args.grad;
        let mut gx = vec![T::zero(); l * d];
        let mut gdt = vec![T::zero(); l * d];
        let mut ga = vec![T::zero(); d * n];
        let mut gb = vec![T::zero(); l * n];
        let mut gc = vec![T::zero(); l * n];
        let mut gd = vec![T::zero(); d];
        // Adjoint of h_t flowing back from step t+1, already multiplied by Abar_{t+1}.
        let mut carry = vec![T::zero(); d * n];
        for t in (0..l).rev() {
            let h_t = &states[t * d * n..(t + 1) * d * n];
            let h_prev = (t > 0).then(|| &states[(t - 1) * d * n..t * d * n]);
            for i in 0..d {
                let gy = g[t * d + i];
                let xv = xs[t * d + i];
                let dt = dts[t * d + i];
                gx[t * d + i] += gy * ds[i];
                gd[i] += gy * xv;
                let mut gdt_acc = T::zero();
                let mut gx_acc = T::zero();
                for j in 0..n {
                    let k = i * n + j;
                    let gh = carry[k] + gy * cs[t * n + j];
                    gc[t * n + j] += gy * h_t[k];
                    let abar = (dt * a[k]).exp();
                    let hp = h_prev.map_or(T::zero(), |h| h[k]);
                    let g_abar = gh * hp * abar;
                    gdt_acc += g_abar * a[k] + gh * bs[t * n + j] * xv;
                    ga[k] += g_abar * dt;
                    gb[t * n + j] += gh * dt * xv;
                    gx_acc += gh * dt * bs[t * n + j];
                    carry[k] = gh * abar;
                }
                gdt[t * d + i] += gdt_acc;
                gx[t * d + i] += gx_acc;
            }
        }
        // dA/dA_log = A
        for (gv, &av) in ga.iter_mut().zip(a.iter()) {
            *gv *= av;
        }
        if ADJOINT_FAULT.load(Ordering::SeqCst) {
            gx.iter_mut().for_each(|v| *v = *v * T::c(1.5) + T::c(0.01));
        }
        let w = &args.wants;
        vec![
            w[0].then_some(gx),
            w[1].then_some(gdt),
            w[2].then_some(ga),
            w[3].then_some(gb),
            w[4].then_some(gc),
            w[5].then_some(gd),
        ]
    })
}

/// Projects `x: [L, D]` to step sizes and input/output maps, then scans.
pub fn selective_scan_forward<'t, T: Float>(p: &ScanVars<'t, T>, x: Var<'t, T>, chunk: usize) -> Result<Var<'t, T>> {
    let delta = x.matmul(&p.delta_down)?.matmul(&p.delta_up)?.add_bias(&p.delta_bias)?.softplus()?;
    let b = x.matmul(&p.b_proj)?;
    let c = x.matmul(&p.c_proj)?;
    selective_scan(x, delta, p.a_log, b, c, p.d_skip, chunk)
}
