//! Discretized S6 recurrence.
//!
//! With `A = -exp(A_log)` diagonal per (channel, state):
//!
//! ```text
//! Abar_t[d,n] = exp(delta_t[d] * A[d,n])
//! h_t[d,n]    = Abar_t[d,n] * h_{t-1}[d,n] + delta_t[d] * B_t[n] * x_t[d]
//! y_t[d]      = sum_n C_t[n] * h_t[d,n] + D[d] * x_t[d]
//! ```
//!
//! The update `h -> a*h + b` composes associatively on `(a, b)` pairs, which
//! is what lets [`scan_chunked`] summarize whole blocks and carry states
//! between them.

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Fully materialized inputs of one scan: the sequence, its step sizes and
/// the per-step input/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanTerms<T: Float> {
    pub len: usize,
    pub dim: usize,
    pub state: usize,
    /// `[L, D]`
    pub x: Vec<T>,
    /// `[L, D]`, non-negative step sizes.
    pub delta: Vec<T>,
    /// `[D, N]`, continuous-time decay (negative for stable dynamics).
    pub a: Vec<T>,
    /// `[L, N]`
    pub b: Vec<T>,
    /// `[L, N]`
    pub c: Vec<T>,
    /// `[D]`
    pub d_skip: Vec<T>,
}

impl<T: Float> ScanTerms<T> {
    pub fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.dim, self.state);
        if l == 0 || d == 0 || n == 0 {
            return Err(Error::Shape(format!("scan needs L, D, N >= 1, got L={l} D={d} N={n}")));
        }
        let checks = [
            ("x", self.x.len(), l * d),
            ("delta", self.delta.len(), l * d),
            ("A", self.a.len(), d * n),
            ("B", self.b.len(), l * n),
            ("C", self.c.len(), l * n),
            ("D", self.d_skip.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!("scan term {name} has {got} values, expected {want}")));
            }
        }
        Ok(())
    }

    fn check_delta(&self) -> Result<()> {
        if let Some(bad) = self.delta.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Value(format!("step size must be finite and non-negative, got {bad}")));
        }
        Ok(())
    }
}

/// Zero-order-hold decay and Euler input drive for one step.
///
/// Returns `(Abar_t, Bx_t)`, both `[D, N]`. A zero step size is the frozen
/// limit (`Abar = 1`, `Bx = 0`); negative or non-finite steps are rejected.
pub fn discretize<T: Float>(a: &[T], x_t: &[T], delta_t: &[T], b_t: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let d = x_t.len();
    let n = b_t.len();
    if delta_t.len() != d || a.len() != d * n {
        return Err(Error::Shape(format!(
            "discretize: A has {} values, x {d}, delta {}, B {n}",
            a.len(),
            delta_t.len()
        )));
    }
    if let Some(bad) = delta_t.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
        return Err(Error::Value(format!("step size must be finite and non-negative, got {bad}")));
    }
    let mut abar = vec![T::zero(); d * n];
    let mut bx = vec![T::zero(); d * n];
    for i in 0..d {
        for j in 0..n {
            abar[i * n + j] = (delta_t[i] * a[i * n + j]).exp();
            bx[i * n + j] = delta_t[i] * b_t[j] * x_t[i];
        }
    }
    Ok((abar, bx))
}

/// Affine state map `h -> a * h + b`, elementwise over `[D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPair<T: Float> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Float> ScanPair<T> {
    pub fn identity(size: usize) -> Self {
        Self { a: vec![T::one(); size], b: vec![T::zero(); size] }
    }

    /// `later ∘ self`: apply `self` first, then `later`.
    pub fn then(&self, later: &Self) -> Self {
        let a = self.a.iter().zip(&later.a).map(|(&a1, &a2)| a1 * a2).collect();
        let b = self.b.iter().zip(&later.a).zip(&later.b).map(|((&b1, &a2), &b2)| a2 * b1 + b2).collect();
        Self { a, b }
    }

    pub fn apply(&self, h: &[T]) -> Vec<T> {
        h.iter().zip(&self.a).zip(&self.b).map(|((&h, &a), &b)| a * h + b).collect()
    }
}

/// `(Abar_t, Bx_t)` pair of every step in `range`, in order.
pub fn step_pairs<T: Float>(terms: &ScanTerms<T>, range: std::ops::Range<usize>) -> Vec<ScanPair<T>> {
    let (d, n) = (terms.dim, terms.state);
    range
        .map(|t| {
            let mut a = vec![T::zero(); d * n];
            let mut b = vec![T::zero(); d * n];
            step_into(terms, t, &mut a, &mut b);
            ScanPair { a, b }
        })
        .collect()
}

#[inline]
fn step_into<T: Float>(terms: &ScanTerms<T>, t: usize, abar: &mut [T], bx: &mut [T]) {
    let (d, n) = (terms.dim, terms.state);
    for i in 0..d {
        let dt = terms.delta[t * d + i];
        let u = dt * terms.x[t * d + i];
        for j in 0..n {
            abar[i * n + j] = (dt * terms.a[i * n + j]).exp();
            bx[i * n + j] = u * terms.b[t * n + j];
        }
    }
}

/// Advances `h` through steps `range`, writing `y_t` rows into `y` and, when
/// given, each post-step state into `states` (`[L, D, N]`).
fn run_steps<T: Float>(
    terms: &ScanTerms<T>,
    range: std::ops::Range<usize>,
    h: &mut [T],
    y: &mut [T],
    mut states: Option<&mut [T]>,
) {
    let (d, n) = (terms.dim, terms.state);
    for t in range {
        let c_t = &terms.c[t * n..(t + 1) * n];
        let b_t = &terms.b[t * n..(t + 1) * n];
        for i in 0..d {
            let dt = terms.delta[t * d + i];
            let xv = terms.x[t * d + i];
            let u = dt * xv;
            let a_row = &terms.a[i * n..(i + 1) * n];
            let h_row = &mut h[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                h_row[j] = (dt * a_row[j]).exp() * h_row[j] + u * b_t[j];
                acc += c_t[j] * h_row[j];
            }
            y[t * d + i] = acc + terms.d_skip[i] * xv;
        }
        if let Some(s) = states.as_deref_mut() {
            s[t * d * n..(t + 1) * d * n].copy_from_slice(h);
        }
    }
}

/// Reference step-by-step scan from `h_0 = 0`; returns `y` as `[L, D]`.
pub fn scan_sequential<T: Float>(terms: &ScanTerms<T>) -> Result<Vec<T>> {
    terms.validate()?;
    terms.check_delta()?;
    let mut h = vec![T::zero(); terms.dim * terms.state];
    let mut y = vec![T::zero(); terms.len * terms.dim];
    run_steps(terms, 0..terms.len, &mut h, &mut y, None);
    Ok(y)
}

/// Every hidden state `h_1..h_L` as `[L, D, N]`.
pub fn scan_states<T: Float>(terms: &ScanTerms<T>) -> Result<Vec<T>> {
    terms.validate()?;
    terms.check_delta()?;
    let (d, n) = (terms.dim, terms.state);
    let mut h = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); terms.len * d];
    let mut states = vec![T::zero(); terms.len * d * n];
    run_steps(terms, 0..terms.len, &mut h, &mut y, Some(&mut states));
    Ok(states)
}

/// Blocked scan in three linear passes.
///
/// 1. Each chunk is summarized as one composed [`ScanPair`] (chunks are
///    independent of each other here).
/// 2. The summaries are folded left to right to get the state entering
///    every chunk.
/// 3. Each chunk is re-run from its entering state to emit outputs.
pub fn scan_chunked<T: Float>(terms: &ScanTerms<T>, chunk: usize) -> Result<Vec<T>> {
    let (y, _) = scan_chunked_impl(terms, chunk, false)?;
    Ok(y)
}

pub(crate) fn scan_chunked_impl<T: Float>(
    terms: &ScanTerms<T>,
    chunk: usize,
    keep_states: bool,
) -> Result<(Vec<T>, Option<Vec<T>>)> {
    if chunk == 0 {
        return Err(Error::Config("scan chunk length must be >= 1".into()));
    }
    terms.validate()?;
    terms.check_delta()?;
    let (l, d, n) = (terms.len, terms.dim, terms.state);
    let size = d * n;
    let n_chunks = l.div_ceil(chunk);
    let bounds = |k: usize| k * chunk..((k + 1) * chunk).min(l);

    // Pass 1: chunk summaries.
    let mut abar = vec![T::zero(); size];
    let mut bx = vec![T::zero(); size];
    let summaries: Vec<ScanPair<T>> = (0..n_chunks)
        .map(|k| {
            let mut acc = ScanPair::identity(size);
            for t in bounds(k) {
                step_into(terms, t, &mut abar, &mut bx);
                for j in 0..size {
                    acc.a[j] *= abar[j];
                    acc.b[j] = abar[j] * acc.b[j] + bx[j];
                }
            }
            acc
        })
        .collect();

    // Pass 2: carries.
    let mut carries = Vec::with_capacity(n_chunks);
    let mut h = vec![T::zero(); size];
    for s in &summaries {
        carries.push(h.clone());
        h = s.apply(&h);
    }

    // Pass 3: outputs.
    let mut y = vec![T::zero(); l * d];
    let mut states = keep_states.then(|| vec![T::zero(); l * size]);
    for (k, carry) in carries.into_iter().enumerate() {
        let mut h = carry;
        run_steps(terms, bounds(k), &mut h, &mut y, states.as_deref_mut());
    }
    Ok((y, states))
}
