//! SS2D: four-direction scanning of a 2D feature map.
//!
//! A map is flattened into four sequences (row-major forward/reverse,
//! column-major forward/reverse), each direction is run through its own
//! selective scan, and the outputs are permuted back and summed.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scan::op::{selective_scan_forward, ScanVars};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [ScanOrder::RowForward, ScanOrder::RowReverse, ScanOrder::ColForward, ScanOrder::ColReverse];

    /// `perm[s]` is the row-major grid position visited at sequence index `s`.
    pub fn permutation(self, h: usize, w: usize) -> Vec<usize> {
        let hw = h * w;
        let col = |s: usize| (s % h) * w + s / h;
        match self {
            ScanOrder::RowForward => (0..hw).collect(),
            ScanOrder::RowReverse => (0..hw).rev().collect(),
            ScanOrder::ColForward => (0..hw).map(col).collect(),
            ScanOrder::ColReverse => (0..hw).rev().map(col).collect(),
        }
    }

    /// `inv[p]` is the sequence index at which grid position `p` is visited.
    pub fn inverse(self, h: usize, w: usize) -> Vec<usize> {
        let perm = self.permutation(h, w);
        let mut inv = vec![0; perm.len()];
        for (s, &p) in perm.iter().enumerate() {
            inv[p] = s;
        }
        inv
    }
}

/// Index tables of the four directions for one grid size.
#[derive(Clone, Debug)]
pub struct CrossScanPlan {
    pub h: usize,
    pub w: usize,
    forward: [Arc<Vec<usize>>; 4],
    inverse: [Arc<Vec<usize>>; 4],
}

impl CrossScanPlan {
    pub fn new(h: usize, w: usize) -> Self {
        let forward = ScanOrder::ALL.map(|o| Arc::new(o.permutation(h, w)));
        let inverse = ScanOrder::ALL.map(|o| Arc::new(o.inverse(h, w)));
        Self { h, w, forward, inverse }
    }
}

/// Flattens a `[C, H, W]` map into the four `[H*W, C]` direction sequences.
pub fn cross_scan<T: Float>(f: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let [c, h, w] = f.dims3()?;
    let tokens = f.clone().reshape(&[c, h * w])?.transpose2()?;
    Ok(ScanOrder::ALL.map(|o| gather_rows(&tokens, &o.permutation(h, w), c)))
}

/// Inverse-permutes four `[H*W, C]` sequences back onto the grid and sums them into `[C, H, W]`.
pub fn cross_merge<T: Float>(seqs: &[Tensor<T>; 4], h: usize, w: usize) -> Result<Tensor<T>> {
    let c = seqs[0].shape().get(1).copied().unwrap_or(0);
    for s in seqs {
        if s.shape() != [h * w, c] {
            return Err(Error::Shape(format!(
                "cross_merge: sequence shape {:?} does not match {}x{} grid with {c} channels",
                s.shape(),
                h,
                w
            )));
        }
    }
    let mut acc = vec![T::zero(); h * w * c];
    for (o, s) in ScanOrder::ALL.iter().zip(seqs) {
        let back = gather_rows(s, &o.inverse(h, w), c);
        for (a, &v) in acc.iter_mut().zip(back.data()) {
            *a += v;
        }
    }
    Tensor::from_parts(vec![h * w, c], acc).transpose2()?.reshape(&[c, h, w])
}

fn gather_rows<T: Float>(t: &Tensor<T>, rows: &[usize], c: usize) -> Tensor<T> {
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
    }
    Tensor::from_parts(vec![rows.len(), c], out)
}

/// Runs one scan per direction over token rows `x: [H*W, C]` and merges.
///
/// `params` holds either four direction-specific sets or a single shared one.
/// Returns the merged `[H*W, C]` map.
pub fn ss2d_tokens<'t, T: Float>(
    params: &[ScanVars<'t, T>],
    x: Var<'t, T>,
    plan: &CrossScanPlan,
    chunk: usize,
) -> Result<Var<'t, T>> {
    Ok(ss2d_branches(params, x, plan, chunk)?.1)
}

/// Like [`ss2d_tokens`] but also returns each direction's output, already
/// mapped back to grid order.
pub fn ss2d_branches<'t, T: Float>(
    params: &[ScanVars<'t, T>],
    x: Var<'t, T>,
    plan: &CrossScanPlan,
    chunk: usize,
) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
    if params.len() != 4 && params.len() != 1 {
        return Err(Error::Config(format!("SS2D takes 4 or 1 parameter sets, got {}", params.len())));
    }
    let rows = x.shape()[0];
    if rows != plan.h * plan.w {
        return Err(Error::Shape(format!("SS2D: {rows} tokens for a {}x{} grid", plan.h, plan.w)));
    }
    let mut branches = Vec::with_capacity(4);
    for k in 0..4 {
        let p = &params[if params.len() == 4 { k } else { 0 }];
        let seq = x.gather_rows(plan.forward[k].clone())?;
        let y = selective_scan_forward(p, seq, chunk)?;
        branches.push(y.gather_rows(plan.inverse[k].clone())?);
    }
    // Fixed merge order.
    let merged = branches[0].add(&branches[1])?.add(&branches[2])?.add(&branches[3])?;
    Ok((branches, merged))
}

/// SS2D on a `[C, H, W]` map, returning `[C, H, W]`.
pub fn ss2d_forward<'t, T: Float>(params: &[ScanVars<'t, T>], f: Var<'t, T>, chunk: usize) -> Result<Var<'t, T>> {
    let shape = f.shape();
    let [c, h, w] = match shape[..] {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::Shape(format!("ss2d_forward expects [C, H, W], got {shape:?}"))),
    };
    let tokens = f.reshape(&[c, h * w])?.transpose()?;
    let plan = CrossScanPlan::new(h, w);
    ss2d_tokens(params, tokens, &plan, chunk)?.transpose()?.reshape(&[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use crate::scan::op::ScanParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_orders() {
        let f = Tensor::<f32>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = cross_scan(&f).unwrap();
        assert_eq!(s[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s[1].data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(s[2].data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s[3].data(), &[4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn permutations_are_bijections() {
        for (h, w) in [(1, 1), (2, 3), (5, 4), (8, 8)] {
            for o in ScanOrder::ALL {
                let p = o.permutation(h, w);
                let inv = o.inverse(h, w);
                let mut seen = vec![false; h * w];
                for (s, &pos) in p.iter().enumerate() {
                    assert!(!seen[pos]);
                    seen[pos] = true;
                    assert_eq!(inv[pos], s);
                }
            }
        }
    }

    #[test]
    fn single_cell_and_constant_maps() {
        let f = Tensor::<f32>::new(&[3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = cross_scan(&f).unwrap();
        assert!(s.iter().all(|x| x.data() == [1.0, 2.0, 3.0]));
        let f = Tensor::<f32>::full(&[2, 3, 4], 0.5);
        let s = cross_scan(&f).unwrap();
        assert!(s.iter().all(|x| x == &s[0]));
    }

    #[test]
    fn merge_inverts_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::<f32>::uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let merged = cross_merge(&cross_scan(&f).unwrap(), 3, 3).unwrap();
        assert_eq!(merged.data(), f.map(|v| 4.0 * v).data());
        let zeros: [Tensor<f32>; 4] = std::array::from_fn(|_| Tensor::zeros(&[9, 2]));
        assert!(cross_merge(&zeros, 3, 3).unwrap().data().iter().all(|&v| v == 0.0));
        let bad: [Tensor<f32>; 4] = std::array::from_fn(|k| Tensor::zeros(&[if k == 2 { 8 } else { 9 }, 2]));
        assert!(matches!(cross_merge(&bad, 3, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn single_cell_reduces_to_four_scans() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<ScanParams<f64>> = (0..4).map(|_| ScanParams::init(3, 2, 1, &mut rng)).collect();
        let f = Tensor::<f64>::uniform(&[3, 1, 1], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| p.bind(&tape)).collect();
        let y = ss2d_forward(&vars, tape.constant(f.clone()), 8).unwrap().to_tensor();
        let x = f.clone().reshape(&[1, 3]).unwrap();
        let mut expect = vec![0.0; 3];
        for p in &params {
            let t = p.terms(&x).unwrap();
            for (e, v) in expect.iter_mut().zip(crate::scan::scan_sequential(&t).unwrap()) {
                *e += v;
            }
        }
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_row_and_column_branches_agree_with_shared_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ScanParams::<f64>::init(2, 3, 1, &mut rng);
        let tape = Tape::new();
        let vars = [p.bind(&tape)];
        let x = tape.constant(Tensor::full(&[12, 2], 0.7));
        let plan = CrossScanPlan::new(3, 4);
        let (branches, _) = ss2d_branches(&vars, x, &plan, 4).unwrap();
        // Row-forward and column-forward consume identical value sequences,
        // so their raw outputs match step for step; compare in sequence order.
        let rf = branches[0].to_tensor();
        let cf = branches[2].to_tensor();
        let rf_seq = gather_rows(&rf, &ScanOrder::RowForward.permutation(3, 4), 2);
        let cf_seq = gather_rows(&cf, &ScanOrder::ColForward.permutation(3, 4), 2);
        assert!(rf_seq.max_abs_diff(&cf_seq) < 1e-15);
    }

    #[test]
    fn ss2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: Vec<ScanParams<f64>> = (0..4).map(|_| ScanParams::init(2, 2, 1, &mut rng)).collect();
        let mut inputs = vec![Tensor::<f64>::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng)];
        for p in &params {
            inputs.extend(p.tensors().into_iter().cloned());
        }
        inputs.push(Tensor::uniform(&[2, 2, 3], -1.0, 1.0, &mut rng));
        let r = check_gradients(&inputs, &GradCheckConfig::default(), |v| {
            let vars: Vec<ScanVars<f64>> = (0..4)
                .map(|k| {
                    let o = 1 + 7 * k;
                    ScanVars {
                        a_log: v[o],
                        d_skip: v[o + 1],
                        delta_down: v[o + 2],
                        delta_up: v[o + 3],
                        delta_bias: v[o + 4],
                        b_proj: v[o + 5],
                        c_proj: v[o + 6],
                    }
                })
                .collect();
            ss2d_forward(&vars, v[0], 4)?.mul(&v[29])?.sum()
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
