use std::collections::BTreeMap;
use std::rc::Rc;

use super::{Result, TreeVecError};
use crate::data::EntityKind;
use crate::numerics::{SparseMatrix, Tape, Tensor, Var};
use crate::treegraph::TreeGraph;

/// `D^-1/2 (M + I) D^-1/2` with `D` the row sums of `M + I`.
pub fn gcn_normalize(m: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    if m.cols() != n {
        return Err(TreeVecError::NotSquare(m.rows(), m.cols()));
    }
    let mut edges = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let w = m.get(r, c);
            if w != 0.0 || w.is_nan() {
                edges.push((r, c, w));
            }
        }
    }
    Ok(gcn_normalize_sparse(n, &edges)?.to_dense())
}

/// Sparse form of [`gcn_normalize`] over `(row, col, weight)` entries.
pub fn gcn_normalize_sparse(n: usize, entries: &[(usize, usize, f64)]) -> Result<SparseMatrix> {
    let mut tilde: BTreeMap<(usize, usize), f64> = (0..n).map(|i| ((i, i), 1.0)).collect();
    for &(r, c, w) in entries {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(TreeVecError::NegativeAdjacency { row: r, col: c, value: w });
        }
        *tilde.entry((r, c)).or_insert(0.0) += w;
    }
    let mut deg = vec![0.0; n];
    for (&(r, _), &w) in &tilde {
        deg[r] += w;
    }
    let triplets: Vec<(usize, usize, f64)> = tilde
        .into_iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|((r, c), w)| (r, c, w / (deg[r] * deg[c]).sqrt()))
        .collect();
    Ok(SparseMatrix::from_triplets(n, n, &triplets)?)
}

/// Two propagation layers: `relu(A H0 W0)` then `A H1 W1`.
pub fn gcn_forward(tape: &mut Tape, a_hat: Rc<SparseMatrix>, h0: Var, w0: Var, w1: Var) -> Result<Var> {
    let ah0 = tape.spmm(a_hat.clone(), h0)?;
    let z0 = tape.matmul(ah0, w0)?;
    let h1 = tape.relu(z0);
    let z1 = tape.matmul(h1, w1)?;
    Ok(tape.spmm(a_hat, z1)?)
}

/// User vector as the sum of dish rows, plus one row per item node.
pub fn gcn_aggregate(tg: &TreeGraph, h: &Tensor) -> (Vec<f64>, BTreeMap<usize, Vec<f64>>) {
    let mut user = vec![0.0; h.cols()];
    let mut items = BTreeMap::new();
    for (pos, id) in tg.node_order.iter().enumerate() {
        match id.kind {
            EntityKind::Dish => user.iter_mut().zip(h.row(pos)).for_each(|(u, x)| *u += x),
            EntityKind::Item => {
                items.insert(id.index, h.row(pos).to_vec());
            }
            _ => {}
        }
    }
    (user, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_adjacency_normalizes_to_identity() {
        let a = gcn_normalize(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(a, Tensor::identity(4));
    }

    #[test]
    fn two_node_chain() {
        let m = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let a = gcn_normalize(&m).unwrap();
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert!((a.get(1, 0) - 0.70710678118654752).abs() < 1e-15);
        assert_eq!(a.get(1, 1), 0.5);
    }

    #[test]
    fn negative_entry_rejected() {
        let m = Tensor::matrix(2, 2, vec![0.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(matches!(gcn_normalize(&m), Err(TreeVecError::NegativeAdjacency { .. })));
    }

    #[test]
    fn identity_weights_without_edges_give_relu() {
        let x = Tensor::matrix(2, 2, vec![1.0, -2.0, -0.5, 3.0]).unwrap();
        let a = Rc::new(gcn_normalize_sparse(2, &[]).unwrap());
        let mut t = Tape::new();
        let h0 = t.leaf(x.clone());
        let w0 = t.leaf(Tensor::identity(2));
        let w1 = t.leaf(Tensor::identity(2));
        let out = gcn_forward(&mut t, a, h0, w0, w1).unwrap();
        assert_eq!(t.value(out), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn gcn_weight_gradient_matches_differences() {
        let m = Tensor::matrix(3, 3, vec![0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap();
        let a = Rc::new(SparseMatrix::from_dense(&gcn_normalize(&m).unwrap()));
        let x = Tensor::matrix(3, 2, vec![0.3, -0.2, 0.9, 0.4, -0.6, 0.7]).unwrap();
        let w1 = Tensor::matrix(3, 2, vec![0.2, -0.4, 0.5, 0.1, -0.3, 0.6]).unwrap();
        let readout = |w0: &Tensor| {
            let mut t = Tape::new();
            let (h0, w0v, w1v) = (t.leaf(x.clone()), t.leaf(w0.clone()), t.leaf(w1.clone()));
            let out = gcn_forward(&mut t, a.clone(), h0, w0v, w1v).unwrap();
            let sq = t.mul(out, out).unwrap();
            let s = t.sum(sq);
            let g = t.backward(s).get(w0v).unwrap().clone();
            (t.value(s).data()[0], g)
        };
        let w0 = Tensor::matrix(2, 3, vec![0.7, -0.1, 0.3, 0.2, 0.5, -0.8]).unwrap();
        let (_, g) = readout(&w0);
        let h = 1e-5;
        for k in 0..w0.len() {
            let mut p = w0.clone();
            p.data_mut()[k] += h;
            let mut q = w0.clone();
            q.data_mut()[k] -= h;
            let num = (readout(&p).0 - readout(&q).0) / (2.0 * h);
            let rel = (g.data()[k] - num).abs() / g.data()[k].abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-5, "coordinate {k}: {rel}");
        }
    }

    #[test]
    fn message_flow_is_top_down() {
        // dish 0 -> category 1 -> item 2
        let a = Rc::new(gcn_normalize_sparse(3, &[(1, 0, 1.0), (2, 1, 1.0)]).unwrap());
        let run = |x: Tensor| {
            let mut t = Tape::new();
            let h0 = t.leaf(x);
            let ah = t.spmm(a.clone(), h0).unwrap();
            let w = t.leaf(Tensor::identity(2));
            let z = t.matmul(ah, w).unwrap();
            let h1 = t.relu(z);
            t.value(h1).clone()
        };
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut y = x.clone();
        y.set(2, 0, 9.0);
        let (hx, hy) = (run(x), run(y));
        assert_eq!(hx.row(0), hy.row(0));
        assert_ne!(hx.row(2), hy.row(2));
    }

    fn brute(m: &Tensor) -> Tensor {
        let n = m.rows();
        let tilde = |i: usize, j: usize| m.get(i, j) + if i == j { 1.0 } else { 0.0 };
        let d: Vec<f64> = (0..n).map(|i| (0..n).map(|j| tilde(i, j)).sum()).collect();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, tilde(i, j) / (d[i] * d[j]).sqrt());
            }
        }
        out
    }

    fn lower(n: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..1.0], n * n).prop_map(move |mut v| {
            for r in 0..n {
                for c in r..n {
                    v[r * n + c] = 0.0;
                }
            }
            Tensor::matrix(n, n, v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn normalization_matches_brute_force(m in (1usize..=10).prop_flat_map(lower)) {
            let a = gcn_normalize(&m).unwrap();
            prop_assert!(a.max_abs_diff(&brute(&m)) <= 1e-12);
            let n = m.rows();
            for r in 0..n {
                for c in (r + 1)..n {
                    prop_assert_eq!(a.get(r, c), 0.0);
                }
            }
            let sym = brute(&m);
            let both = { let mut s = m.clone(); s.add_assign(&m.transpose()); s };
            let asym = gcn_normalize(&both).unwrap();
            prop_assert!(asym.max_abs_diff(&asym.transpose()) <= 1e-15);
            prop_assert!(sym.data().iter().all(|&x| x >= 0.0));
        }
    }
}
