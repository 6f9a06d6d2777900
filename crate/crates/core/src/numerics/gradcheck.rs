use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Result, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error with a small absolute floor so coordinates whose true
/// gradient is ~0 are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients to central differences on at most
/// `max_coords` coordinates sampled uniformly (seeded) across all slots.
///
/// `loss` returns the scalar loss and the gradient for every slot of the
/// store it is given.
pub fn grad_check<F>(params: &ParamStore, h: f64, max_coords: usize, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<Tensor>)>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_slots(params, &all, h, max_coords, seed, loss)
}

/// [`grad_check`] restricted to coordinates of the listed slots.
pub fn grad_check_slots<F>(
    params: &ParamStore,
    slots: &[usize],
    h: f64,
    max_coords: usize,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = loss(params)?;
    let offsets: Vec<usize> = slots
        .iter()
        .scan(0, |acc, &i| {
            let o = *acc;
            *acc += params.value(i).len();
            Some(o)
        })
        .collect();
    let total: usize = slots.iter().map(|&i| params.value(i).len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        sample(&mut rng, total, max_coords).into_vec()
    };
    picks.sort_unstable();

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: picks.len(),
        worst: None,
    };
    for flat in picks {
        let k = offsets.partition_point(|&o| o <= flat) - 1;
        let (slot, idx) = (slots[k], flat - offsets[k]);
        let orig = params.value(slot).data()[idx];
        probe.value_mut(slot).data_mut()[idx] = orig + h;
        let (up, _) = loss(&probe)?;
        probe.value_mut(slot).data_mut()[idx] = orig - h;
        let (down, _) = loss(&probe)?;
        probe.value_mut(slot).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[slot].data()[idx], numeric);
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err;
            report.worst = Some((params.name(slot).to_string(), idx));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn quadratic(store: &ParamStore) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let x = t.param(store, 0);
        let sq = t.mul(x, x)?;
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        let g = t.backward(half);
        Ok((t.value(half).data()[0], g.param_grads(&t, store)))
    }

    #[test]
    fn quadratic_loss() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::row_vector(vec![1.0, 2.0]));
        let (_, g) = quadratic(&s).unwrap();
        assert_eq!(g[0].data(), &[1.0, 2.0]);
        let r = grad_check(&s, 1e-5, 200, 0, quadratic).unwrap();
        assert_eq!(r.coords_checked, 2);
        assert!(r.max_relative_error < 1e-8, "{}", r.max_relative_error);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::row_vector(vec![3.0, -1.0, 0.5]));
        let r = grad_check(&s, 1e-5, 200, 0, |p| {
            let mut t = Tape::new();
            let x = t.param(p, 0);
            let z = t.scale(x, 0.0);
            let s = t.sum(z);
            let g = t.backward(s);
            let grads = g.param_grads(&t, p);
            assert!(grads[0].data().iter().all(|&v| v == 0.0));
            Ok((t.value(s).data()[0], grads))
        })
        .unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }
}
