//! Central finite differences against the analytic backward pass.
//!
//! The numeric side only ever calls the forward path, so it stays an
//! independent oracle for the reverse-mode engine. Checks run in 64-bit;
//! the default step is 1e-4.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::params::{GradStore, ParamId, ParamRegistry};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative error with an absolute floor: `|a - n| / max(|a|, |n|, floor)`.
/// The floor keeps near-zero gradients from inflating the ratio past what
/// central differences can resolve.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A single probe site: one element of one registered parameter.
pub type Probe = (ParamId, usize);

pub fn all_probes(registry: &ParamRegistry<f64>) -> Vec<Probe> {
    registry
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |j| (id, j)))
        .collect()
}

pub fn sample_probes(
    registry: &ParamRegistry<f64>,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<Probe> {
    let mut probes = all_probes(registry);
    probes.shuffle(rng);
    probes.truncate(count);
    probes
}

/// Central difference of `loss` at each probe.
pub fn finite_difference<F>(
    registry: &mut ParamRegistry<f64>,
    probes: &[Probe],
    step: f64,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamRegistry<f64>) -> Result<f64>,
{
    let mut out = Vec::with_capacity(probes.len());
    for &(id, j) in probes {
        let orig = registry.get(id).data()[j];
        registry.get_mut(id).data_mut()[j] = orig + step;
        let plus = loss(registry)?;
        registry.get_mut(id).data_mut()[j] = orig - step;
        let minus = loss(registry)?;
        registry.get_mut(id).data_mut()[j] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Parameter name and element index of the worst probe.
    pub worst: Option<(String, usize)>,
}

/// Compare analytic gradients against central differences over the given
/// probes. `floor` is the relative-error denominator floor (1e-3 works for
/// losses of order one).
pub fn compare<F>(
    registry: &mut ParamRegistry<f64>,
    grads: &GradStore<f64>,
    probes: &[Probe],
    step: f64,
    floor: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamRegistry<f64>) -> Result<f64>,
{
    let numeric = finite_difference(registry, probes, step, loss)?;
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for (&(id, j), &num) in probes.iter().zip(&numeric) {
        let analytic = grads.get(id).map_or(0.0, |g| g[j]);
        let rel = relative_error(analytic, num, floor);
        if rel >= max_rel_err {
            max_rel_err = rel;
            worst = Some((registry.name(id).to_string(), j));
        }
    }
    Ok(GradCheckReport {
        probes: probes.len(),
        max_rel_err,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Session;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn quadratic_gradient_matches_finite_difference() {
        let mut reg = ParamRegistry::<f64>::new();
        let x = reg.add("x", Tensor::from_f64(&[3], &[0.5, -1.25, 2.0]).unwrap());

        let loss = |reg: &ParamRegistry<f64>| {
            let mut sess = Session::new(reg, false);
            let xv = sess.param(x);
            let sq = sess.graph.mul(xv, xv)?;
            let l = sess.graph.sum(sq);
            sess.graph.value(l).item()
        };

        let mut sess = Session::new(&reg, true);
        let xv = sess.param(x);
        let sq = sess.graph.mul(xv, xv).unwrap();
        let l = sess.graph.sum(sq);
        let grads = sess.backward(l).unwrap();

        let probes = all_probes(&reg);
        let report = compare(&mut reg, &grads, &probes, DEFAULT_STEP, 1e-3, loss).unwrap();
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.add("a", Tensor::zeros(&[10]));
        reg.add("b", Tensor::zeros(&[7]));
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        assert_eq!(sample_probes(&reg, 6, &mut r1), sample_probes(&reg, 6, &mut r2));
    }
}
