//! Central finite-difference verification of analytic gradients.
//!
//! The driver owns the probing protocol; the caller supplies a single
//! closure that can nudge one parameter element and re-evaluate the loss.
//! Using one closure (instead of separate nudge/loss callbacks) lets the
//! caller capture its model mutably without aliasing.

use alloc::vec::Vec;

use rand::Rng;

use crate::mat::Mat;
use crate::rng;

/// Request issued to the caller's closure.
pub enum Probe {
    /// Add `delta` to element `elem` (row-major) of parameter tensor `tensor`.
    /// The closure's return value is ignored.
    Nudge { tensor: usize, elem: usize, delta: f64 },
    /// Recompute and return the scalar loss at the current parameters.
    Loss,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// Worst relative error over all probed elements.
    pub max_rel_err: f64,
    /// Number of elements probed.
    pub probes: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Relative error with a floor so near-zero gradient pairs compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Probes up to `probes_per_tensor` random elements of each parameter tensor,
/// compares central finite differences at step `h` against `analytic`, and
/// reports the worst relative error.
///
/// `analytic[t]` must have the shape listed in `shapes[t]`; pass a zero
/// matrix for parameters that legitimately receive no gradient.
pub fn check(
    shapes: &[(usize, usize)],
    analytic: &[Mat],
    probes_per_tensor: usize,
    h: f64,
    seed: u64,
    mut f: impl FnMut(Probe) -> f64,
) -> GradReport {
    assert_eq!(shapes.len(), analytic.len(), "gradcheck: shape/grad count mismatch");
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut rng = rng::stream(rng::derive_seed(seed, &[0x6fd]));
    for (t, &(r, c)) in shapes.iter().enumerate() {
        assert_eq!(analytic[t].shape(), (r, c), "gradcheck: grad {t} shape mismatch");
        let n = r * c;
        if n == 0 {
            continue;
        }
        let picks = probes_per_tensor.min(n);
        let mut chosen: Vec<usize> = Vec::with_capacity(picks);
        while chosen.len() < picks {
            let e = rng.gen_range(0..n);
            if !chosen.contains(&e) {
                chosen.push(e);
            }
        }
        for elem in chosen {
            f(Probe::Nudge { tensor: t, elem, delta: h });
            let up = f(Probe::Loss);
            f(Probe::Nudge { tensor: t, elem, delta: -2.0 * h });
            let down = f(Probe::Loss);
            f(Probe::Nudge { tensor: t, elem, delta: h });
            let fd = (up - down) / (2.0 * h);
            let an = analytic[t].data()[elem];
            let err = if fd.is_finite() && an.is_finite() { rel_err(fd, an) } else { f64::INFINITY };
            if err > worst {
                worst = err;
            }
            probes += 1;
        }
    }
    GradReport { max_rel_err: worst, probes }
}
