//! Central finite-difference check of the analytic sequence-loss gradients.

use crate::error::Result;
use crate::loss::sequence_gradients;
use crate::network::{Mat, ModelParams};
use crate::posterior::GridKind;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst parameter.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Parameters where both gradients are below the floor.
    pub exempt: usize,
}

/// Entries where both |analytic| and |numeric| fall below this are not compared.
pub const EXEMPT_FLOOR: f64 = 1e-8;

/// Compares every analytic partial derivative of `loss + mtl_weight * prior`
/// against `(L(p + eps) - L(p - eps)) / 2 eps`.
pub fn check_gradients(kind: GridKind, features: &Mat, params: &ModelParams, labels: &[usize], mtl_weight: f64, eps: f64) -> Result<GradCheckReport> {
    let analytic = sequence_gradients(kind, features, params, labels, mtl_weight)?.grads;
    let objective = |p: &ModelParams| -> Result<f64> {
        let acts = p.activations(features, labels)?;
        let grid = crate::posterior::grid_for(kind, p, features, labels)?;
        let nll = match kind {
            GridKind::Ctc => crate::loss::ctc_loss(&grid, labels)?.neg_log_posterior,
            _ => crate::loss::transducer_forward_backward(&grid, labels)?.neg_log_posterior,
        };
        let prior = if kind == GridKind::Ctc || mtl_weight == 0.0 { 0.0 } else { crate::loss::mtl_prior_loss(&acts.dec, labels, p)? };
        Ok(nll + mtl_weight * prior)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, exempt: 0 };
    let names: Vec<(String, usize)> = params.tensors().iter().map(|(n, _, v)| (n.clone(), v.len())).collect();
    let grads = analytic.grads.tensors();
    let mut probe = params.clone();
    for (ti, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let orig = probe.tensors_mut()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = orig + eps;
            let up = objective(&probe)?;
            probe.tensors_mut()[ti].1[i] = orig - eps;
            let down = objective(&probe)?;
            probe.tensors_mut()[ti].1[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[ti].2[i];
            if a.abs() < EXEMPT_FLOOR && numeric.abs() < EXEMPT_FLOOR {
                report.exempt += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(context: Option<usize>) -> (ModelParams, Mat) {
        let cfg = ModelConfig { num_labels: 3, input_dim: 3, embed_dim: 2, enc_hidden: 4, dec_hidden: 3, joint_dim: 4, init_scale: 0.5, seed: 47, context };
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = Mat { rows: 4, cols: 3, data: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect() };
        (params, x)
    }

    #[test]
    fn hat_gradients_match_finite_differences() {
        let (p, x) = instance(None);
        for mtl in [0.0, 0.1] {
            let r = check_gradients(GridKind::Hat, &x, &p, &[2, 1], mtl, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn rnnt_and_ctc_gradients_match_finite_differences() {
        let (p, x) = instance(None);
        let r = check_gradients(GridKind::Rnnt, &x, &p, &[3, 3], 0.1, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let r = check_gradients(GridKind::Ctc, &x, &p, &[3, 3], 0.0, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn table_decoder_gradients_match_finite_differences() {
        for c in [0, 1, 2] {
            let (p, x) = instance(Some(c));
            let r = check_gradients(GridKind::Hat, &x, &p, &[1, 3], 0.1, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-4, "c={c}: {r:?}");
        }
    }
}
