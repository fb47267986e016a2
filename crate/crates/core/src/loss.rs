//! Sequence losses marginalised over alignment paths, their gradients, and
//! brute-force oracles that sum path posteriors literally.
//!
//! Lattice cells are stored row-major as `t * (U + 1) + u` with 0-based frames.
//! `alpha[t][u]` is the log mass of all path prefixes reaching `(t, u)`;
//! `beta[t][u]` the log mass of all completions from `(t, u)` to `(T-1, U)`.

use crate::error::{HatError, Result};
use crate::lattice::{self, ctc_collapse, min_ctc_frames, LatticeDims, BLANK};
use crate::network::{Mat, ModelParams};
use crate::numeric::{compensated_sum, log_add, softmax, NEG_INF};
use crate::posterior::{ctc_grid, hat_grid, rnnt_grid, GridKind, LocalPosteriorGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// `-log P(Y|X)` in nats.
    pub neg_log_posterior: f64,
    pub frames: usize,
    pub rows: usize,
    pub alpha: Vec<f64>,
    pub beta: Option<Vec<f64>>,
}

impl LossResult {
    pub fn alpha_at(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.rows + u]
    }

    pub fn beta_at(&self, t: usize, u: usize) -> Option<f64> {
        self.beta.as_ref().map(|b| b[t * self.rows + u])
    }
}

fn check_transducer(grid: &LocalPosteriorGrid, kind: GridKind, labels: &[usize]) -> Result<()> {
    if grid.kind != kind {
        return Err(HatError::Argument(format!("expected a {} grid, got {}", kind.name(), grid.kind.name())));
    }
    if labels.len() + 1 != grid.rows {
        return Err(HatError::Shape(format!("{} labels for a grid with {} rows", labels.len(), grid.rows)));
    }
    if let Some(&id) = labels.iter().find(|&&y| y == 0 || y > grid.num_labels) {
        return Err(HatError::Vocabulary { id, size: grid.num_labels });
    }
    Ok(())
}

fn transducer_alpha(grid: &LocalPosteriorGrid, labels: &[usize]) -> Vec<f64> {
    let (frames, rows) = (grid.frames, grid.rows);
    let mut alpha = vec![NEG_INF; frames * rows];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..rows {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = NEG_INF;
            if t > 0 {
                a = alpha[(t - 1) * rows + u] + grid.edge_blank(t - 1, u);
            }
            if u > 0 {
                a = log_add(a, alpha[t * rows + u - 1] + grid.edge_label(t, u - 1, labels[u - 1]));
            }
            alpha[t * rows + u] = a;
        }
    }
    alpha
}

fn transducer_beta(grid: &LocalPosteriorGrid, labels: &[usize]) -> Vec<f64> {
    let (frames, rows) = (grid.frames, grid.rows);
    let mut beta = vec![NEG_INF; frames * rows];
    beta[frames * rows - 1] = 0.0;
    for t in (0..frames).rev() {
        for u in (0..rows).rev() {
            if t == frames - 1 && u == rows - 1 {
                continue;
            }
            let mut b = NEG_INF;
            if t + 1 < frames {
                b = beta[(t + 1) * rows + u] + grid.edge_blank(t, u);
            }
            if u + 1 < rows {
                b = log_add(b, beta[t * rows + u + 1] + grid.edge_label(t, u, labels[u]));
            }
            beta[t * rows + u] = b;
        }
    }
    beta
}

fn transducer_loss(grid: &LocalPosteriorGrid, kind: GridKind, labels: &[usize], with_beta: bool) -> Result<LossResult> {
    check_transducer(grid, kind, labels)?;
    let alpha = transducer_alpha(grid, labels);
    let total = alpha[alpha.len() - 1];
    if total.is_nan() {
        return Err(HatError::Numeric("forward recursion".into()));
    }
    Ok(LossResult {
        neg_log_posterior: -total,
        frames: grid.frames,
        rows: grid.rows,
        beta: with_beta.then(|| transducer_beta(grid, labels)),
        alpha,
    })
}

/// HAT sequence loss `-log P(Y|X)` by the forward recursion.
pub fn hat_loss(grid: &LocalPosteriorGrid, labels: &[usize]) -> Result<LossResult> {
    transducer_loss(grid, GridKind::Hat, labels, false)
}

pub fn rnnt_loss(grid: &LocalPosteriorGrid, labels: &[usize]) -> Result<LossResult> {
    transducer_loss(grid, GridKind::Rnnt, labels, false)
}

/// Forward and backward recursions for either transducer grid.
pub fn transducer_forward_backward(grid: &LocalPosteriorGrid, labels: &[usize]) -> Result<LossResult> {
    transducer_loss(grid, grid.kind, labels, true)
}

// ---- CTC ------------------------------------------------------------------------

/// Blank-augmented CTC state chain `<b> y1 <b> y2 ... <b>`.
fn ctc_states(labels: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(2 * labels.len() + 1);
    s.push(BLANK);
    for &y in labels {
        s.push(y);
        s.push(BLANK);
    }
    s
}

fn ctc_log_prob(grid: &LocalPosteriorGrid, t: usize, sym: usize) -> f64 {
    if sym == BLANK {
        grid.log_blank(t, 0)
    } else {
        grid.log_label(t, 0, sym)
    }
}

fn ctc_can_skip(states: &[usize], s: usize) -> bool {
    s >= 2 && states[s] != BLANK && states[s] != states[s - 2]
}

/// CTC result: `alpha`/`beta` are `T x (2U + 1)` over the augmented state chain.
pub fn ctc_loss(grid: &LocalPosteriorGrid, labels: &[usize]) -> Result<LossResult> {
    ctc_forward_backward(grid, labels, false)
}

pub fn ctc_forward_backward(grid: &LocalPosteriorGrid, labels: &[usize], with_beta: bool) -> Result<LossResult> {
    if grid.kind != GridKind::Ctc {
        return Err(HatError::Argument(format!("expected a ctc grid, got {}", grid.kind.name())));
    }
    if let Some(&id) = labels.iter().find(|&&y| y == 0 || y > grid.num_labels) {
        return Err(HatError::Vocabulary { id, size: grid.num_labels });
    }
    let need = min_ctc_frames(labels);
    if grid.frames < need {
        return Err(HatError::Infeasible(format!("{} frames cannot carry {} labels (need {need})", grid.frames, labels.len())));
    }
    let states = ctc_states(labels);
    let n = states.len();
    let frames = grid.frames;
    let mut alpha = vec![NEG_INF; frames * n];
    alpha[0] = ctc_log_prob(grid, 0, states[0]);
    if n > 1 {
        alpha[1] = ctc_log_prob(grid, 0, states[1]);
    }
    for t in 1..frames {
        for s in 0..n {
            let mut a = alpha[(t - 1) * n + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * n + s - 1]);
            }
            if ctc_can_skip(&states, s) {
                a = log_add(a, alpha[(t - 1) * n + s - 2]);
            }
            alpha[t * n + s] = a + ctc_log_prob(grid, t, states[s]);
        }
    }
    let last = (frames - 1) * n;
    let total = if n > 1 { log_add(alpha[last + n - 1], alpha[last + n - 2]) } else { alpha[last] };
    let beta = with_beta.then(|| {
        // beta excludes the emission at t
        let mut beta = vec![NEG_INF; frames * n];
        beta[last + n - 1] = 0.0;
        if n > 1 {
            beta[last + n - 2] = 0.0;
        }
        for t in (0..frames - 1).rev() {
            for s in 0..n {
                let next = |s2: usize| beta[(t + 1) * n + s2] + ctc_log_prob(grid, t + 1, states[s2]);
                let mut b = next(s);
                if s + 1 < n {
                    b = log_add(b, next(s + 1));
                }
                if s + 2 < n && ctc_can_skip(&states, s + 2) {
                    b = log_add(b, next(s + 2));
                }
                beta[t * n + s] = b;
            }
        }
        beta
    });
    Ok(LossResult { neg_log_posterior: -total, frames, rows: n, alpha, beta })
}

// ---- brute-force oracles ------------------------------------------------------

/// Literal marginalisation: enumerates every alignment path and sums the path
/// posteriors in the probability domain with compensated summation.
pub fn brute_force_loss(grid: &LocalPosteriorGrid, labels: &[usize], cap: usize) -> Result<f64> {
    if grid.kind == GridKind::Ctc {
        return brute_force_ctc_loss(grid, labels, lattice::DEFAULT_CTC_CAP.min(cap));
    }
    check_transducer(grid, grid.kind, labels)?;
    let dims = LatticeDims::new(grid.frames, labels.len())?;
    let paths = lattice::enumerate_paths(dims, labels, cap)?;
    let probs = paths.iter().map(|path| {
        let (mut t, mut u) = (0usize, 0usize);
        let mut p = 1.0;
        for &e in &path.edges {
            if e == BLANK {
                p *= grid.edge_blank(t, u).exp();
                t += 1;
            } else {
                p *= grid.edge_label(t, u, e).exp();
                u += 1;
            }
        }
        p
    });
    Ok(-compensated_sum(probs).ln())
}

pub fn brute_force_ctc_loss(grid: &LocalPosteriorGrid, labels: &[usize], cap: usize) -> Result<f64> {
    let paths = lattice::enumerate_ctc_paths(grid.frames, labels, cap)?;
    let probs = paths.iter().map(|seq| {
        debug_assert_eq!(ctc_collapse(seq), labels);
        seq.iter().enumerate().map(|(t, &s)| ctc_log_prob(grid, t, s).exp()).product::<f64>()
    });
    Ok(-compensated_sum(probs).ln())
}

/// Total posterior mass of all label sequences of each length `0..=max_len`,
/// computed by brute force over `|V|^U` sequences.
///
/// Returns `(mass, terminal_mass)` per length, where `terminal_mass` weights each
/// `P(Y|X)` by the blank probability at the final node `(T, U)`.
pub fn label_mass_by_length(kind: GridKind, params: &ModelParams, features: &Mat, max_len: usize) -> Result<Vec<(f64, f64)>> {
    let v = params.num_labels;
    let mut out = Vec::with_capacity(max_len + 1);
    for len in 0..=max_len {
        let mut mass = Vec::new();
        let mut terminal = Vec::new();
        for code in 0..v.pow(len as u32) {
            let mut c = code;
            let labels: Vec<usize> = (0..len)
                .map(|_| {
                    let y = c % v + 1;
                    c /= v;
                    y
                })
                .collect();
            let acts = params.activations(features, &labels)?;
            let grid = match kind {
                GridKind::Hat => hat_grid(&acts, params)?,
                GridKind::Rnnt => rnnt_grid(&acts, params)?,
                GridKind::Ctc => return Err(HatError::Argument("label mass is defined for transducers".into())),
            };
            let p = (-transducer_loss(&grid, kind, &labels, false)?.neg_log_posterior).exp();
            mass.push(p);
            terminal.push(p * grid.log_blank(grid.frames - 1, len).exp());
        }
        out.push((compensated_sum(mass), compensated_sum(terminal)));
    }
    Ok(out)
}

// ---- gradients ---------------------------------------------------------------------

/// Gradient buffers with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: ModelParams,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let mut grads = params.clone();
        for (_, v) in grads.tensors_mut() {
            v.fill(0.0);
        }
        Self { grads }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &GradientSet) {
        let theirs = other.grads.tensors();
        for ((_, mine), (_, _, src)) in self.grads.tensors_mut().into_iter().zip(theirs) {
            for (m, s) in mine.iter_mut().zip(src) {
                *m += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, v) in self.grads.tensors_mut() {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.tensors().iter().flat_map(|(_, _, v)| v.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, _, v) in self.grads.tensors() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(HatError::Numeric(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

/// Everything one training example contributes.
#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: LossResult,
    /// `-log P_ILM(Y)` under the current decoder (zero for CTC).
    pub prior_cost: f64,
    /// `neg_log_posterior + mtl_weight * prior_cost`.
    pub objective: f64,
    pub grads: GradientSet,
}

/// `-sum_u log P_ILM(y_{u+1} | y_{0:u})` from decoder rows `g_0..g_{U-1}`.
pub fn mtl_prior_loss(dec: &Mat, labels: &[usize], params: &ModelParams) -> Result<f64> {
    if dec.rows != labels.len() + 1 || dec.cols != params.joint_dim() {
        return Err(HatError::Shape(format!("decoder activations {}x{} for {} labels", dec.rows, dec.cols, labels.len())));
    }
    params.alphabet().check_labels(labels)?;
    let mut total = 0.0;
    for (u, &y) in labels.iter().enumerate() {
        total -= crate::ilm::ilm_log_local(dec.row(u), params)?[y - 1];
    }
    Ok(total)
}

/// HAT loss and exact gradients of `-log P(Y|X)` (plus `mtl_weight` times the
/// internal-LM prior cost) with respect to every parameter.
pub fn hat_gradients(features: &Mat, params: &ModelParams, labels: &[usize], mtl_weight: f64) -> Result<(LossResult, GradientSet)> {
    let out = sequence_gradients(GridKind::Hat, features, params, labels, mtl_weight)?;
    Ok((out.loss, out.grads))
}

pub fn sequence_gradients(kind: GridKind, features: &Mat, params: &ModelParams, labels: &[usize], mtl_weight: f64) -> Result<GradientOutput> {
    params.alphabet().check_labels(labels)?;
    let (enc, enc_trace) = params.encode_trace(features)?;
    let mut grads = GradientSet::zeros_like(params);
    let g = &mut grads.grads;
    let mut d_enc = Mat::zeros(enc.rows, enc.cols);

    let (loss, prior_cost) = if kind == GridKind::Ctc {
        let grid = ctc_grid(&enc, params)?;
        let loss = ctc_forward_backward(&grid, labels, true)?;
        if !loss.neg_log_posterior.is_finite() {
            return Err(HatError::Numeric("ctc loss".into()));
        }
        ctc_backward(&grid, &loss, labels, &enc, params, g, &mut d_enc);
        (loss, 0.0)
    } else {
        let (dec, dec_trace) = params.decode_trace(labels)?;
        let acts = crate::network::Activations { enc: enc.clone(), dec };
        let grid = if kind == GridKind::Hat { hat_grid(&acts, params)? } else { rnnt_grid(&acts, params)? };
        let loss = transducer_loss(&grid, kind, labels, true)?;
        if !loss.neg_log_posterior.is_finite() {
            return Err(HatError::Numeric(format!("{} loss", kind.name())));
        }
        let mut d_dec = Mat::zeros(acts.dec.rows, acts.dec.cols);
        transducer_backward(&grid, &loss, labels, &acts, params, g, &mut d_enc, &mut d_dec);
        let prior_cost = mtl_prior_loss(&acts.dec, labels, params)?;
        if mtl_weight != 0.0 {
            for (u, &y) in labels.iter().enumerate() {
                let x = acts.dec.row(u);
                let mut ds = softmax(&params.joint_scores(x));
                ds[y - 1] -= 1.0;
                ds.iter_mut().for_each(|v| *v *= mtl_weight);
                params.backward_joint(x, &ds, g, d_dec.row_mut(u));
            }
        }
        params.backward_decoder(&dec_trace, &d_dec, g);
        (loss, prior_cost)
    };
    params.backward_encoder(features, &enc_trace, &d_enc, g);
    grads.check_finite()?;
    let objective = loss.neg_log_posterior + mtl_weight * prior_cost;
    Ok(GradientOutput { loss, prior_cost, objective, grads })
}

#[allow(clippy::too_many_arguments)]
fn transducer_backward(
    grid: &LocalPosteriorGrid,
    loss: &LossResult,
    labels: &[usize],
    acts: &crate::network::Activations,
    params: &ModelParams,
    g: &mut ModelParams,
    d_enc: &mut Mat,
    d_dec: &mut Mat,
) {
    let beta = loss.beta.as_ref().expect("backward needs beta");
    let (frames, rows) = (grid.frames, grid.rows);
    let log_z = -loss.neg_log_posterior;
    let v = grid.num_labels;
    for t in 0..frames {
        for u in 0..rows {
            let a = loss.alpha[t * rows + u];
            if a == NEG_INF {
                continue;
            }
            // occupancy of the horizontal and vertical edges leaving (t, u)
            let gh = if t + 1 < frames { (a + grid.edge_blank(t, u) + beta[(t + 1) * rows + u] - log_z).exp() } else { 0.0 };
            let gv = if u + 1 < rows {
                (a + grid.edge_label(t, u, labels[u]) + beta[t * rows + u + 1] - log_z).exp()
            } else {
                0.0
            };
            if gh == 0.0 && gv == 0.0 {
                continue;
            }
            let x: Vec<f64> = acts.enc.row(t).iter().zip(acts.dec.row(u)).map(|(f, g)| f + g).collect();
            let mut dx = vec![0.0; x.len()];
            let (dz, mut ds): (f64, Vec<f64>) = match grid.kind {
                GridKind::Hat => {
                    let b = grid.log_blank(t, u).exp();
                    let dz = -gh * (1.0 - b) + gv * b;
                    let ds = (1..=v).map(|y| gv * grid.log_label(t, u, y).exp()).collect();
                    (dz, ds)
                }
                _ => {
                    let occ = gh + gv;
                    let dz = occ * grid.log_blank(t, u).exp() - gh;
                    let ds = (1..=v).map(|y| occ * grid.log_label(t, u, y).exp()).collect();
                    (dz, ds)
                }
            };
            if u + 1 < rows {
                ds[labels[u] - 1] -= gv;
            }
            params.backward_blank(&x, dz, g, &mut dx);
            params.backward_joint(&x, &ds, g, &mut dx);
            crate::network::axpy(1.0, &dx, d_enc.row_mut(t));
            crate::network::axpy(1.0, &dx, d_dec.row_mut(u));
        }
    }
}

fn ctc_backward(grid: &LocalPosteriorGrid, loss: &LossResult, labels: &[usize], enc: &Mat, params: &ModelParams, g: &mut ModelParams, d_enc: &mut Mat) {
    let beta = loss.beta.as_ref().expect("backward needs beta");
    let states = ctc_states(labels);
    let n = states.len();
    let log_z = -loss.neg_log_posterior;
    let v = grid.num_labels;
    for t in 0..grid.frames {
        let mut occ = vec![0.0; v + 1];
        for (s, &sym) in states.iter().enumerate() {
            let lp = loss.alpha[t * n + s] + beta[t * n + s] - log_z;
            if lp > NEG_INF {
                occ[sym] += lp.exp();
            }
        }
        let x = enc.row(t);
        let dz = grid.log_blank(t, 0).exp() - occ[0];
        let ds: Vec<f64> = (1..=v).map(|y| grid.log_label(t, 0, y).exp() - occ[y]).collect();
        let mut dx = vec![0.0; x.len()];
        params.backward_blank(x, dz, g, &mut dx);
        params.backward_joint(x, &ds, g, &mut dx);
        crate::network::axpy(1.0, &dx, d_enc.row_mut(t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::DEFAULT_PATH_CAP;
    use crate::network::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hat_grid(rng: &mut ChaCha8Rng, frames: usize, rows: usize, v: usize) -> LocalPosteriorGrid {
        let blank: Vec<f64> = (0..frames * rows).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scores: Vec<f64> = (0..frames * rows * v).map(|_| rng.random_range(-3.0..3.0)).collect();
        LocalPosteriorGrid::hat_from_logits(frames, rows, v, &blank, &scores).unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, len: usize, v: usize) -> Vec<usize> {
        (0..len).map(|_| rng.random_range(1..=v)).collect()
    }

    #[test]
    fn single_node_lattice_has_zero_loss() {
        let g = LocalPosteriorGrid::from_probabilities(GridKind::Hat, &[vec![0.3]], &[vec![vec![0.5, 0.5]]]).unwrap();
        assert_eq!(hat_loss(&g, &[]).unwrap().neg_log_posterior, 0.0);
        assert_eq!(brute_force_loss(&g, &[], DEFAULT_PATH_CAP).unwrap(), 0.0);
        let r = LocalPosteriorGrid::from_probabilities(GridKind::Rnnt, &[vec![0.3]], &[vec![vec![0.35, 0.35]]]).unwrap();
        assert_eq!(rnnt_loss(&r, &[]).unwrap().neg_log_posterior, 0.0);
    }

    /// T=2, U=1: the two paths written out by hand.
    #[test]
    fn hat_two_path_closed_form() {
        let b = [[0.3, 0.6], [0.8, 0.4]]; // b[t][u]
        let p = [[[0.2, 0.8], [0.5, 0.5]], [[0.7, 0.3], [0.1, 0.9]]]; // P[t][u][y]
        let grid = LocalPosteriorGrid::from_probabilities(
            GridKind::Hat,
            &b.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            &p.iter().map(|r| r.iter().map(|c| c.to_vec()).collect()).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = 1; // label id 1 -> index 0
        let expected = -((1.0 - b[0][0]) * p[0][0][a - 1] * b[0][1] + b[0][0] * (1.0 - b[1][0]) * p[1][0][a - 1]).ln();
        let got = hat_loss(&grid, &[a]).unwrap().neg_log_posterior;
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn rnnt_uniform_two_paths() {
        for v in 1..5usize {
            let q = 1.0 / (v as f64 + 1.0);
            let grid = LocalPosteriorGrid::from_probabilities(GridKind::Rnnt, &vec![vec![q; 2]; 2], &vec![vec![vec![q; v]; 2]; 2]).unwrap();
            let got = rnnt_loss(&grid, &[1]).unwrap().neg_log_posterior;
            assert!((got + (2.0 * q * q).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn ctc_small_closed_forms() {
        let frames = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]; // [blank, a, b] per frame
        let grid = LocalPosteriorGrid::from_probabilities(
            GridKind::Ctc,
            &frames.iter().map(|f| vec![f[0]]).collect::<Vec<_>>(),
            &frames.iter().map(|f| vec![f[1..].to_vec()]).collect::<Vec<_>>(),
        )
        .unwrap();
        let one = LocalPosteriorGrid::from_probabilities(GridKind::Ctc, &[vec![0.2]], &[vec![vec![0.5, 0.3]]]).unwrap();
        assert!((ctc_loss(&one, &[1]).unwrap().neg_log_posterior + 0.5f64.ln()).abs() < 1e-14);
        let (p1a, p1b, p2a, p2b): (f64, f64, f64, f64) = (0.5, 0.2, 0.1, 0.6);
        let expected = -(p1a * p2a + p1a * p2b + p1b * p2a).ln();
        assert!((ctc_loss(&grid, &[1]).unwrap().neg_log_posterior - expected).abs() < 1e-14);
        assert!(matches!(ctc_loss(&grid, &[1, 1]), Err(HatError::Infeasible(_))));
    }

    #[test]
    fn forward_matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..200 {
            let frames = rng.random_range(1..=5);
            let u = rng.random_range(0..=3);
            let v = rng.random_range(1..=4);
            let labels = random_labels(&mut rng, u, v);
            let grid = random_hat_grid(&mut rng, frames, u + 1, v);
            let fwd = hat_loss(&grid, &labels).unwrap().neg_log_posterior;
            let brute = brute_force_loss(&grid, &labels, DEFAULT_PATH_CAP).unwrap();
            assert!((fwd - brute).abs() <= 1e-8, "T={frames} U={u}: {fwd} vs {brute}");

            let logits: Vec<f64> = (0..frames * (u + 1) * (v + 1)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rg = LocalPosteriorGrid::joint_softmax_from_logits(GridKind::Rnnt, frames, u + 1, v, &logits).unwrap();
            let fwd = rnnt_loss(&rg, &labels).unwrap().neg_log_posterior;
            let brute = brute_force_loss(&rg, &labels, DEFAULT_PATH_CAP).unwrap();
            assert!((fwd - brute).abs() <= 1e-8);
        }
    }

    #[test]
    fn ctc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let frames = rng.random_range(1..=8);
            let v = rng.random_range(1..=3);
            let u = rng.random_range(0..=frames.min(3));
            let labels = random_labels(&mut rng, u, v);
            let logits: Vec<f64> = (0..frames * (v + 1)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let grid = LocalPosteriorGrid::joint_softmax_from_logits(GridKind::Ctc, frames, 1, v, &logits).unwrap();
            match ctc_loss(&grid, &labels) {
                Ok(l) => {
                    let brute = brute_force_ctc_loss(&grid, &labels, 12).unwrap();
                    assert!((l.neg_log_posterior - brute).abs() <= 1e-8);
                }
                Err(HatError::Infeasible(_)) => {
                    assert!(lattice::enumerate_ctc_paths(frames, &labels, 12).unwrap().is_empty());
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn anti_diagonal_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let frames = rng.random_range(1..=6);
            let u = rng.random_range(0..=4);
            let labels = random_labels(&mut rng, u, 3);
            let grid = random_hat_grid(&mut rng, frames, u + 1, 3);
            let res = transducer_forward_backward(&grid, &labels).unwrap();
            let total = -res.neg_log_posterior;
            assert_eq!(res.alpha_at(0, 0), 0.0);
            assert!((res.beta_at(0, 0).unwrap() - total).abs() < 1e-9);
            for k in 0..frames + u {
                let mut acc = NEG_INF;
                for t in 0..frames {
                    if k >= t && k - t <= u {
                        acc = log_add(acc, res.alpha_at(t, k - t) + res.beta_at(t, k - t).unwrap());
                    }
                }
                assert!((acc - total).abs() < 1e-9, "diagonal {k}");
            }
        }
    }

    #[test]
    fn deterministic_blank_grid() {
        let g = LocalPosteriorGrid::from_probabilities(GridKind::Hat, &vec![vec![1.0; 2]; 3], &vec![vec![vec![0.5, 0.5]; 2]; 3]).unwrap();
        assert_eq!(brute_force_loss(&g, &[1], DEFAULT_PATH_CAP).unwrap(), f64::INFINITY);
        assert_eq!(hat_loss(&g, &[1]).unwrap().neg_log_posterior, f64::INFINITY);
        let g0 = LocalPosteriorGrid::from_probabilities(GridKind::Hat, &vec![vec![1.0]; 3], &vec![vec![vec![0.5, 0.5]]; 3]).unwrap();
        assert_eq!(brute_force_loss(&g0, &[], DEFAULT_PATH_CAP).unwrap(), 0.0);
    }

    #[test]
    fn shape_and_kind_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_hat_grid(&mut rng, 2, 2, 2);
        assert!(hat_loss(&g, &[1, 2]).is_err());
        assert!(rnnt_loss(&g, &[1]).is_err());
        assert!(matches!(hat_loss(&g, &[3]), Err(HatError::Vocabulary { .. })));
    }

    fn small_model(seed: u64) -> (ModelParams, Mat) {
        let cfg = ModelConfig { num_labels: 2, input_dim: 3, embed_dim: 2, enc_hidden: 3, dec_hidden: 3, joint_dim: 4, init_scale: 0.5, seed, context: None };
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = Mat { rows: 3, cols: 3, data: (0..9).map(|_| rng.random_range(-1.0..1.0)).collect() };
        (params, x)
    }

    /// With no terminal blank edge the label-sequence mass is not capped at one,
    /// but it grows with the length bound; weighting by the final blank restores
    /// a proper distribution.
    #[test]
    fn label_mass_behaviour() {
        for seed in 0..3 {
            let (params, x) = small_model(seed);
            let per_len = label_mass_by_length(GridKind::Hat, &params, &x, 3).unwrap();
            let mut cum = 0.0;
            let mut cum_terminal = 0.0;
            for &(m, mt) in &per_len {
                assert!(m >= 0.0);
                cum += m;
                cum_terminal += mt;
                assert!(cum_terminal <= 1.0 + 1e-9);
            }
            assert!((per_len[0].0 - (-hat_loss(&hat_grid(&params.activations(&x, &[]).unwrap(), &params).unwrap(), &[]).unwrap().neg_log_posterior).exp()).abs() < 1e-12);
            assert!(cum > per_len[0].0);
        }
        // the plain mass exceeds one: T=1, b=0.5 gives P(empty)=1 and P(|Y|=1)=0.5
        let params = ModelParams::zeros(&ModelConfig { num_labels: 2, input_dim: 3, embed_dim: 2, enc_hidden: 3, dec_hidden: 3, joint_dim: 4, ..ModelConfig::default() });
        let x = Mat::zeros(1, 3);
        let per_len = label_mass_by_length(GridKind::Hat, &params, &x, 1).unwrap();
        assert!((per_len[0].0 - 1.0).abs() < 1e-15);
        assert!((per_len[1].0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mtl_prior_loss_cases() {
        let cfg = ModelConfig { num_labels: 4, input_dim: 2, embed_dim: 2, enc_hidden: 2, dec_hidden: 2, joint_dim: 3, ..ModelConfig::default() };
        let zero = ModelParams::zeros(&cfg);
        let dec = zero.decode_labels(&[1, 2, 3]).unwrap();
        assert!((mtl_prior_loss(&dec, &[1, 2, 3], &zero).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-14);

        // one label, ILM peaked at it with probability 0.9
        let mut peaked = ModelParams::zeros(&ModelConfig { num_labels: 2, ..cfg.clone() });
        peaked.joint_bias = vec![0.9f64.ln(), 0.1f64.ln()];
        let dec = peaked.decode_labels(&[1]).unwrap();
        assert!((mtl_prior_loss(&dec, &[1], &peaked).unwrap() + 0.9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_feature_dimension_gets_zero_input_gradient() {
        let (params, mut x) = small_model(47);
        for t in 0..x.rows {
            x.row_mut(t)[1] = 0.0;
        }
        let (_, grads) = hat_gradients(&x, &params, &[1, 2], 0.0).unwrap();
        let w = &grads.grads.encoder.w_x;
        for i in 0..w.rows {
            assert_eq!(w.row(i)[1], 0.0);
        }
    }

    /// Hand-built 2x1 HAT model: the blank-bias gradient sign matches the sign of
    /// d log P / d bias from the two-path formula.
    #[test]
    fn blank_bias_gradient_sign() {
        use crate::numeric::sigmoid;
        let cfg = ModelConfig { num_labels: 2, input_dim: 1, embed_dim: 1, enc_hidden: 1, dec_hidden: 1, joint_dim: 1, ..ModelConfig::default() };
        for bias in [-2.0, -0.5, 0.0, 0.7, 2.5] {
            let mut params = ModelParams::zeros(&cfg);
            params.blank_bias = bias;
            params.joint_bias = vec![0.4, -0.4];
            let x = Mat::zeros(2, 1);
            let (_, grads) = hat_gradients(&x, &params, &[1], 0.0).unwrap();
            // every cell has b = sigmoid(bias), P(a) = softmax([0.4,-0.4])[0]; P(Y) = 2 b (1-b) P(a)
            let b = sigmoid(bias);
            let dlogp = (1.0 - 2.0 * b) / (b * (1.0 - b)) * b * (1.0 - b);
            let g = grads.grads.blank_bias;
            assert!((g + dlogp).abs() < 1e-12, "bias {bias}: {g} vs {}", -dlogp);
        }
    }
}
