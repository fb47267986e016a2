//! Internal language model: the label distribution obtained by feeding the
//! decoder activation alone through the joint network, plus diagnostics on how
//! well the joint separates into encoder and decoder terms.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{HatError, Result};
use crate::network::{Activations, Mat, ModelParams};
use crate::numeric::{log_softmax, softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct IlmScore {
    /// `local[u]` is `P_ILM(. | y_{0:u})` over labels `1..=|V|`.
    pub local: Vec<Vec<f64>>,
    pub sequence_log_prob: f64,
}

fn check_dim(g: &[f64], params: &ModelParams) -> Result<()> {
    if g.len() != params.joint_dim() {
        return Err(HatError::Shape(format!("decoder vector of length {}, joint expects {}", g.len(), params.joint_dim())));
    }
    Ok(())
}

/// `softmax(J(g_u))`; takes no encoder input.
pub fn ilm_local(g: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    check_dim(g, params)?;
    Ok(softmax(&params.joint_scores(g)))
}

pub fn ilm_log_local(g: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    check_dim(g, params)?;
    Ok(log_softmax(&params.joint_scores(g)))
}

/// Label-only normalisation of the RNN-T joint with the encoder removed. The
/// joint scores exclude the blank logit, so this coincides with [`ilm_local`];
/// for RNN-T it is only an approximation of the internal LM.
pub fn rnnt_ilm_approx(g: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    ilm_local(g, params)
}

pub fn ilm_score(labels: &[usize], params: &ModelParams) -> Result<IlmScore> {
    params.alphabet().check_labels(labels)?;
    let dec = params.decode_labels(labels)?;
    let mut local = Vec::with_capacity(labels.len());
    let mut total = 0.0;
    for (u, &y) in labels.iter().enumerate() {
        let lp = ilm_log_local(dec.row(u), params)?;
        total += lp[y - 1];
        local.push(lp.iter().map(|v| v.exp()).collect());
    }
    Ok(IlmScore { local, sequence_log_prob: total })
}

/// `log P_ILM(Y)`.
pub fn ilm_sequence(labels: &[usize], params: &ModelParams) -> Result<f64> {
    Ok(ilm_score(labels, params)?.sequence_log_prob)
}

/// Mean of `-log P_ILM(Y)` over transcripts.
pub fn prior_cost(transcripts: &[Vec<usize>], params: &ModelParams) -> Result<f64> {
    if transcripts.is_empty() {
        return Err(HatError::Argument("prior cost of an empty dataset".into()));
    }
    let costs = transcripts.par_iter().map(|y| ilm_sequence(y, params).map(|v| -v)).collect::<Result<Vec<f64>>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Streaming per-dimension mean and variance (Welford) of joint inputs `f_t + g_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityStats {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

impl LinearityStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &LinearityStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    /// Population standard deviation per dimension.
    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|s| (s.max(0.0) / self.count as f64).sqrt()).collect()
    }

    /// Share of dimensions whose `mean +- std` interval lies inside `[-tau, tau]`.
    pub fn linear_range_fraction(&self, tau: f64) -> f64 {
        if self.mean.is_empty() {
            return 1.0;
        }
        let inside = self.mean.iter().zip(self.std()).filter(|(m, s)| (*m - s) >= -tau && (*m + s) <= tau).count();
        inside as f64 / self.mean.len() as f64
    }

    /// Per-dimension table and a summary line.
    pub fn to_tsv(&self, tau: f64, max_residual: Option<f64>) -> String {
        let mut out = String::from("dim\tmean\tstd\n");
        for (d, (m, s)) in self.mean.iter().zip(self.std()).enumerate() {
            writeln!(out, "{d}\t{m}\t{s}").unwrap();
        }
        write!(out, "# cells={}\ttau={tau}\tlinear_range_fraction={}", self.count, self.linear_range_fraction(tau)).unwrap();
        if let Some(r) = max_residual {
            write!(out, "\tmax_factorization_residual={r}").unwrap();
        }
        out.push('\n');
        out
    }
}

fn utterance_stats(features: &Mat, labels: &[usize], params: &ModelParams) -> Result<LinearityStats> {
    let acts = params.activations(features, labels)?;
    let mut stats = LinearityStats::new(params.joint_dim());
    let mut x = vec![0.0; params.joint_dim()];
    for t in 0..acts.enc.rows {
        for u in 0..acts.dec.rows {
            for ((xi, f), g) in x.iter_mut().zip(acts.enc.row(t)).zip(acts.dec.row(u)) {
                *xi = f + g;
            }
            stats.push(&x);
        }
    }
    Ok(stats)
}

/// Accumulates joint-input statistics over every lattice cell of every utterance.
pub fn linearity_stats(utterances: &[(&Mat, &[usize])], params: &ModelParams, tau: f64) -> Result<LinearityStats> {
    if utterances.is_empty() {
        return Err(HatError::Argument("linearity statistics of an empty dataset".into()));
    }
    if !(tau > 0.0) {
        return Err(HatError::Argument(format!("linear-range threshold must be positive, got {tau}")));
    }
    let parts = utterances.par_iter().map(|(x, y)| utterance_stats(x, y, params)).collect::<Result<Vec<_>>>()?;
    let mut total = LinearityStats::new(params.joint_dim());
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Largest violation, over frames, label pairs and decoder positions, of the
/// requirement that `log P_{t,u}(y) - log P_ILM,u(y)` differ across `y` only by
/// a term independent of `u`. Zero when the joint is additive.
pub fn factorization_residual(acts: &Activations, params: &ModelParams) -> Result<f64> {
    let d = params.joint_dim();
    if acts.enc.cols != d || acts.dec.cols != d {
        return Err(HatError::Shape(format!("activations {}x{} and {}x{}, joint dim {d}", acts.enc.rows, acts.enc.cols, acts.dec.rows, acts.dec.cols)));
    }
    let v = params.num_labels;
    let ilm: Vec<Vec<f64>> = (0..acts.dec.rows).map(|u| ilm_log_local(acts.dec.row(u), params)).collect::<Result<_>>()?;
    let mut worst: f64 = 0.0;
    for t in 0..acts.enc.rows {
        // r[u][y] = log P_{t,u}(y) - log ILM_u(y)
        let r: Vec<Vec<f64>> = (0..acts.dec.rows)
            .map(|u| {
                let x: Vec<f64> = acts.enc.row(t).iter().zip(acts.dec.row(u)).map(|(f, g)| f + g).collect();
                log_softmax(&params.joint_scores(&x)).iter().zip(&ilm[u]).map(|(p, q)| p - q).collect()
            })
            .collect();
        for y in 0..v {
            for y2 in y + 1..v {
                let diffs = r.iter().map(|ru| ru[y] - ru[y2]);
                let (lo, hi) = diffs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
                worst = worst.max(hi - lo);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{JointActivation, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(v: usize) -> ModelConfig {
        ModelConfig { num_labels: v, input_dim: 3, embed_dim: 3, enc_hidden: 4, dec_hidden: 4, joint_dim: 5, ..ModelConfig::default() }
    }

    fn random_features(seed: u64, frames: usize, dim: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat { rows: frames, cols: dim, data: (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn zero_decoder_gives_uniform() {
        let p = ModelParams::zeros(&cfg(4));
        let d = ilm_local(&[0.0; 5], &p).unwrap();
        assert!(d.iter().all(|x| (x - 0.25).abs() < 1e-15));
        assert!(ilm_local(&[0.0; 4], &p).is_err());
    }

    #[test]
    fn local_matches_direct_formula() {
        let p = ModelParams::init(&cfg(3)).unwrap();
        let g: [f64; 5] = [0.3, -0.2, 0.5, 0.1, -0.7];
        let scores: Vec<f64> = (0..3).map(|k| p.joint_out.row(k).iter().zip(&g).map(|(w, x)| w * x.tanh()).sum::<f64>() + p.joint_bias[k]).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for (a, s) in ilm_local(&g, &p).unwrap().iter().zip(&scores) {
            assert!((a - s.exp() / z).abs() < 1e-14);
        }
        assert_eq!(rnnt_ilm_approx(&g, &p).unwrap(), ilm_local(&g, &p).unwrap());
    }

    #[test]
    fn sequence_score_cases() {
        let zero = ModelParams::zeros(&cfg(4));
        assert_eq!(ilm_sequence(&[], &zero).unwrap(), 0.0);
        assert!((ilm_sequence(&[1, 2, 3], &zero).unwrap() + 3.0 * 4f64.ln()).abs() < 1e-14);
        assert!(matches!(ilm_sequence(&[5], &zero), Err(HatError::Vocabulary { .. })));

        let p = ModelParams::init(&cfg(3)).unwrap();
        let y = [2, 1, 3, 3];
        let s = ilm_score(&y, &p).unwrap();
        let dec = p.decode_labels(&y).unwrap();
        let recomposed: f64 = y.iter().enumerate().map(|(u, &l)| ilm_local(dec.row(u), &p).unwrap()[l - 1].ln()).sum();
        assert!((s.sequence_log_prob - recomposed).abs() < 1e-12);
        assert!(s.sequence_log_prob <= 0.0);
        for d in &s.local {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_cost_cases() {
        let zero = ModelParams::zeros(&cfg(4));
        assert_eq!(prior_cost(&[vec![]], &zero).unwrap(), 0.0);
        let ys = vec![vec![1], vec![1, 2, 3], vec![4, 4]];
        assert!((prior_cost(&ys, &zero).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-14);
        assert!(prior_cost(&[], &zero).is_err());
    }

    #[test]
    fn welford_hand_cases() {
        let mut s = LinearityStats::new(2);
        s.push(&[1.0, -3.0]);
        assert_eq!(s.std(), vec![0.0, 0.0]);
        assert_eq!(s.mean, vec![1.0, -3.0]);
        s.push(&[3.0, -3.0]);
        // two samples a, b: population variance (a - b)^2 / 4
        assert!((s.std()[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.mean, vec![2.0, -3.0]);
        assert_eq!(s.linear_range_fraction(1.0), 0.0);
        assert_eq!(s.linear_range_fraction(3.0), 1.0);
    }

    #[test]
    fn merge_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..37).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut all = LinearityStats::new(3);
        xs.iter().for_each(|x| all.push(x));
        let (mut a, mut b) = (LinearityStats::new(3), LinearityStats::new(3));
        xs[..11].iter().for_each(|x| a.push(x));
        xs[11..].iter().for_each(|x| b.push(x));
        a.merge(&b);
        assert_eq!(a.count, all.count);
        for i in 0..3 {
            assert!((a.mean[i] - all.mean[i]).abs() < 1e-12);
            assert!((a.std()[i] - all.std()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_is_fully_linear() {
        let zero = ModelParams::zeros(&cfg(3));
        let x = random_features(1, 4, 3);
        let y = [1usize, 2];
        let stats = linearity_stats(&[(&x, &y[..])], &zero, 1.0).unwrap();
        assert_eq!(stats.count, 12);
        assert!(stats.mean.iter().all(|m| *m == 0.0));
        assert_eq!(stats.linear_range_fraction(1.0), 1.0);
        assert!(linearity_stats(&[], &zero, 1.0).is_err());
        let tsv = stats.to_tsv(1.0, Some(0.0));
        assert!(tsv.starts_with("dim\tmean\tstd\n0\t0\t0\n"));
        assert!(tsv.ends_with("linear_range_fraction=1\tmax_factorization_residual=0\n"));
    }

    #[test]
    fn single_cell_mean_is_joint_input() {
        let p = ModelParams::init(&cfg(3)).unwrap();
        let x = random_features(2, 1, 3);
        let stats = linearity_stats(&[(&x, &[][..])], &p, 1.0).unwrap();
        let acts = p.activations(&x, &[]).unwrap();
        for d in 0..5 {
            assert_eq!(stats.mean[d], acts.enc.row(0)[d] + acts.dec.row(0)[d]);
        }
        assert!(stats.std().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn residual_vanishes_for_linear_joint() {
        for seed in 0..5 {
            let mut p = ModelParams::init(&ModelConfig { seed, init_scale: 0.8, ..cfg(3) }).unwrap();
            p.activation = JointActivation::Identity;
            let x = random_features(seed, 4, 3);
            let acts = p.activations(&x, &[1, 3, 2]).unwrap();
            assert!(factorization_residual(&acts, &p).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn residual_zero_when_decoder_constant() {
        let p = ModelParams::init(&ModelConfig { init_scale: 0.8, ..cfg(3) }).unwrap();
        let x = random_features(9, 3, 3);
        let mut acts = p.activations(&x, &[1, 2]).unwrap();
        acts.dec = Mat::zeros(3, 5);
        assert_eq!(factorization_residual(&acts, &p).unwrap(), 0.0);
    }

    #[test]
    fn saturated_tanh_breaks_factorization() {
        let mut p = ModelParams::init(&ModelConfig { init_scale: 0.8, ..cfg(3) }).unwrap();
        for v in p.enc_proj.data.iter_mut() {
            *v *= 40.0;
        }
        let x = random_features(4, 3, 3);
        let acts = p.activations(&x, &[2, 1]).unwrap();
        assert!(factorization_residual(&acts, &p).unwrap() > 1e-3);
    }
}
