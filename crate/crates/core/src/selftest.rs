//! Oracle and property suites shared by the `selftest` command and the
//! acceptance tests. Each suite returns pass/fail records whose text depends
//! only on the seeds, so reports are reproducible byte for byte.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{beam_decode_fused, beam_decode_hat, exhaustive_decode, exhaustive_decode_fused, DecodeConfig, ExhaustiveCaps};
use crate::error::{HatError, Result};
use crate::gradcheck::check_gradients;
use crate::lattice::{enumerate_ctc_paths, Alphabet, DEFAULT_PATH_CAP};
use crate::loss::{brute_force_ctc_loss, brute_force_loss, ctc_loss, hat_loss, rnnt_loss};
use crate::network::{JointActivation, Mat, ModelConfig, ModelParams};
use crate::ngram::{train_ngram, NGramModel};
use crate::numeric::softmax;
use crate::posterior::{grid_for, GridKind};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{}\t{}\t{}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random_model(rng: &mut ChaCha8Rng, v: usize, frames: usize) -> (ModelParams, Mat) {
    let cfg = ModelConfig { num_labels: v, input_dim: 3, embed_dim: 2, enc_hidden: 4, dec_hidden: 3, joint_dim: 4, init_scale: 1.0, seed: rng.random(), context: None };
    let params = ModelParams::init(&cfg).expect("valid small config");
    let x = Mat { rows: frames, cols: 3, data: (0..frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect() };
    (params, x)
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize, v: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(1..=v)).collect()
}

/// Forward-algorithm losses against explicit path enumeration on random
/// models: HAT and RNN-T with T <= 5, U <= 3, |V| <= 4; CTC with T <= 8.
pub fn marginalization(models: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hat_err, mut rnnt_err, mut ctc_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut infeasible_ok = true;
    for _ in 0..models {
        let v = rng.random_range(1..=4);
        let frames = rng.random_range(1..=5);
        let (params, x) = random_model(&mut rng, v, frames);
        let len = rng.random_range(0..=3);
        let labels = random_labels(&mut rng, len, v);
        let grid = grid_for(GridKind::Hat, &params, &x, &labels)?;
        hat_err = hat_err.max((hat_loss(&grid, &labels)?.neg_log_posterior - brute_force_loss(&grid, &labels, DEFAULT_PATH_CAP)?).abs());
        let grid = grid_for(GridKind::Rnnt, &params, &x, &labels)?;
        rnnt_err = rnnt_err.max((rnnt_loss(&grid, &labels)?.neg_log_posterior - brute_force_loss(&grid, &labels, DEFAULT_PATH_CAP)?).abs());

        let frames = rng.random_range(1..=8);
        let (params, x) = random_model(&mut rng, v, frames);
        let len = rng.random_range(0..=frames.min(4));
        let labels = random_labels(&mut rng, len, v);
        let grid = grid_for(GridKind::Ctc, &params, &x, &labels)?;
        match ctc_loss(&grid, &labels) {
            Ok(l) => ctc_err = ctc_err.max((l.neg_log_posterior - brute_force_ctc_loss(&grid, &labels, 16)?).abs()),
            Err(HatError::Infeasible(_)) => infeasible_ok &= enumerate_ctc_paths(frames, &labels, 16)?.is_empty(),
            Err(e) => return Err(e),
        }
    }
    let tol = 1e-8;
    Ok(vec![
        CheckResult::new("marginalization.hat", hat_err <= tol, format!("models={models} max_abs_err={hat_err:.3e} tol={tol:e}")),
        CheckResult::new("marginalization.rnnt", rnnt_err <= tol, format!("models={models} max_abs_err={rnnt_err:.3e} tol={tol:e}")),
        CheckResult::new("marginalization.ctc", ctc_err <= tol && infeasible_ok, format!("models={models} max_abs_err={ctc_err:.3e} tol={tol:e}")),
    ])
}

/// Central differences on seed 47, T=4, U=2, |V|=3, HAT with and without the
/// internal-LM term.
pub fn gradients() -> Result<Vec<CheckResult>> {
    let cfg = ModelConfig { num_labels: 3, input_dim: 3, embed_dim: 2, enc_hidden: 4, dec_hidden: 3, joint_dim: 4, init_scale: 0.5, seed: 47, context: None };
    let params = ModelParams::init(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let x = Mat { rows: 4, cols: 3, data: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let tol = 1e-4;
    [0.0, 0.1]
        .iter()
        .map(|&mtl| {
            let r = check_gradients(GridKind::Hat, &x, &params, &[2, 1], mtl, 1e-5)?;
            let name = if mtl == 0.0 { "gradients.hat" } else { "gradients.hat_mtl" };
            Ok(CheckResult::new(name, r.max_rel_error <= tol, format!("checked={} max_rel_err={:.3e} tol={tol:e}", r.checked, r.max_rel_error)))
        })
        .collect()
}

/// HAT edge posteriors sum to one over labels and blank at every node.
pub fn local_normalization(models: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..models {
        let v = rng.random_range(1..=6);
        let frames = rng.random_range(1..=6);
        let (params, x) = random_model(&mut rng, v, frames);
        let len = rng.random_range(0..=4);
        let labels = random_labels(&mut rng, len, v);
        let grid = grid_for(GridKind::Hat, &params, &x, &labels)?;
        for t in 0..grid.frames {
            for u in 0..grid.rows {
                let total = grid.edge_blank(t, u).exp() + (1..=v).map(|y| grid.edge_label(t, u, y).exp()).sum::<f64>();
                worst = worst.max((total - 1.0).abs());
            }
        }
    }
    let tol = 1e-12;
    Ok(CheckResult::new("local_normalization.hat", worst <= tol, format!("models={models} max_dev={worst:.3e} tol={tol:e}")))
}

fn spread(xs: &[f64]) -> f64 {
    xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - xs.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Softmax invariance to constant shifts and its converse, plus the exact
/// factorisation of an additive joint.
pub fn joint_properties(trials: usize, models: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut shift, mut recover, mut roundtrip) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let n = rng.random_range(1..=8);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c = rng.random_range(-20.0..20.0);
        let p = softmax(&v);
        let shifted = softmax(&v.iter().map(|x| x + c).collect::<Vec<_>>());
        shift = shift.max(p.iter().zip(&shifted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        // any preimage of p: log-probabilities plus an arbitrary offset
        let offset = rng.random_range(-20.0..20.0);
        let w: Vec<f64> = p.iter().map(|q| q.ln() + offset).collect();
        roundtrip = roundtrip.max(softmax(&w).iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let d: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a - b).collect();
        recover = recover.max(spread(&d));
    }
    let mut residual = 0.0f64;
    for _ in 0..models {
        let v = rng.random_range(1..=4);
        let frames = rng.random_range(1..=5);
        let (mut params, x) = random_model(&mut rng, v, frames);
        params.activation = JointActivation::Identity;
        let len = rng.random_range(0..=3);
        let labels = random_labels(&mut rng, len, v);
        residual = residual.max(crate::ilm::factorization_residual(&params.activations(&x, &labels)?, &params)?);
    }
    Ok(vec![
        CheckResult::new("softmax.shift_invariance", shift <= 1e-12, format!("trials={trials} max_dev={shift:.3e} tol=1e-12")),
        CheckResult::new("softmax.constant_difference", recover <= 1e-9 && roundtrip <= 1e-12, format!("trials={trials} max_spread={recover:.3e} tol=1e-9")),
        CheckResult::new("factorization.linear_joint", residual <= 1e-9, format!("models={models} max_residual={residual:.3e} tol=1e-9")),
    ])
}

fn label_lm(rng: &mut ChaCha8Rng, v: usize) -> Result<NGramModel> {
    let alphabet = Alphabet::new(v)?;
    let corpus: Vec<Vec<String>> = (0..20).map(|_| (0..rng.random_range(1..4)).map(|_| alphabet.symbol_name(rng.random_range(1..=v))).collect()).collect();
    train_ngram(&corpus, 2, 0.5)
}

/// Beam search with an unbounded beam against exhaustive enumeration, for
/// HAT and for fused CTC and RNN-T decoding, on capped instances.
pub fn decoder_equivalence(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caps = ExhaustiveCaps::default();
    let (mut hat_ok, mut fused_ok) = (0, 0);
    for _ in 0..instances {
        let v = rng.random_range(1..=caps.max_vocab);
        let frames = rng.random_range(1..=caps.max_frames);
        let (params, x) = random_model(&mut rng, v, frames);
        let lm = label_lm(&mut rng, v)?;
        let u_max = rng.random_range(0..=caps.max_labels);
        let cfg = DecodeConfig {
            lambda1: rng.random_range(0.5..3.0),
            lambda2: rng.random_range(0.0..1.2),
            beam_width: usize::MAX,
            max_labels_per_frame: u_max.max(1),
            nbest: 1000,
            max_output_labels: Some(u_max),
            blank_scale: rng.random_range(0.2..2.0),
            coverage_weight: rng.random_range(0.0..1.0),
            ..DecodeConfig::default()
        };
        let beam = beam_decode_hat(&x, &params, Some(&lm), None, &cfg)?;
        let oracle = exhaustive_decode(&x, &params, Some(&lm), &cfg, &caps)?;
        hat_ok += usize::from(beam[0].labels == oracle[0].labels);
        let mut both = true;
        for kind in [GridKind::Ctc, GridKind::Rnnt] {
            let beam = beam_decode_fused(kind, &x, &params, Some(&lm), &cfg)?;
            let oracle = exhaustive_decode_fused(kind, &x, &params, Some(&lm), &cfg, &caps)?;
            both &= beam[0].labels == oracle[0].labels;
        }
        fused_ok += usize::from(both);
    }
    Ok(vec![
        CheckResult::new("decoder.hat_vs_exhaustive", hat_ok == instances, format!("matched={hat_ok}/{instances}")),
        CheckResult::new("decoder.fused_vs_exhaustive", fused_ok == instances, format!("matched={fused_ok}/{instances}")),
    ])
}

fn random_corpus(rng: &mut ChaCha8Rng, sentences: usize, words: usize) -> Vec<Vec<String>> {
    (0..sentences).map(|_| (0..rng.random_range(1..=6)).map(|_| format!("w{}", rng.random_range(0..words))).collect()).collect()
}

/// Direct add-k bigram probabilities from raw counts, valid for contexts seen
/// in `corpus`.
fn direct_bigram_log_probs(corpus: &[Vec<String>], k: f64) -> Vec<f64> {
    let mut vocab: Vec<&str> = corpus.iter().flatten().map(String::as_str).collect();
    vocab.sort_unstable();
    vocab.dedup();
    let v = (vocab.len() + 2) as f64; // plus </s> and <unk>
    let mut pair: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    let mut hist: BTreeMap<&str, f64> = BTreeMap::new();
    let padded = |s: &'_ Vec<String>| -> Vec<String> { std::iter::once("<s>".to_string()).chain(s.iter().cloned()).chain(std::iter::once("</s>".to_string())).collect() };
    let sentences: Vec<Vec<String>> = corpus.iter().map(padded).collect();
    for s in &sentences {
        for w in s.windows(2) {
            *pair.entry((w[0].as_str(), w[1].as_str())).or_insert(0.0) += 1.0;
            *hist.entry(w[0].as_str()).or_insert(0.0) += 1.0;
        }
    }
    sentences.iter().flat_map(|s| s.windows(2).map(|w| ((pair[&(w[0].as_str(), w[1].as_str())] + k) / (hist[w[0].as_str()] + k * v)).ln()).collect::<Vec<_>>()).collect()
}

/// Normalisation at every observed context, ARPA round trip and perplexity
/// against a direct count-based computation.
pub fn ngram_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norm = 0.0f64;
    let mut contexts = 0;
    let mut arpa = 0.0f64;
    for order in 1..=4 {
        let corpus = random_corpus(&mut rng, 40, 8);
        let lm = train_ngram(&corpus, order, 0.3)?;
        let back = NGramModel::from_arpa(&lm.to_arpa())?;
        let mut seen: BTreeMap<Vec<usize>, ()> = BTreeMap::new();
        for s in &corpus {
            let mut state = lm.start();
            for w in s.iter().map(String::as_str).chain(std::iter::once(crate::ngram::EOS)) {
                seen.insert(state.context.clone(), ());
                let id = lm.token_id(w).expect("corpus token");
                let (a, next) = lm.score(&state, id);
                let (b, _) = back.score(&state, id);
                arpa = arpa.max((a - b).abs());
                state = next;
            }
        }
        for ctx in seen.keys() {
            let state = crate::ngram::LmState { context: ctx.clone() };
            let total: f64 = lm.predictable().map(|y| lm.score(&state, y).0.exp()).sum();
            norm = norm.max((total - 1.0).abs());
            contexts += 1;
        }
    }
    let corpus = random_corpus(&mut rng, 60, 6);
    let lm = train_ngram(&corpus, 2, 0.4)?;
    let direct = direct_bigram_log_probs(&corpus, 0.4);
    let expected = (-direct.iter().sum::<f64>() / direct.len() as f64).exp();
    let ppl = lm.perplexity(&corpus)?;
    let rel = (ppl - expected).abs() / expected;
    Ok(vec![
        CheckResult::new("ngram.normalization", norm <= 1e-6, format!("contexts={contexts} max_dev={norm:.3e} tol=1e-6")),
        CheckResult::new("ngram.arpa_round_trip", arpa <= 1e-6, format!("max_abs_err={arpa:.3e} tol=1e-6")),
        CheckResult::new("ngram.perplexity", rel <= 1e-9, format!("ppl={ppl:.6} rel_err={rel:.3e} tol=1e-9")),
    ])
}

/// The quick suite run by `selftest`.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = marginalization(50, 47)?;
    out.extend(gradients()?);
    out.push(local_normalization(20, 47)?);
    out.extend(joint_properties(200, 10, 47)?);
    out.extend(decoder_equivalence(25, 47)?);
    out.extend(ngram_checks(47)?);
    Ok(out)
}
