//! Minibatch SGD on the configured sequence loss, the training log format and
//! checkpoint metadata.
//!
//! Log lines are tab separated:
//! `epoch <N> loss=<mean nll> prior_cost=<mean -log P_ILM | na>` after a full
//! pass over the training set (epoch 0 is the initial model) and
//! `step <N> loss=<batch mean> prior=<batch mean> grad_norm=<pre-clip>` per
//! update, with an extra `wall_ms=` field when wall-time logging is enabled.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{HatError, Result};
use crate::loss::{ctc_loss, sequence_gradients, transducer_forward_backward, GradientSet};
use crate::network::ModelParams;
use crate::posterior::{grid_for, GridKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `None` for CTC, which has no label decoder.
    pub prior_cost: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub epochs: Vec<EpochRecord>,
    pub log: String,
}

/// Mean sequence loss and prior cost of `params` on `data`.
pub fn evaluate(kind: GridKind, params: &ModelParams, data: &Dataset) -> Result<EpochRecord> {
    if data.utterances.is_empty() {
        return Err(HatError::Argument("evaluation on an empty dataset".into()));
    }
    let losses = data
        .utterances
        .par_iter()
        .map(|u| {
            let grid = grid_for(kind, params, &u.features, &u.labels)?;
            let r = if kind == GridKind::Ctc { ctc_loss(&grid, &u.labels)? } else { transducer_forward_backward(&grid, &u.labels)? };
            Ok(r.neg_log_posterior)
        })
        .collect::<Result<Vec<f64>>>()?;
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let prior_cost = if kind == GridKind::Ctc { None } else { Some(crate::ilm::prior_cost(&data.transcripts(), params)?) };
    Ok(EpochRecord { epoch: 0, loss, prior_cost })
}

fn epoch_line(r: &EpochRecord) -> String {
    let prior = r.prior_cost.map_or("na".to_string(), |p| p.to_string());
    format!("epoch\t{}\tloss={}\tprior_cost={prior}\n", r.epoch, r.loss)
}

pub fn initial_params(cfg: &Config, data: &Dataset) -> Result<ModelParams> {
    let input_dim = data.input_dim().ok_or_else(|| HatError::Argument("training set is empty".into()))?;
    let mut params = ModelParams::init(&cfg.model_config(data.alphabet.size(), input_dim))?;
    params.activation = cfg.model.activation;
    Ok(params)
}

pub fn train(cfg: &Config, data: &Dataset) -> Result<TrainOutput> {
    train_from(cfg, data, initial_params(cfg, data)?)
}

pub fn train_from(cfg: &Config, data: &Dataset, mut params: ModelParams) -> Result<TrainOutput> {
    cfg.validate()?;
    let kind = cfg.model.loss;
    let t = &cfg.train;
    let mtl_weight = t.effective_mtl_weight();
    if data.input_dim() != Some(params.input_dim()) || data.alphabet.size() != params.num_labels {
        return Err(HatError::Shape(format!(
            "dataset has {} labels and dimension {:?}, model expects {} and {}",
            data.alphabet.size(),
            data.input_dim(),
            params.num_labels,
            params.input_dim()
        )));
    }
    let mut log = String::new();
    writeln!(
        log,
        "# hatlab train loss={} context={} mtl_weight={} lr={} batch_size={} clip={} epochs={} seed={} utterances={} parameters={}",
        kind.name(),
        params.context_size().map_or("inf".into(), |c| c.to_string()),
        mtl_weight,
        t.lr,
        t.batch_size,
        t.clip,
        t.epochs,
        t.seed,
        data.utterances.len(),
        params.num_parameters()
    )
    .unwrap();
    let mut epochs = vec![evaluate(kind, &params, data)?];
    log.push_str(&epoch_line(&epochs[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..data.utterances.len()).collect();
    let started = Instant::now();
    let mut step = 0;
    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(t.batch_size) {
            step += 1;
            let outs = batch
                .par_iter()
                .map(|&i| {
                    let u = &data.utterances[i];
                    sequence_gradients(kind, &u.features, &params, &u.labels, mtl_weight)
                        .map_err(|e| HatError::Numeric(format!("step {step}, utterance {}: {e}", u.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = GradientSet::zeros_like(&params);
            let (mut loss, mut prior) = (0.0, 0.0);
            for o in &outs {
                grad.add_scaled(1.0, &o.grads);
                loss += o.loss.neg_log_posterior;
                prior += o.prior_cost;
            }
            let n = outs.len() as f64;
            grad.scale(1.0 / n);
            let norm = grad.norm();
            if !norm.is_finite() || !loss.is_finite() {
                return Err(HatError::Numeric(format!("step {step}: loss {loss}, gradient norm {norm}")));
            }
            if t.clip > 0.0 && norm > t.clip {
                grad.scale(t.clip / norm);
            }
            for ((_, p), (_, _, g)) in params.tensors_mut().into_iter().zip(grad.grads.tensors()) {
                crate::network::axpy(-t.lr, g, p);
            }
            write!(log, "step\t{step}\tloss={}\tprior={}\tgrad_norm={norm}", loss / n, prior / n).unwrap();
            if t.log_wall_time {
                write!(log, "\twall_ms={}", started.elapsed().as_millis()).unwrap();
            }
            log.push('\n');
        }
        params.check_finite()?;
        let mut r = evaluate(kind, &params, data)?;
        r.epoch = epoch;
        log.push_str(&epoch_line(&r));
        epochs.push(r);
    }
    Ok(TrainOutput { params, epochs, log })
}

/// Epoch records from a training log; step lines and comments are skipped.
pub fn parse_epoch_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: &str| HatError::Parse { line: i + 1, msg: format!("training log: {msg}") };
        let mut fields = line.split('\t');
        if fields.next() != Some("epoch") {
            continue;
        }
        let epoch = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| err("bad epoch number"))?;
        let (mut loss, mut prior) = (None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("loss", v)) => loss = Some(v.parse::<f64>().map_err(|_| err("bad loss"))?),
                Some(("prior_cost", "na")) => prior = Some(None),
                Some(("prior_cost", v)) => prior = Some(Some(v.parse::<f64>().map_err(|_| err("bad prior_cost"))?)),
                _ => {}
            }
        }
        match (loss, prior) {
            (Some(loss), Some(prior_cost)) => out.push(EpochRecord { epoch, loss, prior_cost }),
            _ => return Err(err("epoch line needs loss= and prior_cost=")),
        }
    }
    Ok(out)
}

/// Saves `params` with the training loss recorded in the header, so decoding
/// can pick the matching search.
pub fn save_checkpoint(params: &ModelParams, kind: GridKind, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| HatError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# loss={}", kind.name()).map_err(|e| HatError::io(path, e))?;
    params.write_checkpoint(w).map_err(|e| HatError::io(path, e))
}

/// Loads a checkpoint and its recorded loss kind (HAT when absent).
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, GridKind)> {
    let params = ModelParams::load(path)?;
    let file = std::fs::File::open(path).map_err(|e| HatError::io(path, e))?;
    let mut kind = GridKind::Hat;
    for line in BufReader::new(file).split(b'\n') {
        let line = line.map_err(|e| HatError::io(path, e))?;
        let Some(comment) = line.strip_prefix(b"#") else { break };
        if let Some(k) = String::from_utf8_lossy(comment).trim().strip_prefix("loss=") {
            kind = GridKind::parse(k)?;
        }
    }
    Ok((params, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskParams};

    fn toy(n: usize) -> Dataset {
        let p = TaskParams { train_utterances: n, test_utterances: 1, lm_sentences: 1, ..TaskParams::default() };
        generate(&p).unwrap().train
    }

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        for kv in ["model.enc_hidden=16", "model.dec_hidden=8", "model.joint_dim=16", "model.embed_dim=4"] {
            cfg.set_pair(kv).unwrap();
        }
        cfg
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let data = toy(4);
        let mut cfg = small_cfg();
        cfg.train.epochs = 0;
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.params, initial_params(&cfg, &data).unwrap());
        assert_eq!(out.epochs.len(), 1);
    }

    #[test]
    fn loss_improves_on_small_set() {
        let data = toy(20);
        let mut cfg = small_cfg();
        cfg.train.epochs = 5;
        let out = train(&cfg, &data).unwrap();
        assert!(out.epochs[5].loss < out.epochs[0].loss, "{:?}", out.epochs);
        assert_eq!(parse_epoch_log(&out.log).unwrap(), out.epochs);
    }

    #[test]
    fn log_shapes_match_across_contexts() {
        let data = toy(6);
        let shape = |ctx: &str| {
            let mut cfg = small_cfg();
            cfg.train.epochs = 2;
            cfg.set_pair(&format!("model.context={ctx}")).unwrap();
            let log = train(&cfg, &data).unwrap().log;
            // line kind and field keys, ignoring values
            log.lines().skip(1).map(|l| l.split('\t').filter_map(|f| f.split_once('=').map(|(k, _)| k.to_string())).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        assert_eq!(shape("2"), shape("inf"));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(10);
        let mut cfg = small_cfg();
        cfg.train.epochs = 2;
        cfg.train.mtl = true;
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn ctc_logs_without_prior() {
        let data = toy(4);
        let mut cfg = small_cfg();
        cfg.model.loss = GridKind::Ctc;
        cfg.train.epochs = 1;
        let out = train(&cfg, &data).unwrap();
        assert!(out.epochs.iter().all(|r| r.prior_cost.is_none()));
        assert!(out.log.contains("prior_cost=na"));
    }

    #[test]
    fn checkpoint_records_loss_kind() {
        let data = toy(2);
        let params = initial_params(&small_cfg(), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params, GridKind::Rnnt, &path).unwrap();
        let (back, kind) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(kind, GridKind::Rnnt);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let data = toy(2);
        let mut cfg = small_cfg();
        let params = initial_params(&cfg, &data).unwrap();
        let other = generate(&TaskParams { input_dim: 5, train_utterances: 2, test_utterances: 1, lm_sentences: 1, ..TaskParams::default() }).unwrap().train;
        cfg.train.epochs = 1;
        assert!(matches!(train_from(&cfg, &other, params), Err(HatError::Shape(_))));
    }
}
