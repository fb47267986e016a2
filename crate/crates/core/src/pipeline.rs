//! End-to-end steps behind the command line: task generation with LM
//! training, corpus decoding with WER reports, and the diagnostics tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::Config;
use crate::data::{generate, write_task, Dataset, Task};
use crate::decoder::{beam_decode_fused, beam_decode_hat, nbest_tsv, wer, DecodeConfig, LmMode, NBestEntry, WerStats, NBEST_HEADER};
use crate::error::{HatError, Result};
use crate::ilm::{factorization_residual, linearity_stats};
use crate::network::ModelParams;
use crate::ngram::{train_ngram, NGramModel};
use crate::posterior::GridKind;
use crate::train::{evaluate, parse_epoch_log, EpochRecord};

pub const WORD_LM_FILE: &str = "lm_words.arpa";
pub const LABEL_LM_FILE: &str = "lm_labels.arpa";

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HatError::io(path, e))
}

/// The LM corpus spelled out as label names, one token per label.
pub fn label_corpus(task: &Task) -> Vec<Vec<String>> {
    let lex: std::collections::BTreeMap<&str, &[usize]> = task.spec.lexicon.iter().map(|(w, p)| (w.as_str(), p.as_slice())).collect();
    task.lm_corpus
        .iter()
        .map(|s| s.iter().flat_map(|w| lex[w.as_str()].iter().map(|&y| task.spec.alphabet.symbol_name(y))).collect())
        .collect()
}

/// Generates the task under `dir` together with word- and label-level LMs
/// trained on its text corpus.
pub fn generate_task(cfg: &Config, dir: &Path) -> Result<Task> {
    cfg.validate()?;
    let task = generate(&cfg.task)?;
    fs::create_dir_all(dir).map_err(|e| HatError::io(dir, e))?;
    write_task(&task, dir)?;
    let (order, k) = (cfg.decode.lm_order, cfg.decode.lm_k);
    train_ngram(&task.lm_corpus, order, k)?.save_arpa(&dir.join(WORD_LM_FILE))?;
    train_ngram(&label_corpus(&task), order, k)?.save_arpa(&dir.join(LABEL_LM_FILE))?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(task)
}

/// Error unit of a decode: words in word-mode HAT search, labels otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorUnit {
    Words,
    Labels,
}

impl ErrorUnit {
    pub fn for_search(kind: GridKind, mode: LmMode) -> Self {
        if kind == GridKind::Hat && mode == LmMode::Word {
            ErrorUnit::Words
        } else {
            ErrorUnit::Labels
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorUnit::Words => "words",
            ErrorUnit::Labels => "labels",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    pub unit: ErrorUnit,
    pub utterances: usize,
    pub first_best: WerStats,
    /// Best entry of each n-best list, chosen by error count.
    pub oracle: WerStats,
    pub nbest_size: usize,
    /// N-best lists in file format, header included.
    pub nbest: String,
}

impl DecodeReport {
    pub fn to_text(&self) -> String {
        format!(
            "utterances\t{}\nunit\t{}\nwer (del/ins/sub)\t{}\noracle_wer_{}best (del/ins/sub)\t{}\n",
            self.utterances,
            self.unit.name(),
            self.first_best.summary(),
            self.nbest_size,
            self.oracle.summary()
        )
    }
}

pub fn decode_utterance(kind: GridKind, params: &ModelParams, features: &crate::network::Mat, lm: Option<&NGramModel>, lexicon: Option<&crate::decoder::LexiconTrie>, cfg: &DecodeConfig) -> Result<Vec<NBestEntry>> {
    match kind {
        GridKind::Hat => beam_decode_hat(features, params, lm, lexicon, cfg),
        _ => beam_decode_fused(kind, features, params, lm, cfg),
    }
}

/// Decodes every utterance in parallel and scores first-best and oracle WER.
pub fn decode_dataset(kind: GridKind, params: &ModelParams, data: &Dataset, lm: Option<&NGramModel>, cfg: &DecodeConfig) -> Result<DecodeReport> {
    cfg.validate()?;
    if data.alphabet.size() != params.num_labels || data.input_dim().is_some_and(|d| d != params.input_dim()) {
        return Err(HatError::Shape("dataset does not match the checkpoint".into()));
    }
    let trie = data.trie()?;
    let unit = ErrorUnit::for_search(kind, cfg.mode);
    let lexicon = (unit == ErrorUnit::Words).then_some(&trie);
    let results = data
        .utterances
        .par_iter()
        .map(|u| decode_utterance(kind, params, &u.features, lm, lexicon, cfg).map_err(|e| HatError::DecodeFailure(format!("{}: {e}", u.id))))
        .collect::<Result<Vec<_>>>()?;
    let mut report = DecodeReport {
        unit,
        utterances: data.utterances.len(),
        first_best: WerStats::default(),
        oracle: WerStats::default(),
        nbest_size: cfg.nbest,
        nbest: format!("{NBEST_HEADER}\n"),
    };
    for (u, entries) in data.utterances.iter().zip(&results) {
        let score = |e: &NBestEntry| match unit {
            ErrorUnit::Words => wer(&u.words, &e.words),
            ErrorUnit::Labels => wer(&u.labels, &e.labels),
        };
        let stats: Vec<WerStats> = entries.iter().map(score).collect();
        report.first_best.add(&stats[0]);
        report.oracle.add(stats.iter().min_by_key(|s| s.errors()).unwrap());
        report.nbest.push_str(&nbest_tsv(&u.id, entries, &data.alphabet));
    }
    Ok(report)
}

pub const SWEEP_HEADER: &str = "lambda1\tlambda2\twer\tdel\tins\tsub\toracle_wer";

fn sweep_row(lambda1: f64, lambda2: f64, r: &DecodeReport) -> String {
    let s = &r.first_best;
    format!("{lambda1}\t{lambda2}\t{:.6}\t{}\t{}\t{}\t{:.6}\n", s.rate(), s.del, s.ins, s.sub, r.oracle.rate())
}

/// Word error rate against internal-LM weight at fixed `lambda1`.
pub fn lambda2_sweep(params: &ModelParams, data: &Dataset, lm: Option<&NGramModel>, cfg: &DecodeConfig, points: &[f64]) -> Result<(String, Vec<DecodeReport>)> {
    let mut table = format!("{SWEEP_HEADER}\n");
    let mut reports = Vec::new();
    for &l2 in points {
        let c = DecodeConfig { lambda2: l2, ..cfg.clone() };
        let r = decode_dataset(GridKind::Hat, params, data, lm, &c)?;
        table.push_str(&sweep_row(c.lambda1, l2, &r));
        reports.push(r);
    }
    Ok((table, reports))
}

/// Joint-input linearity table over the dataset, with the largest
/// factorisation residual across utterances.
pub fn linearity_table(params: &ModelParams, data: &Dataset, tau: f64) -> Result<String> {
    let pairs: Vec<(&crate::network::Mat, &[usize])> = data.utterances.iter().map(|u| (&u.features, u.labels.as_slice())).collect();
    let stats = linearity_stats(&pairs, params, tau)?;
    let residuals = data
        .utterances
        .par_iter()
        .map(|u| factorization_residual(&params.activations(&u.features, &u.labels)?, params))
        .collect::<Result<Vec<f64>>>()?;
    let max = residuals.into_iter().fold(0.0, f64::max);
    Ok(stats.to_tsv(tau, Some(max)))
}

pub fn prior_cost_table(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tprior_cost\tloss\n");
    for r in records {
        let p = r.prior_cost.map_or("na".to_string(), |p| p.to_string());
        writeln!(out, "{}\t{p}\t{}", r.epoch, r.loss).unwrap();
    }
    out
}

pub fn prior_cost_series(log_path: &Path) -> Result<String> {
    let text = fs::read_to_string(log_path).map_err(|e| HatError::io(log_path, e))?;
    Ok(prior_cost_table(&parse_epoch_log(&text)?))
}

/// Parses `c:path` items; `c` is a table size or `inf`.
pub fn parse_context_runs(items: &[String]) -> Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| {
            let (c, p) = s.split_once(':').ok_or_else(|| HatError::Argument(format!("expected context:checkpoint, got {s:?}")))?;
            if c != "inf" && c.parse::<usize>().is_err() {
                return Err(HatError::Argument(format!("bad context {c:?}")));
            }
            Ok((c.to_string(), PathBuf::from(p)))
        })
        .collect()
}

pub const CONTEXT_HEADER: &str = "context\tloss\tprior_cost\twer";

/// Loss, prior cost and WER of each context-size model on one dataset.
pub fn context_table(runs: &[(String, ModelParams, GridKind)], data: &Dataset, lm: Option<&NGramModel>, cfg: &DecodeConfig) -> Result<String> {
    let mut out = format!("{CONTEXT_HEADER}\n");
    for (c, params, kind) in runs {
        let expected = if c == "inf" { None } else { c.parse().ok() };
        if params.context_size() != expected {
            return Err(HatError::Argument(format!("checkpoint for context {c} has context {:?}", params.context_size())));
        }
        let e = evaluate(*kind, params, data)?;
        let r = decode_dataset(*kind, params, data, lm, cfg)?;
        let p = e.prior_cost.map_or("na".to_string(), |p| p.to_string());
        writeln!(out, "{c}\t{}\t{p}\t{:.6}", e.loss, r.first_best.rate()).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskParams;

    #[test]
    fn generate_writes_all_artifacts() {
        let mut cfg = Config::default();
        cfg.task = TaskParams { train_utterances: 3, test_utterances: 2, lm_sentences: 20, ..TaskParams::default() };
        let dir = tempfile::tempdir().unwrap();
        let task = generate_task(&cfg, dir.path()).unwrap();
        for f in ["train/manifest.tsv", "test/lexicon.txt", "lm_corpus.txt", WORD_LM_FILE, LABEL_LM_FILE, "config.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let words = NGramModel::load_arpa(&dir.path().join(WORD_LM_FILE)).unwrap();
        assert!(words.token_id(&task.spec.lexicon[0].0).is_some());
        let labels = NGramModel::load_arpa(&dir.path().join(LABEL_LM_FILE)).unwrap();
        assert!(labels.token_id(&task.spec.alphabet.symbol_name(1)).is_some());
        assert_eq!(label_corpus(&task).len(), 20);
    }

    #[test]
    fn oracle_never_exceeds_first_best() {
        let mut cfg = Config::default();
        cfg.task = TaskParams { train_utterances: 1, test_utterances: 6, lm_sentences: 50, ..TaskParams::default() };
        let task = generate(&cfg.task).unwrap();
        let params = crate::train::initial_params(&cfg, &task.test).unwrap();
        let lm = train_ngram(&task.lm_corpus, 2, 0.1).unwrap();
        let r = decode_dataset(GridKind::Hat, &params, &task.test, Some(&lm), &cfg.decode.search).unwrap();
        assert!(r.oracle.errors() <= r.first_best.errors());
        assert_eq!(r.unit, ErrorUnit::Words);
        assert!(r.nbest.lines().count() > 6);
        let cfg2 = DecodeConfig { mode: LmMode::Label, ..cfg.decode.search.clone() };
        let r = decode_dataset(GridKind::Hat, &params, &task.test, None, &cfg2).unwrap();
        assert_eq!(r.unit, ErrorUnit::Labels);
        assert!(r.to_text().contains("wer (del/ins/sub)\t"));
    }

    #[test]
    fn context_run_parsing() {
        let runs = parse_context_runs(&["0:a.ckpt".into(), "inf:b.ckpt".into()]).unwrap();
        assert_eq!(runs[1], ("inf".to_string(), PathBuf::from("b.ckpt")));
        assert!(parse_context_runs(&["x:a".into()]).is_err());
        assert!(parse_context_runs(&["a.ckpt".into()]).is_err());
    }
}
