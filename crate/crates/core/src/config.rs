//! Flat `key = value` configuration with `model.`, `train.`, `decode.` and
//! `task.` sections. Blank lines and `#` comments are ignored; unknown keys
//! are errors.

use std::path::Path;

use crate::data::TaskParams;
use crate::decoder::{DecodeConfig, LmMode, MergeMode};
use crate::error::{HatError, Result};
use crate::network::{JointActivation, ModelConfig};
use crate::posterior::GridKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub loss: GridKind,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub joint_dim: usize,
    /// `None` is the recurrent decoder.
    pub context: Option<usize>,
    pub init_scale: f64,
    pub activation: JointActivation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            loss: GridKind::Hat,
            embed_dim: m.embed_dim,
            enc_hidden: m.enc_hidden,
            dec_hidden: m.dec_hidden,
            joint_dim: m.joint_dim,
            context: m.context,
            init_scale: 0.3,
            activation: JointActivation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    /// Adds the internal-LM cross-entropy term to the objective.
    pub mtl: bool,
    pub mtl_weight: f64,
    pub seed: u64,
    pub log_wall_time: bool,
}

impl TrainConfig {
    /// Weight actually applied to the internal-LM term.
    pub fn effective_mtl_weight(&self) -> f64 {
        if self.mtl {
            self.mtl_weight
        } else {
            0.0
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, batch_size: 4, clip: 5.0, mtl: false, mtl_weight: 0.1, seed: 47, log_wall_time: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSection {
    pub search: DecodeConfig,
    /// Internal-LM weights swept by `diagnose`; empty means only `lambda2`.
    pub lambda2_sweep: Vec<f64>,
    pub lm_order: usize,
    pub lm_k: f64,
    /// Threshold for the linear-range statistic.
    pub tau: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            search: DecodeConfig { mode: LmMode::Word, ..DecodeConfig::default() },
            lambda2_sweep: vec![0.0, 0.25, 0.5, 0.75, 0.95, 1.1],
            lm_order: 3,
            lm_k: 0.1,
            tau: 1.0,
        }
    }
}

impl DecodeSection {
    pub fn sweep_points(&self) -> Vec<f64> {
        if self.lambda2_sweep.is_empty() {
            vec![self.search.lambda2]
        } else {
            self.lambda2_sweep.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub task: TaskParams,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HatError::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HatError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn context_value(key: &str, v: &str) -> Result<Option<usize>> {
    match v {
        "inf" | "none" => Ok(None),
        _ => num(key, v).map(Some),
    }
}

fn fmt_context(c: Option<usize>) -> String {
    c.map_or("inf".to_string(), |c| c.to_string())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HatError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                HatError::Config(m) => HatError::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HatError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| HatError::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, d, s) = (&mut self.model, &mut self.train, &mut self.decode, &mut self.task);
        match key {
            "model.loss" => m.loss = GridKind::parse(v)?,
            "model.embed_dim" => m.embed_dim = num(key, v)?,
            "model.enc_hidden" => m.enc_hidden = num(key, v)?,
            "model.dec_hidden" => m.dec_hidden = num(key, v)?,
            "model.joint_dim" => m.joint_dim = num(key, v)?,
            "model.context" => m.context = context_value(key, v)?,
            "model.init_scale" => m.init_scale = num(key, v)?,
            "model.activation" => m.activation = JointActivation::parse(v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.clip" => t.clip = num(key, v)?,
            "train.mtl" => t.mtl = boolean(key, v)?,
            "train.mtl_weight" => t.mtl_weight = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.log_wall_time" => t.log_wall_time = boolean(key, v)?,
            "decode.lambda1" => d.search.lambda1 = num(key, v)?,
            "decode.lambda2" => d.search.lambda2 = num(key, v)?,
            "decode.beam" => d.search.beam_width = num(key, v)?,
            "decode.max_labels_per_frame" => d.search.max_labels_per_frame = num(key, v)?,
            "decode.mode" => d.search.mode = LmMode::parse(v).map_err(|e| HatError::Config(e.to_string()))?,
            "decode.nbest" => d.search.nbest = num(key, v)?,
            "decode.merge" => d.search.merge = MergeMode::parse(v).map_err(|e| HatError::Config(e.to_string()))?,
            "decode.blank_scale" => d.search.blank_scale = num(key, v)?,
            "decode.coverage" => d.search.coverage_weight = num(key, v)?,
            "decode.max_output_labels" => d.search.max_output_labels = context_value(key, v)?,
            "decode.lambda2_sweep" => {
                d.lambda2_sweep = v.split(',').map(str::trim).filter(|x| !x.is_empty()).map(|x| num(key, x)).collect::<Result<_>>()?
            }
            "decode.lm_order" => d.lm_order = num(key, v)?,
            "decode.lm_k" => d.lm_k = num(key, v)?,
            "decode.tau" => d.tau = num(key, v)?,
            "task.num_labels" => s.num_labels = num(key, v)?,
            "task.num_words" => s.num_words = num(key, v)?,
            "task.min_word_len" => s.min_word_len = num(key, v)?,
            "task.max_word_len" => s.max_word_len = num(key, v)?,
            "task.input_dim" => s.input_dim = num(key, v)?,
            "task.min_duration" => s.min_duration = num(key, v)?,
            "task.max_duration" => s.max_duration = num(key, v)?,
            "task.noise_std" => s.noise_std = num(key, v)?,
            "task.train_utterances" => s.train_utterances = num(key, v)?,
            "task.test_utterances" => s.test_utterances = num(key, v)?,
            "task.lm_sentences" => s.lm_sentences = num(key, v)?,
            "task.end_prob" => s.end_prob = num(key, v)?,
            "task.max_sentence_words" => s.max_sentence_words = num(key, v)?,
            "task.train_skew" => s.train_skew = num(key, v)?,
            "task.test_skew" => s.test_skew = num(key, v)?,
            "task.seed" => s.seed = num(key, v)?,
            _ => return Err(HatError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in section order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, d, s) = (&self.model, &self.train, &self.decode, &self.task);
        let sweep: Vec<String> = d.lambda2_sweep.iter().map(ToString::to_string).collect();
        vec![
            ("model.loss", m.loss.name().into()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.enc_hidden", m.enc_hidden.to_string()),
            ("model.dec_hidden", m.dec_hidden.to_string()),
            ("model.joint_dim", m.joint_dim.to_string()),
            ("model.context", fmt_context(m.context)),
            ("model.init_scale", m.init_scale.to_string()),
            ("model.activation", m.activation.name().into()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.clip", t.clip.to_string()),
            ("train.mtl", t.mtl.to_string()),
            ("train.mtl_weight", t.mtl_weight.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.log_wall_time", t.log_wall_time.to_string()),
            ("decode.lambda1", d.search.lambda1.to_string()),
            ("decode.lambda2", d.search.lambda2.to_string()),
            ("decode.beam", d.search.beam_width.to_string()),
            ("decode.max_labels_per_frame", d.search.max_labels_per_frame.to_string()),
            ("decode.mode", d.search.mode.name().into()),
            ("decode.nbest", d.search.nbest.to_string()),
            ("decode.merge", d.search.merge.name().into()),
            ("decode.blank_scale", d.search.blank_scale.to_string()),
            ("decode.coverage", d.search.coverage_weight.to_string()),
            ("decode.max_output_labels", fmt_context(d.search.max_output_labels)),
            ("decode.lambda2_sweep", sweep.join(",")),
            ("decode.lm_order", d.lm_order.to_string()),
            ("decode.lm_k", d.lm_k.to_string()),
            ("decode.tau", d.tau.to_string()),
            ("task.num_labels", s.num_labels.to_string()),
            ("task.num_words", s.num_words.to_string()),
            ("task.min_word_len", s.min_word_len.to_string()),
            ("task.max_word_len", s.max_word_len.to_string()),
            ("task.input_dim", s.input_dim.to_string()),
            ("task.min_duration", s.min_duration.to_string()),
            ("task.max_duration", s.max_duration.to_string()),
            ("task.noise_std", s.noise_std.to_string()),
            ("task.train_utterances", s.train_utterances.to_string()),
            ("task.test_utterances", s.test_utterances.to_string()),
            ("task.lm_sentences", s.lm_sentences.to_string()),
            ("task.end_prob", s.end_prob.to_string()),
            ("task.max_sentence_words", s.max_sentence_words.to_string()),
            ("task.train_skew", s.train_skew.to_string()),
            ("task.test_skew", s.test_skew.to_string()),
            ("task.seed", s.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Range checks that do not depend on a dataset.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.embed_dim == 0 || m.enc_hidden == 0 || m.dec_hidden == 0 || m.joint_dim == 0 {
            return Err(HatError::Config("model dimensions must be positive".into()));
        }
        if !(m.init_scale > 0.0) {
            return Err(HatError::Config("model.init_scale must be positive".into()));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || !(t.clip >= 0.0) || !(t.mtl_weight >= 0.0) {
            return Err(HatError::Config("train.lr and train.batch_size must be positive, train.clip and train.mtl_weight non-negative".into()));
        }
        if m.loss == GridKind::Ctc && t.effective_mtl_weight() != 0.0 {
            return Err(HatError::Config("train.mtl needs a label decoder; CTC has none".into()));
        }
        if !(1..=4).contains(&self.decode.lm_order) || !(self.decode.lm_k > 0.0) {
            return Err(HatError::Config("decode.lm_order must be 1..=4 and decode.lm_k positive".into()));
        }
        self.decode.search.validate()
    }

    /// Model shape for a dataset with the given label and feature sizes.
    pub fn model_config(&self, num_labels: usize, input_dim: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_labels,
            input_dim,
            embed_dim: m.embed_dim,
            enc_hidden: m.enc_hidden,
            dec_hidden: m.dec_hidden,
            joint_dim: m.joint_dim,
            context: m.context,
            init_scale: m.init_scale,
            seed: self.train.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.set_pair("model.context=2").unwrap();
        cfg.set_pair("decode.lambda2_sweep = 0, 0.5").unwrap();
        cfg.set_pair("train.mtl=true").unwrap();
        cfg.set_pair("train.mtl_weight=0.2").unwrap();
        cfg.set_pair("decode.max_output_labels=7").unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(Config::parse(&Config::default().to_text()).unwrap(), Config::default());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = Config::parse("# toy\n\nmodel.loss = rnnt  # baseline\ntrain.epochs=3\n").unwrap();
        assert_eq!(cfg.model.loss, GridKind::Rnnt);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.05);
    }

    #[test]
    fn errors() {
        for bad in ["model.bogus = 1", "train.epochs = x", "model.context", "model.loss = lstm", "train.log_wall_time = maybe"] {
            let e = Config::parse(bad).unwrap_err();
            assert!(matches!(e, HatError::Config(_)), "{bad}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
        let mut cfg = Config::default();
        cfg.model.loss = GridKind::Ctc;
        assert!(cfg.validate().is_ok());
        cfg.train.mtl = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_defaults_and_empty_sweep() {
        let mut d = DecodeSection::default();
        assert_eq!(d.sweep_points(), vec![0.0, 0.25, 0.5, 0.75, 0.95, 1.1]);
        d.lambda2_sweep.clear();
        assert_eq!(d.sweep_points(), vec![0.95]);
        let cfg = Config::parse("decode.lambda2_sweep =").unwrap();
        assert!(cfg.decode.lambda2_sweep.is_empty());
    }

    #[test]
    fn context_keys() {
        let cfg = Config::parse("model.context = inf").unwrap();
        assert_eq!(cfg.model_config(6, 16).context, None);
        let cfg = Config::parse("model.context = 0").unwrap();
        assert_eq!(cfg.model_config(6, 16).context, Some(0));
    }
}
