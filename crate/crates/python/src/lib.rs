use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hatlab::config::Config;
use hatlab::decoder::{beam_decode_fused, beam_decode_hat, wer as wer_stats, DecodeConfig};
use hatlab::error::HatError;
use hatlab::ilm::{ilm_sequence, prior_cost};
use hatlab::loss::{ctc_loss, hat_loss, rnnt_loss};
use hatlab::network::{Mat, ModelConfig, ModelParams};
use hatlab::ngram::{train_ngram, NGramModel};
use hatlab::posterior::{grid_for, GridKind};

fn py_err(e: HatError) -> PyErr {
    match e {
        HatError::Io { .. } => PyIOError::new_err(e.to_string()),
        HatError::Numeric(_) | HatError::DecodeFailure(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config_with(overrides: &[String]) -> PyResult<Config> {
    let mut cfg = Config::default();
    for kv in overrides {
        cfg.set_pair(kv).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_rows(&rows).map_err(py_err)
}

/// A HAT, RNN-T or CTC model.
#[pyclass(module = "hatlab_py")]
struct Model {
    params: ModelParams,
    kind: GridKind,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (num_labels, input_dim, loss = "hat", context = None, embed_dim = None, enc_hidden = None, dec_hidden = None, joint_dim = None, init_scale = 0.3, seed = 47))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_labels: usize,
        input_dim: usize,
        loss: &str,
        context: Option<usize>,
        embed_dim: Option<usize>,
        enc_hidden: Option<usize>,
        dec_hidden: Option<usize>,
        joint_dim: Option<usize>,
        init_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            num_labels,
            input_dim,
            embed_dim: embed_dim.unwrap_or(d.embed_dim),
            enc_hidden: enc_hidden.unwrap_or(d.enc_hidden),
            dec_hidden: dec_hidden.unwrap_or(d.dec_hidden),
            joint_dim: joint_dim.unwrap_or(d.joint_dim),
            context,
            init_scale,
            seed,
        };
        Ok(Model { params: ModelParams::init(&cfg).map_err(py_err)?, kind: GridKind::parse(loss).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, kind) = hatlab::train::load_checkpoint(&path).map_err(py_err)?;
        Ok(Model { params, kind })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        hatlab::train::save_checkpoint(&self.params, self.kind, &path).map_err(py_err)
    }

    #[getter]
    fn loss(&self) -> &'static str {
        self.kind.name()
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.params.num_labels
    }

    #[getter]
    fn context(&self) -> Option<usize> {
        self.params.context_size()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// -log P(labels | features), summed over alignments.
    fn neg_log_posterior(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let x = matrix(features)?;
        let grid = grid_for(self.kind, &self.params, &x, &labels).map_err(py_err)?;
        let r = match self.kind {
            GridKind::Hat => hat_loss(&grid, &labels),
            GridKind::Rnnt => rnnt_loss(&grid, &labels),
            GridKind::Ctc => ctc_loss(&grid, &labels),
        };
        r.map(|l| l.neg_log_posterior).map_err(py_err)
    }

    /// Internal-LM log-probability of a label sequence.
    fn ilm_log_prob(&self, labels: Vec<usize>) -> PyResult<f64> {
        ilm_sequence(&labels, &self.params).map_err(py_err)
    }

    fn prior_cost(&self, transcripts: Vec<Vec<usize>>) -> PyResult<f64> {
        prior_cost(&transcripts, &self.params).map_err(py_err)
    }

    /// Label-level beam search; returns (labels, combined score) pairs, best first.
    #[pyo3(signature = (features, lm = None, lambda1 = 2.5, lambda2 = 0.0, beam = 8, nbest = 10))]
    fn decode(&self, features: Vec<Vec<f64>>, lm: Option<&NGram>, lambda1: f64, lambda2: f64, beam: usize, nbest: usize) -> PyResult<Vec<(Vec<usize>, f64)>> {
        let x = matrix(features)?;
        let cfg = DecodeConfig { lambda1, lambda2, beam_width: beam, nbest, ..DecodeConfig::default() };
        let lm = lm.map(|m| &m.model);
        let out = match self.kind {
            GridKind::Hat => beam_decode_hat(&x, &self.params, lm, None, &cfg),
            kind => beam_decode_fused(kind, &x, &self.params, lm, &cfg),
        };
        Ok(out.map_err(py_err)?.into_iter().map(|e| (e.labels, e.combined)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(loss={}, num_labels={}, parameters={})", self.kind.name(), self.params.num_labels, self.params.num_parameters())
    }
}

/// Add-k smoothed backoff n-gram LM.
#[pyclass(module = "hatlab_py")]
struct NGram {
    model: NGramModel,
}

#[pymethods]
impl NGram {
    #[staticmethod]
    #[pyo3(signature = (corpus, order = 3, k = 0.1))]
    fn train(corpus: Vec<Vec<String>>, order: usize, k: f64) -> PyResult<Self> {
        Ok(NGram { model: train_ngram(&corpus, order, k).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(NGram { model: NGramModel::load_arpa(&path).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_arpa(text: &str) -> PyResult<Self> {
        Ok(NGram { model: NGramModel::from_arpa(text).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save_arpa(&path).map_err(py_err)
    }

    fn to_arpa(&self) -> String {
        self.model.to_arpa()
    }

    /// Natural-log probability of a sentence, end token included.
    fn log_prob(&self, tokens: Vec<String>) -> PyResult<f64> {
        let mut state = self.model.start();
        let mut total = 0.0;
        for tok in &tokens {
            let id = self.model.token_id(tok).ok_or_else(|| PyValueError::new_err(format!("unknown token {tok:?}")))?;
            let (lp, next) = self.model.score(&state, id);
            total += lp;
            state = next;
        }
        Ok(total + self.model.score(&state, self.model.eos()).0)
    }

    fn perplexity(&self, sentences: Vec<Vec<String>>) -> PyResult<f64> {
        self.model.perplexity(&sentences).map_err(py_err)
    }
}

/// (rate, deletions, insertions, substitutions) of a hypothesis against a reference.
#[pyfunction]
fn wer(reference: Vec<String>, hypothesis: Vec<String>) -> (f64, usize, usize, usize) {
    let s = wer_stats(&reference, &hypothesis);
    (s.rate(), s.del, s.ins, s.sub)
}

/// Writes the synthetic task and its LMs under `out`.
#[pyfunction]
#[pyo3(signature = (out, overrides = Vec::new()))]
fn generate(out: PathBuf, overrides: Vec<String>) -> PyResult<(usize, usize)> {
    let task = hatlab::pipeline::generate_task(&config_with(&overrides)?, &out).map_err(py_err)?;
    Ok((task.train.utterances.len(), task.test.utterances.len()))
}

/// Trains on a dataset directory and writes the checkpoint; returns
/// (epoch, loss, prior_cost) per epoch.
#[pyfunction]
#[pyo3(signature = (data, out, overrides = Vec::new()))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, overrides: Vec<String>) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
    let cfg = config_with(&overrides)?;
    let result = py.detach(|| -> Result<_, HatError> {
        let ds = hatlab::data::read_dataset(&data)?;
        let r = hatlab::train::train(&cfg, &ds)?;
        hatlab::train::save_checkpoint(&r.params, cfg.model.loss, &out)?;
        Ok(r.epochs)
    });
    Ok(result.map_err(py_err)?.into_iter().map(|e| (e.epoch, e.loss, e.prior_cost)).collect())
}

/// Runs the quick oracle suite; returns (name, passed, detail) per check.
#[pyfunction]
fn selftest(py: Python<'_>) -> PyResult<Vec<(String, bool, String)>> {
    let r = py.detach(hatlab::selftest::run_all).map_err(py_err)?;
    Ok(r.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
}

#[pymodule]
fn hatlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<NGram>()?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
