//! Encoder and decoder trunks, the joint network and the blank head.
//!
//! The encoder and the label decoder are single-layer Elman cells,
//! `h' = tanh(W_x x + W_h h + b)`, each followed by a linear projection to the
//! joint dimension `D`. The same `f_t` and `g_u` feed both the blank head and the
//! label joint network. A decoder can alternatively be a finite-context table
//! that maps the last `c` labels straight to a `D`-vector.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HatError, Result};
use crate::lattice::Alphabet;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HatError::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `out += self^T y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), out);
            }
        }
    }

    /// `self += scale * a b^T`
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s != 0.0 {
                axpy(s, b, self.row_mut(i));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Elman recurrent cell weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ElmanCell {
    pub w_x: Mat,
    pub w_h: Mat,
    pub bias: Vec<f64>,
}

impl ElmanCell {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self { w_x: Mat::zeros(hidden, input), w_h: Mat::zeros(hidden, hidden), bias: vec![0.0; hidden] }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_h.rows
    }

    pub fn step(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut a = self.w_x.matvec(x);
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = (*ai + dot(self.w_h.row(i), h) + self.bias[i]).tanh();
        }
        a
    }
}

/// Decoder conditioned only on the last `c` labels, realised as a lookup table.
///
/// Rows are indexed by the `<S>`-padded context: a context holding `k` real labels
/// lives at `sum_{j<k} |V|^j + code`, where `code` is the base-`|V|` value of
/// those labels. The table therefore has `sum_{j=0..=c} |V|^j` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteContextTable {
    pub context_size: usize,
    pub num_labels: usize,
    pub table: Mat,
}

impl FiniteContextTable {
    pub fn entries(context_size: usize, num_labels: usize) -> usize {
        (0..=context_size).map(|j| num_labels.pow(j as u32)).sum()
    }

    pub fn zeros(context_size: usize, num_labels: usize, dim: usize) -> Self {
        Self { context_size, num_labels, table: Mat::zeros(Self::entries(context_size, num_labels), dim) }
    }

    /// Row index for the context seen after emitting `history`.
    pub fn index(&self, history: &[usize]) -> usize {
        let k = history.len().min(self.context_size);
        let offset: usize = (0..k).map(|j| self.num_labels.pow(j as u32)).sum();
        let code = history[history.len() - k..].iter().fold(0, |acc, &y| acc * self.num_labels + (y - 1));
        offset + code
    }

    pub fn lookup(&self, history: &[usize]) -> &[f64] {
        self.table.row(self.index(history))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelDecoder {
    Recurrent { embedding: Mat, cell: ElmanCell, proj: Mat },
    Table(FiniteContextTable),
}

/// Nonlinearity inside the joint network. `Identity` makes the joint exactly
/// additive and exists for the factorisation checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointActivation {
    Tanh,
    Identity,
}

impl JointActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            JointActivation::Tanh => x.tanh(),
            JointActivation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            JointActivation::Tanh => 1.0 - y * y,
            JointActivation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            JointActivation::Tanh => "tanh",
            JointActivation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(JointActivation::Tanh),
            "identity" => Ok(JointActivation::Identity),
            _ => Err(HatError::Config(format!("unknown activation {s:?} (tanh, identity)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_labels: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub joint_dim: usize,
    /// `None` selects the recurrent decoder (unbounded context).
    pub context: Option<usize>,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_labels: 6,
            input_dim: 16,
            embed_dim: 8,
            enc_hidden: 32,
            dec_hidden: 32,
            joint_dim: 32,
            context: None,
            init_scale: 0.1,
            seed: 47,
        }
    }
}

impl ModelConfig {
    /// Dimensions used by the large-vocabulary system this toolkit is modelled on.
    pub fn full_scale() -> Self {
        Self { num_labels: 42, input_dim: 256, embed_dim: 128, enc_hidden: 2048, dec_hidden: 256, joint_dim: 768, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub num_labels: usize,
    pub activation: JointActivation,
    pub encoder: ElmanCell,
    pub enc_proj: Mat,
    pub decoder: LabelDecoder,
    pub joint_out: Mat,
    pub joint_bias: Vec<f64>,
    pub blank_w: Vec<f64>,
    pub blank_bias: f64,
}

/// Encoder and decoder outputs for one utterance: `f_{1:T}` and `g_{0:U}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub enc: Mat,
    pub dec: Mat,
}

impl Activations {
    pub fn frames(&self) -> usize {
        self.enc.rows
    }

    pub fn label_len(&self) -> usize {
        self.dec.rows - 1
    }
}

/// Hidden states kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub hidden: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    /// Recurrent decoder states `s_0..s_U`; empty for table decoders.
    pub hidden: Vec<Vec<f64>>,
    /// Embedding row fed at each step (recurrent) or table row used (table).
    pub rows: Vec<usize>,
}

/// Incremental decoder state used by the beam search.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoderState {
    Recurrent(Vec<f64>),
    Table,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let v = cfg.num_labels;
        let d = cfg.joint_dim;
        let decoder = match cfg.context {
            None => LabelDecoder::Recurrent {
                embedding: Mat::zeros(v + 1, cfg.embed_dim),
                cell: ElmanCell::zeros(cfg.embed_dim, cfg.dec_hidden),
                proj: Mat::zeros(d, cfg.dec_hidden),
            },
            Some(c) => LabelDecoder::Table(FiniteContextTable::zeros(c, v, d)),
        };
        Self {
            num_labels: v,
            activation: JointActivation::Tanh,
            encoder: ElmanCell::zeros(cfg.input_dim, cfg.enc_hidden),
            enc_proj: Mat::zeros(d, cfg.enc_hidden),
            decoder,
            joint_out: Mat::zeros(v, d),
            joint_bias: vec![0.0; v],
            blank_w: vec![0.0; d],
            blank_bias: 0.0,
        }
    }

    /// Uniform initialisation on `[-init_scale, init_scale]` from a seeded generator.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        if cfg.num_labels == 0 || cfg.input_dim == 0 || cfg.joint_dim == 0 {
            return Err(HatError::Argument("model dimensions must be positive".into()));
        }
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (_, values) in params.tensors_mut() {
            for v in values.iter_mut() {
                *v = rng.random_range(-cfg.init_scale..=cfg.init_scale);
            }
        }
        Ok(params)
    }

    pub fn alphabet(&self) -> Alphabet {
        Alphabet::new(self.num_labels).expect("params always have labels")
    }

    pub fn joint_dim(&self) -> usize {
        self.blank_w.len()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// `None` for the recurrent decoder.
    pub fn context_size(&self) -> Option<usize> {
        match &self.decoder {
            LabelDecoder::Recurrent { .. } => None,
            LabelDecoder::Table(t) => Some(t.context_size),
        }
    }

    /// Named parameter tensors in canonical order, with shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn mat<'a>(name: &str, m: &'a Mat) -> (String, Vec<usize>, &'a [f64]) {
            (name.to_string(), vec![m.rows, m.cols], m.data.as_slice())
        }
        out.push(mat("enc.w_x", &self.encoder.w_x));
        out.push(mat("enc.w_h", &self.encoder.w_h));
        out.push(("enc.bias".into(), vec![self.encoder.bias.len()], &self.encoder.bias[..]));
        out.push(mat("enc.proj", &self.enc_proj));
        match &self.decoder {
            LabelDecoder::Recurrent { embedding, cell, proj } => {
                out.push(mat("dec.embedding", embedding));
                out.push(mat("dec.w_x", &cell.w_x));
                out.push(mat("dec.w_h", &cell.w_h));
                out.push(("dec.bias".into(), vec![cell.bias.len()], &cell.bias[..]));
                out.push(mat("dec.proj", proj));
            }
            LabelDecoder::Table(t) => {
                out.push(mat(&format!("dec.table.c{}", t.context_size), &t.table));
            }
        }
        out.push(mat("joint.out", &self.joint_out));
        out.push(("joint.bias".into(), vec![self.joint_bias.len()], &self.joint_bias[..]));
        out.push(("blank.w".into(), vec![self.blank_w.len()], &self.blank_w[..]));
        out.push(("blank.bias".into(), vec![1], std::slice::from_ref(&self.blank_bias)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("enc.w_x".into(), &mut self.encoder.w_x.data[..]));
        out.push(("enc.w_h".into(), &mut self.encoder.w_h.data[..]));
        out.push(("enc.bias".into(), &mut self.encoder.bias[..]));
        out.push(("enc.proj".into(), &mut self.enc_proj.data[..]));
        match &mut self.decoder {
            LabelDecoder::Recurrent { embedding, cell, proj } => {
                out.push(("dec.embedding".into(), &mut embedding.data[..]));
                out.push(("dec.w_x".into(), &mut cell.w_x.data[..]));
                out.push(("dec.w_h".into(), &mut cell.w_h.data[..]));
                out.push(("dec.bias".into(), &mut cell.bias[..]));
                out.push(("dec.proj".into(), &mut proj.data[..]));
            }
            LabelDecoder::Table(t) => {
                out.push((format!("dec.table.c{}", t.context_size), &mut t.table.data[..]));
            }
        }
        out.push(("joint.out".into(), &mut self.joint_out.data[..]));
        out.push(("joint.bias".into(), &mut self.joint_bias[..]));
        out.push(("blank.w".into(), &mut self.blank_w[..]));
        out.push(("blank.bias".into(), std::slice::from_mut(&mut self.blank_bias)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, _, values) in self.tensors() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(HatError::Numeric(name));
            }
        }
        Ok(())
    }

    // ---- encoder ------------------------------------------------------------

    pub fn encode(&self, features: &Mat) -> Result<Mat> {
        Ok(self.encode_trace(features)?.0)
    }

    pub fn encode_trace(&self, features: &Mat) -> Result<(Mat, EncoderTrace)> {
        if features.rows == 0 {
            return Err(HatError::Shape("features need at least one frame".into()));
        }
        if features.cols != self.input_dim() {
            return Err(HatError::Shape(format!(
                "feature width {} but encoder expects {}",
                features.cols,
                self.input_dim()
            )));
        }
        let mut h = vec![0.0; self.encoder.hidden_dim()];
        let mut enc = Mat::zeros(features.rows, self.joint_dim());
        let mut hidden = Vec::with_capacity(features.rows);
        for t in 0..features.rows {
            h = self.encoder.step(features.row(t), &h);
            enc.row_mut(t).copy_from_slice(&self.enc_proj.matvec(&h));
            hidden.push(h.clone());
        }
        if !enc.is_finite() {
            return Err(HatError::Numeric("encoder activations".into()));
        }
        Ok((enc, EncoderTrace { hidden }))
    }

    // ---- label decoder ------------------------------------------------------

    fn embedding_row(&self, symbol: usize) -> usize {
        if symbol == self.num_labels + 1 {
            self.num_labels
        } else {
            symbol - 1
        }
    }

    pub fn decode_labels(&self, history: &[usize]) -> Result<Mat> {
        Ok(self.decode_trace(history)?.0)
    }

    pub fn decode_trace(&self, history: &[usize]) -> Result<(Mat, DecoderTrace)> {
        self.alphabet().check_labels(history)?;
        let mut dec = Mat::zeros(history.len() + 1, self.joint_dim());
        match &self.decoder {
            LabelDecoder::Recurrent { embedding, cell, proj } => {
                let mut s = vec![0.0; cell.hidden_dim()];
                let mut hidden = Vec::with_capacity(history.len() + 1);
                let mut rows = Vec::with_capacity(history.len() + 1);
                let start = self.num_labels + 1;
                for (u, &sym) in std::iter::once(&start).chain(history).enumerate() {
                    let row = self.embedding_row(sym);
                    s = cell.step(embedding.row(row), &s);
                    dec.row_mut(u).copy_from_slice(&proj.matvec(&s));
                    hidden.push(s.clone());
                    rows.push(row);
                }
                if !dec.is_finite() {
                    return Err(HatError::Numeric("decoder activations".into()));
                }
                Ok((dec, DecoderTrace { hidden, rows }))
            }
            LabelDecoder::Table(table) => {
                let rows: Vec<usize> = (0..=history.len()).map(|u| table.index(&history[..u])).collect();
                for (u, &r) in rows.iter().enumerate() {
                    dec.row_mut(u).copy_from_slice(table.table.row(r));
                }
                Ok((dec, DecoderTrace { hidden: Vec::new(), rows }))
            }
        }
    }

    /// Decoder rows from the finite-context table; errors for recurrent decoders.
    pub fn decode_labels_finite(&self, history: &[usize]) -> Result<Mat> {
        match &self.decoder {
            LabelDecoder::Table(_) => self.decode_labels(history),
            LabelDecoder::Recurrent { .. } => Err(HatError::Argument("model has a recurrent decoder".into())),
        }
    }

    pub fn activations(&self, features: &Mat, labels: &[usize]) -> Result<Activations> {
        Ok(Activations { enc: self.encode(features)?, dec: self.decode_labels(labels)? })
    }

    /// State and `g_0` before any label has been emitted.
    pub fn decoder_start(&self) -> (DecoderState, Vec<f64>) {
        match &self.decoder {
            LabelDecoder::Recurrent { embedding, cell, proj } => {
                let s = cell.step(embedding.row(self.num_labels), &vec![0.0; cell.hidden_dim()]);
                let g = proj.matvec(&s);
                (DecoderState::Recurrent(s), g)
            }
            LabelDecoder::Table(t) => (DecoderState::Table, t.lookup(&[]).to_vec()),
        }
    }

    /// Advances the decoder by `label`; `history` is the label history including `label`.
    pub fn decoder_step(&self, state: &DecoderState, history: &[usize]) -> (DecoderState, Vec<f64>) {
        let label = *history.last().expect("decoder_step needs a label");
        match (&self.decoder, state) {
            (LabelDecoder::Recurrent { embedding, cell, proj }, DecoderState::Recurrent(s)) => {
                let s = cell.step(embedding.row(self.embedding_row(label)), s);
                let g = proj.matvec(&s);
                (DecoderState::Recurrent(s), g)
            }
            (LabelDecoder::Table(t), _) => (DecoderState::Table, t.lookup(history).to_vec()),
            _ => unreachable!("decoder state does not match decoder kind"),
        }
    }

    // ---- joint network and blank head --------------------------------------

    pub fn joint_hidden(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.activation.apply(v)).collect()
    }

    /// Label scores `J(x) = W act(x) + b` for a pre-activation sum `x = f_t + g_u`.
    pub fn joint_scores(&self, x: &[f64]) -> Vec<f64> {
        let h = self.joint_hidden(x);
        let mut s = self.joint_out.matvec(&h);
        for (si, bi) in s.iter_mut().zip(&self.joint_bias) {
            *si += bi;
        }
        s
    }

    pub fn joint(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(f.len())?;
        self.check_dim(g.len())?;
        Ok(self.joint_scores(&add(f, g)))
    }

    pub fn blank_logit_sum(&self, x: &[f64]) -> f64 {
        dot(&self.blank_w, x) + self.blank_bias
    }

    pub fn blank_logit(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        self.check_dim(f.len())?;
        self.check_dim(g.len())?;
        Ok(self.blank_logit_sum(&add(f, g)))
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.joint_dim() {
            return Err(HatError::Shape(format!("vector of length {n}, joint dimension is {}", self.joint_dim())));
        }
        Ok(())
    }

    // ---- backpropagation helpers -------------------------------------------

    /// Accumulates gradients of the label scores `s = W act(x) + b` given `ds`;
    /// adds the gradient with respect to `x` into `dx`.
    pub(crate) fn backward_joint(&self, x: &[f64], ds: &[f64], grads: &mut ModelParams, dx: &mut [f64]) {
        let h = self.joint_hidden(x);
        grads.joint_out.add_outer(1.0, ds, &h);
        axpy(1.0, ds, &mut grads.joint_bias);
        let mut dh = vec![0.0; h.len()];
        self.joint_out.matvec_t_acc(ds, &mut dh);
        for ((dxi, dhi), hi) in dx.iter_mut().zip(&dh).zip(&h) {
            *dxi += dhi * self.activation.grad_from_output(*hi);
        }
    }

    /// Accumulates gradients of the blank logit `z = w.x + bias` given `dz`.
    pub(crate) fn backward_blank(&self, x: &[f64], dz: f64, grads: &mut ModelParams, dx: &mut [f64]) {
        axpy(dz, x, &mut grads.blank_w);
        grads.blank_bias += dz;
        axpy(dz, &self.blank_w, dx);
    }

    pub(crate) fn backward_encoder(&self, features: &Mat, trace: &EncoderTrace, d_enc: &Mat, grads: &mut ModelParams) {
        let hdim = self.encoder.hidden_dim();
        let mut carry = vec![0.0; hdim];
        let zero = vec![0.0; hdim];
        for t in (0..features.rows).rev() {
            let h = &trace.hidden[t];
            grads.enc_proj.add_outer(1.0, d_enc.row(t), h);
            let mut dh = carry;
            self.enc_proj.matvec_t_acc(d_enc.row(t), &mut dh);
            let da: Vec<f64> = dh.iter().zip(h).map(|(d, hv)| d * (1.0 - hv * hv)).collect();
            let prev = if t == 0 { &zero } else { &trace.hidden[t - 1] };
            grads.encoder.w_x.add_outer(1.0, &da, features.row(t));
            grads.encoder.w_h.add_outer(1.0, &da, prev);
            axpy(1.0, &da, &mut grads.encoder.bias);
            carry = vec![0.0; hdim];
            self.encoder.w_h.matvec_t_acc(&da, &mut carry);
        }
    }

    pub(crate) fn backward_decoder(&self, trace: &DecoderTrace, d_dec: &Mat, grads: &mut ModelParams) {
        match (&self.decoder, &mut grads.decoder) {
            (
                LabelDecoder::Recurrent { embedding, cell, proj },
                LabelDecoder::Recurrent { embedding: g_emb, cell: g_cell, proj: g_proj },
            ) => {
                let hdim = cell.hidden_dim();
                let zero = vec![0.0; hdim];
                let mut carry = vec![0.0; hdim];
                for u in (0..d_dec.rows).rev() {
                    let s = &trace.hidden[u];
                    g_proj.add_outer(1.0, d_dec.row(u), s);
                    let mut ds = carry;
                    proj.matvec_t_acc(d_dec.row(u), &mut ds);
                    let da: Vec<f64> = ds.iter().zip(s).map(|(d, sv)| d * (1.0 - sv * sv)).collect();
                    let prev = if u == 0 { &zero } else { &trace.hidden[u - 1] };
                    let row = trace.rows[u];
                    g_cell.w_x.add_outer(1.0, &da, embedding.row(row));
                    g_cell.w_h.add_outer(1.0, &da, prev);
                    axpy(1.0, &da, &mut g_cell.bias);
                    cell.w_x.matvec_t_acc(&da, g_emb.row_mut(row));
                    carry = vec![0.0; hdim];
                    cell.w_h.matvec_t_acc(&da, &mut carry);
                }
            }
            (LabelDecoder::Table(_), LabelDecoder::Table(g_table)) => {
                for (u, &r) in trace.rows.iter().enumerate() {
                    axpy(1.0, d_dec.row(u), g_table.table.row_mut(r));
                }
            }
            _ => unreachable!("gradient buffer does not match decoder kind"),
        }
    }

    // ---- checkpoint I/O -----------------------------------------------------

    /// Writes the parameter checkpoint: a text header (one `name dims...` line per
    /// tensor), a blank line, then all values as little-endian `f64` in header order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::new();
        writeln!(header, "# hatlab checkpoint activation={}", self.activation.name()).unwrap();
        for (name, shape, _) in self.tensors() {
            let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
            writeln!(header, "{name} {}", dims.join(" ")).unwrap();
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        for (_, _, values) in self.tensors() {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| HatError::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file)).map_err(|e| HatError::io(path, e))
    }

    pub fn read_checkpoint<R: Read>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        let mut activation = JointActivation::Tanh;
        let mut line_no = 0;
        loop {
            let mut line = String::new();
            line_no += 1;
            let n = reader
                .read_line(&mut line)
                .map_err(|e| HatError::Parse { line: line_no, msg: e.to_string() })?;
            if n == 0 {
                return Err(HatError::Parse { line: line_no, msg: "missing blank line after header".into() });
            }
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                break;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if comment.contains("activation=identity") {
                    activation = JointActivation::Identity;
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default().to_string();
            let dims: std::result::Result<Vec<usize>, _> = parts.map(str::parse).collect();
            let dims = dims.map_err(|e| HatError::Parse { line: line_no, msg: format!("bad shape: {e}") })?;
            if dims.is_empty() {
                return Err(HatError::Parse { line: line_no, msg: format!("tensor {name} has no shape") });
            }
            entries.push((name, dims));
        }
        let shape_of = |name: &str| -> Result<&Vec<usize>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s)
                .ok_or_else(|| HatError::Parse { line: line_no, msg: format!("missing tensor {name}") })
        };
        let enc_wx = shape_of("enc.w_x")?;
        let joint = shape_of("joint.out")?;
        let (num_labels, joint_dim) = (joint[0], joint[1]);
        let context = entries
            .iter()
            .find_map(|(n, _)| n.strip_prefix("dec.table.c").map(|c| c.parse::<usize>()))
            .transpose()
            .map_err(|e| HatError::Parse { line: line_no, msg: format!("bad table name: {e}") })?;
        let cfg = ModelConfig {
            num_labels,
            input_dim: enc_wx[1],
            enc_hidden: enc_wx[0],
            embed_dim: if context.is_none() { shape_of("dec.embedding")?[1] } else { 1 },
            dec_hidden: if context.is_none() { shape_of("dec.w_h")?[0] } else { 1 },
            joint_dim,
            context,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::zeros(&cfg);
        params.activation = activation;
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected != entries {
            return Err(HatError::Parse { line: line_no, msg: "tensor list does not describe a consistent model".into() });
        }
        let mut buf = [0u8; 8];
        for (name, values) in params.tensors_mut() {
            for v in values.iter_mut() {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| HatError::Parse { line: line_no, msg: format!("truncated data in {name}") })?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if reader.read(&mut buf).map_err(|e| HatError::Parse { line: line_no, msg: e.to_string() })? != 0 {
            return Err(HatError::Parse { line: line_no, msg: "trailing bytes after tensor data".into() });
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| HatError::io(path, e))?;
        Self::read_checkpoint(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(context: Option<usize>) -> ModelConfig {
        ModelConfig { num_labels: 3, input_dim: 4, embed_dim: 3, enc_hidden: 5, dec_hidden: 4, joint_dim: 6, context, ..ModelConfig::default() }
    }

    fn seeded_features(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Mat { rows, cols, data }
    }

    fn tanh_vec(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(f64::tanh).collect()
    }

    #[test]
    fn zero_model_zero_features() {
        let p = ModelParams::zeros(&small_cfg(None));
        let enc = p.encode(&Mat::zeros(3, 4)).unwrap();
        assert!(enc.data.iter().all(|&v| v == 0.0));
        let g = vec![0.0; 6];
        assert!(p.joint(&g, &g).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(p.blank_logit(&g, &g).unwrap(), 0.0);
    }

    /// Written out element by element, independent of the matvec helpers.
    #[test]
    fn encode_single_frame_matches_direct_formula() {
        let p = ModelParams::init(&small_cfg(None)).unwrap();
        let x = seeded_features(1, 4, 47);
        let enc = p.encode(&x).unwrap();
        let he = p.encoder.hidden_dim();
        let mut h = vec![0.0; he];
        for i in 0..he {
            let mut a = p.encoder.bias[i];
            for j in 0..4 {
                a += p.encoder.w_x.data[i * 4 + j] * x.data[j];
            }
            h[i] = a.tanh();
        }
        for d in 0..6 {
            let mut f = 0.0;
            for i in 0..he {
                f += p.enc_proj.data[d * he + i] * h[i];
            }
            assert!((enc.data[d] - f).abs() < 1e-14);
        }
    }

    #[test]
    fn decode_single_label_matches_direct_formula() {
        let p = ModelParams::init(&small_cfg(None)).unwrap();
        let dec = p.decode_labels(&[2]).unwrap();
        assert_eq!(dec.rows, 2);
        let LabelDecoder::Recurrent { embedding, cell, proj } = &p.decoder else { unreachable!() };
        let mut s = vec![0.0; 4];
        for (step, row) in [3usize, 1].into_iter().enumerate() {
            let e = embedding.row(row);
            let mut next = vec![0.0; 4];
            for i in 0..4 {
                let mut a = cell.bias[i];
                for j in 0..3 {
                    a += cell.w_x.data[i * 3 + j] * e[j];
                }
                for j in 0..4 {
                    a += cell.w_h.data[i * 4 + j] * s[j];
                }
                next[i] = a.tanh();
            }
            s = next;
            for d in 0..6 {
                let g: f64 = (0..4).map(|i| proj.data[d * 4 + i] * s[i]).sum();
                assert!((dec.row(step)[d] - g).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let p = ModelParams::init(&small_cfg(None)).unwrap();
        assert_eq!(p.decode_labels(&[]).unwrap().rows, 1);
        let ab = p.decode_labels(&[1, 2]).unwrap();
        let abc = p.decode_labels(&[1, 2, 3]).unwrap();
        assert_eq!(&abc.data[..ab.data.len()], &ab.data[..]);
        assert!(matches!(p.decode_labels(&[4]), Err(HatError::Vocabulary { id: 4, .. })));
        assert!(matches!(p.decode_labels(&[0]), Err(HatError::Vocabulary { id: 0, .. })));
    }

    #[test]
    fn incremental_decoder_matches_batch() {
        for ctx in [None, Some(0), Some(1), Some(2)] {
            let p = ModelParams::init(&small_cfg(ctx)).unwrap();
            let hist = [3, 1, 1, 2];
            let dec = p.decode_labels(&hist).unwrap();
            let (mut st, g0) = p.decoder_start();
            assert_eq!(g0, dec.row(0));
            for u in 1..=hist.len() {
                let (s2, g) = p.decoder_step(&st, &hist[..u]);
                assert_eq!(g, dec.row(u));
                st = s2;
            }
        }
    }

    #[test]
    fn finite_context_tables() {
        let p0 = ModelParams::init(&small_cfg(Some(0))).unwrap();
        let d = p0.decode_labels_finite(&[1, 2, 3]).unwrap();
        assert!((1..4).all(|u| d.row(u) == d.row(0)));
        let LabelDecoder::Table(t0) = &p0.decoder else { unreachable!() };
        assert_eq!(t0.table.rows, 1);

        let p1 = ModelParams::init(&small_cfg(Some(1))).unwrap();
        let LabelDecoder::Table(t1) = &p1.decoder else { unreachable!() };
        assert_eq!(t1.table.rows, 4);

        let p2 = ModelParams::init(&small_cfg(Some(2))).unwrap();
        let x = p2.decode_labels(&[1, 2, 3]).unwrap();
        let y = p2.decode_labels(&[3, 2, 3]).unwrap();
        assert_eq!(x.row(3), y.row(3));
        assert_ne!(x.row(1), y.row(1));
        let LabelDecoder::Table(t2) = &p2.decoder else { unreachable!() };
        // every padded 2-tuple maps to a distinct row
        let mut seen = std::collections::BTreeSet::new();
        seen.insert(t2.index(&[]));
        for a in 1..=3 {
            seen.insert(t2.index(&[a]));
            for b in 1..=3 {
                seen.insert(t2.index(&[a, b]));
            }
        }
        assert_eq!(seen.len(), t2.table.rows);
        assert_eq!(t2.table.rows, 13);
        let rec = ModelParams::init(&small_cfg(None)).unwrap();
        assert!(rec.decode_labels_finite(&[1]).is_err());
    }

    #[test]
    fn joint_and_blank_match_direct_formula() {
        let params = ModelParams::init(&small_cfg(None)).unwrap();
        let f = seeded_features(1, 6, 47).data;
        let g = seeded_features(1, 6, 48).data;
        let x: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a + b).collect();
        let h = tanh_vec(x.clone());
        let s = params.joint(&f, &g).unwrap();
        for y in 0..3 {
            let direct: f64 = params.joint_bias[y] + (0..6).map(|d| params.joint_out.data[y * 6 + d] * h[d]).sum::<f64>();
            assert!((s[y] - direct).abs() < 1e-14);
        }
        let z = params.blank_logit(&f, &g).unwrap();
        let direct: f64 = params.blank_bias + (0..6).map(|d| params.blank_w[d] * x[d]).sum::<f64>();
        assert!((z - direct).abs() < 1e-14);
        assert!(params.joint(&f[..5], &g).is_err());
    }

    #[test]
    fn joint_is_nearly_additive_in_linear_range() {
        let params = ModelParams::init(&small_cfg(None)).unwrap();
        let f: Vec<f64> = seeded_features(1, 6, 1).data.iter().map(|v| v * 0.01).collect();
        let g: Vec<f64> = seeded_features(1, 6, 2).data.iter().map(|v| v * 0.01).collect();
        let zero = vec![0.0; 6];
        let jfg = params.joint(&f, &g).unwrap();
        let jf = params.joint(&f, &zero).unwrap();
        let jg = params.joint(&zero, &g).unwrap();
        let j0 = params.joint(&zero, &zero).unwrap();
        for y in 0..3 {
            assert!((jfg[y] - (jf[y] + jg[y] - j0[y])).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for ctx in [None, Some(2)] {
            let params = ModelParams::init(&small_cfg(ctx)).unwrap();
            let mut buf = Vec::new();
            params.write_checkpoint(&mut buf).unwrap();
            let back = ModelParams::read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, params);
            let header_end = buf.windows(2).position(|w| w == b"\n\n").unwrap();
            assert_eq!(buf.len() - header_end - 2, params.num_parameters() * 8);
            assert!(ModelParams::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::init(&small_cfg(None)).unwrap();
        let b = ModelParams::init(&small_cfg(None)).unwrap();
        assert_eq!(a, b);
        for (_, _, v) in a.tensors() {
            assert!(v.iter().all(|x| x.abs() <= 0.1));
        }
        let full = ModelParams::zeros(&ModelConfig::full_scale());
        assert_eq!(full.joint_dim(), 768);
        assert_eq!(full.num_labels, 42);
    }
}
