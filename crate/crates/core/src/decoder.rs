//! Frame-synchronous beam search with an external LM and internal-LM
//! subtraction, a lexicon-constrained word mode, fused CTC/RNN-T decoding,
//! exhaustive-search oracles and word error rate.

use std::cmp::Ordering;
use std::collections::btree_map::Entry as MapEntry;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{HatError, Result};
use crate::ilm::{ilm_log_local, ilm_sequence};
use crate::lattice::{self, ctc_collapse, Alphabet, LatticeDims, BLANK};
use crate::loss::hat_loss;
use crate::network::{DecoderState, Mat, ModelParams};
use crate::ngram::{LmState, NGramModel};
use crate::numeric::{log_add, log_sigmoid, log_softmax, logsumexp, NEG_INF};
use crate::posterior::{ctc_grid, hat_grid, joint_logits, rnnt_grid, GridKind, LocalPosteriorGrid};

// ---- lexicon ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    word: Option<usize>,
}

/// Prefix tree over pronunciations; terminal nodes carry word ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconTrie {
    nodes: Vec<TrieNode>,
    words: Vec<String>,
    prons: Vec<Vec<usize>>,
}

impl LexiconTrie {
    pub const ROOT: usize = 0;

    pub fn new(entries: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut trie = Self { nodes: vec![TrieNode { children: BTreeMap::new(), word: None }], words: Vec::new(), prons: Vec::new() };
        for (word, pron) in entries {
            if pron.is_empty() {
                return Err(HatError::Argument(format!("word {word:?} has an empty pronunciation")));
            }
            if pron.contains(&BLANK) {
                return Err(HatError::Argument(format!("word {word:?} uses the blank symbol")));
            }
            if trie.words.contains(word) {
                return Err(HatError::Argument(format!("duplicate word {word:?}")));
            }
            let mut node = Self::ROOT;
            for &y in pron {
                node = match trie.nodes[node].children.get(&y) {
                    Some(&c) => c,
                    None => {
                        trie.nodes.push(TrieNode { children: BTreeMap::new(), word: None });
                        let c = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(y, c);
                        c
                    }
                };
            }
            if let Some(other) = trie.nodes[node].word {
                return Err(HatError::Argument(format!("words {:?} and {word:?} share a pronunciation", trie.words[other])));
            }
            trie.nodes[node].word = Some(trie.words.len());
            trie.words.push(word.clone());
            trie.prons.push(pron.clone());
        }
        Ok(trie)
    }

    pub fn child(&self, node: usize, label: usize) -> Option<usize> {
        self.nodes[node].children.get(&label).copied()
    }

    pub fn word_at(&self, node: usize) -> Option<usize> {
        self.nodes[node].word
    }

    pub fn has_children(&self, node: usize) -> bool {
        !self.nodes[node].children.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn pronunciation(&self, id: usize) -> &[usize] {
        &self.prons[id]
    }

    /// Concatenated pronunciations; unknown words are an error.
    pub fn labels_for(&self, words: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            let id = self.word_id(w).ok_or_else(|| HatError::Argument(format!("word {w:?} not in lexicon")))?;
            out.extend_from_slice(&self.prons[id]);
        }
        Ok(out)
    }
}

// ---- configuration and results ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmMode {
    Label,
    Word,
}

impl LmMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "label" | "label_lm" => Ok(Self::Label),
            "word" | "word_lm" => Ok(Self::Word),
            _ => Err(HatError::Config(format!("unknown LM mode {s:?} (label or word)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Label => "label",
            Self::Word => "word",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    LogSumExp,
    Max,
}

impl MergeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logsumexp" | "sum" => Ok(Self::LogSumExp),
            "max" => Ok(Self::Max),
            _ => Err(HatError::Config(format!("unknown merge mode {s:?} (logsumexp or max)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LogSumExp => "logsumexp",
            Self::Max => "max",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Self::LogSumExp => log_add(a, b),
            Self::Max => a.max(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub lambda1: f64,
    /// Internal-LM weight (HAT search only).
    pub lambda2: f64,
    pub beam_width: usize,
    pub max_labels_per_frame: usize,
    pub mode: LmMode,
    pub nbest: usize,
    pub merge: MergeMode,
    /// Optional bound on the output length.
    pub max_output_labels: Option<usize>,
    /// Blank scale for fused decoding.
    pub blank_scale: f64,
    /// Per-label coverage reward for fused decoding.
    pub coverage_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            lambda1: 2.5,
            lambda2: 0.95,
            beam_width: 8,
            max_labels_per_frame: 5,
            mode: LmMode::Label,
            nbest: 10,
            merge: MergeMode::LogSumExp,
            max_output_labels: None,
            blank_scale: 1.0,
            coverage_weight: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_labels_per_frame == 0 || self.nbest == 0 {
            return Err(HatError::Config("beam_width, max_labels_per_frame and nbest must be at least 1".into()));
        }
        if !(self.blank_scale > 0.0) {
            return Err(HatError::Config(format!("blank scale must be positive, got {}", self.blank_scale)));
        }
        if ![self.lambda1, self.lambda2, self.coverage_weight].iter().all(|v| v.is_finite()) {
            return Err(HatError::Config("decode weights must be finite".into()));
        }
        Ok(())
    }

    fn hat_weights(&self) -> ScoreWeights {
        ScoreWeights { lambda1: self.lambda1, lambda2: self.lambda2, coverage: 0.0 }
    }

    fn fused_weights(&self) -> ScoreWeights {
        ScoreWeights { lambda1: self.lambda1, lambda2: 0.0, coverage: self.coverage_weight }
    }
}

/// Weights of the combined score
/// `lambda1 * posterior - lambda2 * ilm + lm + coverage * |labels|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub coverage: f64,
}

impl ScoreWeights {
    pub fn combine(&self, posterior: f64, ilm: f64, lm: f64, num_labels: usize) -> f64 {
        let mut s = self.lambda1 * posterior + lm;
        if self.lambda2 != 0.0 {
            s -= self.lambda2 * ilm;
        }
        if self.coverage != 0.0 {
            s += self.coverage * num_labels as f64;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NBestEntry {
    pub labels: Vec<usize>,
    /// Words in word mode, empty otherwise.
    pub words: Vec<String>,
    pub score_posterior: f64,
    pub score_ilm: f64,
    pub score_lm: f64,
    pub weights: ScoreWeights,
    pub combined: f64,
}

impl NBestEntry {
    fn new(labels: Vec<usize>, words: Vec<String>, post: f64, ilm: f64, lm: f64, weights: ScoreWeights) -> Self {
        let combined = weights.combine(post, ilm, lm, labels.len());
        Self { labels, words, score_posterior: post, score_ilm: ilm, score_lm: lm, weights, combined }
    }

    /// Combined score recomputed from the stored components.
    pub fn recombined(&self) -> f64 {
        self.weights.combine(self.score_posterior, self.score_ilm, self.score_lm, self.labels.len())
    }

    pub fn text(&self, alphabet: &Alphabet) -> String {
        if self.words.is_empty() {
            self.labels.iter().map(|&y| alphabet.symbol_name(y)).collect::<Vec<_>>().join(" ")
        } else {
            self.words.join(" ")
        }
    }
}

fn rank_order(a: &NBestEntry, b: &NBestEntry) -> Ordering {
    b.combined.total_cmp(&a.combined).then_with(|| a.labels.cmp(&b.labels)).then_with(|| a.words.cmp(&b.words))
}

/// One line per entry: utterance id, rank, combined score, the weighted
/// posterior, ILM, LM and coverage terms, and the text.
pub fn nbest_tsv(utt_id: &str, entries: &[NBestEntry], alphabet: &Alphabet) -> String {
    let mut out = String::new();
    for (rank, e) in entries.iter().enumerate() {
        let w = e.weights;
        writeln!(
            out,
            "{utt_id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            rank + 1,
            e.combined,
            w.lambda1 * e.score_posterior,
            -w.lambda2 * e.score_ilm,
            e.score_lm,
            w.coverage * e.labels.len() as f64,
            e.text(alphabet)
        )
        .unwrap();
    }
    out
}

pub const NBEST_HEADER: &str = "id\trank\tcombined\tposterior_term\tilm_term\tlm_term\tcoverage_term\ttext";

// ---- scorers ------------------------------------------------------------------------------

/// Local edge scores the frame-synchronous search needs.
pub trait FrameScorer {
    type State: Clone;
    fn frames(&self) -> usize;
    fn num_labels(&self) -> usize;
    fn initial(&self) -> Self::State;
    /// State after `history`, whose last element was just appended.
    fn extend(&self, state: &Self::State, history: &[usize]) -> Self::State;
    /// Log blank edge and log label edges (indexed `y - 1`) leaving frame `t`.
    fn local(&self, t: usize, state: &Self::State) -> (f64, Vec<f64>);
    /// `log P_ILM(. | history)`.
    fn ilm(&self, state: &Self::State) -> Vec<f64>;
}

/// Scores from a trained HAT or RNN-T model.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    enc: Mat,
    kind: GridKind,
}

impl<'a> ModelScorer<'a> {
    pub fn new(kind: GridKind, params: &'a ModelParams, features: &Mat) -> Result<Self> {
        if kind == GridKind::Ctc {
            return Err(HatError::Argument("CTC has no label-conditioned scorer".into()));
        }
        Ok(Self { params, enc: params.encode(features)?, kind })
    }
}

impl FrameScorer for ModelScorer<'_> {
    type State = (DecoderState, Vec<f64>);

    fn frames(&self) -> usize {
        self.enc.rows
    }

    fn num_labels(&self) -> usize {
        self.params.num_labels
    }

    fn initial(&self) -> Self::State {
        self.params.decoder_start()
    }

    fn extend(&self, state: &Self::State, history: &[usize]) -> Self::State {
        self.params.decoder_step(&state.0, history)
    }

    fn local(&self, t: usize, state: &Self::State) -> (f64, Vec<f64>) {
        let x: Vec<f64> = self.enc.row(t).iter().zip(&state.1).map(|(f, g)| f + g).collect();
        match self.kind {
            GridKind::Hat => {
                let z = self.params.blank_logit_sum(&x);
                let emit = log_sigmoid(-z);
                (log_sigmoid(z), log_softmax(&self.params.joint_scores(&x)).into_iter().map(|l| emit + l).collect())
            }
            _ => {
                let lp = log_softmax(&joint_logits(self.params, &x));
                (lp[0], lp[1..].to_vec())
            }
        }
    }

    fn ilm(&self, state: &Self::State) -> Vec<f64> {
        ilm_log_local(&state.1, self.params).expect("decoder output matches joint dimension")
    }
}

/// Scores from a fixed, history-independent transducer grid; the state is the
/// number of labels emitted so far. Optional per-row ILM distributions.
pub struct GridScorer<'a> {
    pub grid: &'a LocalPosteriorGrid,
    pub ilm: Option<&'a [Vec<f64>]>,
}

impl FrameScorer for GridScorer<'_> {
    type State = usize;

    fn frames(&self) -> usize {
        self.grid.frames
    }

    fn num_labels(&self) -> usize {
        self.grid.num_labels
    }

    fn initial(&self) -> usize {
        0
    }

    fn extend(&self, state: &usize, _: &[usize]) -> usize {
        state + 1
    }

    fn local(&self, t: usize, &u: &usize) -> (f64, Vec<f64>) {
        (self.grid.edge_blank(t, u), (1..=self.grid.num_labels).map(|y| self.grid.edge_label(t, u, y)).collect())
    }

    fn ilm(&self, &u: &usize) -> Vec<f64> {
        match self.ilm {
            Some(rows) => rows[u].clone(),
            None => vec![0.0; self.grid.num_labels],
        }
    }
}

/// Scales the blank edge by `beta` and renormalises the cell.
fn scale_blank(beta: f64, lb: f64, ly: &mut [f64]) -> f64 {
    if beta == 1.0 {
        return lb;
    }
    let lbs = beta.ln() + lb;
    let z = log_add(lbs, logsumexp(ly));
    ly.iter_mut().for_each(|l| *l -= z);
    lbs - z
}

// ---- LM plumbing ---------------------------------------------------------------------------

/// LM token id for each label (index `y`) or word (index word id).
struct LmLink<'a> {
    lm: Option<&'a NGramModel>,
    ids: Vec<usize>,
}

impl<'a> LmLink<'a> {
    fn new(lm: Option<&'a NGramModel>, mode: LmMode, num_labels: usize, lexicon: Option<&LexiconTrie>) -> Result<Self> {
        let Some(model) = lm else {
            return Ok(Self { lm: None, ids: Vec::new() });
        };
        let lookup = |tok: &str| model.token_id(tok).ok_or_else(|| HatError::Config(format!("LM has no token {tok:?} and no <unk>")));
        let ids = match mode {
            LmMode::Label => {
                let alphabet = Alphabet::new(num_labels)?;
                std::iter::once(Ok(0)).chain((1..=num_labels).map(|y| lookup(&alphabet.symbol_name(y)))).collect::<Result<_>>()?
            }
            LmMode::Word => {
                let lex = lexicon.ok_or_else(|| HatError::Config("word mode needs a lexicon".into()))?;
                (0..lex.num_words()).map(|w| lookup(lex.word(w))).collect::<Result<_>>()?
            }
        };
        Ok(Self { lm: Some(model), ids })
    }

    fn start(&self) -> Option<LmState> {
        self.lm.map(|m| m.start())
    }

    fn score(&self, state: &Option<LmState>, index: usize) -> (f64, Option<LmState>) {
        match (self.lm, state) {
            (Some(m), Some(s)) => {
                let (lp, next) = m.score(s, self.ids[index]);
                (lp, Some(next))
            }
            _ => (0.0, None),
        }
    }

    fn end(&self, state: &Option<LmState>) -> f64 {
        match (self.lm, state) {
            (Some(m), Some(s)) => m.score(s, m.eos()).0,
            _ => 0.0,
        }
    }
}

// ---- frame-synchronous search ------------------------------------------------------------

#[derive(Clone)]
struct Hyp<S> {
    labels: Vec<usize>,
    words: Vec<usize>,
    lex: usize,
    state: S,
    lm_state: Option<LmState>,
    post: f64,
    ilm: f64,
    lm: f64,
    depth: usize,
}

type Key = (Vec<usize>, Vec<usize>, usize);

impl<S> Hyp<S> {
    fn key(&self) -> Key {
        (self.labels.clone(), self.words.clone(), self.lex)
    }

    fn score(&self, w: &ScoreWeights) -> f64 {
        w.combine(self.post, self.ilm, self.lm, self.labels.len())
    }
}

struct SearchSpec<'a> {
    link: LmLink<'a>,
    lexicon: Option<&'a LexiconTrie>,
    weights: ScoreWeights,
    merge: MergeMode,
    beam: usize,
    max_per_frame: usize,
    max_out: usize,
    blank_scale: Option<f64>,
    nbest: usize,
}

fn prune<S>(hyps: &mut Vec<Hyp<S>>, w: &ScoreWeights, beam: usize) {
    if hyps.len() <= beam {
        return;
    }
    let mut scored: Vec<(f64, Hyp<S>)> = hyps.drain(..).map(|h| (h.score(w), h)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.labels.cmp(&b.1.labels)).then_with(|| a.1.words.cmp(&b.1.words)).then_with(|| a.1.lex.cmp(&b.1.lex)));
    scored.truncate(beam);
    hyps.extend(scored.into_iter().map(|(_, h)| h));
}

fn merge_into<S>(map: &mut BTreeMap<Key, Hyp<S>>, h: Hyp<S>, mode: MergeMode) {
    match map.entry(h.key()) {
        MapEntry::Vacant(v) => {
            v.insert(h);
        }
        MapEntry::Occupied(mut o) => {
            let e = o.get_mut();
            e.post = mode.apply(e.post, h.post);
            e.depth = e.depth.min(h.depth);
        }
    }
}

fn expand<Sc: FrameScorer>(sc: &Sc, spec: &SearchSpec, h: &Hyp<Sc::State>, ly: &[f64], il: &[f64], out: &mut Vec<Hyp<Sc::State>>) {
    for y in 1..=ly.len() {
        let edge = ly[y - 1];
        if edge == NEG_INF {
            continue;
        }
        let node = match spec.lexicon {
            Some(lex) => match lex.child(h.lex, y) {
                Some(c) => Some(c),
                None => continue,
            },
            None => None,
        };
        let mut labels = h.labels.clone();
        labels.push(y);
        let state = sc.extend(&h.state, &labels);
        let base = Hyp {
            labels,
            words: h.words.clone(),
            lex: h.lex,
            state,
            lm_state: h.lm_state.clone(),
            post: h.post + edge,
            ilm: h.ilm + il[y - 1],
            lm: h.lm,
            depth: h.depth + 1,
        };
        match (spec.lexicon, node) {
            (Some(lex), Some(c)) => {
                if let Some(w) = lex.word_at(c) {
                    let (lp, lm_state) = spec.link.score(&h.lm_state, w);
                    let mut emitted = base.clone();
                    emitted.words.push(w);
                    emitted.lex = LexiconTrie::ROOT;
                    emitted.lm += lp;
                    emitted.lm_state = lm_state;
                    out.push(emitted);
                }
                if lex.has_children(c) {
                    out.push(Hyp { lex: c, ..base });
                }
            }
            _ => {
                let (lp, lm_state) = spec.link.score(&h.lm_state, y);
                out.push(Hyp { lm: base.lm + lp, lm_state, ..base });
            }
        }
    }
}

fn frame_sync_search<Sc: FrameScorer>(sc: &Sc, spec: &SearchSpec) -> Result<Vec<NBestEntry>> {
    let frames = sc.frames();
    if frames == 0 {
        return Err(HatError::Shape("cannot decode zero frames".into()));
    }
    let use_ilm = spec.weights.lambda2 != 0.0;
    let w = &spec.weights;
    let mut frontier = vec![Hyp {
        labels: Vec::new(),
        words: Vec::new(),
        lex: LexiconTrie::ROOT,
        state: sc.initial(),
        lm_state: spec.link.start(),
        post: 0.0,
        ilm: 0.0,
        lm: 0.0,
        depth: 0,
    }];
    let mut finals = Vec::new();
    for t in 0..frames {
        let mut levels: BTreeMap<usize, BTreeMap<Key, Hyp<Sc::State>>> = BTreeMap::new();
        for h in frontier.drain(..) {
            merge_into(levels.entry(h.labels.len()).or_default(), h, spec.merge);
        }
        let mut done: Vec<(Hyp<Sc::State>, f64)> = Vec::new();
        while let Some(len) = levels.keys().next().copied() {
            let mut level: Vec<Hyp<Sc::State>> = levels.remove(&len).unwrap().into_values().collect();
            prune(&mut level, w, spec.beam);
            let mut children = Vec::new();
            for h in level {
                let (lb, mut ly) = sc.local(t, &h.state);
                let lb = match spec.blank_scale {
                    Some(beta) => scale_blank(beta, lb, &mut ly),
                    None => lb,
                };
                if h.depth < spec.max_per_frame && h.labels.len() < spec.max_out {
                    let il = if use_ilm { sc.ilm(&h.state) } else { vec![0.0; ly.len()] };
                    expand(sc, spec, &h, &ly, &il, &mut children);
                }
                done.push((h, lb));
            }
            for c in children {
                if c.post > NEG_INF {
                    merge_into(levels.entry(len + 1).or_default(), c, spec.merge);
                }
            }
        }
        if t + 1 < frames {
            let mut next: Vec<Hyp<Sc::State>> = done
                .into_iter()
                .filter_map(|(mut h, lb)| {
                    h.post += lb;
                    h.depth = 0;
                    (h.post > NEG_INF).then_some(h)
                })
                .collect();
            prune(&mut next, w, spec.beam);
            frontier = next;
            if frontier.is_empty() {
                return Err(HatError::DecodeFailure(format!("beam empty at frame {}", t + 1)));
            }
        } else {
            finals = done.into_iter().map(|(h, _)| h).collect();
        }
    }
    finish(finals, spec)
}

fn finish<S>(finals: Vec<Hyp<S>>, spec: &SearchSpec) -> Result<Vec<NBestEntry>> {
    let mut out: Vec<NBestEntry> = finals
        .into_iter()
        .filter(|h| spec.lexicon.is_none() || h.lex == LexiconTrie::ROOT)
        .map(|h| {
            let lm = h.lm + spec.link.end(&h.lm_state);
            let words = match spec.lexicon {
                Some(lex) => h.words.iter().map(|&w| lex.word(w).to_string()).collect(),
                None => Vec::new(),
            };
            NBestEntry::new(h.labels, words, h.post, h.ilm, lm, spec.weights)
        })
        .filter(|e| e.combined.is_finite())
        .collect();
    if out.is_empty() {
        return Err(HatError::DecodeFailure("no complete hypothesis survived".into()));
    }
    out.sort_by(rank_order);
    out.truncate(spec.nbest);
    Ok(out)
}

fn hat_spec<'a>(cfg: &DecodeConfig, num_labels: usize, lm: Option<&'a NGramModel>, lexicon: Option<&'a LexiconTrie>) -> Result<SearchSpec<'a>> {
    cfg.validate()?;
    let lexicon = match cfg.mode {
        LmMode::Word => Some(lexicon.ok_or_else(|| HatError::Config("word mode needs a lexicon".into()))?),
        LmMode::Label => None,
    };
    Ok(SearchSpec {
        link: LmLink::new(lm, cfg.mode, num_labels, lexicon)?,
        lexicon,
        weights: cfg.hat_weights(),
        merge: cfg.merge,
        beam: cfg.beam_width,
        max_per_frame: cfg.max_labels_per_frame,
        max_out: cfg.max_output_labels.unwrap_or(usize::MAX),
        blank_scale: None,
        nbest: cfg.nbest,
    })
}

fn fused_spec<'a>(cfg: &DecodeConfig, num_labels: usize, lm: Option<&'a NGramModel>) -> Result<SearchSpec<'a>> {
    cfg.validate()?;
    if cfg.mode == LmMode::Word {
        return Err(HatError::Config("fused decoding supports the label LM mode only".into()));
    }
    Ok(SearchSpec {
        link: LmLink::new(lm, LmMode::Label, num_labels, None)?,
        lexicon: None,
        weights: cfg.fused_weights(),
        merge: MergeMode::Max,
        beam: cfg.beam_width,
        max_per_frame: cfg.max_labels_per_frame,
        max_out: cfg.max_output_labels.unwrap_or(usize::MAX),
        blank_scale: Some(cfg.blank_scale),
        nbest: cfg.nbest,
    })
}

/// HAT beam search maximising `lambda1 log P(Y|X) - lambda2 log P_ILM(Y) + log P_LM(Y)`.
pub fn beam_decode_hat(features: &Mat, params: &ModelParams, lm: Option<&NGramModel>, lexicon: Option<&LexiconTrie>, cfg: &DecodeConfig) -> Result<Vec<NBestEntry>> {
    let spec = hat_spec(cfg, params.num_labels, lm, lexicon)?;
    frame_sync_search(&ModelScorer::new(GridKind::Hat, params, features)?, &spec)
}

/// The same search over a fixed HAT or RNN-T grid. Output is limited to the
/// grid's row count.
pub fn beam_decode_grid(grid: &LocalPosteriorGrid, ilm: Option<&[Vec<f64>]>, lm: Option<&NGramModel>, cfg: &DecodeConfig) -> Result<Vec<NBestEntry>> {
    if grid.kind == GridKind::Ctc {
        return Err(HatError::Argument("use beam_decode_fused_grid for CTC".into()));
    }
    let mut spec = hat_spec(cfg, grid.num_labels, lm, None)?;
    spec.max_out = spec.max_out.min(grid.rows - 1);
    frame_sync_search(&GridScorer { grid, ilm }, &spec)
}

/// Fused CTC or RNN-T decoding: maximises, over alignment paths,
/// `lambda1 log P'(path) + log P_LM(B(path)) + coverage * |B(path)|`, where `P'`
/// scales the blank posterior by `blank_scale` and renormalises each cell.
pub fn beam_decode_fused(kind: GridKind, features: &Mat, params: &ModelParams, lm: Option<&NGramModel>, cfg: &DecodeConfig) -> Result<Vec<NBestEntry>> {
    match kind {
        GridKind::Ctc => {
            let grid = ctc_grid(&params.encode(features)?, params)?;
            beam_decode_fused_grid(&grid, lm, cfg)
        }
        GridKind::Rnnt => {
            let spec = fused_spec(cfg, params.num_labels, lm)?;
            frame_sync_search(&ModelScorer::new(GridKind::Rnnt, params, features)?, &spec)
        }
        GridKind::Hat => Err(HatError::Argument("fused decoding applies to CTC and RNN-T".into())),
    }
}

pub fn beam_decode_fused_grid(grid: &LocalPosteriorGrid, lm: Option<&NGramModel>, cfg: &DecodeConfig) -> Result<Vec<NBestEntry>> {
    let mut spec = fused_spec(cfg, grid.num_labels, lm)?;
    match grid.kind {
        GridKind::Ctc => ctc_prefix_search(grid, &spec),
        _ => {
            spec.max_out = spec.max_out.min(grid.rows - 1);
            frame_sync_search(&GridScorer { grid, ilm: None }, &spec)
        }
    }
}

#[derive(Clone)]
struct Prefix {
    blank: f64,
    label: f64,
    lm_state: Option<LmState>,
    lm: f64,
}

impl Prefix {
    fn best(&self) -> f64 {
        self.blank.max(self.label)
    }
}

/// Viterbi prefix search: each prefix keeps the best path ending in blank and
/// the best path ending in its last label.
fn ctc_prefix_search(grid: &LocalPosteriorGrid, spec: &SearchSpec) -> Result<Vec<NBestEntry>> {
    let beta = spec.blank_scale.unwrap_or(1.0);
    let w = &spec.weights;
    let score = |labels: &[usize], p: &Prefix| w.combine(p.best(), 0.0, p.lm, labels.len());
    let mut beam: BTreeMap<Vec<usize>, Prefix> = BTreeMap::new();
    beam.insert(Vec::new(), Prefix { blank: 0.0, label: NEG_INF, lm_state: spec.link.start(), lm: 0.0 });
    for t in 0..grid.frames {
        let mut ly: Vec<f64> = (1..=grid.num_labels).map(|y| grid.log_label(t, 0, y)).collect();
        let lb = scale_blank(beta, grid.log_blank(t, 0), &mut ly);
        let mut next: BTreeMap<Vec<usize>, Prefix> = BTreeMap::new();
        for (prefix, p) in &beam {
            // same prefix: a blank, or a repeat of the last label
            let e = next.entry(prefix.clone()).or_insert_with(|| Prefix { blank: NEG_INF, label: NEG_INF, lm_state: p.lm_state.clone(), lm: p.lm });
            e.blank = e.blank.max(p.best() + lb);
            if let Some(&last) = prefix.last() {
                e.label = e.label.max(p.label + ly[last - 1]);
            }
            if prefix.len() >= spec.max_out {
                continue;
            }
            for y in 1..=grid.num_labels {
                // a repeated label only starts a new symbol after a blank
                let from = if prefix.last() == Some(&y) { p.blank } else { p.best() };
                if from == NEG_INF || ly[y - 1] == NEG_INF {
                    continue;
                }
                let mut key = prefix.clone();
                key.push(y);
                let e = next.entry(key).or_insert_with(|| {
                    let (lp, lm_state) = spec.link.score(&p.lm_state, y);
                    Prefix { blank: NEG_INF, label: NEG_INF, lm_state, lm: p.lm + lp }
                });
                e.label = e.label.max(from + ly[y - 1]);
            }
        }
        let mut ranked: Vec<(f64, Vec<usize>)> = next.iter().filter(|(_, p)| p.best() > NEG_INF).map(|(k, p)| (score(k, p), k.clone())).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        ranked.truncate(spec.beam);
        beam = ranked
            .into_iter()
            .map(|(_, k)| {
                let p = next.remove(&k).unwrap();
                (k, p)
            })
            .collect();
        if beam.is_empty() {
            return Err(HatError::DecodeFailure(format!("beam empty at frame {}", t + 1)));
        }
    }
    let finals: Vec<Hyp<()>> = beam
        .into_iter()
        .map(|(labels, p)| Hyp { post: p.best(), labels, words: Vec::new(), lex: 0, state: (), lm_state: p.lm_state, ilm: 0.0, lm: p.lm, depth: 0 })
        .collect();
    finish(finals, spec)
}

// ---- exhaustive oracles -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExhaustiveCaps {
    pub max_frames: usize,
    pub max_labels: usize,
    pub max_vocab: usize,
}

impl Default for ExhaustiveCaps {
    fn default() -> Self {
        Self { max_frames: 4, max_labels: 3, max_vocab: 3 }
    }
}

impl ExhaustiveCaps {
    fn check(&self, frames: usize, labels: usize, vocab: usize) -> Result<()> {
        for (what, size, cap) in [("frames", frames, self.max_frames), ("output labels", labels, self.max_labels), ("vocabulary", vocab, self.max_vocab)] {
            if size > cap {
                return Err(HatError::EnumerationTooLarge { what, size, cap });
            }
        }
        Ok(())
    }
}

/// Every label sequence over `1..=v` of length `0..=max_len`, shortest first,
/// lexicographic within a length.
pub fn all_label_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut layer = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer.iter().flat_map(|p: &Vec<usize>| (1..=v).map(move |y| [p.as_slice(), &[y]].concat())).collect();
        out.extend(layer.iter().cloned());
    }
    out
}

fn label_lm_score(link: &LmLink, labels: &[usize]) -> f64 {
    let mut state = link.start();
    let mut total = 0.0;
    for &y in labels {
        let (lp, next) = link.score(&state, y);
        total += lp;
        state = next;
    }
    total + link.end(&state)
}

fn ranked(mut entries: Vec<NBestEntry>, nbest: usize) -> Result<Vec<NBestEntry>> {
    entries.retain(|e| e.combined.is_finite());
    if entries.is_empty() {
        return Err(HatError::DecodeFailure("every sequence has zero probability".into()));
    }
    entries.sort_by(rank_order);
    entries.truncate(nbest);
    Ok(entries)
}

fn output_cap(cfg: &DecodeConfig, caps: &ExhaustiveCaps) -> usize {
    cfg.max_output_labels.unwrap_or(caps.max_labels)
}

/// Scores every label sequence up to the output cap by the marginalised
/// posterior, internal LM and label LM; returns them ranked.
pub fn exhaustive_decode(features: &Mat, params: &ModelParams, lm: Option<&NGramModel>, cfg: &DecodeConfig, caps: &ExhaustiveCaps) -> Result<Vec<NBestEntry>> {
    let u_max = output_cap(cfg, caps);
    caps.check(features.rows, u_max, params.num_labels)?;
    let link = LmLink::new(lm, LmMode::Label, params.num_labels, None)?;
    let enc = params.encode(features)?;
    let mut entries = Vec::new();
    for labels in all_label_sequences(params.num_labels, u_max) {
        let acts = crate::network::Activations { enc: enc.clone(), dec: params.decode_labels(&labels)? };
        let post = -hat_loss(&hat_grid(&acts, params)?, &labels)?.neg_log_posterior;
        let ilm = if cfg.lambda2 != 0.0 { ilm_sequence(&labels, params)? } else { 0.0 };
        let lm_score = label_lm_score(&link, &labels);
        entries.push(NBestEntry::new(labels, Vec::new(), post, ilm, lm_score, cfg.hat_weights()));
    }
    ranked(entries, cfg.nbest)
}

/// Oracle for [`beam_decode_grid`] on a HAT grid.
pub fn exhaustive_decode_grid(grid: &LocalPosteriorGrid, ilm: Option<&[Vec<f64>]>, lm: Option<&NGramModel>, cfg: &DecodeConfig, caps: &ExhaustiveCaps) -> Result<Vec<NBestEntry>> {
    if grid.kind != GridKind::Hat {
        return Err(HatError::Argument("exhaustive_decode_grid expects a HAT grid".into()));
    }
    let u_max = output_cap(cfg, caps).min(grid.rows - 1);
    caps.check(grid.frames, u_max, grid.num_labels)?;
    let link = LmLink::new(lm, LmMode::Label, grid.num_labels, None)?;
    let mut entries = Vec::new();
    for labels in all_label_sequences(grid.num_labels, u_max) {
        let sub = sub_grid(grid, labels.len() + 1)?;
        let post = -hat_loss(&sub, &labels)?.neg_log_posterior;
        let ilm_score = match ilm {
            Some(rows) => labels.iter().enumerate().map(|(u, &y)| rows[u][y - 1]).sum(),
            None => 0.0,
        };
        entries.push(NBestEntry::new(labels.clone(), Vec::new(), post, ilm_score, label_lm_score(&link, &labels), cfg.hat_weights()));
    }
    ranked(entries, cfg.nbest)
}

fn sub_grid(grid: &LocalPosteriorGrid, rows: usize) -> Result<LocalPosteriorGrid> {
    grid.truncate_rows(rows)
}

fn best_transducer_path(grid: &LocalPosteriorGrid, labels: &[usize], beta: f64) -> Result<f64> {
    let dims = LatticeDims::new(grid.frames, labels.len())?;
    let mut best = NEG_INF;
    for path in lattice::enumerate_paths(dims, labels, lattice::DEFAULT_PATH_CAP)? {
        let (mut t, mut u) = (0, 0);
        let mut s = 0.0;
        for &e in &path.edges {
            let mut ly: Vec<f64> = (1..=grid.num_labels).map(|y| grid.edge_label(t, u, y)).collect();
            let lb = scale_blank(beta, grid.edge_blank(t, u), &mut ly);
            if e == BLANK {
                s += lb;
                t += 1;
            } else {
                s += ly[e - 1];
                u += 1;
            }
        }
        best = best.max(s);
    }
    Ok(best)
}

/// Oracle for [`beam_decode_fused`]: the best path for every label sequence up
/// to the output cap.
pub fn exhaustive_decode_fused(kind: GridKind, features: &Mat, params: &ModelParams, lm: Option<&NGramModel>, cfg: &DecodeConfig, caps: &ExhaustiveCaps) -> Result<Vec<NBestEntry>> {
    match kind {
        GridKind::Ctc => exhaustive_decode_fused_grid(&ctc_grid(&params.encode(features)?, params)?, lm, cfg, caps),
        GridKind::Rnnt => {
            let u_max = output_cap(cfg, caps);
            caps.check(features.rows, u_max, params.num_labels)?;
            let link = LmLink::new(lm, LmMode::Label, params.num_labels, None)?;
            let enc = params.encode(features)?;
            let mut entries = Vec::new();
            for labels in all_label_sequences(params.num_labels, u_max) {
                let acts = crate::network::Activations { enc: enc.clone(), dec: params.decode_labels(&labels)? };
                let post = best_transducer_path(&rnnt_grid(&acts, params)?, &labels, cfg.blank_scale)?;
                entries.push(NBestEntry::new(labels.clone(), Vec::new(), post, 0.0, label_lm_score(&link, &labels), cfg.fused_weights()));
            }
            ranked(entries, cfg.nbest)
        }
        GridKind::Hat => Err(HatError::Argument("fused decoding applies to CTC and RNN-T".into())),
    }
}

/// Oracle for [`beam_decode_fused_grid`].
pub fn exhaustive_decode_fused_grid(grid: &LocalPosteriorGrid, lm: Option<&NGramModel>, cfg: &DecodeConfig, caps: &ExhaustiveCaps) -> Result<Vec<NBestEntry>> {
    let link = LmLink::new(lm, LmMode::Label, grid.num_labels, None)?;
    let v = grid.num_labels;
    let mut best: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    match grid.kind {
        GridKind::Ctc => {
            let u_max = output_cap(cfg, caps);
            caps.check(grid.frames, u_max, v)?;
            let cells: Vec<(f64, Vec<f64>)> = (0..grid.frames)
                .map(|t| {
                    let mut ly: Vec<f64> = (1..=v).map(|y| grid.log_label(t, 0, y)).collect();
                    let lb = scale_blank(cfg.blank_scale, grid.log_blank(t, 0), &mut ly);
                    (lb, ly)
                })
                .collect();
            let total = (v + 1).pow(grid.frames as u32);
            for code in 0..total {
                let mut c = code;
                let mut path = Vec::with_capacity(grid.frames);
                let mut s = 0.0;
                for (lb, ly) in &cells {
                    let sym = c % (v + 1);
                    c /= v + 1;
                    s += if sym == BLANK { *lb } else { ly[sym - 1] };
                    path.push(sym);
                }
                let labels = ctc_collapse(&path);
                if labels.len() <= u_max {
                    let e = best.entry(labels).or_insert(NEG_INF);
                    *e = e.max(s);
                }
            }
        }
        _ => {
            let u_max = output_cap(cfg, caps).min(grid.rows - 1);
            caps.check(grid.frames, u_max, v)?;
            for labels in all_label_sequences(v, u_max) {
                let s = best_transducer_path(&sub_grid(grid, labels.len() + 1)?, &labels, cfg.blank_scale)?;
                best.insert(labels, s);
            }
        }
    }
    let entries = best.into_iter().map(|(labels, post)| {
        let lm_score = label_lm_score(&link, &labels);
        NBestEntry::new(labels, Vec::new(), post, 0.0, lm_score, cfg.fused_weights())
    });
    ranked(entries.collect(), cfg.nbest)
}

// ---- word error rate -----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerStats {
    pub ref_len: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// Errors per reference word; an empty reference gives 0 or 1.
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            return if self.errors() == 0 { 0.0 } else { 1.0 };
        }
        self.errors() as f64 / self.ref_len as f64
    }

    pub fn add(&mut self, other: &WerStats) {
        self.ref_len += other.ref_len;
        self.sub += other.sub;
        self.ins += other.ins;
        self.del += other.del;
    }

    /// `WER% (del/ins/sub)`.
    pub fn summary(&self) -> String {
        format!("{:.2} ({}/{}/{})", 100.0 * self.rate(), self.del, self.ins, self.sub)
    }
}

/// Levenshtein alignment with unit costs; among minimal alignments the
/// backtrace prefers substitution, then insertion, then deletion.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerStats {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let mut stats = WerStats { ref_len: n, ..WerStats::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                stats.sub += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            stats.ins += 1;
            j -= 1;
        } else {
            stats.del += 1;
            i -= 1;
        }
    }
    stats
}
