//! Backoff n-gram language model: add-k estimates at observed contexts with a
//! normalising backoff weight, ARPA reading and writing, and scoring.
//!
//! Probabilities are stored as log10 (the ARPA convention) and returned by
//! [`NGramModel::score`] in natural log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{HatError, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// log10 probability written for `<s>`, which is never predicted.
pub const NEVER_LOG10: f64 = -99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_bow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    /// `entries[k - 1]` holds the k-grams keyed by token ids.
    entries: Vec<BTreeMap<Vec<usize>, Entry>>,
}

/// The last `order - 1` tokens of history.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LmState {
    pub context: Vec<usize>,
}

impl NGramModel {
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    /// Id of `token`, falling back to `<unk>` when the model has one.
    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).or_else(|| self.index.get(UNK)).copied()
    }

    fn id(&self, token: &str) -> usize {
        self.index[token]
    }

    pub fn bos(&self) -> usize {
        self.id(BOS)
    }

    pub fn eos(&self) -> usize {
        self.id(EOS)
    }

    /// Tokens that can be predicted: everything except `<s>`.
    pub fn predictable(&self) -> impl Iterator<Item = usize> + '_ {
        let bos = self.bos();
        (0..self.vocab.len()).filter(move |&i| i != bos)
    }

    pub fn start(&self) -> LmState {
        let context = if self.order > 1 { vec![self.bos()] } else { vec![] };
        LmState { context }
    }

    pub fn num_entries(&self, k: usize) -> usize {
        self.entries[k - 1].len()
    }

    fn log10_backoff(&self, context: &[usize], token: usize) -> f64 {
        let mut acc = 0.0;
        for start in 0..=context.len() {
            let h = &context[start..];
            let mut key = h.to_vec();
            key.push(token);
            if let Some(e) = self.entries[h.len()].get(&key) {
                return acc + e.log10_prob;
            }
            if !h.is_empty() {
                if let Some(e) = self.entries[h.len() - 1].get(h) {
                    acc += e.log10_bow.unwrap_or(0.0);
                }
            }
        }
        // token absent even as a unigram
        acc + NEVER_LOG10
    }

    /// Natural-log probability of `token` after `state`, and the next state.
    pub fn score(&self, state: &LmState, token: usize) -> (f64, LmState) {
        let lp = self.log10_backoff(&state.context, token) * std::f64::consts::LN_10;
        let mut context = state.context.clone();
        if self.order > 1 {
            context.push(token);
            if context.len() > self.order - 1 {
                context.remove(0);
            }
        }
        (lp, LmState { context })
    }

    /// Natural-log probability of a sentence including the end marker.
    pub fn sentence_log_prob(&self, words: &[&str]) -> Result<f64> {
        let mut state = self.start();
        let mut total = 0.0;
        for w in words.iter().copied().chain(std::iter::once(EOS)) {
            let id = self.token_id(w).ok_or_else(|| HatError::Argument(format!("token {w:?} not in LM and no {UNK}")))?;
            let (lp, next) = self.score(&state, id);
            total += lp;
            state = next;
        }
        Ok(total)
    }

    /// `exp(-mean log prob)` over all predicted tokens, end markers included.
    pub fn perplexity(&self, sentences: &[Vec<String>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in sentences {
            let words: Vec<&str> = s.iter().map(String::as_str).collect();
            total += self.sentence_log_prob(&words)?;
            count += words.len() + 1;
        }
        if count == 0 {
            return Err(HatError::Argument("perplexity of an empty corpus".into()));
        }
        Ok((-total / count as f64).exp())
    }

    // ---- ARPA ------------------------------------------------------------------

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for k in 1..=self.order {
            writeln!(out, "ngram {k}={}", self.entries[k - 1].len()).unwrap();
        }
        for k in 1..=self.order {
            write!(out, "\n\\{k}-grams:\n").unwrap();
            for (key, e) in &self.entries[k - 1] {
                let words: Vec<&str> = key.iter().map(|&i| self.vocab[i].as_str()).collect();
                write!(out, "{}\t{}", e.log10_prob, words.join(" ")).unwrap();
                if let Some(b) = e.log10_bow {
                    write!(out, "\t{b}").unwrap();
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn save_arpa(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_arpa()).map_err(|e| HatError::io(path, e))
    }

    pub fn load_arpa(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HatError::io(path, e))?;
        Self::from_arpa(&text)
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| HatError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, "\\data\\")) => {}
            Some((n, l)) => return Err(parse_err(n, format!("expected \\data\\, found {l:?}"))),
            None => return Err(parse_err(0, "empty file".into())),
        }
        let mut counts: Vec<usize> = Vec::new();
        let mut pending = None;
        for (n, l) in lines.by_ref() {
            if let Some(rest) = l.strip_prefix("ngram ") {
                let (k, c) = rest.split_once('=').ok_or_else(|| parse_err(n, format!("bad count line {l:?}")))?;
                let k: usize = k.trim().parse().map_err(|_| parse_err(n, format!("bad order {k:?}")))?;
                let c: usize = c.trim().parse().map_err(|_| parse_err(n, format!("bad count {c:?}")))?;
                if k != counts.len() + 1 {
                    return Err(parse_err(n, format!("ngram {k} out of sequence")));
                }
                counts.push(c);
            } else {
                pending = Some((n, l));
                break;
            }
        }
        if counts.is_empty() {
            return Err(parse_err(0, "no ngram counts".into()));
        }
        let order = counts.len();
        let mut raw: Vec<Vec<(usize, f64, Vec<String>, Option<f64>)>> = vec![Vec::new(); order];
        let mut current: Option<usize> = None;
        let mut ended = false;
        for (n, l) in pending.into_iter().chain(lines) {
            if ended {
                return Err(parse_err(n, format!("content after \\end\\: {l:?}")));
            }
            if l == "\\end\\" {
                ended = true;
                continue;
            }
            if let Some(k) = l.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let k: usize = k.parse().map_err(|_| parse_err(n, format!("bad section header {l:?}")))?;
                if k == 0 || k > order || k != current.map_or(1, |c| c + 1) {
                    return Err(parse_err(n, format!("unexpected section {l:?}")));
                }
                current = Some(k);
                continue;
            }
            let k = current.ok_or_else(|| parse_err(n, format!("entry outside a section: {l:?}")))?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            let backoff = match fields.len() {
                f if f == k + 1 => None,
                f if f == k + 2 && k < order => {
                    Some(fields[k + 1].parse::<f64>().map_err(|_| parse_err(n, format!("bad backoff {:?}", fields[k + 1])))?)
                }
                _ => return Err(parse_err(n, format!("expected {k} tokens in {l:?}"))),
            };
            let prob: f64 = fields[0].parse().map_err(|_| parse_err(n, format!("bad probability {:?}", fields[0])))?;
            raw[k - 1].push((n, prob, fields[1..=k].iter().map(|s| s.to_string()).collect(), backoff));
        }
        if !ended {
            return Err(parse_err(text.lines().count(), "missing \\end\\".into()));
        }
        for (k, (entries, &c)) in raw.iter().zip(&counts).enumerate() {
            if entries.len() != c {
                let line = entries.last().map_or(0, |e| e.0);
                return Err(parse_err(line, format!("header declares {c} {}-grams, section has {}", k + 1, entries.len())));
            }
        }
        let mut vocab = Vec::new();
        let mut index = BTreeMap::new();
        for (n, _, toks, _) in &raw[0] {
            if index.insert(toks[0].clone(), vocab.len()).is_some() {
                return Err(parse_err(*n, format!("duplicate unigram {:?}", toks[0])));
            }
            vocab.push(toks[0].clone());
        }
        for marker in [BOS, EOS] {
            if !index.contains_key(marker) {
                return Err(parse_err(0, format!("missing {marker} unigram")));
            }
        }
        let mut entries = vec![BTreeMap::new(); order];
        for (k, section) in raw.into_iter().enumerate() {
            for (n, prob, toks, bow) in section {
                let key = toks.iter().map(|t| index.get(t).copied().ok_or_else(|| parse_err(n, format!("token {t:?} has no unigram")))).collect::<Result<Vec<_>>>()?;
                if entries[k].insert(key, Entry { log10_prob: prob, log10_bow: bow }).is_some() {
                    return Err(parse_err(n, "duplicate entry".into()));
                }
            }
        }
        Ok(Self { order, vocab, index, entries })
    }
}

/// Trains an add-k backoff model of the given order on whitespace-tokenised
/// sentences. The vocabulary is the corpus words plus `<s>`, `</s>` and `<unk>`.
pub fn train_ngram(corpus: &[Vec<String>], order: usize, k: f64) -> Result<NGramModel> {
    if !(1..=4).contains(&order) {
        return Err(HatError::Argument(format!("n-gram order must be 1..=4, got {order}")));
    }
    if !(k > 0.0) {
        return Err(HatError::Argument(format!("add-k constant must be positive, got {k}")));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(HatError::Argument("empty LM corpus".into()));
    }
    let mut words: Vec<&str> = corpus.iter().flatten().map(String::as_str).filter(|w| ![BOS, EOS, UNK].contains(w)).collect();
    words.sort_unstable();
    words.dedup();
    let mut vocab: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
    vocab.extend(words.iter().map(|w| w.to_string()));
    let index: BTreeMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    let (bos, eos, unk) = (0usize, 1usize, 2usize);
    let predictable: Vec<usize> = (1..vocab.len()).collect();
    let v = predictable.len() as f64;

    // counts[k-1][ngram]
    let mut counts: Vec<BTreeMap<Vec<usize>, f64>> = vec![BTreeMap::new(); order];
    for s in corpus {
        let mut ids = vec![bos];
        ids.extend(s.iter().map(|w| index.get(w.as_str()).copied().unwrap_or(unk)));
        ids.push(eos);
        for i in 1..ids.len() {
            for n in 1..=order.min(i + 1) {
                *counts[n - 1].entry(ids[i + 1 - n..=i].to_vec()).or_insert(0.0) += 1.0;
            }
        }
    }

    let mut model = NGramModel { order, vocab, index, entries: vec![BTreeMap::new(); order] };
    let total: f64 = counts[0].values().sum();
    for &w in &predictable {
        let c = counts[0].get(&vec![w]).copied().unwrap_or(0.0);
        model.entries[0].insert(vec![w], Entry { log10_prob: ((c + k) / (total + k * v)).log10(), log10_bow: None });
    }
    model.entries[0].insert(vec![bos], Entry { log10_prob: NEVER_LOG10, log10_bow: None });

    for n in 2..=order {
        let mut history: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (g, c) in &counts[n - 1] {
            *history.entry(g[..n - 1].to_vec()).or_insert(0.0) += c;
        }
        for (g, c) in &counts[n - 1] {
            let p = (c + k) / (history[&g[..n - 1]] + k * v);
            model.entries[n - 1].insert(g.clone(), Entry { log10_prob: p.log10(), log10_bow: None });
        }
        // backoff weights for each observed history, which is itself an (n-1)-gram
        for h in history.keys() {
            let (mut seen, mut seen_lower) = (0.0, 0.0);
            for (g, e) in model.entries[n - 1].range(h.clone()..) {
                if &g[..n - 1] != h.as_slice() {
                    break;
                }
                seen += 10f64.powf(e.log10_prob);
                seen_lower += 10f64.powf(model.log10_backoff(&h[1..], g[n - 1]));
            }
            let denom = 1.0 - seen_lower;
            let bow = if denom <= 1e-12 { 0.0 } else { (1.0 - seen).max(0.0) / denom };
            let log10_bow = if bow > 0.0 { bow.log10() } else { NEVER_LOG10 };
            model.entries[n - 2]
                .get_mut(h)
                .expect("history of an observed n-gram is an observed (n-1)-gram")
                .log10_bow = Some(log10_bow);
        }
    }
    // every non-top-order entry carries an explicit weight
    for n in 1..order {
        for e in model.entries[n - 1].values_mut() {
            e.log10_bow.get_or_insert(0.0);
        }
    }
    Ok(model)
}

/// Reads a corpus file: one whitespace-tokenised sentence per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| HatError::io(path, e))?;
    Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).filter(|s: &Vec<String>| !s.is_empty()).collect())
}
