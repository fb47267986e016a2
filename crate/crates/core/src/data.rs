//! Synthetic acoustic task and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.tsv` (`id <TAB> frames <TAB> transcript`),
//! one `<id>.feat` per utterance (u32 LE frame count, u32 LE dimension, then
//! row-major f64 LE values), `lexicon.txt` (`word <TAB> labels...`) and
//! `alphabet.txt` (one label name per line).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::decoder::LexiconTrie;
use crate::error::{HatError, Result};
use crate::lattice::Alphabet;
use crate::network::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Mat,
    pub words: Vec<String>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub alphabet: Alphabet,
    /// `(word, pronunciation)` in lexicon order.
    pub lexicon: Vec<(String, Vec<usize>)>,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn input_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.cols)
    }

    pub fn trie(&self) -> Result<LexiconTrie> {
        LexiconTrie::new(&self.lexicon)
    }

    pub fn transcripts(&self) -> Vec<Vec<usize>> {
        self.utterances.iter().map(|u| u.labels.clone()).collect()
    }
}

/// Word bigram sampler: first word from `start`, then after each word stop with
/// `end_prob` (or at `max_words`), otherwise draw from `trans[prev]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WordGrammar {
    pub start: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub end_prob: f64,
    pub max_words: usize,
}

impl WordGrammar {
    /// Random grammar over `n` words; `skew` scales the log-weights, so larger
    /// values give peakier successor distributions.
    pub fn random(rng: &mut ChaCha8Rng, n: usize, skew: f64, end_prob: f64, max_words: usize) -> Self {
        let mut dist = || {
            let w: Vec<f64> = (0..n).map(|_| (skew * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let start = dist();
        let trans = (0..n).map(|_| dist()).collect();
        Self { start, trans, end_prob, max_words }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let start = WeightedIndex::new(&self.start).expect("valid start distribution");
        let mut words = vec![start.sample(rng)];
        while words.len() < self.max_words && rng.random::<f64>() >= self.end_prob {
            let next = WeightedIndex::new(&self.trans[*words.last().unwrap()]).expect("valid transition row");
            words.push(next.sample(rng));
        }
        words
    }

    /// Expected number of occurrences of each word in one sentence.
    pub fn expected_word_counts(&self) -> Vec<f64> {
        let n = self.start.len();
        let mut at = self.start.clone();
        let mut total = at.clone();
        for _ in 1..self.max_words {
            let mut next = vec![0.0; n];
            for (i, p) in at.iter().enumerate() {
                for (j, q) in self.trans[i].iter().enumerate() {
                    next[j] += p * (1.0 - self.end_prob) * q;
                }
            }
            total.iter_mut().zip(&next).for_each(|(t, x)| *t += x);
            at = next;
        }
        total
    }
}

/// Parameters of the synthetic task, as exposed through `task.*` config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub num_labels: usize,
    pub num_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub input_dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub lm_sentences: usize,
    pub end_prob: f64,
    pub max_sentence_words: usize,
    /// Log-weight scale of the acoustic-training grammar.
    pub train_skew: f64,
    /// Log-weight scale of the grammar behind the LM corpus and test set.
    pub test_skew: f64,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            num_labels: 6,
            num_words: 20,
            min_word_len: 2,
            max_word_len: 4,
            input_dim: 16,
            min_duration: 2,
            max_duration: 4,
            noise_std: 0.3,
            train_utterances: 500,
            test_utterances: 100,
            lm_sentences: 2000,
            end_prob: 0.3,
            max_sentence_words: 6,
            train_skew: 0.5,
            test_skew: 2.5,
            seed: 47,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub alphabet: Alphabet,
    pub lexicon: Vec<(String, Vec<usize>)>,
    /// Grammar of the acoustic training transcripts.
    pub train_grammar: WordGrammar,
    /// Skewed grammar of the LM corpus and the test transcripts.
    pub test_grammar: WordGrammar,
    /// One row per label.
    pub prototypes: Vec<Vec<f64>>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    pub seed: u64,
}

const STREAM_SPEC: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_LM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl SyntheticTaskSpec {
    pub fn build(p: &TaskParams) -> Result<Self> {
        if p.min_duration < 1 || p.max_duration < p.min_duration {
            return Err(HatError::Argument(format!("bad duration range {}..={}", p.min_duration, p.max_duration)));
        }
        if p.min_word_len < 1 || p.max_word_len < p.min_word_len {
            return Err(HatError::Argument(format!("bad word length range {}..={}", p.min_word_len, p.max_word_len)));
        }
        if !(p.noise_std >= 0.0) || !(0.0..=1.0).contains(&p.end_prob) || p.max_sentence_words == 0 || p.input_dim == 0 || p.num_words == 0 {
            return Err(HatError::Argument("noise_std, end_prob, max_sentence_words, input_dim or num_words out of range".into()));
        }
        let alphabet = Alphabet::new(p.num_labels)?;
        let distinct: usize = (p.min_word_len..=p.max_word_len).map(|l| p.num_labels.saturating_pow(l as u32)).sum();
        if distinct < p.num_words {
            return Err(HatError::Argument(format!("only {distinct} distinct pronunciations for {} words", p.num_words)));
        }
        let mut rng = stream(p.seed, STREAM_SPEC);
        let mut lexicon: Vec<(String, Vec<usize>)> = Vec::new();
        while lexicon.len() < p.num_words {
            let len = rng.random_range(p.min_word_len..=p.max_word_len);
            let pron: Vec<usize> = (0..len).map(|_| rng.random_range(1..=p.num_labels)).collect();
            if lexicon.iter().any(|(_, q)| *q == pron) {
                continue;
            }
            let name: String = pron.iter().map(|&y| alphabet.symbol_name(y)).collect();
            lexicon.push((name, pron));
        }
        let prototypes = (0..p.num_labels).map(|_| (0..p.input_dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let train_grammar = WordGrammar::random(&mut rng, p.num_words, p.train_skew, p.end_prob, p.max_sentence_words);
        let test_grammar = WordGrammar::random(&mut rng, p.num_words, p.test_skew, p.end_prob, p.max_sentence_words);
        Ok(Self { alphabet, lexicon, train_grammar, test_grammar, prototypes, min_duration: p.min_duration, max_duration: p.max_duration, noise_std: p.noise_std, seed: p.seed })
    }

    /// Renders a label sequence: each label repeats its prototype for a sampled
    /// duration, plus Gaussian noise.
    pub fn render(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Mat {
        let dim = self.prototypes[0].len();
        let mut data = Vec::new();
        let noise = Normal::new(0.0, self.noise_std).expect("noise_std checked at build");
        for &y in labels {
            let d = rng.random_range(self.min_duration..=self.max_duration);
            for _ in 0..d {
                for &v in &self.prototypes[y - 1] {
                    data.push(if self.noise_std > 0.0 { v + noise.sample(rng) } else { v });
                }
            }
        }
        Mat { rows: data.len() / dim, cols: dim, data }
    }

    fn utterances(&self, grammar: &WordGrammar, n: usize, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let ws = grammar.sample(rng);
                let labels: Vec<usize> = ws.iter().flat_map(|&w| self.lexicon[w].1.iter().copied()).collect();
                let features = self.render(&labels, rng);
                Utterance { id: format!("{prefix}{i:05}"), features, words: ws.iter().map(|&w| self.lexicon[w].0.clone()).collect(), labels }
            })
            .collect()
    }

    pub fn dataset(&self, utterances: Vec<Utterance>) -> Dataset {
        Dataset { alphabet: self.alphabet, lexicon: self.lexicon.clone(), utterances }
    }

    /// Expected per-sentence count of each label under `grammar`.
    pub fn expected_label_counts(&self, grammar: &WordGrammar) -> Vec<f64> {
        let words = grammar.expected_word_counts();
        let mut counts = vec![0.0; self.alphabet.size()];
        for (w, c) in words.iter().enumerate() {
            for &y in &self.lexicon[w].1 {
                counts[y - 1] += c;
            }
        }
        counts
    }
}

/// Everything `generate` produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: SyntheticTaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub lm_corpus: Vec<Vec<String>>,
}

pub fn generate(p: &TaskParams) -> Result<Task> {
    let spec = SyntheticTaskSpec::build(p)?;
    let train = spec.utterances(&spec.train_grammar, p.train_utterances, "train-", &mut stream(p.seed, STREAM_TRAIN));
    let test = spec.utterances(&spec.test_grammar, p.test_utterances, "test-", &mut stream(p.seed, STREAM_TEST));
    let mut rng = stream(p.seed, STREAM_LM);
    let lm_corpus = (0..p.lm_sentences).map(|_| spec.test_grammar.sample(&mut rng).iter().map(|&w| spec.lexicon[w].0.clone()).collect()).collect();
    Ok(Task { train: spec.dataset(train), test: spec.dataset(test), lm_corpus, spec })
}

/// Writes `train/`, `test/` and `lm_corpus.txt` under `dir`.
pub fn write_task(task: &Task, dir: &Path) -> Result<()> {
    write_dataset(&task.train, &dir.join("train"))?;
    write_dataset(&task.test, &dir.join("test"))?;
    let corpus: String = task.lm_corpus.iter().map(|s| s.join(" ") + "\n").collect();
    write_file(&dir.join("lm_corpus.txt"), corpus.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HatError::io(path, e))
}

pub fn write_features(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * m.data.len());
    out.extend((m.rows as u32).to_le_bytes());
    out.extend((m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn read_features(bytes: &[u8]) -> std::result::Result<Mat, String> {
    if bytes.len() < 8 {
        return Err("feature file shorter than its header".into());
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 8 * rows * cols {
        return Err(format!("expected {} bytes of data for {rows}x{cols}, found {}", 8 * rows * cols, body.len()));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Mat { rows, cols, data })
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HatError::io(dir, e))?;
    let mut manifest = String::new();
    for u in &ds.utterances {
        writeln!(manifest, "{}\t{}\t{}", u.id, u.features.rows, u.words.join(" ")).unwrap();
        write_file(&dir.join(format!("{}.feat", u.id)), &write_features(&u.features))?;
    }
    write_file(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    let mut lex = String::new();
    for (w, pron) in &ds.lexicon {
        let names: Vec<String> = pron.iter().map(|&y| ds.alphabet.symbol_name(y)).collect();
        writeln!(lex, "{w}\t{}", names.join(" ")).unwrap();
    }
    write_file(&dir.join("lexicon.txt"), lex.as_bytes())?;
    let alphabet: String = ds.alphabet.labels().map(|y| ds.alphabet.symbol_name(y) + "\n").collect();
    write_file(&dir.join("alphabet.txt"), alphabet.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HatError::io(path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let names: Vec<String> = read_text(&dir.join("alphabet.txt"))?.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    let alphabet = Alphabet::new(names.len())?;
    for (i, n) in names.iter().enumerate() {
        if alphabet.symbol_id(n) != Some(i + 1) {
            return Err(HatError::Parse { line: i + 1, msg: format!("alphabet.txt: label {} must be named {:?}, found {n:?}", i + 1, alphabet.symbol_name(i + 1)) });
        }
    }
    let mut lexicon = Vec::new();
    for (i, line) in read_text(&dir.join("lexicon.txt"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (word, pron) = line.split_once('\t').ok_or_else(|| HatError::Parse { line: i + 1, msg: "lexicon.txt: expected word<TAB>labels".into() })?;
        let labels = pron
            .split_whitespace()
            .map(|s| alphabet.symbol_id(s).filter(|&y| alphabet.is_label(y)).ok_or_else(|| HatError::Parse { line: i + 1, msg: format!("lexicon.txt: unknown label {s:?}") }))
            .collect::<Result<Vec<_>>>()?;
        lexicon.push((word.to_string(), labels));
    }
    let trie = LexiconTrie::new(&lexicon)?;
    let mut utterances = Vec::new();
    for (i, line) in read_text(&dir.join("manifest.tsv"))?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| HatError::Parse { line: i + 1, msg: format!("manifest.tsv: {msg}") };
        let mut fields = line.splitn(3, '\t');
        let id = fields.next().unwrap_or_default().to_string();
        let frames: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| err("bad frame count".into()))?;
        let words: Vec<String> = fields.next().unwrap_or_default().split_whitespace().map(str::to_string).collect();
        let labels = trie.labels_for(&words).map_err(|e| err(e.to_string()))?;
        let path = dir.join(format!("{id}.feat"));
        let bytes = fs::read(&path).map_err(|e| HatError::io(&path, e))?;
        let features = read_features(&bytes).map_err(|m| err(format!("{id}.feat: {m}")))?;
        if features.rows != frames || frames == 0 {
            return Err(err(format!("{id}: manifest says {frames} frames, feature file has {}", features.rows)));
        }
        utterances.push(Utterance { id, features, words, labels });
    }
    if let Some(d) = utterances.first().map(|u| u.features.cols) {
        if let Some(u) = utterances.iter().find(|u| u.features.cols != d) {
            return Err(HatError::Shape(format!("{} has dimension {}, expected {d}", u.id, u.features.cols)));
        }
    }
    Ok(Dataset { alphabet, lexicon, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskParams {
        TaskParams { train_utterances: 20, test_utterances: 5, lm_sentences: 30, ..TaskParams::default() }
    }

    #[test]
    fn noiseless_unit_duration_gives_prototypes() {
        let p = TaskParams { noise_std: 0.0, min_duration: 1, max_duration: 1, ..small() };
        let task = generate(&p).unwrap();
        for u in &task.train.utterances {
            assert_eq!(u.features.rows, u.labels.len());
            for (t, &y) in u.labels.iter().enumerate() {
                assert_eq!(u.features.row(t), task.spec.prototypes[y - 1].as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_lexicon_unique() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.spec.lexicon.len(), 20);
        let trie = a.train.trie().unwrap();
        for u in &a.train.utterances {
            assert_eq!(trie.labels_for(&u.words).unwrap(), u.labels);
            let frames = u.features.rows;
            assert!(frames >= 2 * u.labels.len() && frames <= 4 * u.labels.len());
        }
        assert_ne!(generate(&TaskParams { seed: 1, ..small() }).unwrap().train, a.train);
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let task = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_task(&task, dir.path()).unwrap();
        assert_eq!(read_dataset(&dir.path().join("train")).unwrap(), task.train);
        assert_eq!(read_dataset(&dir.path().join("test")).unwrap(), task.test);
        let corpus = crate::ngram::read_corpus(&dir.path().join("lm_corpus.txt")).unwrap();
        assert_eq!(corpus, task.lm_corpus);
    }

    #[test]
    fn corrupt_feature_files_are_rejected() {
        let m = Mat { rows: 2, cols: 1, data: vec![1.0, 2.0] };
        let bytes = write_features(&m);
        assert_eq!(read_features(&bytes).unwrap(), m);
        assert!(read_features(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_features(&bytes[..3]).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticTaskSpec::build(&TaskParams { min_duration: 0, ..small() }).is_err());
        assert!(SyntheticTaskSpec::build(&TaskParams { noise_std: -1.0, ..small() }).is_err());
        assert!(SyntheticTaskSpec::build(&TaskParams { num_labels: 2, min_word_len: 1, max_word_len: 2, ..small() }).is_err());
    }

    /// Per-sentence label counts average to the exact expectations from the
    /// grammar chain, within 3 standard errors.
    #[test]
    fn label_frequencies_match_grammar_marginals() {
        let spec = SyntheticTaskSpec::build(&TaskParams::default()).unwrap();
        let expected = spec.expected_label_counts(&spec.train_grammar);
        let mut rng = stream(5, 9);
        let n = 10_000;
        let v = spec.alphabet.size();
        let mut sum = vec![0.0; v];
        let mut sum_sq = vec![0.0; v];
        for _ in 0..n {
            let mut c = vec![0.0; v];
            for w in spec.train_grammar.sample(&mut rng) {
                for &y in &spec.lexicon[w].1 {
                    c[y - 1] += 1.0;
                }
            }
            for y in 0..v {
                sum[y] += c[y];
                sum_sq[y] += c[y] * c[y];
            }
        }
        for y in 0..v {
            let mean = sum[y] / n as f64;
            let var = sum_sq[y] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - expected[y]).abs() <= 3.0 * se, "label {}: {mean} vs {}", y + 1, expected[y]);
        }
    }

    #[test]
    fn expected_word_counts_single_word_grammar() {
        let g = WordGrammar { start: vec![1.0], trans: vec![vec![1.0]], end_prob: 0.5, max_words: 3 };
        // 1 + 0.5 + 0.25
        assert!((g.expected_word_counts()[0] - 1.75).abs() < 1e-15);
    }
}
