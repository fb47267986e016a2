//! Alignment lattice shared by the transducer models.
//!
//! Symbols are dense integer ids: `0` is the blank, `1..=|V|` are labels and
//! `|V| + 1` is the sentence-start marker that only ever appears as decoder
//! history. A transducer path runs from node `(1, 0)` to node `(T, U)` using
//! `T - 1` blank (horizontal) edges and `U` label (vertical) edges.

use crate::error::{HatError, Result};

pub const BLANK: usize = 0;

/// Default cap on the number of edges `T + U - 1` for transducer path enumeration.
pub const DEFAULT_PATH_CAP: usize = 24;
/// Default cap on the number of frames for CTC path enumeration.
pub const DEFAULT_CTC_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Alphabet {
    size: usize,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(HatError::Argument("alphabet needs at least one label".into()));
        }
        Ok(Self { size })
    }

    /// Number of labels `|V|`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    pub fn start_id(&self) -> usize {
        self.size + 1
    }

    pub fn labels(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.size
    }

    pub fn is_label(&self, id: usize) -> bool {
        id >= 1 && id <= self.size
    }

    pub fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| !self.is_label(y)) {
            Some(&id) => Err(HatError::Vocabulary { id, size: self.size }),
            None => Ok(()),
        }
    }

    /// Printable name of a symbol: `<b>`, `<S>`, or a letter for small alphabets.
    pub fn symbol_name(&self, id: usize) -> String {
        if id == BLANK {
            "<b>".to_string()
        } else if id == self.start_id() {
            "<S>".to_string()
        } else if self.size <= 26 {
            ((b'a' + (id - 1) as u8) as char).to_string()
        } else {
            format!("l{id}")
        }
    }

    pub fn symbol_id(&self, name: &str) -> Option<usize> {
        self.labels().find(|&id| self.symbol_name(id) == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeDims {
    pub frames: usize,
    pub label_len: usize,
}

impl LatticeDims {
    pub fn new(frames: usize, label_len: usize) -> Result<Self> {
        if frames == 0 {
            return Err(HatError::Argument("lattice needs at least one frame".into()));
        }
        Ok(Self { frames, label_len })
    }

    pub fn path_len(&self) -> usize {
        self.frames + self.label_len - 1
    }
}

/// One path through the transducer lattice, as a sequence of edge symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AlignmentPath {
    pub edges: Vec<usize>,
}

impl AlignmentPath {
    pub fn new(edges: Vec<usize>) -> Self {
        Self { edges }
    }

    /// Checks that the path is a complete path for `dims`.
    pub fn validate(&self, dims: LatticeDims) -> Result<()> {
        let blanks = self.edges.iter().filter(|&&e| e == BLANK).count();
        let labels = self.edges.len() - blanks;
        if blanks + 1 != dims.frames || labels != dims.label_len {
            return Err(HatError::Shape(format!(
                "path has {blanks} blanks and {labels} labels, lattice is T={} U={}",
                dims.frames, dims.label_len
            )));
        }
        Ok(())
    }

    pub fn collapse(&self) -> Vec<usize> {
        collapse(&self.edges)
    }
}

/// Transducer collapse map: drops blanks, keeps label order.
pub fn collapse(edges: &[usize]) -> Vec<usize> {
    edges.iter().copied().filter(|&e| e != BLANK).collect()
}

/// CTC collapse map: merges consecutive repeats, then drops blanks.
pub fn ctc_collapse(symbols: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in symbols {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Lattice node `(t, u)` reached after `prefix`, with frames counted from 1.
pub fn position(prefix: &[usize]) -> (usize, usize) {
    let blanks = prefix.iter().filter(|&&e| e == BLANK).count();
    (1 + blanks, prefix.len() - blanks)
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Every interleaving of `T - 1` blanks with `labels`, in lexicographic edge order.
pub fn enumerate_paths(dims: LatticeDims, labels: &[usize], cap: usize) -> Result<Vec<AlignmentPath>> {
    if labels.len() != dims.label_len {
        return Err(HatError::Shape(format!(
            "{} labels for a lattice with U={}",
            labels.len(),
            dims.label_len
        )));
    }
    let len = dims.path_len();
    if len > cap {
        return Err(HatError::EnumerationTooLarge { what: "path length", size: len, cap });
    }
    let mut out = Vec::with_capacity(binomial(len, labels.len()));
    let mut edges = Vec::with_capacity(len);
    fn rec(blanks_left: usize, rest: &[usize], edges: &mut Vec<usize>, out: &mut Vec<AlignmentPath>) {
        if blanks_left == 0 && rest.is_empty() {
            out.push(AlignmentPath::new(edges.clone()));
            return;
        }
        if blanks_left > 0 {
            edges.push(BLANK);
            rec(blanks_left - 1, rest, edges, out);
            edges.pop();
        }
        if let Some((&y, tail)) = rest.split_first() {
            edges.push(y);
            rec(blanks_left, tail, edges, out);
            edges.pop();
        }
    }
    rec(dims.frames - 1, labels, &mut edges, &mut out);
    Ok(out)
}

/// Smallest frame count that admits a CTC path for `labels`.
pub fn min_ctc_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Every length-`frames` symbol sequence whose CTC collapse equals `labels`.
pub fn enumerate_ctc_paths(frames: usize, labels: &[usize], cap: usize) -> Result<Vec<Vec<usize>>> {
    if frames > cap {
        return Err(HatError::EnumerationTooLarge { what: "frames", size: frames, cap });
    }
    // Walk the blank-augmented state chain b l1 b l2 ... b.
    let mut states = Vec::with_capacity(2 * labels.len() + 1);
    states.push(BLANK);
    for &y in labels {
        states.push(y);
        states.push(BLANK);
    }
    let n = states.len();
    let mut out = Vec::new();
    if frames == 0 {
        if labels.is_empty() {
            out.push(Vec::new());
        }
        return Ok(out);
    }
    let mut seq = Vec::with_capacity(frames);
    fn rec(s: usize, frames: usize, states: &[usize], seq: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        seq.push(states[s]);
        if seq.len() == frames {
            if s + 2 >= states.len() {
                out.push(seq.clone());
            }
        } else {
            let mut next = vec![s];
            if s + 1 < states.len() {
                next.push(s + 1);
            }
            if s + 2 < states.len() && states[s + 2] != BLANK && states[s + 2] != states[s] {
                next.push(s + 2);
            }
            for ns in next {
                rec(ns, frames, states, seq, out);
            }
        }
        seq.pop();
    }
    rec(0, frames, &states, &mut seq, &mut out);
    if n > 1 {
        rec(1, frames, &states, &mut seq, &mut out);
    }
    out.sort();
    Ok(out)
}
