//! Local (per lattice node) posterior grids for HAT, RNN-T and CTC.
//!
//! Everything is stored in the log domain. For HAT the blank entry of cell
//! `(t, u)` is `log b_{t,u}` and the label entries are the separately normalised
//! `log P_{t,u}(y)`; the vertical edge posterior is `log(1 - b) + log P(y)`.
//! For RNN-T and CTC blank and labels come from a single softmax and the label
//! entries are already edge posteriors. CTC grids have one column, since they do
//! not depend on the label history.

use std::fmt::Write as _;

use crate::error::{HatError, Result};
use crate::network::{Activations, Mat, ModelParams};
use crate::numeric::{log_sigmoid, log_softmax, logsumexp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    Hat,
    Rnnt,
    Ctc,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Hat => "hat",
            GridKind::Rnnt => "rnnt",
            GridKind::Ctc => "ctc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hat" => Ok(GridKind::Hat),
            "rnnt" => Ok(GridKind::Rnnt),
            "ctc" => Ok(GridKind::Ctc),
            other => Err(HatError::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPosteriorGrid {
    pub kind: GridKind,
    pub frames: usize,
    /// `U + 1` for transducers, 1 for CTC.
    pub rows: usize,
    pub num_labels: usize,
    log_blank: Vec<f64>,
    log_emit: Vec<f64>,
    log_label: Vec<f64>,
}

impl LocalPosteriorGrid {
    /// HAT grid from blank logits (`frames * rows`) and label scores (`frames * rows * |V|`).
    pub fn hat_from_logits(frames: usize, rows: usize, num_labels: usize, blank_logits: &[f64], scores: &[f64]) -> Result<Self> {
        check_len(blank_logits.len(), frames * rows, "blank logits")?;
        check_len(scores.len(), frames * rows * num_labels, "label scores")?;
        let log_blank: Vec<f64> = blank_logits.iter().map(|&z| log_sigmoid(z)).collect();
        let log_emit: Vec<f64> = blank_logits.iter().map(|&z| log_sigmoid(-z)).collect();
        let log_label = scores.chunks(num_labels).flat_map(log_softmax).collect();
        Ok(Self { kind: GridKind::Hat, frames, rows, num_labels, log_blank, log_emit, log_label })
    }

    /// RNN-T or CTC grid from `|V| + 1` logits per cell, blank first.
    pub fn joint_softmax_from_logits(kind: GridKind, frames: usize, rows: usize, num_labels: usize, logits: &[f64]) -> Result<Self> {
        if kind == GridKind::Hat {
            return Err(HatError::Argument("HAT grids need separate blank and label logits".into()));
        }
        if kind == GridKind::Ctc && rows != 1 {
            return Err(HatError::Shape("CTC grids have a single column".into()));
        }
        check_len(logits.len(), frames * rows * (num_labels + 1), "logits")?;
        let mut log_blank = Vec::with_capacity(frames * rows);
        let mut log_emit = Vec::with_capacity(frames * rows);
        let mut log_label = Vec::with_capacity(frames * rows * num_labels);
        for cell in logits.chunks(num_labels + 1) {
            let lp = log_softmax(cell);
            log_blank.push(lp[0]);
            log_emit.push(logsumexp(&lp[1..]));
            log_label.extend_from_slice(&lp[1..]);
        }
        Ok(Self { kind, frames, rows, num_labels, log_blank, log_emit, log_label })
    }

    /// Builds a grid from explicit probabilities, for hand-constructed test cases.
    /// `blank[t][u]` and `labels[t][u][y-1]`; for HAT the label slice is the label
    /// distribution, otherwise the edge posteriors.
    pub fn from_probabilities(kind: GridKind, blank: &[Vec<f64>], labels: &[Vec<Vec<f64>>]) -> Result<Self> {
        let frames = blank.len();
        let rows = blank.first().map_or(0, Vec::len);
        let num_labels = labels.first().and_then(|r| r.first()).map_or(0, Vec::len);
        if frames == 0 || rows == 0 || num_labels == 0 {
            return Err(HatError::Shape("empty grid".into()));
        }
        let mut log_blank = Vec::new();
        let mut log_emit = Vec::new();
        let mut log_label = Vec::new();
        for t in 0..frames {
            if blank[t].len() != rows || labels[t].len() != rows {
                return Err(HatError::Shape("ragged grid".into()));
            }
            for u in 0..rows {
                let b = blank[t][u];
                log_blank.push(b.ln());
                log_emit.push(match kind {
                    GridKind::Hat => (-b).ln_1p(),
                    _ => labels[t][u].iter().sum::<f64>().ln(),
                });
                if labels[t][u].len() != num_labels {
                    return Err(HatError::Shape("ragged label distribution".into()));
                }
                log_label.extend(labels[t][u].iter().map(|p| p.ln()));
            }
        }
        Ok(Self { kind, frames, rows, num_labels, log_blank, log_emit, log_label })
    }

    fn idx(&self, t: usize, u: usize) -> usize {
        let u = if self.kind == GridKind::Ctc { 0 } else { u };
        debug_assert!(t < self.frames && u < self.rows);
        t * self.rows + u
    }

    /// Largest label count the grid covers (`U`); unbounded for CTC.
    pub fn label_len(&self) -> usize {
        match self.kind {
            GridKind::Ctc => usize::MAX,
            _ => self.rows - 1,
        }
    }

    /// Blank posterior at cell `(t, u)`, frames 0-based.
    pub fn log_blank(&self, t: usize, u: usize) -> f64 {
        self.log_blank[self.idx(t, u)]
    }

    /// `log(1 - b)` for HAT, total non-blank mass otherwise.
    pub fn log_emit(&self, t: usize, u: usize) -> f64 {
        self.log_emit[self.idx(t, u)]
    }

    /// Stored label entry for label id `y` (1-based).
    pub fn log_label(&self, t: usize, u: usize, y: usize) -> f64 {
        self.log_label[self.idx(t, u) * self.num_labels + y - 1]
    }

    pub fn log_labels(&self, t: usize, u: usize) -> &[f64] {
        let i = self.idx(t, u) * self.num_labels;
        &self.log_label[i..i + self.num_labels]
    }

    /// Log posterior of a horizontal (blank) edge leaving `(t, u)`.
    pub fn edge_blank(&self, t: usize, u: usize) -> f64 {
        self.log_blank(t, u)
    }

    /// Log posterior of a vertical edge emitting `y` at `(t, u)`.
    pub fn edge_label(&self, t: usize, u: usize, y: usize) -> f64 {
        match self.kind {
            GridKind::Hat => self.log_emit(t, u) + self.log_label(t, u, y),
            _ => self.log_label(t, u, y),
        }
    }

    /// The first `rows` rows of a transducer grid.
    pub fn truncate_rows(&self, rows: usize) -> Result<Self> {
        if self.kind == GridKind::Ctc || rows == 0 || rows > self.rows {
            return Err(HatError::Shape(format!("cannot take {rows} rows of a {} grid with {}", self.kind.name(), self.rows)));
        }
        let mut out = Self { rows, log_blank: Vec::new(), log_emit: Vec::new(), log_label: Vec::new(), ..*self };
        for t in 0..self.frames {
            for u in 0..rows {
                let i = self.idx(t, u);
                out.log_blank.push(self.log_blank[i]);
                out.log_emit.push(self.log_emit[i]);
                out.log_label.extend_from_slice(self.log_labels(t, u));
            }
        }
        Ok(out)
    }

    /// Tab-separated dump: header naming the symbols, then one line per cell.
    pub fn dump(&self, symbol_name: impl Fn(usize) -> String) -> String {
        let mut out = String::from("t\tu");
        for s in 0..=self.num_labels {
            write!(out, "\t{}", symbol_name(s)).unwrap();
        }
        out.push('\n');
        for t in 0..self.frames {
            for u in 0..self.rows {
                write!(out, "{}\t{}\t{}", t + 1, u, self.log_blank(t, u)).unwrap();
                for lp in self.log_labels(t, u) {
                    write!(out, "\t{lp}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(HatError::Shape(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

fn check_acts(acts: &Activations, params: &ModelParams) -> Result<()> {
    let d = params.joint_dim();
    if acts.enc.cols != d || acts.dec.cols != d {
        return Err(HatError::Shape(format!("activation width differs from joint dimension {d}")));
    }
    if acts.enc.rows == 0 || acts.dec.rows == 0 {
        return Err(HatError::Shape("activations need at least one frame and one decoder row".into()));
    }
    Ok(())
}

fn cell_sum(f: &[f64], g: &[f64]) -> Vec<f64> {
    f.iter().zip(g).map(|(a, b)| a + b).collect()
}

pub fn hat_grid(acts: &Activations, params: &ModelParams) -> Result<LocalPosteriorGrid> {
    check_acts(acts, params)?;
    let (frames, rows, v) = (acts.enc.rows, acts.dec.rows, params.num_labels);
    let mut blank = Vec::with_capacity(frames * rows);
    let mut scores = Vec::with_capacity(frames * rows * v);
    for t in 0..frames {
        for u in 0..rows {
            let x = cell_sum(acts.enc.row(t), acts.dec.row(u));
            blank.push(params.blank_logit_sum(&x));
            scores.extend(params.joint_scores(&x));
        }
    }
    LocalPosteriorGrid::hat_from_logits(frames, rows, v, &blank, &scores)
}

/// The `|V| + 1` logits of a single-softmax transducer cell, blank first.
pub fn joint_logits(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut logits = Vec::with_capacity(params.num_labels + 1);
    logits.push(params.blank_logit_sum(x));
    logits.extend(params.joint_scores(x));
    logits
}

pub fn rnnt_grid(acts: &Activations, params: &ModelParams) -> Result<LocalPosteriorGrid> {
    check_acts(acts, params)?;
    let (frames, rows, v) = (acts.enc.rows, acts.dec.rows, params.num_labels);
    let mut logits = Vec::with_capacity(frames * rows * (v + 1));
    for t in 0..frames {
        for u in 0..rows {
            logits.extend(joint_logits(params, &cell_sum(acts.enc.row(t), acts.dec.row(u))));
        }
    }
    LocalPosteriorGrid::joint_softmax_from_logits(GridKind::Rnnt, frames, rows, v, &logits)
}

/// CTC grid from encoder activations alone (the decoder contribution is zero).
pub fn ctc_grid(enc: &Mat, params: &ModelParams) -> Result<LocalPosteriorGrid> {
    if enc.cols != params.joint_dim() || enc.rows == 0 {
        return Err(HatError::Shape("encoder activations do not match the model".into()));
    }
    let v = params.num_labels;
    let mut logits = Vec::with_capacity(enc.rows * (v + 1));
    for t in 0..enc.rows {
        logits.extend(joint_logits(params, enc.row(t)));
    }
    LocalPosteriorGrid::joint_softmax_from_logits(GridKind::Ctc, enc.rows, 1, v, &logits)
}

/// Grid of the requested kind for `features` and reference `labels`.
pub fn grid_for(kind: GridKind, params: &ModelParams, features: &Mat, labels: &[usize]) -> Result<LocalPosteriorGrid> {
    match kind {
        GridKind::Ctc => ctc_grid(&params.encode(features)?, params),
        GridKind::Hat => hat_grid(&params.activations(features, labels)?, params),
        GridKind::Rnnt => rnnt_grid(&params.activations(features, labels)?, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::numeric::{sigmoid, softmax};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { num_labels: 3, input_dim: 4, embed_dim: 3, enc_hidden: 5, dec_hidden: 4, joint_dim: 6, ..ModelConfig::default() }
    }

    fn features(t: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat { rows: t, cols: 4, data: (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn zero_params_give_uniform_grids() {
        let p = ModelParams::zeros(&cfg());
        let acts = p.activations(&features(2, 1), &[1]).unwrap();
        let hat = hat_grid(&acts, &p).unwrap();
        let rnnt = rnnt_grid(&acts, &p).unwrap();
        let ctc = ctc_grid(&acts.enc, &p).unwrap();
        for t in 0..2 {
            for u in 0..2 {
                assert!((hat.log_blank(t, u).exp() - 0.5).abs() < 1e-15);
                for y in 1..=3 {
                    assert!((hat.log_label(t, u, y).exp() - 1.0 / 3.0).abs() < 1e-15);
                    assert!((rnnt.log_label(t, u, y).exp() - 0.25).abs() < 1e-15);
                    assert!((ctc.log_label(t, u, y).exp() - 0.25).abs() < 1e-15);
                }
                assert!((rnnt.log_blank(t, u).exp() - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hat_grid_matches_direct_formula() {
        let p = ModelParams::init(&cfg()).unwrap();
        let x = features(2, 47);
        let acts = p.activations(&x, &[2]).unwrap();
        let grid = hat_grid(&acts, &p).unwrap();
        for t in 0..2 {
            for u in 0..2 {
                let f = acts.enc.row(t);
                let g = acts.dec.row(u);
                let b = sigmoid(p.blank_logit(f, g).unwrap());
                let probs = softmax(&p.joint(f, g).unwrap());
                assert!((grid.log_blank(t, u).exp() - b).abs() < 1e-14);
                for y in 1..=3 {
                    assert!((grid.log_label(t, u, y).exp() - probs[y - 1]).abs() < 1e-14);
                    let edge = (1.0 - b) * probs[y - 1];
                    assert!((grid.edge_label(t, u, y).exp() - edge).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn rnnt_and_ctc_match_direct_formula() {
        let p = ModelParams::init(&cfg()).unwrap();
        let acts = p.activations(&features(3, 47), &[3, 1]).unwrap();
        let rnnt = rnnt_grid(&acts, &p).unwrap();
        let ctc = ctc_grid(&acts.enc, &p).unwrap();
        let zero = vec![0.0; 6];
        for t in 0..3 {
            for u in 0..3 {
                let f = acts.enc.row(t);
                let g = acts.dec.row(u);
                let mut logits = vec![p.blank_logit(f, g).unwrap()];
                logits.extend(p.joint(f, g).unwrap());
                let probs = softmax(&logits);
                assert!((rnnt.log_blank(t, u).exp() - probs[0]).abs() < 1e-14);
                for y in 1..=3 {
                    assert!((rnnt.edge_label(t, u, y).exp() - probs[y]).abs() < 1e-14);
                }
                let mut cl = vec![p.blank_logit(f, &zero).unwrap()];
                cl.extend(p.joint(f, &zero).unwrap());
                let cp = softmax(&cl);
                assert!((ctc.log_blank(t, u).exp() - cp[0]).abs() < 1e-14);
            }
        }
        // label history does not enter the CTC grid
        let other = p.activations(&features(3, 47), &[2, 2, 2]).unwrap();
        assert_eq!(ctc_grid(&other.enc, &p).unwrap(), ctc);
    }

    #[test]
    fn per_cell_normalisation() {
        for seed in 0..20 {
            let mut c = cfg();
            c.seed = seed;
            c.init_scale = 1.0;
            let p = ModelParams::init(&c).unwrap();
            let acts = p.activations(&features(4, seed), &[1, 3, 2]).unwrap();
            let hat = hat_grid(&acts, &p).unwrap();
            let rnnt = rnnt_grid(&acts, &p).unwrap();
            for t in 0..4 {
                for u in 0..4 {
                    let b = hat.log_blank(t, u).exp();
                    assert!((0.0..=1.0).contains(&b));
                    let mass: f64 = b + (1..=3).map(|y| hat.edge_label(t, u, y).exp()).sum::<f64>();
                    assert!((mass - 1.0).abs() < 1e-12);
                    let lp: f64 = (1..=3).map(|y| hat.log_label(t, u, y).exp()).sum();
                    assert!((lp - 1.0).abs() < 1e-12);
                    let r: f64 = rnnt.log_blank(t, u).exp() + (1..=3).map(|y| rnnt.edge_label(t, u, y).exp()).sum::<f64>();
                    assert!((r - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blank_bias_is_monotone() {
        let mut p = ModelParams::init(&cfg()).unwrap();
        let acts = p.activations(&features(3, 2), &[1, 2]).unwrap();
        let mut prev = hat_grid(&acts, &p).unwrap();
        for _ in 0..5 {
            p.blank_bias += 0.5;
            let next = hat_grid(&acts, &p).unwrap();
            for t in 0..3 {
                for u in 0..3 {
                    assert!(next.log_blank(t, u) > prev.log_blank(t, u));
                }
            }
            prev = next;
        }
    }

    /// Two alignment prefixes with the same collapsed history reach the same
    /// lattice node and see the same RNN-T local posterior.
    #[test]
    fn rnnt_local_posterior_is_prefix_independent() {
        use crate::lattice::{collapse, position};
        let p = ModelParams::init(&cfg()).unwrap();
        let x = features(4, 3);
        let labels = [2, 3];
        let grid = rnnt_grid(&p.activations(&x, &labels).unwrap(), &p).unwrap();
        let a = [0, 2, 0];
        let b = [2, 0, 0];
        assert_eq!(collapse(&a), collapse(&b));
        let (ta, ua) = position(&a);
        let (tb, ub) = position(&b);
        assert_eq!((ta, ua), (tb, ub));
        assert_eq!(grid.log_labels(ta - 1, ua), grid.log_labels(tb - 1, ub));
        // and the probability only depends on that history, not on later labels
        let longer = rnnt_grid(&p.activations(&x, &[2, 3, 1]).unwrap(), &p).unwrap();
        assert_eq!(grid.log_labels(ta - 1, ua), longer.log_labels(ta - 1, ua));
    }

    #[test]
    fn log_storage_round_trips() {
        let probs = [1e-300, 1e-100, 0.25, 0.5, 0.9999];
        for &b in &probs {
            let g = LocalPosteriorGrid::from_probabilities(GridKind::Hat, &[vec![b]], &[vec![vec![0.3, 0.7]]]).unwrap();
            // exp amplifies the rounding of log p by |log p|
            let tol = 4.0 * f64::EPSILON * (1.0 + b.ln().abs());
            assert!(((g.log_blank(0, 0).exp() - b) / b).abs() <= tol);
            if b > 1e-10 {
                assert!(((g.log_blank(0, 0).exp() - b) / b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dump_has_header_and_one_line_per_cell() {
        let p = ModelParams::init(&cfg()).unwrap();
        let acts = p.activations(&features(2, 5), &[1]).unwrap();
        let grid = hat_grid(&acts, &p).unwrap();
        let alphabet = p.alphabet();
        let text = grid.dump(|s| alphabet.symbol_name(s));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t\tu\t<b>\ta\tb\tc");
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[1].split('\t').count(), 2 + 4);
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::init(&cfg()).unwrap();
        let bad = Activations { enc: Mat::zeros(2, 5), dec: Mat::zeros(1, 6) };
        assert!(hat_grid(&bad, &p).is_err());
        assert!(rnnt_grid(&bad, &p).is_err());
        assert!(ctc_grid(&Mat::zeros(2, 5), &p).is_err());
    }
}
