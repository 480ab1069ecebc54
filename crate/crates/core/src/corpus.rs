//! Synthetic corpora and exact enumeration oracles.
//!
//! A [`Corpus`] is a finite weighted multiset of fixed-length sequences. All
//! "ground truth" in this crate comes from enumerating corpus entries, so the
//! oracles here are the reference every denoiser and decoder is checked
//! against.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::zipf_pmf;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Token inventory with reserved MASK and EOT ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
    mask_id: TokenId,
    eot_id: TokenId,
    labels: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: u32, mask_id: TokenId, eot_id: TokenId) -> Result<Self> {
        if mask_id == eot_id || mask_id >= size || eot_id >= size {
            return Err(Error::invalid(
                "vocab",
                format!("mask_id {mask_id} and eot_id {eot_id} must be distinct and < {size}"),
            ));
        }
        Ok(Vocab { size, mask_id, eot_id, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.size as usize {
            return Err(Error::invalid("vocab labels", "label count must equal vocab size"));
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::invalid("vocab labels", "labels must be unique"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn eot_id(&self) -> TokenId {
        self.eot_id
    }

    pub fn label(&self, id: TokenId) -> String {
        match &self.labels {
            Some(labels) => labels[id as usize].clone(),
            None => id.to_string(),
        }
    }

    /// Valid as a clean (data) token: in range and not MASK.
    pub fn is_clean(&self, id: TokenId) -> bool {
        id < self.size && id != self.mask_id
    }
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub tokens: Vec<TokenId>,
    pub weight: f64,
}

/// Weighted multiset of fixed-length sequences over a [`Vocab`].
#[derive(Debug, Clone)]
pub struct Corpus {
    vocab: Vocab,
    length: usize,
    entries: Vec<CorpusEntry>,
    /// True when the entry set is a renormalized truncation of a larger
    /// distribution rather than the exact one.
    truncated: bool,
}

/// Partial assignment of positions to clean token ids.
pub type Assignment = BTreeMap<usize, TokenId>;

impl Corpus {
    pub fn new(vocab: Vocab, length: usize, mut entries: Vec<CorpusEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("corpus", "no entries"));
        }
        let mut total = 0.0;
        for e in &entries {
            if e.tokens.len() != length {
                return Err(Error::invalid("corpus", "all sequences must have the same length"));
            }
            if !(e.weight > 0.0) {
                return Err(Error::invalid("corpus", "entry weights must be positive"));
            }
            if e.tokens.iter().any(|&t| !vocab.is_clean(t)) {
                return Err(Error::invalid("corpus", "entries must not contain MASK or out-of-range tokens"));
            }
            total += e.weight;
        }
        for e in &mut entries {
            e.weight /= total;
        }
        Ok(Corpus { vocab, length, entries, truncated: false })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    /// Sample an entry index proportional to weight.
    pub fn sample_entry(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, e) in self.entries.iter().enumerate() {
            acc += e.weight;
            if u < acc {
                return i;
            }
        }
        self.entries.len() - 1
    }

    fn check_assignment(&self, observed: &Assignment) -> Result<()> {
        for (&pos, &tok) in observed {
            if pos >= self.length {
                return Err(Error::invalid("assignment", format!("position {pos} out of range")));
            }
            if !self.vocab.is_clean(tok) {
                return Err(Error::invalid("assignment", format!("token {tok} is MASK or out of range")));
            }
        }
        Ok(())
    }

    fn consistent_weight(&self, observed: &Assignment) -> f64 {
        self.entries
            .iter()
            .filter(|e| observed.iter().all(|(&p, &t)| e.tokens[p] == t))
            .map(|e| e.weight)
            .sum()
    }

    /// Exact conditional marginals `P(x_0^j = v | observed)` for every position
    /// not in `observed`, by filtering and renormalizing corpus entries.
    ///
    /// Each returned vector has length K with zero mass on MASK.
    pub fn oracle_conditional_marginals(&self, observed: &Assignment) -> Result<BTreeMap<usize, Vec<f64>>> {
        self.check_assignment(observed)?;
        let k = self.vocab.size as usize;
        let mut total = 0.0;
        let mut out: BTreeMap<usize, Vec<f64>> = (0..self.length)
            .filter(|p| !observed.contains_key(p))
            .map(|p| (p, vec![0.0; k]))
            .collect();
        for e in &self.entries {
            if observed.iter().all(|(&p, &t)| e.tokens[p] == t) {
                total += e.weight;
                for (&p, row) in out.iter_mut() {
                    row[e.tokens[p] as usize] += e.weight;
                }
            }
        }
        if total == 0.0 {
            return Err(Error::NoConsistentEntry);
        }
        for row in out.values_mut() {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(out)
    }

    /// Exact conditional joint probability of `query` given `observed`.
    ///
    /// Returns `Ok(0.0)` when the query combination has zero conditional
    /// probability; errors only when `observed` itself matches no entry.
    pub fn oracle_joint(&self, observed: &Assignment, query: &Assignment) -> Result<f64> {
        self.check_assignment(observed)?;
        self.check_assignment(query)?;
        if query.keys().any(|p| observed.contains_key(p)) {
            return Err(Error::invalid("query", "observed and query positions must be disjoint"));
        }
        let denom = self.consistent_weight(observed);
        if denom == 0.0 {
            return Err(Error::NoConsistentEntry);
        }
        let mut both = observed.clone();
        both.extend(query.iter().map(|(&p, &t)| (p, t)));
        Ok(self.consistent_weight(&both) / denom)
    }

    /// Line-oriented text format: header `K L mask_id eot_id`, then one entry
    /// per line as `weight id id ...`. Labels are not persisted.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{} {} {} {}", self.vocab.size, self.length, self.vocab.mask_id, self.vocab.eot_id)?;
        for e in &self.entries {
            let mut line = String::new();
            write!(line, "{}", e.weight).unwrap();
            for &t in &e.tokens {
                write!(line, " {t}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, msg: "empty corpus file".into() })?;
        let header = header?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Parse { line: 1, msg: "header must be `K L mask_id eot_id`".into() });
        }
        let parse = |s: &str, line: usize| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse { line, msg: format!("bad integer `{s}`") })
        };
        let k = parse(parts[0], 1)? as u32;
        let length = parse(parts[1], 1)? as usize;
        let mask_id = parse(parts[2], 1)? as u32;
        let eot_id = parse(parts[3], 1)? as u32;
        let vocab = Vocab::new(k, mask_id, eot_id)?;
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let weight: f64 = fields
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::Parse { line: lineno, msg: "bad weight".into() })?;
            let tokens: Vec<TokenId> = fields
                .map(|s| parse(s, lineno).map(|v| v as u32))
                .collect::<Result<_>>()?;
            entries.push(CorpusEntry { tokens, weight });
        }
        Corpus::new(vocab, length, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Fixed token ids of the toy corpus, in construction order.
pub mod toy {
    use super::TokenId;

    pub const A: TokenId = 0;
    pub const A_PRIME: TokenId = 1;
    pub const B: TokenId = 2;
    pub const B_PRIME: TokenId = 3;
    pub const C: TokenId = 4;
    pub const D: TokenId = 5;
    pub const MASK: TokenId = 106;
    pub const EOT: TokenId = 107;
    pub const VOCAB_SIZE: u32 = 108;

    /// Unique final token of entry `i` (0-based, i < 100).
    pub fn e(i: usize) -> TokenId {
        assert!(i < 100);
        6 + i as TokenId
    }
}

/// 100 length-5 sequences sharing the middle pair (C, D), a unique final token
/// per entry, and first-pair counts AB:34, AB':21, A'B:35, A'B':10. Weights
/// are uniform 1/100.
pub fn build_toy_corpus() -> Corpus {
    let mut labels: Vec<String> = vec!["A", "A'", "B", "B'", "C", "D"].into_iter().map(String::from).collect();
    for i in 1..=100 {
        labels.push(format!("E{i}"));
    }
    labels.push("[MASK]".into());
    labels.push("<eot>".into());
    let vocab = Vocab::new(toy::VOCAB_SIZE, toy::MASK, toy::EOT)
        .and_then(|v| v.with_labels(labels))
        .expect("toy vocab is valid");

    let pairs = [(toy::A, toy::B, 34), (toy::A, toy::B_PRIME, 21), (toy::A_PRIME, toy::B, 35), (toy::A_PRIME, toy::B_PRIME, 10)];
    let mut entries = Vec::with_capacity(100);
    let mut next_e = 0usize;
    for (first, second, count) in pairs {
        for _ in 0..count {
            entries.push(CorpusEntry {
                tokens: vec![first, second, toy::C, toy::D, toy::e(next_e)],
                weight: 1.0 / 100.0,
            });
            next_e += 1;
        }
    }
    Corpus::new(vocab, 5, entries).expect("toy corpus is valid")
}

/// Finite-state chain whose rows are permutations of one truncated Zipf
/// profile and whose row peaks form a permutation of the states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    pub state_count: usize,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub zipf_s: f64,
    pub zipf_n: usize,
    pub permutation_rule: String,
}

const ROW_TOL: f64 = 1e-12;

/// Zipf(s, N) probabilities truncated to the first `states` ranks and
/// renormalized, sorted descending.
fn truncated_zipf_profile(s: f64, n: usize, states: usize) -> Vec<f64> {
    let pmf = zipf_pmf(s, n);
    let mut head: Vec<f64> = pmf[..states].to_vec();
    let total: f64 = head.iter().sum();
    for v in head.iter_mut() {
        *v /= total;
    }
    head
}

impl MarkovChainSpec {
    /// Row of state `i` is the Zipf profile cyclically shifted by `i`, so the
    /// peak of row `i` sits at column `i`.
    pub fn cyclic(state_count: usize, zipf_s: f64, zipf_n: usize) -> Result<Self> {
        if state_count < 2 || zipf_n < state_count {
            return Err(Error::invalid("chain spec", "need 2 <= state_count <= N"));
        }
        let profile = truncated_zipf_profile(zipf_s, zipf_n, state_count);
        let transition = (0..state_count)
            .map(|i| {
                (0..state_count)
                    .map(|c| profile[(c + state_count - i) % state_count])
                    .collect()
            })
            .collect();
        let spec = MarkovChainSpec {
            state_count,
            initial: profile,
            transition,
            zipf_s,
            zipf_n,
            permutation_rule: "cyclic".into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Random row permutations with the constraint that row peaks form a
    /// permutation of the columns. The initial distribution is a random
    /// permutation of the same profile.
    pub fn random_permuted(state_count: usize, zipf_s: f64, zipf_n: usize, seed: u64) -> Result<Self> {
        if state_count < 2 || zipf_n < state_count {
            return Err(Error::invalid("chain spec", "need 2 <= state_count <= N"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let profile = truncated_zipf_profile(zipf_s, zipf_n, state_count);
        let mut peaks: Vec<usize> = (0..state_count).collect();
        peaks.shuffle(&mut rng);
        let mut transition = Vec::with_capacity(state_count);
        for row_idx in 0..state_count {
            let mut row = vec![0.0; state_count];
            row[peaks[row_idx]] = profile[0];
            let mut rest: Vec<usize> = (0..state_count).filter(|&c| c != peaks[row_idx]).collect();
            rest.shuffle(&mut rng);
            for (rank, &col) in rest.iter().enumerate() {
                row[col] = profile[rank + 1];
            }
            transition.push(row);
        }
        let mut initial = profile.clone();
        initial.shuffle(&mut rng);
        let spec = MarkovChainSpec {
            state_count,
            initial,
            transition,
            zipf_s,
            zipf_n,
            permutation_rule: format!("random(seed={seed})"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.state_count;
        if self.initial.len() != s || self.transition.len() != s {
            return Err(Error::invalid("chain spec", "dimension mismatch"));
        }
        let init_sum: f64 = self.initial.iter().sum();
        if (init_sum - 1.0).abs() > ROW_TOL {
            return Err(Error::invalid("chain spec", format!("initial sums to {init_sum}")));
        }
        let mut profile = truncated_zipf_profile(self.zipf_s, self.zipf_n, s);
        profile.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut peak_cols = vec![false; s];
        for row in &self.transition {
            if row.len() != s {
                return Err(Error::invalid("chain spec", "non-square transition"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::invalid("chain spec", format!("transition row sums to {sum}")));
            }
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (a, b) in sorted.iter().zip(&profile) {
                if (a - b).abs() > ROW_TOL {
                    return Err(Error::invalid("chain spec", "row is not a permutation of the Zipf profile"));
                }
            }
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if peak_cols[argmax] {
                return Err(Error::invalid("chain spec", "row peaks do not form a permutation"));
            }
            peak_cols[argmax] = true;
        }
        Ok(())
    }

    /// Top-1 and top-2 probabilities of the (truncated, renormalized) row
    /// profile. These drive the distance-decay bound.
    pub fn omegas(&self) -> (f64, f64) {
        let profile = truncated_zipf_profile(self.zipf_s, self.zipf_n, self.state_count);
        (profile[0], profile[1])
    }

    /// Exact marginal distribution of position `n` (1-based): initial * P^(n-1).
    pub fn marginal(&self, n: usize) -> Vec<f64> {
        assert!(n >= 1);
        let mut v = self.initial.clone();
        for _ in 1..n {
            let mut next = vec![0.0; self.state_count];
            for (src, &p) in v.iter().enumerate() {
                for (dst, &q) in self.transition[src].iter().enumerate() {
                    next[dst] += p * q;
                }
            }
            v = next;
        }
        v
    }

    pub fn max_marginal(&self, n: usize) -> f64 {
        self.marginal(n).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// How to enumerate chain paths when building a corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum EnumerationMode {
    Exhaustive,
    /// Keep only the `k` highest-probability paths, renormalized. The
    /// resulting corpus is flagged as truncated.
    TopK(usize),
}

pub const ENUMERATION_BUDGET: u64 = 10_000_000;

/// Corpus whose sequence distribution is the chain path distribution. Vocab is
/// the states plus MASK and EOT appended.
pub fn build_zipf_chain_corpus(spec: &MarkovChainSpec, length: usize, mode: EnumerationMode) -> Result<Corpus> {
    spec.validate()?;
    if length < 2 {
        return Err(Error::invalid("chain corpus", "length must be >= 2"));
    }
    let s = spec.state_count;
    let vocab = Vocab::new(s as u32 + 2, s as u32, s as u32 + 1)?;
    let paths = (s as u128).pow(length as u32);
    let entries = match mode {
        EnumerationMode::Exhaustive => {
            if paths > ENUMERATION_BUDGET as u128 {
                return Err(Error::EnumerationBudget { paths, budget: ENUMERATION_BUDGET });
            }
            let mut entries = Vec::with_capacity(paths as usize);
            let mut tokens = vec![0u32; length];
            enumerate_paths(spec, length, 0, 1.0, &mut tokens, &mut entries);
            entries
        }
        EnumerationMode::TopK(k) => {
            if k == 0 {
                return Err(Error::invalid("chain corpus", "top_k must be positive"));
            }
            top_k_paths(spec, length, k)
        }
    };
    let mut corpus = Corpus::new(vocab, length, entries)?;
    corpus.truncated = matches!(mode, EnumerationMode::TopK(_));
    Ok(corpus)
}

fn enumerate_paths(
    spec: &MarkovChainSpec,
    length: usize,
    depth: usize,
    prob: f64,
    tokens: &mut Vec<u32>,
    out: &mut Vec<CorpusEntry>,
) {
    if depth == length {
        if prob > 0.0 {
            out.push(CorpusEntry { tokens: tokens.clone(), weight: prob });
        }
        return;
    }
    for state in 0..spec.state_count {
        let p = if depth == 0 {
            spec.initial[state]
        } else {
            spec.transition[tokens[depth - 1] as usize][state]
        };
        if p == 0.0 {
            continue;
        }
        tokens[depth] = state as u32;
        enumerate_paths(spec, length, depth + 1, prob * p, tokens, out);
    }
}

/// Best-first search over partial paths; admissible because extending a path
/// can only shrink its probability.
fn top_k_paths(spec: &MarkovChainSpec, length: usize, k: usize) -> Vec<CorpusEntry> {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    struct Node {
        prob: f64,
        path: Vec<u32>,
    }
    impl PartialEq for Node {
        fn eq(&self, other: &Self) -> bool {
            self.prob == other.prob && self.path == other.path
        }
    }
    impl Eq for Node {}
    impl PartialOrd for Node {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Node {
        fn cmp(&self, other: &Self) -> Ordering {
            // Ties broken by path for determinism.
            self.prob
                .partial_cmp(&other.prob)
                .unwrap()
                .then_with(|| other.path.cmp(&self.path))
        }
    }

    let mut heap = BinaryHeap::new();
    heap.push(Node { prob: 1.0, path: Vec::new() });
    let mut out = Vec::with_capacity(k);
    while let Some(node) = heap.pop() {
        if node.path.len() == length {
            out.push(CorpusEntry { tokens: node.path, weight: node.prob });
            if out.len() == k {
                break;
            }
            continue;
        }
        for state in 0..spec.state_count {
            let p = if node.path.is_empty() {
                spec.initial[state]
            } else {
                spec.transition[*node.path.last().unwrap() as usize][state]
            };
            if p == 0.0 {
                continue;
            }
            let mut path = node.path.clone();
            path.push(state as u32);
            heap.push(Node { prob: node.prob * p, path });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn toy_corpus_structure() {
        let c = build_toy_corpus();
        assert_eq!(c.entries().len(), 100);
        assert_eq!(c.length(), 5);
        let ab_weight: f64 = c
            .entries()
            .iter()
            .filter(|e| e.tokens[0] == toy::A && e.tokens[1] == toy::B)
            .map(|e| e.weight)
            .sum();
        assert_abs_diff_eq!(ab_weight, 0.34, epsilon = 1e-12);
        for e in c.entries() {
            assert_eq!(e.tokens[2], toy::C);
            assert_eq!(e.tokens[3], toy::D);
        }
        let mut finals: Vec<TokenId> = c.entries().iter().map(|e| e.tokens[4]).collect();
        finals.sort();
        finals.dedup();
        assert_eq!(finals.len(), 100);
    }

    #[test]
    fn toy_conditional_marginals_match_counts() {
        let c = build_toy_corpus();
        let observed = Assignment::from([(2, toy::C), (3, toy::D)]);
        let m = c.oracle_conditional_marginals(&observed).unwrap();
        assert_abs_diff_eq!(m[&0][toy::A as usize], 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(m[&0][toy::A_PRIME as usize], 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(m[&1][toy::B as usize], 0.69, epsilon = 1e-12);
        assert_abs_diff_eq!(m[&1][toy::B_PRIME as usize], 0.31, epsilon = 1e-12);
        // Unique final token: uniform 0.01 over the 100 E values.
        for i in 0..100 {
            assert_abs_diff_eq!(m[&4][toy::e(i) as usize], 0.01, epsilon = 1e-12);
        }
    }

    #[test]
    fn toy_marginals_full_assignment_is_empty() {
        let c = build_toy_corpus();
        let entry = &c.entries()[0];
        let observed: Assignment = entry.tokens.iter().copied().enumerate().collect();
        let m = c.oracle_conditional_marginals(&observed).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn toy_joint_pairs() {
        let c = build_toy_corpus();
        let observed = Assignment::from([(2, toy::C), (3, toy::D)]);
        let q = |a, b| {
            c.oracle_joint(&observed, &Assignment::from([(0, a), (1, b)])).unwrap()
        };
        assert_abs_diff_eq!(q(toy::A_PRIME, toy::B), 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(q(toy::A, toy::B), 0.34, epsilon = 1e-12);
        assert_abs_diff_eq!(q(toy::A, toy::B_PRIME), 0.21, epsilon = 1e-12);
        // Singleton joint equals the marginal.
        let single = c.oracle_joint(&observed, &Assignment::from([(0, toy::A)])).unwrap();
        assert_abs_diff_eq!(single, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn greedy_vs_joint_divergence() {
        let c = build_toy_corpus();
        let observed = Assignment::from([(2, toy::C), (3, toy::D)]);
        let m = c.oracle_conditional_marginals(&observed).unwrap();
        let argmax = |row: &[f64]| row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0 as u32;
        assert_eq!(argmax(&m[&0]), toy::A);
        assert_eq!(argmax(&m[&1]), toy::B);
        // But the most probable pair is (A', B).
        let mut best = (0.0, (0, 0));
        for a in [toy::A, toy::A_PRIME] {
            for b in [toy::B, toy::B_PRIME] {
                let j = c.oracle_joint(&observed, &Assignment::from([(0, a), (1, b)])).unwrap();
                if j > best.0 {
                    best = (j, (a, b));
                }
            }
        }
        assert_eq!(best.1, (toy::A_PRIME, toy::B));
    }

    #[test]
    fn no_consistent_entry() {
        let c = build_toy_corpus();
        // C in position 0 never occurs.
        let observed = Assignment::from([(0, toy::C)]);
        assert!(matches!(c.oracle_conditional_marginals(&observed), Err(Error::NoConsistentEntry)));
    }

    #[test]
    fn two_state_chain_corpus_weights_are_products() {
        let spec = MarkovChainSpec {
            state_count: 2,
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.75, 0.25], vec![0.25, 0.75]],
            zipf_s: (3f64).log2(), // profile (0.75, 0.25)
            zipf_n: 2,
            permutation_rule: "cyclic".into(),
        };
        spec.validate().unwrap();
        let c = build_zipf_chain_corpus(&spec, 2, EnumerationMode::Exhaustive).unwrap();
        assert_eq!(c.entries().len(), 4);
        for e in c.entries() {
            let expect = 0.5 * spec.transition[e.tokens[0] as usize][e.tokens[1] as usize];
            assert_abs_diff_eq!(e.weight, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn cyclic_chain_marginal_matches_initial_at_position_one() {
        let spec = MarkovChainSpec::cyclic(4, 1.0, 10).unwrap();
        let c = build_zipf_chain_corpus(&spec, 3, EnumerationMode::Exhaustive).unwrap();
        let m = c.oracle_conditional_marginals(&Assignment::new()).unwrap();
        for state in 0..4 {
            assert_abs_diff_eq!(m[&0][state], spec.initial[state], epsilon = 1e-12);
        }
    }

    #[test]
    fn chain_corpus_marginals_match_matrix_powers() {
        let spec = MarkovChainSpec::cyclic(8, 1.05, 100).unwrap();
        let c = build_zipf_chain_corpus(&spec, 6, EnumerationMode::Exhaustive).unwrap();
        let m = c.oracle_conditional_marginals(&Assignment::new()).unwrap();
        for n in 1..=6 {
            let exact = spec.marginal(n);
            let max_corpus = m[&(n - 1)].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let max_exact = exact.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_abs_diff_eq!(max_corpus, max_exact, epsilon = 1e-10);
        }
    }

    #[test]
    fn top_k_truncation_flags_and_renormalizes() {
        let spec = MarkovChainSpec::cyclic(8, 1.05, 100).unwrap();
        let c = build_zipf_chain_corpus(&spec, 6, EnumerationMode::TopK(50)).unwrap();
        assert!(c.is_truncated());
        assert_eq!(c.entries().len(), 50);
        let total: f64 = c.entries().iter().map(|e| e.weight).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        // Top-k really picks the highest-probability paths: compare against
        // exhaustive enumeration.
        let full = build_zipf_chain_corpus(&spec, 6, EnumerationMode::Exhaustive).unwrap();
        let mut weights: Vec<f64> = full.entries().iter().map(|e| e.weight).collect();
        weights.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top_sum: f64 = weights[..50].iter().sum();
        let mut got: Vec<f64> = c.entries().iter().map(|e| e.weight * top_sum).collect();
        got.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (g, w) in got.iter().zip(&weights[..50]) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn enumeration_budget_enforced() {
        let spec = MarkovChainSpec::cyclic(8, 1.05, 100).unwrap();
        let err = build_zipf_chain_corpus(&spec, 10, EnumerationMode::Exhaustive);
        assert!(matches!(err, Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn random_permuted_spec_satisfies_invariants() {
        for seed in 0..5 {
            let spec = MarkovChainSpec::random_permuted(16, 1.05, 1000, seed).unwrap();
            spec.validate().unwrap();
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let c = build_toy_corpus();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let c2 = Corpus::read_from(&buf[..]).unwrap();
        assert_eq!(c2.length(), c.length());
        assert_eq!(c2.vocab().size(), c.vocab().size());
        assert_eq!(c2.entries().len(), c.entries().len());
        for (a, b) in c.entries().iter().zip(c2.entries()) {
            assert_eq!(a.tokens, b.tokens);
            // Weights renormalize on load, which can shift the last ulp.
            assert_abs_diff_eq!(a.weight, b.weight, epsilon = 1e-15);
        }
    }
}
