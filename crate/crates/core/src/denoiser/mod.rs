//! Denoiser backends: the exact tabular (Bayes-optimal) oracle and a small
//! trainable bidirectional-attention network.

mod neural;

pub use neural::{gradient_check, NeuralDenoiser, NeuralDenoiserConfig};

use crate::corpus::{Assignment, Corpus, TokenId, Vocab};
use crate::error::{Error, Result};

/// A sequence state x_t: token ids, per-position mask flags and the time.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq {
    tokens: Vec<TokenId>,
    masked: Vec<bool>,
    t: f64,
}

impl MaskedSeq {
    pub fn new(tokens: Vec<TokenId>, masked: Vec<bool>, t: f64, vocab: &Vocab) -> Result<Self> {
        if tokens.len() != masked.len() {
            return Err(Error::invalid("masked seq", "tokens and flags length mismatch"));
        }
        for (&tok, &m) in tokens.iter().zip(&masked) {
            let ok = if m { tok == vocab.mask_id() } else { vocab.is_clean(tok) };
            if !ok {
                return Err(Error::invalid("masked seq", "flags must mirror MASK tokens exactly"));
            }
        }
        Ok(MaskedSeq { tokens, masked, t })
    }

    /// Infer mask flags from occurrences of the MASK id.
    pub fn from_tokens(tokens: Vec<TokenId>, vocab: &Vocab, t: f64) -> Result<Self> {
        let masked: Vec<bool> = tokens.iter().map(|&tok| tok == vocab.mask_id()).collect();
        MaskedSeq::new(tokens, masked, t, vocab)
    }

    /// Internal constructor for states produced by the forward process, which
    /// maintains the invariant itself.
    pub(crate) fn from_parts(tokens: Vec<TokenId>, masked: Vec<bool>, t: f64) -> Self {
        MaskedSeq { tokens, masked, t }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.masked[j]
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j)
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// The unmasked positions and their tokens, as an oracle assignment.
    pub fn observed(&self) -> Assignment {
        self.tokens
            .iter()
            .zip(&self.masked)
            .enumerate()
            .filter(|(_, (_, &m))| !m)
            .map(|(j, (&tok, _))| (j, tok))
            .collect()
    }

    /// Commit a token at a masked position.
    pub fn commit(&mut self, j: usize, token: TokenId) {
        debug_assert!(self.masked[j]);
        self.tokens[j] = token;
        self.masked[j] = false;
    }

    /// Re-mask a position (used by the random-init decode strategy).
    pub fn remask(&mut self, j: usize, mask_id: TokenId) {
        self.tokens[j] = mask_id;
        self.masked[j] = true;
    }
}

/// Per-position probability rows over the vocabulary, with zero mass on MASK.
/// Rows at unmasked positions place probability 1 on the observed token.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    probs: Vec<Vec<f64>>,
}

impl DenoiserOutput {
    pub fn new(probs: Vec<Vec<f64>>) -> Self {
        DenoiserOutput { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.probs[j]
    }

    /// Highest-probability token in a row; ties break to the lowest id.
    pub fn argmax(&self, j: usize) -> (TokenId, f64) {
        let mut best = (0u32, f64::NEG_INFINITY);
        for (id, &p) in self.probs[j].iter().enumerate() {
            if p > best.1 {
                best = (id as u32, p);
            }
        }
        best
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for row in &self.probs {
            if row.len() != vocab.size() as usize {
                return Err(Error::invalid("denoiser output", "row width must equal vocab size"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("denoiser output", format!("row sums to {sum}")));
            }
            if row[vocab.mask_id() as usize] != 0.0 {
                return Err(Error::invalid("denoiser output", "MASK column must be exactly zero"));
            }
        }
        Ok(())
    }
}

/// A denoiser maps a masked state to per-position clean-token distributions.
pub trait Denoiser {
    fn denoise(&self, input: &MaskedSeq) -> Result<DenoiserOutput>;
    fn vocab(&self) -> &Vocab;
}

/// Exact Bayes-optimal denoiser: each masked row is the corpus conditional
/// marginal given the unmasked tokens. Output does not depend on `t` or on how
/// many positions are masked, only on the unmasked assignment.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    corpus: Corpus,
}

impl TabularDenoiser {
    pub fn new(corpus: Corpus) -> Self {
        TabularDenoiser { corpus }
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }
}

impl Denoiser for TabularDenoiser {
    fn denoise(&self, input: &MaskedSeq) -> Result<DenoiserOutput> {
        if input.len() != self.corpus.length() {
            return Err(Error::LengthExceeded { got: input.len(), max: self.corpus.length() });
        }
        let k = self.corpus.vocab().size() as usize;
        let marginals = self.corpus.oracle_conditional_marginals(&input.observed())?;
        let mut probs = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            if input.is_masked(j) {
                probs.push(marginals[&j].clone());
            } else {
                let mut row = vec![0.0; k];
                row[input.tokens()[j] as usize] = 1.0;
                probs.push(row);
            }
        }
        Ok(DenoiserOutput::new(probs))
    }

    fn vocab(&self) -> &Vocab {
        self.corpus.vocab()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_toy_corpus, toy};
    use approx::assert_abs_diff_eq;

    fn toy_query(vocab: &Vocab, t: f64) -> MaskedSeq {
        MaskedSeq::from_tokens(vec![toy::MASK, toy::MASK, toy::C, toy::D, toy::MASK], vocab, t).unwrap()
    }

    #[test]
    fn tabular_matches_oracle_on_toy_query() {
        let corpus = build_toy_corpus();
        let d = TabularDenoiser::new(corpus);
        let input = toy_query(d.vocab(), 0.5);
        let out = d.denoise(&input).unwrap();
        out.validate(d.vocab()).unwrap();
        assert_abs_diff_eq!(out.row(0)[toy::A as usize], 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(out.row(0)[toy::A_PRIME as usize], 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(out.row(1)[toy::B as usize], 0.69, epsilon = 1e-12);
    }

    #[test]
    fn tabular_is_time_invariant() {
        let d = TabularDenoiser::new(build_toy_corpus());
        let a = d.denoise(&toy_query(d.vocab(), 0.2)).unwrap();
        let b = d.denoise(&toy_query(d.vocab(), 0.9)).unwrap();
        for j in 0..5 {
            assert_eq!(a.row(j), b.row(j));
        }
    }

    #[test]
    fn tabular_uniform_over_unique_final_token() {
        let d = TabularDenoiser::new(build_toy_corpus());
        let input = MaskedSeq::from_tokens(vec![toy::A, toy::B, toy::C, toy::D, toy::MASK], d.vocab(), 0.5).unwrap();
        let out = d.denoise(&input).unwrap();
        // Given ABCD, the final token is uniform over the 34 E values of the
        // AB entries.
        let nonzero: Vec<f64> = out.row(4).iter().copied().filter(|&p| p > 0.0).collect();
        assert_eq!(nonzero.len(), 34);
        for p in nonzero {
            assert_abs_diff_eq!(p, 1.0 / 34.0, epsilon = 1e-12);
        }
        // Unmasked rows are one-hot on the observed token.
        assert_eq!(out.row(0)[toy::A as usize], 1.0);
    }

    #[test]
    fn masked_seq_invariant_enforced() {
        let vocab = Vocab::new(10, 8, 9).unwrap();
        assert!(MaskedSeq::new(vec![8, 1], vec![false, false], 0.1, &vocab).is_err());
        assert!(MaskedSeq::new(vec![1, 2], vec![true, false], 0.1, &vocab).is_err());
        assert!(MaskedSeq::new(vec![8, 2], vec![true, false], 0.1, &vocab).is_ok());
    }

    #[test]
    fn argmax_ties_break_to_lowest_id() {
        let out = DenoiserOutput::new(vec![vec![0.25, 0.375, 0.375, 0.0]]);
        assert_eq!(out.argmax(0), (1, 0.375));
    }
}
