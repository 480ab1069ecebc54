//! Quantitative apparatus: Zipf top probabilities, the marginal upper-bound
//! recursion and its limit, perplexity, parallel-sampling metrics, the
//! bound-derived PPL table, max-probability profiles and homogenization
//! reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::denoiser::{Denoiser, MaskedSeq};
use crate::error::{Error, Result};

/// Kahan compensated sum, used for the large harmonic-power sums.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Zipf(s, N) probability mass function: P(rank k) = k^-s / sum_j j^-s,
/// in rank order (descending probability).
pub fn zipf_pmf(s: f64, n: usize) -> Vec<f64> {
    let total = kahan_sum((1..=n).map(|k| (k as f64).powf(-s)));
    (1..=n).map(|k| (k as f64).powf(-s) / total).collect()
}

/// Top-1 and top-2 Zipf probabilities, always recomputed from (s, N).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfParams {
    pub s: f64,
    pub n_support: usize,
    pub omega1: f64,
    pub omega2: f64,
}

pub fn zipf_top_probs(s: f64, n_support: usize) -> Result<ZipfParams> {
    if !(s > 0.0) {
        return Err(Error::invalid("zipf", "exponent s must be positive"));
    }
    if n_support < 2 {
        return Err(Error::invalid("zipf", "support size N must be at least 2"));
    }
    let omega1 = 1.0 / kahan_sum((1..=n_support).map(|k| (k as f64).powf(-s)));
    let omega2 = 2.0f64.powf(-s) * omega1;
    Ok(ZipfParams { s, n_support, omega1, omega2 })
}

impl ZipfParams {
    /// Construct directly from (omega1, omega2), for corpora whose profile is
    /// a truncated Zipf rather than the full support.
    pub fn from_omegas(omega1: f64, omega2: f64) -> Result<Self> {
        if !(0.0 < omega2 && omega2 < omega1 && omega1 < 1.0) {
            return Err(Error::invalid("zipf", "need 0 < omega2 < omega1 < 1"));
        }
        Ok(ZipfParams { s: f64::NAN, n_support: 0, omega1, omega2 })
    }
}

/// Upper bound on the max marginal probability of the n-th generated token:
/// omega2/(1-(omega1-omega2)) + (omega1-omega2)^n (1-omega1)/(1-(omega1-omega2)).
/// Equals omega1 exactly at n = 1 and decreases toward [`bound_limit`].
pub fn marginal_upper_bound(params: &ZipfParams, n: usize) -> f64 {
    assert!(n >= 1);
    let r = params.omega1 - params.omega2;
    bound_limit(params) + r.powi(n as i32) * (1.0 - params.omega1) / (1.0 - r)
}

/// The large-n limit omega2 / (1 - (omega1 - omega2)).
pub fn bound_limit(params: &ZipfParams) -> f64 {
    params.omega2 / (1.0 - (params.omega1 - params.omega2))
}

/// The bound evaluated at n = 1..max_n.
#[derive(Debug, Clone)]
pub struct BoundCurve {
    pub params: ZipfParams,
    pub values: Vec<f64>,
}

impl BoundCurve {
    pub fn new(params: ZipfParams, max_n: usize) -> Self {
        BoundCurve { params, values: (1..=max_n).map(|n| marginal_upper_bound(&params, n)).collect() }
    }
}

/// Perplexity of a joint probability over n tokens: P^(-1/n).
pub fn ppl(joint_probability: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("ppl", "token count must be positive"));
    }
    if joint_probability == 0.0 {
        return Err(Error::ZeroProbability);
    }
    if !(joint_probability > 0.0 && joint_probability <= 1.0) {
        return Err(Error::invalid("ppl", "probability must lie in (0, 1]"));
    }
    Ok(joint_probability.powf(-1.0 / n as f64))
}

/// Parallel-sampling joint-probability envelope from per-position maxima:
/// (min, product, Bonferroni lower bound).
pub fn parallel_metrics(p: &[f64]) -> (f64, f64, f64) {
    assert!(!p.is_empty());
    debug_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let m1 = p.iter().copied().fold(f64::INFINITY, f64::min);
    let m2 = p.iter().product();
    let m3 = (p.iter().sum::<f64>() - (p.len() - 1) as f64).max(0.0);
    (m1, m2, m3)
}

/// Row k = PPL of the product of the first k marginal upper bounds: the
/// product metric applied to the bound curve.
pub fn ppl_table(params: &ZipfParams, max_parallel: usize) -> Result<Vec<(usize, f64)>> {
    if max_parallel < 1 {
        return Err(Error::invalid("ppl table", "max_parallel must be at least 1"));
    }
    let mut rows = Vec::with_capacity(max_parallel);
    let mut product = 1.0;
    for k in 1..=max_parallel {
        product *= marginal_upper_bound(params, k);
        rows.push((k, ppl(product, k)?));
    }
    Ok(rows)
}

/// Mean of the denoiser's row-max probability at each position, across
/// prompts. Each prompt is denoised once; unmasked positions contribute 1.
pub fn max_prob_profile(denoiser: &dyn Denoiser, prompts: &[MaskedSeq]) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::invalid("profile", "need at least one prompt"));
    }
    let length = prompts[0].len();
    let mut sums = vec![0.0; length];
    for prompt in prompts {
        if prompt.len() != length {
            return Err(Error::invalid("profile", "prompts must share one length"));
        }
        let output = denoiser.denoise(prompt)?;
        for (j, sum) in sums.iter_mut().enumerate() {
            *sum += output.argmax(j).1;
        }
    }
    Ok(sums.into_iter().map(|s| s / prompts.len() as f64).collect())
}

/// One-shot all-positions argmax report for a single prompt.
#[derive(Debug, Clone, Serialize)]
pub struct HomogenizationReport {
    /// Masked positions in increasing order; distance d is the 1-based index.
    pub positions: Vec<usize>,
    /// Greedy argmax token at each masked position (ties to the lowest id).
    pub argmax: Vec<TokenId>,
    /// Most frequent argmax token (ties to the lowest id).
    pub modal_token: TokenId,
    /// Per-distance indicator: argmax equals the modal token.
    pub collapse: Vec<bool>,
    /// Fraction of masked positions whose argmax is the modal token.
    pub collapse_fraction: f64,
    /// Longest run of consecutive masked positions sharing one argmax.
    pub longest_run: usize,
}

pub fn homogenization_score(denoiser: &dyn Denoiser, prompt: &MaskedSeq) -> Result<HomogenizationReport> {
    let positions: Vec<usize> = prompt.masked_positions().collect();
    if positions.is_empty() {
        return Err(Error::invalid("homogenization", "prompt has no masked positions"));
    }
    let output = denoiser.denoise(prompt)?;
    let argmax: Vec<TokenId> = positions.iter().map(|&j| output.argmax(j).0).collect();
    let mut counts: std::collections::BTreeMap<TokenId, usize> = Default::default();
    for &tok in &argmax {
        *counts.entry(tok).or_default() += 1;
    }
    // BTreeMap iterates in id order, so strict `>` keeps the lowest id on ties.
    let modal_token = counts
        .iter()
        .fold((0u32, 0usize), |best, (&tok, &c)| if c > best.1 { (tok, c) } else { best })
        .0;
    let collapse: Vec<bool> = argmax.iter().map(|&t| t == modal_token).collect();
    let collapse_fraction = collapse.iter().filter(|&&c| c).count() as f64 / collapse.len() as f64;
    let mut longest_run = 1;
    let mut run = 1;
    for w in argmax.windows(2) {
        run = if w[1] == w[0] { run + 1 } else { 1 };
        longest_run = longest_run.max(run);
    }
    Ok(HomogenizationReport { positions, argmax, modal_token, collapse, collapse_fraction, longest_run })
}

/// Per-distance collapse fraction averaged over prompts with identical masked
/// structure.
pub fn homogenization_profile(denoiser: &dyn Denoiser, prompts: &[MaskedSeq]) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::invalid("homogenization", "need at least one prompt"));
    }
    let mut sums: Option<Vec<f64>> = None;
    for prompt in prompts {
        let report = homogenization_score(denoiser, prompt)?;
        let sums = sums.get_or_insert_with(|| vec![0.0; report.collapse.len()]);
        if sums.len() != report.collapse.len() {
            return Err(Error::invalid("homogenization", "prompts must share one masked structure"));
        }
        for (s, &c) in sums.iter_mut().zip(&report.collapse) {
            *s += c as u8 as f64;
        }
    }
    Ok(sums.unwrap().into_iter().map(|s| s / prompts.len() as f64).collect())
}

// --- CSV emission; all floats printed with 6 decimal places. ---

pub fn write_bound_csv(curve: &BoundCurve, w: &mut impl Write) -> Result<()> {
    writeln!(w, "n,bound")?;
    for (i, v) in curve.values.iter().enumerate() {
        writeln!(w, "{},{:.6}", i + 1, v)?;
    }
    Ok(())
}

pub fn write_ppl_table_csv(rows: &[(usize, f64)], w: &mut impl Write) -> Result<()> {
    writeln!(w, "k,ppl")?;
    for &(k, v) in rows {
        writeln!(w, "{},{:.6}", k, v)?;
    }
    Ok(())
}

pub fn write_profile_csv(profile: &[f64], w: &mut impl Write) -> Result<()> {
    writeln!(w, "n,mean_max_prob")?;
    for (i, v) in profile.iter().enumerate() {
        writeln!(w, "{},{:.6}", i + 1, v)?;
    }
    Ok(())
}

pub fn write_homogenization_csv(report: &HomogenizationReport, w: &mut impl Write) -> Result<()> {
    writeln!(w, "distance,position,token,collapse")?;
    for (d, ((&pos, &tok), &c)) in report.positions.iter().zip(&report.argmax).zip(&report.collapse).enumerate() {
        writeln!(w, "{},{},{},{}", d + 1, pos, tok, c as u8)?;
    }
    Ok(())
}
