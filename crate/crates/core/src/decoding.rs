//! Reverse-process decoding: the single reverse step and the generation
//! strategies built on top of it — confidence-greedy, fixed orders, parallel
//! commits, semi-autoregressive blocks and random-initialization rounds.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Assignment, Corpus, TokenId};
use crate::denoiser::{Denoiser, DenoiserOutput, MaskedSeq};
use crate::error::{Error, Result};

/// How a token is drawn from a denoiser row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    /// Row argmax; ties break to the lowest token id.
    Greedy,
    /// Sample proportional to p^(1/tau).
    Temperature(f64),
}

impl Selection {
    fn validate(&self) -> Result<()> {
        if let Selection::Temperature(tau) = self {
            if !(*tau > 0.0) {
                return Err(Error::invalid("selection", "temperature must be positive"));
            }
        }
        Ok(())
    }

    fn pick(&self, row: &[f64], rng: &mut impl Rng) -> (TokenId, f64) {
        match *self {
            Selection::Greedy => {
                let mut best = (0u32, f64::NEG_INFINITY);
                for (id, &p) in row.iter().enumerate() {
                    if p > best.1 {
                        best = (id as u32, p);
                    }
                }
                best
            }
            Selection::Temperature(tau) => {
                let weights: Vec<f64> = row.iter().map(|&p| if p > 0.0 { p.powf(1.0 / tau) } else { 0.0 }).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (id, &w) in weights.iter().enumerate() {
                    u -= w;
                    if u < 0.0 {
                        return (id as u32, row[id]);
                    }
                }
                let id = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                (id as u32, row[id])
            }
        }
    }
}

/// Which masked positions are committed each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    /// Single position with the highest row max; ties to the lowest index.
    Confidence,
    /// Leftmost masked position.
    ArOrder,
    /// Rightmost masked position.
    ReverseOrder,
    /// Uniformly random masked position.
    RandomOrder,
    /// The k highest-confidence positions at once.
    ParallelK { k: usize },
    /// Finish consecutive blocks of `block` masked positions left to right,
    /// applying `inner` inside the active block.
    SemiAr { block: usize, inner: Box<Strategy> },
    /// SEDD-style: fill a ratio of masks with random tokens, commit the top
    /// prediction among the rest, re-mask the random fills; after `rounds`
    /// finish by confidence.
    RandomInit { ratio: f64, rounds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub strategy: Strategy,
    pub selection: Selection,
    /// Once EOT is committed, force every later position to EOT.
    pub stop_on_eot: bool,
    /// Safety cap on decode steps; defaults to positions + rounds.
    pub max_steps: Option<usize>,
}

impl DecodePolicy {
    pub fn greedy(strategy: Strategy) -> Self {
        DecodePolicy { strategy, selection: Selection::Greedy, stop_on_eot: false, max_steps: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        fn check(strategy: &Strategy) -> Result<()> {
            match strategy {
                Strategy::ParallelK { k } if *k < 1 => Err(Error::invalid("policy", "k must be >= 1")),
                Strategy::SemiAr { block, inner } => {
                    if *block < 1 {
                        return Err(Error::invalid("policy", "block size must be >= 1"));
                    }
                    if matches!(**inner, Strategy::SemiAr { .. } | Strategy::RandomInit { .. }) {
                        return Err(Error::invalid("policy", "inner policy must be a flat strategy"));
                    }
                    check(inner)
                }
                Strategy::RandomInit { ratio, .. } if !(*ratio > 0.0 && *ratio < 1.0) => {
                    Err(Error::invalid("policy", "ratio must lie in (0, 1)"))
                }
                _ => Ok(()),
            }
        }
        check(&self.strategy)
    }
}

/// One trace event. Commits are final except that random-init fills are
/// always followed by a matching re-mask event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum Event {
    Commit { step: usize, positions: Vec<usize>, tokens: Vec<TokenId>, probs: Vec<f64>, forced_eot: bool },
    RandomFill { step: usize, positions: Vec<usize>, tokens: Vec<TokenId> },
    Remask { step: usize, positions: Vec<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub events: Vec<Event>,
    pub final_tokens: Vec<TokenId>,
    /// Row-max probability per position at each denoiser call.
    pub snapshots: Vec<Vec<f64>>,
}

impl DecodeTrace {
    /// Positions and tokens committed by the policy (random fills excluded,
    /// forced-EOT tail included).
    pub fn committed(&self) -> Assignment {
        let mut out = Assignment::new();
        for e in &self.events {
            if let Event::Commit { positions, tokens, .. } = e {
                for (&p, &t) in positions.iter().zip(tokens) {
                    out.insert(p, t);
                }
            }
        }
        out
    }

    /// Committed tokens in commit order, flattened across events.
    pub fn commit_order(&self) -> Vec<(usize, TokenId)> {
        let mut out = Vec::new();
        for e in &self.events {
            if let Event::Commit { positions, tokens, .. } = e {
                out.extend(positions.iter().copied().zip(tokens.iter().copied()));
            }
        }
        out
    }

    /// JSON-lines: one event object per line, then a final record with the
    /// full sequence and optional joint-probability annotation.
    pub fn write_jsonl(&self, joint: Option<f64>, w: &mut impl Write) -> Result<()> {
        for e in &self.events {
            let line = serde_json::to_string(e).map_err(|e| Error::invalid("trace json", e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        #[derive(Serialize)]
        struct Final<'a> {
            event: &'static str,
            final_tokens: &'a [TokenId],
            #[serde(skip_serializing_if = "Option::is_none")]
            oracle_joint: Option<f64>,
        }
        let fin = Final { event: "Final", final_tokens: &self.final_tokens, oracle_joint: joint };
        let line = serde_json::to_string(&fin).map_err(|e| Error::invalid("trace json", e.to_string()))?;
        writeln!(w, "{line}")?;
        Ok(())
    }
}

/// One reverse step of the absorbing process from time t to s < t: unmasked
/// positions are copied, each masked position stays MASK with probability
/// (1 - alpha_s)/(1 - alpha_t) and otherwise commits a token drawn from its
/// denoiser row.
pub fn reverse_step(
    input: &MaskedSeq,
    output: &DenoiserOutput,
    schedule: &crate::schedule::Schedule,
    s: f64,
    selection: Selection,
    rng: &mut impl Rng,
) -> Result<MaskedSeq> {
    if !(s < input.t()) {
        return Err(Error::invalid("reverse step", "s must precede the input time"));
    }
    selection.validate()?;
    let stay = (1.0 - schedule.alpha(s)) / (1.0 - schedule.alpha(input.t()));
    let mut next = input.clone();
    for j in 0..input.len() {
        if !input.is_masked(j) {
            continue;
        }
        if rng.gen::<f64>() < stay {
            continue;
        }
        let (tok, _) = selection.pick(output.row(j), rng);
        next.commit(j, tok);
    }
    Ok(MaskedSeq::from_parts(next.tokens().to_vec(), next.masked().to_vec(), s))
}

/// Run a full decode from a prompt (MASK at every position to generate).
pub fn decode(denoiser: &dyn Denoiser, prompt: &MaskedSeq, policy: &DecodePolicy, seed: u64) -> Result<DecodeTrace> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = denoiser.vocab().clone();
    let mut state = prompt.clone();
    let prompt_positions: Vec<usize> = (0..prompt.len()).filter(|&j| !prompt.is_masked(j)).collect();
    let mut events = Vec::new();
    let mut snapshots = Vec::new();
    let mut step = 0usize;

    // Semi-AR blocks are fixed over the initially masked positions.
    let blocks: Option<Vec<Vec<usize>>> = match &policy.strategy {
        Strategy::SemiAr { block, .. } => {
            let masked: Vec<usize> = prompt.masked_positions().collect();
            Some(masked.chunks(*block).map(|c| c.to_vec()).collect())
        }
        _ => None,
    };
    let mut random_init_rounds_left = match &policy.strategy {
        Strategy::RandomInit { rounds, .. } => *rounds,
        _ => 0,
    };

    let max_steps = policy.max_steps.unwrap_or(prompt.len() + random_init_rounds_left + 1);
    while state.masked_count() > 0 {
        if step >= max_steps {
            return Err(Error::PolicyStalled);
        }
        let masked: Vec<usize> = state.masked_positions().collect();

        // Random-init rounds manage their own denoiser calls and events.
        if random_init_rounds_left > 0 && masked.len() > 1 {
            random_init_rounds_left -= 1;
            let Strategy::RandomInit { ratio, .. } = policy.strategy else { unreachable!() };
            let mut fill_count = ((masked.len() as f64) * ratio).floor() as usize;
            fill_count = fill_count.clamp(1, masked.len() - 1);
            let mut shuffled = masked.clone();
            shuffled.shuffle(&mut rng);
            let mut fill_positions: Vec<usize> = shuffled[..fill_count].to_vec();
            fill_positions.sort_unstable();
            let fill_tokens: Vec<TokenId> = fill_positions
                .iter()
                .map(|_| {
                    // Uniform over non-MASK ids.
                    let r = rng.gen_range(0..vocab.size() - 1);
                    if r >= vocab.mask_id() { r + 1 } else { r }
                })
                .collect();
            for (&p, &t) in fill_positions.iter().zip(&fill_tokens) {
                state.commit(p, t);
            }
            events.push(Event::RandomFill { step, positions: fill_positions.clone(), tokens: fill_tokens });

            let output = match denoiser.denoise(&state) {
                Ok(o) => o,
                Err(Error::NoConsistentEntry) => {
                    // The random fills contradict the oracle's support; this
                    // round carries no signal, so retract it and move on.
                    for &p in &fill_positions {
                        state.remask(p, vocab.mask_id());
                    }
                    events.push(Event::Remask { step, positions: fill_positions });
                    step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            snapshots.push((0..state.len()).map(|j| output.argmax(j).1).collect());
            // Commit the single highest-confidence prediction among the
            // positions that are still masked.
            let best = state
                .masked_positions()
                .map(|j| (j, output.argmax(j)))
                .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap().then(b.0.cmp(&a.0)))
                .ok_or(Error::PolicyStalled)?;
            let (pos, _) = best;
            let (tok, prob) = policy.selection.pick(output.row(pos), &mut rng);
            state.commit(pos, tok);
            events.push(Event::Commit { step, positions: vec![pos], tokens: vec![tok], probs: vec![prob], forced_eot: false });

            for &p in &fill_positions {
                state.remask(p, vocab.mask_id());
            }
            events.push(Event::Remask { step, positions: fill_positions });
            step += 1;
            continue;
        }

        let output = denoiser.denoise(&state)?;
        snapshots.push((0..state.len()).map(|j| output.argmax(j).1).collect());

        // Candidate pool: all masked positions, or the active semi-AR block.
        let pool: Vec<usize> = match &blocks {
            Some(blocks) => blocks
                .iter()
                .find_map(|b| {
                    let open: Vec<usize> = b.iter().copied().filter(|&j| state.is_masked(j)).collect();
                    if open.is_empty() { None } else { Some(open) }
                })
                .unwrap_or_default(),
            None => masked,
        };
        if pool.is_empty() {
            return Err(Error::PolicyStalled);
        }

        let effective = match &policy.strategy {
            Strategy::SemiAr { inner, .. } => inner.as_ref(),
            Strategy::RandomInit { .. } => &Strategy::Confidence,
            other => other,
        };
        let chosen: Vec<usize> = match effective {
            Strategy::ArOrder => vec![pool[0]],
            Strategy::ReverseOrder => vec![*pool.last().unwrap()],
            Strategy::RandomOrder => vec![pool[rng.gen_range(0..pool.len())]],
            Strategy::Confidence => {
                // Highest row max; ties resolve to the lowest position.
                let best = pool
                    .iter()
                    .copied()
                    .max_by(|&a, &b| output.argmax(a).1.partial_cmp(&output.argmax(b).1).unwrap().then(b.cmp(&a)))
                    .unwrap();
                vec![best]
            }
            Strategy::ParallelK { k } => {
                let mut ranked = pool.clone();
                // Descending confidence, ties toward the lower position.
                ranked.sort_by(|&a, &b| output.argmax(b).1.partial_cmp(&output.argmax(a).1).unwrap().then(a.cmp(&b)));
                ranked.truncate(*k);
                ranked.sort_unstable();
                ranked
            }
            Strategy::SemiAr { .. } | Strategy::RandomInit { .. } => unreachable!(),
        };

        let mut tokens = Vec::with_capacity(chosen.len());
        let mut probs = Vec::with_capacity(chosen.len());
        for &p in &chosen {
            let (tok, prob) = policy.selection.pick(output.row(p), &mut rng);
            state.commit(p, tok);
            tokens.push(tok);
            probs.push(prob);
        }
        let eot_at = policy
            .stop_on_eot
            .then(|| chosen.iter().zip(&tokens).filter(|(_, &t)| t == vocab.eot_id()).map(|(&p, _)| p).min())
            .flatten();
        events.push(Event::Commit { step, positions: chosen, tokens, probs, forced_eot: false });

        if let Some(eot_pos) = eot_at {
            let tail: Vec<usize> = state.masked_positions().filter(|&j| j > eot_pos).collect();
            if !tail.is_empty() {
                for &p in &tail {
                    state.commit(p, vocab.eot_id());
                }
                let n = tail.len();
                events.push(Event::Commit {
                    step,
                    positions: tail,
                    tokens: vec![vocab.eot_id(); n],
                    probs: vec![1.0; n],
                    forced_eot: true,
                });
            }
        }
        step += 1;
    }

    debug_assert!(prompt_positions.iter().all(|&j| state.tokens()[j] == prompt.tokens()[j]));
    Ok(DecodeTrace { events, final_tokens: state.tokens().to_vec(), snapshots })
}

/// Exact corpus joint probability of every committed token given the prompt.
pub fn joint_prob_of_trace(corpus: &Corpus, prompt: &MaskedSeq, trace: &DecodeTrace) -> Result<f64> {
    corpus.oracle_joint(&prompt.observed(), &trace.committed())
}

/// Oracle comparison of a simultaneous commit at `positions` against the
/// best joint assignment of those positions.
#[derive(Debug, Clone, Serialize)]
pub struct ParallelAnnotation {
    pub positions: Vec<usize>,
    pub committed: Vec<TokenId>,
    pub committed_joint: f64,
    pub best_tokens: Vec<TokenId>,
    pub best_joint: f64,
    pub suboptimal: bool,
}

pub fn annotate_parallel_commit(
    corpus: &Corpus,
    prompt: &MaskedSeq,
    positions: &[usize],
    committed: &[TokenId],
) -> Result<ParallelAnnotation> {
    let observed = prompt.observed();
    let query: Assignment = positions.iter().copied().zip(committed.iter().copied()).collect();
    let committed_joint = corpus.oracle_joint(&observed, &query)?;
    // Best joint over entries consistent with the prompt; ties resolve to the
    // lexicographically smallest token tuple for determinism.
    let denom: f64 = corpus
        .entries()
        .iter()
        .filter(|e| observed.iter().all(|(&p, &t)| e.tokens[p] == t))
        .map(|e| e.weight)
        .sum();
    if denom == 0.0 {
        return Err(Error::NoConsistentEntry);
    }
    let mut weights: std::collections::BTreeMap<Vec<TokenId>, f64> = Default::default();
    for e in corpus.entries() {
        if observed.iter().all(|(&p, &t)| e.tokens[p] == t) {
            let key: Vec<TokenId> = positions.iter().map(|&p| e.tokens[p]).collect();
            *weights.entry(key).or_default() += e.weight;
        }
    }
    let (best_tokens, best_weight) = weights
        .into_iter()
        .fold((Vec::new(), f64::NEG_INFINITY), |best, (k, w)| if w > best.1 { (k, w) } else { best });
    let best_joint = best_weight / denom;
    Ok(ParallelAnnotation {
        positions: positions.to_vec(),
        committed: committed.to_vec(),
        committed_joint,
        best_tokens,
        best_joint,
        suboptimal: committed_joint + 1e-15 < best_joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_toy_corpus, toy};
    use crate::denoiser::TabularDenoiser;
    use crate::schedule::Schedule;
    use approx::assert_abs_diff_eq;

    fn toy_denoiser() -> TabularDenoiser {
        TabularDenoiser::new(build_toy_corpus())
    }

    fn cd_prompt(d: &TabularDenoiser) -> MaskedSeq {
        MaskedSeq::from_tokens(vec![toy::MASK, toy::MASK, toy::C, toy::D, toy::MASK], d.vocab(), 1.0).unwrap()
    }

    #[test]
    fn reverse_step_copies_unmasked_and_commits_at_zero() {
        let d = toy_denoiser();
        let input = cd_prompt(&d);
        let output = d.denoise(&input).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = reverse_step(&input, &output, &Schedule::Linear, 0.0, Selection::Greedy, &mut rng).unwrap();
        // s = 0: stay probability 0, everything commits to the row argmax.
        assert_eq!(next.masked_count(), 0);
        assert_eq!(next.tokens()[0], toy::A);
        assert_eq!(next.tokens()[1], toy::B);
        assert_eq!(next.tokens()[2], toy::C);
        assert_eq!(next.tokens()[4], toy::e(0));
    }

    #[test]
    fn reverse_step_commit_fraction_three_sigma() {
        // (1 - alpha_s)/(1 - alpha_t) = 0.5 for linear at s = 0.4, t = 0.8.
        let vocab = crate::corpus::Vocab::new(4, 2, 3).unwrap();
        let n = 10_000;
        let input = MaskedSeq::from_tokens(vec![2; n], &vocab, 0.8).unwrap();
        let mut row = vec![0.0; 4];
        row[0] = 1.0;
        let output = DenoiserOutput::new(vec![row; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let next = reverse_step(&input, &output, &Schedule::Linear, 0.4, Selection::Greedy, &mut rng).unwrap();
        let committed = n - next.masked_count();
        let frac = committed as f64 / n as f64;
        let sigma = (0.25f64 / n as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "frac {frac}");
        assert_abs_diff_eq!(next.t(), 0.4);
    }

    #[test]
    fn ar_order_follows_oracle_chain() {
        let d = toy_denoiser();
        let trace = decode(&d, &cd_prompt(&d), &DecodePolicy::greedy(Strategy::ArOrder), 0).unwrap();
        let order = trace.commit_order();
        assert_eq!(order[0], (0, toy::A));
        assert_eq!(order[1], (1, toy::B));
        // Commit probabilities follow the exact conditional chain.
        if let Event::Commit { probs, .. } = &trace.events[0] {
            assert_abs_diff_eq!(probs[0], 0.55, epsilon = 1e-12);
        }
        if let Event::Commit { probs, .. } = &trace.events[1] {
            assert_abs_diff_eq!(probs[0], 34.0 / 55.0, epsilon = 1e-12);
        }
        // The final token is an E value.
        assert!(order[2].1 >= toy::e(0) && order[2].1 <= toy::e(99));
    }

    #[test]
    fn parallel_two_commits_ab_but_best_pair_is_a_prime_b() {
        let d = toy_denoiser();
        let prompt = cd_prompt(&d);
        let trace = decode(&d, &prompt, &DecodePolicy::greedy(Strategy::ParallelK { k: 2 }), 0).unwrap();
        if let Event::Commit { positions, tokens, .. } = &trace.events[0] {
            assert_eq!(positions, &vec![0, 1]);
            assert_eq!(tokens, &vec![toy::A, toy::B]);
            let ann = annotate_parallel_commit(d.corpus(), &prompt, positions, tokens).unwrap();
            assert_abs_diff_eq!(ann.committed_joint, 0.34, epsilon = 1e-12);
            assert_abs_diff_eq!(ann.best_joint, 0.35, epsilon = 1e-12);
            assert_eq!(ann.best_tokens, vec![toy::A_PRIME, toy::B]);
            assert!(ann.suboptimal);
        } else {
            panic!("first event must be a commit");
        }
    }

    #[test]
    fn joint_probs_of_pair_traces() {
        let d = toy_denoiser();
        let prompt = cd_prompt(&d);
        let joint = |a: TokenId, b: TokenId| {
            let query: Assignment = [(0, a), (1, b)].into_iter().collect();
            d.corpus().oracle_joint(&prompt.observed(), &query).unwrap()
        };
        assert_abs_diff_eq!(joint(toy::A_PRIME, toy::B), 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(joint(toy::A, toy::B), 0.34, epsilon = 1e-12);
        assert_abs_diff_eq!(joint(toy::A, toy::B_PRIME), 0.21, epsilon = 1e-12);
    }

    #[test]
    fn semi_ar_block_one_equals_ar_order() {
        let d = toy_denoiser();
        for seed in 0..20 {
            let prompt = cd_prompt(&d);
            let ar = decode(&d, &prompt, &DecodePolicy::greedy(Strategy::ArOrder), seed).unwrap();
            let semi = decode(
                &d,
                &prompt,
                &DecodePolicy::greedy(Strategy::SemiAr { block: 1, inner: Box::new(Strategy::Confidence) }),
                seed,
            )
            .unwrap();
            assert_eq!(ar.final_tokens, semi.final_tokens);
        }
    }

    #[test]
    fn semi_ar_block_two_recovers_best_pair() {
        // Inside the first block {0, 1}, confidence commits B first (0.69),
        // after which A' is conditionally more likely (35/69): the block
        // decode reaches the max-joint pair that parallel commits miss.
        let d = toy_denoiser();
        let trace = decode(
            &d,
            &cd_prompt(&d),
            &DecodePolicy::greedy(Strategy::SemiAr { block: 2, inner: Box::new(Strategy::Confidence) }),
            0,
        )
        .unwrap();
        let order = trace.commit_order();
        assert_eq!(order[0], (1, toy::B));
        assert_eq!(order[1], (0, toy::A_PRIME));
    }

    #[test]
    fn all_strategies_terminate_and_respect_prompt() {
        let d = toy_denoiser();
        let strategies = [
            Strategy::Confidence,
            Strategy::ArOrder,
            Strategy::ReverseOrder,
            Strategy::RandomOrder,
            Strategy::ParallelK { k: 2 },
            Strategy::SemiAr { block: 2, inner: Box::new(Strategy::ArOrder) },
            Strategy::RandomInit { ratio: 0.4, rounds: 2 },
        ];
        for strategy in strategies {
            let prompt = cd_prompt(&d);
            let trace = decode(&d, &prompt, &DecodePolicy::greedy(strategy.clone()), 7).unwrap();
            assert_eq!(trace.final_tokens[2], toy::C, "{strategy:?}");
            assert_eq!(trace.final_tokens[3], toy::D);
            assert!(trace.final_tokens.iter().all(|&t| t != toy::MASK));
            // Prompt positions never appear in commit events.
            let committed = trace.committed();
            assert!(!committed.contains_key(&2) && !committed.contains_key(&3));
            // Determinism.
            let again = decode(&d, &prompt, &DecodePolicy::greedy(strategy), 7).unwrap();
            assert_eq!(trace.final_tokens, again.final_tokens);
        }
    }

    #[test]
    fn random_init_logs_fill_and_remask_pairs() {
        let d = toy_denoiser();
        let trace = decode(
            &d,
            &cd_prompt(&d),
            &DecodePolicy::greedy(Strategy::RandomInit { ratio: 0.4, rounds: 2 }),
            3,
        )
        .unwrap();
        let fills: Vec<&Event> = trace.events.iter().filter(|e| matches!(e, Event::RandomFill { .. })).collect();
        let remasks: Vec<&Event> = trace.events.iter().filter(|e| matches!(e, Event::Remask { .. })).collect();
        assert_eq!(fills.len(), remasks.len());
        assert!(!fills.is_empty());
        for (f, r) in fills.iter().zip(&remasks) {
            let (Event::RandomFill { positions: fp, .. }, Event::Remask { positions: rp, .. }) = (f, r) else {
                unreachable!()
            };
            assert_eq!(fp, rp);
        }
    }

    #[test]
    fn eot_stop_forces_tail() {
        // Single-sequence corpus whose entry ends with EOT-filled tail.
        let vocab = crate::corpus::Vocab::new(6, 4, 5).unwrap();
        let corpus = crate::corpus::Corpus::new(
            vocab,
            4,
            vec![crate::corpus::CorpusEntry { tokens: vec![0, 5, 1, 2], weight: 1.0 }],
        )
        .unwrap();
        let d = TabularDenoiser::new(corpus);
        let prompt = MaskedSeq::from_tokens(vec![4, 4, 4, 4], d.vocab(), 1.0).unwrap();
        let mut policy = DecodePolicy::greedy(Strategy::ArOrder);
        policy.stop_on_eot = true;
        let trace = decode(&d, &prompt, &policy, 0).unwrap();
        assert_eq!(trace.final_tokens, vec![0, 5, 5, 5]);
        assert!(trace.events.iter().any(|e| matches!(e, Event::Commit { forced_eot: true, .. })));
    }

    #[test]
    fn policy_validation() {
        assert!(DecodePolicy::greedy(Strategy::ParallelK { k: 0 }).validate().is_err());
        assert!(DecodePolicy::greedy(Strategy::RandomInit { ratio: 1.0, rounds: 1 }).validate().is_err());
        let mut p = DecodePolicy::greedy(Strategy::Confidence);
        p.selection = Selection::Temperature(0.0);
        assert!(p.validate().is_err());
        assert!(DecodePolicy::greedy(Strategy::SemiAr {
            block: 2,
            inner: Box::new(Strategy::SemiAr { block: 1, inner: Box::new(Strategy::Confidence) })
        })
        .validate()
        .is_err());
    }

    #[test]
    fn jsonl_round_trip_shape() {
        let d = toy_denoiser();
        let prompt = cd_prompt(&d);
        let trace = decode(&d, &prompt, &DecodePolicy::greedy(Strategy::ArOrder), 0).unwrap();
        let joint = joint_prob_of_trace(d.corpus(), &prompt, &trace).unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl(Some(joint), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), trace.events.len() + 1);
        let last: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert_eq!(last["event"], "Final");
        assert!(last["oracle_joint"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn temperature_sampling_matches_row_distribution() {
        // tau = 1 reduces to sampling the row itself.
        let row = vec![0.2, 0.3, 0.5, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            let (tok, _) = Selection::Temperature(1.0).pick(&row, &mut rng);
            counts[tok as usize] += 1;
        }
        for (i, &p) in row.iter().enumerate() {
            let frac = counts[i] as f64 / 20_000.0;
            let sigma = (p * (1.0 - p) / 20_000.0).sqrt();
            assert!((frac - p).abs() < 4.0 * sigma + 1e-9, "token {i}: {frac} vs {p}");
        }
    }
}
