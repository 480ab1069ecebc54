//! Execution of resolved commands: each writes its data files into the output
//! directory and (for fresh runs) a manifest describing the invocation.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use maskdiff_core::analysis::{
    homogenization_score, ppl_table, write_homogenization_csv, write_ppl_table_csv,
    BoundCurve, ZipfParams,
};
use maskdiff_core::corpus::{
    build_toy_corpus, build_zipf_chain_corpus, Corpus, EnumerationMode, MarkovChainSpec, TokenId,
};
use maskdiff_core::decoding::{
    annotate_parallel_commit, decode, joint_prob_of_trace, DecodePolicy, Event, Selection, Strategy,
};
use maskdiff_core::denoiser::{Denoiser, MaskedSeq, NeuralDenoiser, NeuralDenoiserConfig, TabularDenoiser};
use maskdiff_core::schedule::Schedule;
use maskdiff_core::training::{
    train_blockwise_reverse, train_standard, write_trace_csv, PatternMode, Regime, TrainConfig, TrainResult,
};
use maskdiff_core::{Error, Result};
use serde::Serialize;

use crate::manifest::{self, ResolvedCommand};

pub fn run(cmd: &ResolvedCommand, out_dir: &Path, write_manifest: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    match cmd {
        ResolvedCommand::CorpusToy => {
            build_toy_corpus().save(&out_dir.join("corpus.txt"))?;
        }
        ResolvedCommand::CorpusChain { states, s, zipf_n, len, seed, top_k } => {
            let spec = match seed {
                Some(seed) => MarkovChainSpec::random_permuted(*states, *s, *zipf_n, *seed)?,
                None => MarkovChainSpec::cyclic(*states, *s, *zipf_n)?,
            };
            let mode = top_k.map(EnumerationMode::TopK).unwrap_or(EnumerationMode::Exhaustive);
            build_zipf_chain_corpus(&spec, *len, mode)?.save(&out_dir.join("corpus.txt"))?;
        }
        ResolvedCommand::Train { .. } => run_train(cmd, out_dir)?,
        ResolvedCommand::Decode { .. } => run_decode(cmd, out_dir)?,
        ResolvedCommand::AnalyzePplTable { s, n_support, max } => {
            let params = maskdiff_core::analysis::zipf_top_probs(*s, *n_support)?;
            let rows = ppl_table(&params, *max)?;
            let mut w = BufWriter::new(File::create(out_dir.join("ppl_table.csv"))?);
            write_ppl_table_csv(&rows, &mut w)?;
        }
        ResolvedCommand::AnalyzeBound { s, n_support, n } => {
            let params = maskdiff_core::analysis::zipf_top_probs(*s, *n_support)?;
            let curve = BoundCurve::new(params, *n);
            let mut w = BufWriter::new(File::create(out_dir.join("bound.csv"))?);
            maskdiff_core::analysis::write_bound_csv(&curve, &mut w)?;
        }
        ResolvedCommand::AnalyzeProfile { corpus, prompts, seed } => {
            run_profile(corpus, *prompts, *seed, out_dir)?;
        }
        ResolvedCommand::AnalyzeHomogenization { corpus } => {
            let corpus = Corpus::load(corpus)?;
            let d = TabularDenoiser::new(corpus);
            let prompt = all_mask_prompt(d.corpus());
            let report = homogenization_score(&d, &prompt)?;
            let mut w = BufWriter::new(File::create(out_dir.join("homogenization.csv"))?);
            write_homogenization_csv(&report, &mut w)?;
            write_json(&out_dir.join("report.json"), &report)?;
        }
        ResolvedCommand::ReproduceToy => run_reproduce_toy(out_dir)?,
        ResolvedCommand::ReproduceTable2 => {
            run(&ResolvedCommand::AnalyzePplTable { s: 1.05, n_support: 150_000, max: 8 }, out_dir, false)?;
        }
    }
    if write_manifest {
        manifest::save(cmd, out_dir)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid("json", e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_corpus(path: &Option<PathBuf>) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::load(p),
        None => Ok(build_toy_corpus()),
    }
}

fn all_mask_prompt(corpus: &Corpus) -> MaskedSeq {
    MaskedSeq::from_tokens(vec![corpus.vocab().mask_id(); corpus.length()], corpus.vocab(), 1.0)
        .expect("all-MASK prompt is always valid")
}

#[derive(Serialize)]
struct TrainSummary {
    final_loss: f64,
    mean_tail_loss: f64,
    clamp_events: usize,
    patterns_seen: Option<usize>,
    pattern_summary: Option<String>,
}

fn run_train(cmd: &ResolvedCommand, out_dir: &Path) -> Result<()> {
    let ResolvedCommand::Train {
        corpus, regime, block, steps, batch, lr, lr_floor, seed, schedule, d_model, layers, heads, d_ff, param_seed,
    } = cmd
    else {
        unreachable!()
    };
    let corpus = load_corpus(corpus)?;
    let schedule = Schedule::from_key(schedule)?;
    let net = NeuralDenoiserConfig {
        d_model: *d_model,
        n_layers: *layers,
        n_heads: *heads,
        d_ff: *d_ff,
        max_len: corpus.length(),
        param_seed: *param_seed,
    };
    let regime = match regime.as_str() {
        "standard" => Regime::Standard,
        "blockwise" => Regime::BlockwiseReverse { block_size: *block, patterns: PatternMode::Sampled },
        other => return Err(Error::invalid("train", format!("unknown regime `{other}`"))),
    };
    let config = TrainConfig {
        batch_size: *batch,
        steps: *steps,
        learning_rate: *lr,
        final_lr_fraction: *lr_floor,
        seed: *seed,
        regime,
        ..Default::default()
    };
    let result: TrainResult = match regime {
        Regime::Standard => train_standard(&corpus, net, &config, &schedule)?,
        Regime::BlockwiseReverse { .. } => train_blockwise_reverse(&corpus, net, &config, &schedule)?,
    };
    result.denoiser.save(&out_dir.join("checkpoint.txt"))?;
    let mut w = BufWriter::new(File::create(out_dir.join("trace.csv"))?);
    write_trace_csv(&result.trace, &mut w)?;
    let tail = &result.trace[result.trace.len().saturating_sub(50)..];
    let summary = TrainSummary {
        final_loss: result.trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
        mean_tail_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64,
        clamp_events: result.clamp_events,
        patterns_seen: result.patterns_seen,
        pattern_summary: result.patterns_seen.map(|n| format!("{n} patterns")),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(())
}

fn parse_prompt(spec: &str, corpus: &Corpus) -> Result<MaskedSeq> {
    let tokens: Result<Vec<TokenId>> = spec
        .split(',')
        .map(|part| {
            let part = part.trim();
            if part.eq_ignore_ascii_case("m") {
                Ok(corpus.vocab().mask_id())
            } else {
                part.parse::<TokenId>().map_err(|_| Error::invalid("prompt", format!("bad token `{part}`")))
            }
        })
        .collect();
    MaskedSeq::from_tokens(tokens?, corpus.vocab(), 1.0)
}

fn parse_flat_strategy(name: &str, k: usize) -> Result<Strategy> {
    Ok(match name {
        "confidence" => Strategy::Confidence,
        "ar_order" => Strategy::ArOrder,
        "reverse_order" => Strategy::ReverseOrder,
        "random_order" => Strategy::RandomOrder,
        "parallel_k" => Strategy::ParallelK { k },
        other => return Err(Error::invalid("decode", format!("unknown strategy `{other}`"))),
    })
}

#[derive(Serialize)]
struct DecodeReport {
    strategy: String,
    final_tokens: Vec<TokenId>,
    oracle_joint: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    parallel: Option<maskdiff_core::decoding::ParallelAnnotation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    semi_ar_b1_equals_ar_order: Option<bool>,
}

fn run_decode(cmd: &ResolvedCommand, out_dir: &Path) -> Result<()> {
    let ResolvedCommand::Decode {
        corpus, checkpoint, strategy, k, block, inner, ratio, rounds, temperature, prompt, seed,
        stop_on_eot, compare_semi_ar_b1,
    } = cmd
    else {
        unreachable!()
    };
    let corpus = load_corpus(corpus)?;
    let tabular;
    let neural;
    let denoiser: &dyn Denoiser = match checkpoint {
        Some(path) => {
            neural = NeuralDenoiser::load(path)?;
            &neural
        }
        None => {
            tabular = TabularDenoiser::new(corpus.clone());
            &tabular
        }
    };
    let prompt = match prompt {
        Some(spec) => parse_prompt(spec, &corpus)?,
        None => all_mask_prompt(&corpus),
    };
    let strat = match strategy.as_str() {
        "semi_ar" => Strategy::SemiAr { block: *block, inner: Box::new(parse_flat_strategy(inner, *k)?) },
        "random_init" => Strategy::RandomInit { ratio: *ratio, rounds: *rounds },
        flat => parse_flat_strategy(flat, *k)?,
    };
    let policy = DecodePolicy {
        strategy: strat,
        selection: temperature.map(Selection::Temperature).unwrap_or(Selection::Greedy),
        stop_on_eot: *stop_on_eot,
        max_steps: None,
    };
    let trace = decode(denoiser, &prompt, &policy, *seed)?;
    let joint = joint_prob_of_trace(&corpus, &prompt, &trace)?;
    let mut w = BufWriter::new(File::create(out_dir.join("trace.jsonl"))?);
    trace.write_jsonl(Some(joint), &mut w)?;

    // Annotate the first multi-position commit against the best joint pair.
    let parallel = trace
        .events
        .iter()
        .find_map(|e| match e {
            Event::Commit { positions, tokens, forced_eot: false, .. } if positions.len() > 1 => {
                Some((positions.clone(), tokens.clone()))
            }
            _ => None,
        })
        .map(|(positions, tokens)| annotate_parallel_commit(&corpus, &prompt, &positions, &tokens))
        .transpose()?;

    let semi_ar_b1_equals_ar_order = if *compare_semi_ar_b1 {
        let ar = decode(denoiser, &prompt, &DecodePolicy { strategy: Strategy::ArOrder, ..policy.clone() }, *seed)?;
        let semi = decode(
            denoiser,
            &prompt,
            &DecodePolicy {
                strategy: Strategy::SemiAr { block: 1, inner: Box::new(Strategy::Confidence) },
                ..policy.clone()
            },
            *seed,
        )?;
        Some(ar.final_tokens == semi.final_tokens)
    } else {
        None
    };

    let report = DecodeReport {
        strategy: strategy.clone(),
        final_tokens: trace.final_tokens.clone(),
        oracle_joint: joint,
        parallel,
        semi_ar_b1_equals_ar_order,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(())
}

fn run_profile(corpus_path: &Path, extra_prompts: usize, seed: u64, out_dir: &Path) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let corpus = Corpus::load(corpus_path)?;
    let d = TabularDenoiser::new(corpus);
    let mut prompts = vec![all_mask_prompt(d.corpus())];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..extra_prompts {
        // Reveal a random-length prefix of a weighted-sampled entry.
        let entry = &d.corpus().entries()[d.corpus().sample_entry(&mut rng)];
        let prefix = rng.gen_range(0..d.corpus().length());
        let tokens: Vec<TokenId> = entry
            .tokens
            .iter()
            .enumerate()
            .map(|(j, &t)| if j < prefix { t } else { d.vocab().mask_id() })
            .collect();
        prompts.push(MaskedSeq::from_tokens(tokens, d.vocab(), 1.0)?);
    }
    // Align by distance from the revealed prefix rather than by absolute
    // position, so every entry is comparable against the bound curve. With
    // only the all-MASK prompt this coincides with `max_prob_profile`.
    let length = d.corpus().length();
    let mut sums = vec![0.0; length];
    let mut counts = vec![0usize; length];
    for prompt in &prompts {
        let output = d.denoise(prompt)?;
        for (dist, j) in prompt.masked_positions().enumerate() {
            sums[dist] += output.argmax(j).1;
            counts[dist] += 1;
        }
    }
    let profile: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .take_while(|(_, &c)| c > 0)
        .map(|(&s, &c)| s / c as f64)
        .collect();

    // Bound overlay: the unconditional first-position marginal of a
    // permutation-structured chain corpus is a permutation of the Zipf
    // profile, so its two largest entries are (omega1, omega2).
    let marginals = d.corpus().oracle_conditional_marginals(&Default::default())?;
    let mut first: Vec<f64> = marginals[&0].clone();
    first.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let overlay = ZipfParams::from_omegas(first[0], first[1])
        .ok()
        .map(|params| BoundCurve::new(params, profile.len()));

    let mut w = BufWriter::new(File::create(out_dir.join("profile.csv"))?);
    use std::io::Write;
    writeln!(w, "n,mean_max_prob,bound")?;
    for (i, &v) in profile.iter().enumerate() {
        match &overlay {
            Some(curve) => writeln!(w, "{},{:.6},{:.6}", i + 1, v, curve.values[i])?,
            None => writeln!(w, "{},{:.6},", i + 1, v)?,
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ToyReport {
    p_a_given_cd: f64,
    p_b_given_cd: f64,
    ar_joint: f64,
    parallel_joint: f64,
    best_pair_joint: f64,
    best_pair: Vec<TokenId>,
    parallel_suboptimal: bool,
}

fn run_reproduce_toy(out_dir: &Path) -> Result<()> {
    use maskdiff_core::corpus::toy;
    let corpus = build_toy_corpus();
    corpus.save(&out_dir.join("corpus.txt"))?;
    let d = TabularDenoiser::new(corpus.clone());
    let prompt = parse_prompt("M,M,4,5,M", &corpus)?;
    let marginals = corpus.oracle_conditional_marginals(&prompt.observed())?;

    let ar = decode(&d, &prompt, &DecodePolicy::greedy(Strategy::ArOrder), 0)?;
    let ar_joint = joint_prob_of_trace(&corpus, &prompt, &ar)?;
    let mut w = BufWriter::new(File::create(out_dir.join("trace_ar.jsonl"))?);
    ar.write_jsonl(Some(ar_joint), &mut w)?;

    let par = decode(&d, &prompt, &DecodePolicy::greedy(Strategy::ParallelK { k: 2 }), 0)?;
    let par_joint = joint_prob_of_trace(&corpus, &prompt, &par)?;
    let mut w = BufWriter::new(File::create(out_dir.join("trace_parallel.jsonl"))?);
    par.write_jsonl(Some(par_joint), &mut w)?;
    let Some(Event::Commit { positions, tokens, .. }) = par.events.first() else {
        return Err(Error::invalid("reproduce", "parallel decode produced no commit"));
    };
    let ann = annotate_parallel_commit(&corpus, &prompt, positions, tokens)?;

    let report = ToyReport {
        p_a_given_cd: marginals[&0][toy::A as usize],
        p_b_given_cd: marginals[&1][toy::B as usize],
        ar_joint,
        parallel_joint: ann.committed_joint,
        best_pair_joint: ann.best_joint,
        best_pair: ann.best_tokens.clone(),
        parallel_suboptimal: ann.suboptimal,
    };
    write_json(&out_dir.join("toy_report.json"), &report)?;
    Ok(())
}
