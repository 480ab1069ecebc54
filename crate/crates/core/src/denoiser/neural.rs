//! Small trainable bidirectional-attention denoiser.
//!
//! Pre-LN transformer blocks over learned token embeddings plus fixed
//! sinusoidal positions, all in double precision with hand-written
//! backpropagation so gradients can be verified against central finite
//! differences. The timestep is not an input: the mask pattern fully
//! determines the state.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::Vocab;
use crate::denoiser::{Denoiser, DenoiserOutput, MaskedSeq};
use crate::error::{Error, Result};
use crate::training::SupervisionItem;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
pub(crate) const PROB_CLAMP: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuralDenoiserConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub param_seed: u64,
}

impl Default for NeuralDenoiserConfig {
    fn default() -> Self {
        NeuralDenoiserConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_len: 16, param_seed: 0 }
    }
}

impl NeuralDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::invalid("denoiser config", "all dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("denoiser config", "d_model must be divisible by n_heads"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct LayerSlots {
    ln1_g: Slot,
    ln1_b: Slot,
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Slot,
    layers: Vec<LayerSlots>,
    ln_f_g: Slot,
    ln_f_b: Slot,
    w_out: Slot,
    b_out: Slot,
    total: usize,
}

impl Layout {
    fn new(cfg: &NeuralDenoiserConfig, vocab_size: usize) -> Self {
        let d = cfg.d_model;
        let mut off = 0usize;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset: off, rows, cols };
            off += rows * cols;
            s
        };
        let embed = slot(vocab_size, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_g: slot(1, d),
                ln1_b: slot(1, d),
                wq: slot(d, d),
                bq: slot(1, d),
                wk: slot(d, d),
                bk: slot(1, d),
                wv: slot(d, d),
                bv: slot(1, d),
                wo: slot(d, d),
                bo: slot(1, d),
                ln2_g: slot(1, d),
                ln2_b: slot(1, d),
                w1: slot(d, cfg.d_ff),
                b1: slot(1, cfg.d_ff),
                w2: slot(cfg.d_ff, d),
                b2: slot(1, d),
            })
            .collect();
        let ln_f_g = slot(1, d);
        let ln_f_b = slot(1, d);
        let w_out = slot(d, vocab_size);
        let b_out = slot(1, vocab_size);
        Layout { embed, layers, ln_f_g, ln_f_b, w_out, b_out, total: off }
    }
}

fn mat<'a>(data: &'a [f64], slot: &Slot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((slot.rows, slot.cols), &data[slot.offset..slot.offset + slot.len()]).unwrap()
}

fn vec1<'a>(data: &'a [f64], slot: &Slot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&data[slot.offset..slot.offset + slot.len()])
}

fn add_to(flat: &mut [f64], slot: &Slot, contrib: impl IntoIterator<Item = f64>) {
    let dst = &mut flat[slot.offset..slot.offset + slot.len()];
    for (d, s) in dst.iter_mut().zip(contrib) {
        *d += s;
    }
}

/// Standard normal via Box-Muller, two uniform draws per sample.
fn draw_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gelu(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044715;
    let z = A * (x + B * x * x * x);
    let th = z.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * A * (1.0 + 3.0 * B * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

struct LayerCache {
    h1: Array2<f64>,
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    h2: Array2<f64>,
    ln2: LnCache,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

struct Cache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    hf: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: ArrayView1<f64>, beta: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (l, d) = x.dim();
    let mut xhat = Array2::zeros((l, d));
    let mut inv_std = Vec::with_capacity(l);
    let mut out = Array2::zeros((l, d));
    for i in 0..l {
        let row = x.row(i);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat[[i, j]] = xh;
            out[[i, j]] = gamma[j] * xh + beta[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns dx; accumulates dgamma/dbeta into the provided slices.
fn layer_norm_backward(dy: &Array2<f64>, cache: &LnCache, gamma: ArrayView1<f64>, dgamma: &mut [f64], dbeta: &mut [f64]) -> Array2<f64> {
    let (l, d) = dy.dim();
    let mut dx = Array2::zeros((l, d));
    for i in 0..l {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * gamma[j];
            m1 += dxh;
            m2 += dxh * cache.xhat[[i, j]];
            dgamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            dbeta[j] += dy[[i, j]];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * gamma[j];
            dx[[i, j]] = cache.inv_std[i] * (dxh - m1 - cache.xhat[[i, j]] * m2);
        }
    }
    dx
}

/// Softmax over the non-MASK columns of one logit row; the MASK entry is
/// exactly zero, not renormalized after the fact.
pub(crate) fn masked_softmax(logits: &[f64], mask_id: usize) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i != mask_id && v > max {
            max = v;
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        if i != mask_id {
            let e = (v - max).exp();
            out[i] = e;
            total += e;
        }
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

pub struct NeuralDenoiser {
    config: NeuralDenoiserConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<f64>,
    pos: Array2<f64>,
}

impl NeuralDenoiser {
    pub fn new(config: NeuralDenoiserConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.size() as usize);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        // Weights ~ N(0, 0.02^2); biases zero; layer-norm gains one.
        let init_mat = |slot: &Slot, params: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
            for i in slot.offset..slot.offset + slot.len() {
                params[i] = INIT_STD * draw_normal(rng);
            }
        };
        init_mat(&layout.embed, &mut params, &mut rng);
        for layer in &layout.layers {
            for slot in [&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2] {
                init_mat(slot, &mut params, &mut rng);
            }
            for slot in [&layer.ln1_g, &layer.ln2_g] {
                params[slot.offset..slot.offset + slot.len()].fill(1.0);
            }
        }
        init_mat(&layout.w_out, &mut params, &mut rng);
        params[layout.ln_f_g.offset..layout.ln_f_g.offset + layout.ln_f_g.len()].fill(1.0);
        let pos = sinusoidal_positions(config.max_len, config.d_model);
        Ok(NeuralDenoiser { config, vocab, layout, params, pos })
    }

    pub fn config(&self) -> &NeuralDenoiserConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub(crate) fn params_flat(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_flat_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, tokens: &[u32]) -> (Array2<f64>, Cache) {
        let d = self.config.d_model;
        let l = tokens.len();
        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let p = &self.params;

        let embed = mat(p, &self.layout.embed);
        let mut x = Array2::zeros((l, d));
        for (i, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                x[[i, j]] = embed[[tok as usize, j]] + self.pos[[i, j]];
            }
        }

        let mut layers = Vec::with_capacity(self.config.n_layers);
        for slots in &self.layout.layers {
            let (h1, ln1) = layer_norm(&x, vec1(p, &slots.ln1_g), vec1(p, &slots.ln1_b));
            let q = h1.dot(&mat(p, &slots.wq)) + &vec1(p, &slots.bq);
            let k = h1.dot(&mat(p, &slots.wk)) + &vec1(p, &slots.bk);
            let v = h1.dot(&mat(p, &slots.wv)) + &vec1(p, &slots.bv);
            let mut attn = Vec::with_capacity(n_heads);
            let mut ctx = Array2::zeros((l, d));
            for h in 0..n_heads {
                let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
                let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
                let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|v| v / (dh as f64).sqrt());
                // Row softmax, full bidirectional attention.
                for mut row in scores.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&vh));
                attn.push(scores);
            }
            let attn_out = ctx.dot(&mat(p, &slots.wo)) + &vec1(p, &slots.bo);
            let x_mid = &x + &attn_out;

            let (h2, ln2) = layer_norm(&x_mid, vec1(p, &slots.ln2_g), vec1(p, &slots.ln2_b));
            let ff_pre = h2.dot(&mat(p, &slots.w1)) + &vec1(p, &slots.b1);
            let ff_act = ff_pre.mapv(gelu);
            let ff_out = ff_act.dot(&mat(p, &slots.w2)) + &vec1(p, &slots.b2);
            let x_out = &x_mid + &ff_out;

            layers.push(LayerCache { h1, ln1, q, k, v, attn, ctx, h2, ln2, ff_pre, ff_act });
            x = x_out;
        }

        let (hf, ln_f) = layer_norm(&x, vec1(p, &self.layout.ln_f_g), vec1(p, &self.layout.ln_f_b));
        let logits = hf.dot(&mat(p, &self.layout.w_out)) + &vec1(p, &self.layout.b_out);
        let cache = Cache { tokens: tokens.to_vec(), layers, ln_f, hf };
        (logits, cache)
    }

    fn backward(&self, cache: &Cache, dlogits: &Array2<f64>, grads: &mut [f64]) {
        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let p = &self.params;
        let lay = &self.layout;

        add_to(grads, &lay.w_out, cache.hf.t().dot(dlogits).iter().cloned().collect::<Vec<_>>());
        add_to(grads, &lay.b_out, dlogits.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
        let dhf = dlogits.dot(&mat(p, &lay.w_out).t());

        let (go, bo) = (lay.ln_f_g, lay.ln_f_b);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let mut dx = layer_norm_backward(&dhf, &cache.ln_f, vec1(p, &go), &mut dg, &mut db);
        add_to(grads, &go, dg);
        add_to(grads, &bo, db);

        for (slots, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward branch.
            let dff = &dx; // gradient wrt ff_out
            add_to(grads, &slots.w2, lc.ff_act.t().dot(dff).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.b2, dff.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            let d_act = dff.dot(&mat(p, &slots.w2).t());
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&lc.ff_pre, |g, &x| *g *= gelu_grad(x));
            add_to(grads, &slots.w1, lc.h2.t().dot(&d_pre).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.b1, d_pre.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            let d_h2 = d_pre.dot(&mat(p, &slots.w1).t());
            let mut dg2 = vec![0.0; d];
            let mut db2 = vec![0.0; d];
            let d_from_ln2 = layer_norm_backward(&d_h2, &lc.ln2, vec1(p, &slots.ln2_g), &mut dg2, &mut db2);
            add_to(grads, &slots.ln2_g, dg2);
            add_to(grads, &slots.ln2_b, db2);
            let dx_mid = &dx + &d_from_ln2;

            // Attention branch.
            add_to(grads, &slots.wo, lc.ctx.t().dot(&dx_mid).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.bo, dx_mid.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            let d_ctx = dx_mid.dot(&mat(p, &slots.wo).t());
            let l_len = dx_mid.nrows();
            let mut dq = Array2::zeros((l_len, d));
            let mut dk = Array2::zeros((l_len, d));
            let mut dv = Array2::zeros((l_len, d));
            for h in 0..n_heads {
                let span = s![.., h * dh..(h + 1) * dh];
                let d_ctx_h = d_ctx.slice(span);
                let a = &lc.attn[h];
                let vh = lc.v.slice(span);
                let qh = lc.q.slice(span);
                let kh = lc.k.slice(span);
                let da = d_ctx_h.dot(&vh.t());
                dv.slice_mut(span).assign(&a.t().dot(&d_ctx_h));
                // Row-softmax backward, folding in the 1/sqrt(dh) scale.
                let mut ds = Array2::zeros((l_len, l_len));
                for i in 0..l_len {
                    let dot: f64 = (0..l_len).map(|j| da[[i, j]] * a[[i, j]]).sum();
                    for j in 0..l_len {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) / (dh as f64).sqrt();
                    }
                }
                dq.slice_mut(span).assign(&ds.dot(&kh));
                dk.slice_mut(span).assign(&ds.t().dot(&qh));
            }
            add_to(grads, &slots.wq, lc.h1.t().dot(&dq).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.bq, dq.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.wk, lc.h1.t().dot(&dk).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.bk, dk.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.wv, lc.h1.t().dot(&dv).iter().cloned().collect::<Vec<_>>());
            add_to(grads, &slots.bv, dv.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            let d_h1 = dq.dot(&mat(p, &slots.wq).t()) + dk.dot(&mat(p, &slots.wk).t()) + dv.dot(&mat(p, &slots.wv).t());
            let mut dg1 = vec![0.0; d];
            let mut db1 = vec![0.0; d];
            let d_from_ln1 = layer_norm_backward(&d_h1, &lc.ln1, vec1(p, &slots.ln1_g), &mut dg1, &mut db1);
            add_to(grads, &slots.ln1_g, dg1);
            add_to(grads, &slots.ln1_b, db1);
            dx = &dx_mid + &d_from_ln1;
        }

        // Embedding scatter; positional encodings are fixed.
        let embed_slot = &lay.embed;
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let base = embed_slot.offset + tok as usize * d;
            for j in 0..d {
                grads[base + j] += dx[[i, j]];
            }
        }
    }

    /// Mean weighted negative log-likelihood over a batch of supervision
    /// items, with analytic gradients. Returns (loss, flat grads, count of
    /// probability clamps at 1e-30).
    pub(crate) fn batch_loss_grad(&self, items: &[SupervisionItem]) -> Result<(f64, Vec<f64>, usize)> {
        if items.is_empty() {
            return Err(Error::invalid("batch", "no supervision items"));
        }
        let mut grads = vec![0.0; self.layout.total];
        let mut total_loss = 0.0;
        let mut clamps = 0usize;
        let scale = 1.0 / items.len() as f64;
        let mask_id = self.vocab.mask_id() as usize;
        for item in items {
            self.check_len(item.input.len())?;
            let (logits, cache) = self.forward(item.input.tokens());
            let mut dlogits = Array2::zeros(logits.dim());
            for &(pos, target) in &item.targets {
                let row: Vec<f64> = logits.row(pos).to_vec();
                let probs = masked_softmax(&row, mask_id);
                let mut p = probs[target as usize];
                if p < PROB_CLAMP {
                    p = PROB_CLAMP;
                    clamps += 1;
                }
                total_loss += scale * item.weight * -p.ln();
                let w = scale * item.weight;
                for (c, &pc) in probs.iter().enumerate() {
                    if c == mask_id {
                        continue;
                    }
                    let indicator = if c == target as usize { 1.0 } else { 0.0 };
                    dlogits[[pos, c]] += w * (pc - indicator);
                }
            }
            self.backward(&cache, &dlogits, &mut grads);
        }
        Ok((total_loss, grads, clamps))
    }

    /// Loss only, for finite differences.
    pub(crate) fn batch_loss(&self, items: &[SupervisionItem]) -> Result<f64> {
        let mut total = 0.0;
        let scale = 1.0 / items.len() as f64;
        let mask_id = self.vocab.mask_id() as usize;
        for item in items {
            self.check_len(item.input.len())?;
            let (logits, _) = self.forward(item.input.tokens());
            for &(pos, target) in &item.targets {
                let row: Vec<f64> = logits.row(pos).to_vec();
                let probs = masked_softmax(&row, mask_id);
                total += scale * item.weight * -probs[target as usize].max(PROB_CLAMP).ln();
            }
        }
        Ok(total)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::LengthExceeded { got: len, max: self.config.max_len });
        }
        Ok(())
    }

    /// Versioned textual checkpoint; values are hex-encoded f64 bits so the
    /// round trip is bit-exact.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "maskdiff-checkpoint v1")?;
        let c = &self.config;
        writeln!(w, "config {} {} {} {} {} {}", c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len, c.param_seed)?;
        writeln!(w, "vocab {} {} {}", self.vocab.size(), self.vocab.mask_id(), self.vocab.eot_id())?;
        writeln!(w, "tensor params {} 1", self.params.len())?;
        for chunk in self.params.chunks(8) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let bad = |msg: &str, line: usize| Error::Parse { line, msg: msg.into() };
        let magic = lines.next().ok_or_else(|| bad("empty checkpoint", 1))??;
        if magic != "maskdiff-checkpoint v1" {
            return Err(bad("unrecognized checkpoint header", 1));
        }
        let cfg_line = lines.next().ok_or_else(|| bad("missing config", 2))??;
        let nums: Vec<u64> = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad("missing config", 2))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad config value", 2)))
            .collect::<Result<_>>()?;
        if nums.len() != 6 {
            return Err(bad("config must have six fields", 2));
        }
        let config = NeuralDenoiserConfig {
            d_model: nums[0] as usize,
            n_layers: nums[1] as usize,
            n_heads: nums[2] as usize,
            d_ff: nums[3] as usize,
            max_len: nums[4] as usize,
            param_seed: nums[5],
        };
        let vocab_line = lines.next().ok_or_else(|| bad("missing vocab", 3))??;
        let vnums: Vec<u32> = vocab_line
            .strip_prefix("vocab ")
            .ok_or_else(|| bad("missing vocab", 3))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad vocab value", 3)))
            .collect::<Result<_>>()?;
        if vnums.len() != 3 {
            return Err(bad("vocab must have three fields", 3));
        }
        let vocab = Vocab::new(vnums[0], vnums[1], vnums[2])?;
        let tensor_line = lines.next().ok_or_else(|| bad("missing tensor header", 4))??;
        let count: usize = tensor_line
            .strip_prefix("tensor params ")
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad tensor header", 4))?;
        let mut params = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            for word in line.split_whitespace() {
                let bits = u64::from_str_radix(word, 16).map_err(|_| bad("bad hex value", i + 5))?;
                params.push(f64::from_bits(bits));
            }
        }
        let mut model = NeuralDenoiser::new(config, vocab)?;
        if params.len() != model.layout.total {
            return Err(bad("parameter count mismatch", 4));
        }
        model.params = params;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

impl Denoiser for NeuralDenoiser {
    fn denoise(&self, input: &MaskedSeq) -> Result<DenoiserOutput> {
        self.check_len(input.len())?;
        let (logits, _) = self.forward(input.tokens());
        let k = self.vocab.size() as usize;
        let mask_id = self.vocab.mask_id() as usize;
        let mut probs = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            if input.is_masked(j) {
                let row: Vec<f64> = logits.row(j).to_vec();
                probs.push(masked_softmax(&row, mask_id));
            } else {
                let mut row = vec![0.0; k];
                row[input.tokens()[j] as usize] = 1.0;
                probs.push(row);
            }
        }
        Ok(DenoiserOutput::new(probs))
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

fn sinusoidal_positions(max_len: usize, d: usize) -> Array2<f64> {
    let mut pos = Array2::zeros((max_len, d));
    for p in 0..max_len {
        for i in 0..d / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pos[[p, 2 * i]] = rate.sin();
            pos[[p, 2 * i + 1]] = rate.cos();
        }
    }
    pos
}

/// Max relative error between analytic and central finite-difference
/// gradients, step 1e-4, over up to `max_checked` parameters (all of them
/// when the model is small enough, otherwise a seeded sample).
pub fn gradient_check(model: &mut NeuralDenoiser, items: &[SupervisionItem], max_checked: usize, seed: u64) -> Result<f64> {
    const STEP: f64 = 1e-4;
    let (_, analytic, _) = model.batch_loss_grad(items)?;
    let n = model.num_params();
    let indices: Vec<usize> = if n <= max_checked {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..max_checked).map(|_| rng.gen_range(0..n)).collect()
    };
    let mut worst = 0.0f64;
    for idx in indices {
        let original = model.params_flat()[idx];
        model.params_flat_mut()[idx] = original + STEP;
        let hi = model.batch_loss(items)?;
        model.params_flat_mut()[idx] = original - STEP;
        let lo = model.batch_loss(items)?;
        model.params_flat_mut()[idx] = original;
        let fd = (hi - lo) / (2.0 * STEP);
        // Floor the denominator: central differences on an O(1) loss carry
        // ~1e-12 absolute roundoff, which would dominate the ratio for
        // near-zero gradients without being a backprop error.
        let rel = (analytic[idx] - fd).abs() / (analytic[idx].abs() + fd.abs() + 1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_toy_corpus, toy};

    fn tiny_model(seed: u64) -> NeuralDenoiser {
        let vocab = Vocab::new(12, 10, 11).unwrap();
        let config = NeuralDenoiserConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 6, param_seed: seed };
        NeuralDenoiser::new(config, vocab).unwrap()
    }

    fn tiny_items(model: &NeuralDenoiser) -> Vec<SupervisionItem> {
        let vocab = model.vocab().clone();
        let mk = |tokens: Vec<u32>, targets: Vec<(usize, u32)>, weight: f64| SupervisionItem {
            input: MaskedSeq::from_tokens(tokens, &vocab, 0.5).unwrap(),
            targets,
            weight,
        };
        vec![
            mk(vec![10, 1, 2, 10], vec![(0, 3), (3, 4)], 2.0),
            mk(vec![0, 10, 10, 5], vec![(1, 7), (2, 2)], 1.0),
            mk(vec![10, 10, 10, 10], vec![(0, 1), (1, 2), (2, 3), (3, 4)], 0.5),
        ]
    }

    #[test]
    fn untrained_output_is_deterministic_and_normalized() {
        let model = tiny_model(3);
        let model2 = tiny_model(3);
        let input = MaskedSeq::from_tokens(vec![10, 1, 10, 2], model.vocab(), 0.4).unwrap();
        let a = model.denoise(&input).unwrap();
        let b = model2.denoise(&input).unwrap();
        a.validate(model.vocab()).unwrap();
        for j in 0..4 {
            assert_eq!(a.row(j), b.row(j));
        }
        // Unmasked rows carry the observed token.
        assert_eq!(a.row(1)[1], 1.0);
    }

    #[test]
    fn gradient_check_small_model() {
        let mut model = tiny_model(5);
        let items = tiny_items(&model);
        let err = gradient_check(&mut model, &items, usize::MAX, 0).unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    #[test]
    fn gradient_check_is_deterministic() {
        let mut a = tiny_model(9);
        let mut b = tiny_model(9);
        let items = tiny_items(&a);
        let e1 = gradient_check(&mut a, &items, 64, 17).unwrap();
        let e2 = gradient_check(&mut b, &items, 64, 17).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn output_head_bias_gradient_is_softmax_error() {
        // With a fresh model, d(loss)/d(b_out[c]) for a single supervised
        // position is weight * (softmax_c - onehot_c).
        let model = tiny_model(21);
        let input = MaskedSeq::from_tokens(vec![10, 1, 2, 3], model.vocab(), 0.5).unwrap();
        let items = vec![SupervisionItem { input: input.clone(), targets: vec![(0, 4)], weight: 1.0 }];
        let (_, grads, _) = model.batch_loss_grad(&items).unwrap();
        let out = model.denoise(&input).unwrap();
        let b_out = model.layout.b_out;
        for c in 0..model.vocab().size() as usize {
            let expect = if c == model.vocab().mask_id() as usize {
                0.0
            } else {
                out.row(0)[c] - if c == 4 { 1.0 } else { 0.0 }
            };
            let got = grads[b_out.offset + c];
            assert!((got - expect).abs() < 1e-12, "col {c}: {got} vs {expect}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = tiny_model(7);
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let restored = NeuralDenoiser::read_from(&buf[..]).unwrap();
        assert_eq!(model.params.len(), restored.params.len());
        for (a, b) in model.params.iter().zip(&restored.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(model.config, restored.config);
    }

    #[test]
    fn length_limit_enforced() {
        let model = tiny_model(1);
        let input = MaskedSeq::from_tokens(vec![10; 7], model.vocab(), 0.5).unwrap();
        assert!(matches!(model.denoise(&input), Err(Error::LengthExceeded { .. })));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let vocab = Vocab::new(12, 10, 11).unwrap();
        let config = NeuralDenoiserConfig { d_model: 10, n_heads: 3, ..Default::default() };
        assert!(NeuralDenoiser::new(config, vocab).is_err());
    }

    #[test]
    fn toy_vocab_model_emits_valid_rows() {
        let corpus = build_toy_corpus();
        let config = NeuralDenoiserConfig { max_len: 5, ..Default::default() };
        let model = NeuralDenoiser::new(config, corpus.vocab().clone()).unwrap();
        let input = MaskedSeq::from_tokens(vec![toy::MASK, toy::MASK, toy::C, toy::D, toy::MASK], model.vocab(), 0.5).unwrap();
        let out = model.denoise(&input).unwrap();
        out.validate(model.vocab()).unwrap();
    }
}
