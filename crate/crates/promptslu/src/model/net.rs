//! Forward and backward passes. Pre-norm residual blocks, learned
//! positions, tanh-approximate GELU (smooth everywhere, so finite-difference
//! checks are clean), and label-smoothed cross-entropy over masked target
//! positions only. The output projection is evaluated exclusively at rows
//! the loss reads, which keeps training cost proportional to target length
//! rather than prompt length.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{ModelConfig, ModelError, Parameters};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LnCache {
    x_hat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut y = Array2::zeros((n, d));
    let mut x_hat = Array2::zeros((n, d));
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            x_hat[[i, j]] = xh;
            y[[i, j]] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { x_hat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    for i in 0..n {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * cache.x_hat[[i, j]];
            dg[j] += dy[[i, j]] * cache.x_hat[[i, j]];
            db[j] += dy[[i, j]];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = cache.inv_std[i] * (dxh - mean_dxh - cache.x_hat[[i, j]] * mean_dxh_xh);
        }
    }
    (dx, dg, db)
}

struct AttnCache {
    h_q: Array2<f64>,
    h_kv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention per head; zero where the causal mask applies.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

fn attention_forward(
    params: &Parameters,
    prefix: &str,
    h_q: &Array2<f64>,
    h_kv: &Array2<f64>,
    n_heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let d = h_q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = h_q.dot(&params.mat(&format!("{prefix}.wq"))) + &params.vec1(&format!("{prefix}.bq"));
    let k = h_kv.dot(&params.mat(&format!("{prefix}.wk"))) + &params.vec1(&format!("{prefix}.bk"));
    let v = h_kv.dot(&params.mat(&format!("{prefix}.wv"))) + &params.vec1(&format!("{prefix}.bv"));
    let (nq, nk) = (q.nrows(), k.nrows());
    let mut ctx = Array2::zeros((nq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        if causal {
            for i in 0..nq {
                for j in (i + 1)..nk {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        let p = softmax_rows(&scores);
        ctx.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    let out =
        ctx.dot(&params.mat(&format!("{prefix}.wo"))) + &params.vec1(&format!("{prefix}.bo"));
    (
        out,
        AttnCache {
            h_q: h_q.clone(),
            h_kv: h_kv.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns (d h_q, d h_kv). When the attention is self-attention the caller
/// adds both into the same upstream gradient.
fn attention_backward(
    params: &Parameters,
    grads: &mut Parameters,
    prefix: &str,
    dout: &Array2<f64>,
    cache: &AttnCache,
    n_heads: usize,
) -> (Array2<f64>, Array2<f64>) {
    let d = dout.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nk) = (cache.q.nrows(), cache.k.nrows());

    grads
        .mat_mut(&format!("{prefix}.wo"))
        .zip_mut_with(&cache.ctx.t().dot(dout), |g, &u| *g += u);
    grads
        .vec1_mut(&format!("{prefix}.bo"))
        .zip_mut_with(&dout.sum_axis(Axis(0)), |g, &u| *g += u);
    let dctx = dout.dot(&params.mat(&format!("{prefix}.wo")).t());

    let mut dq = Array2::zeros((nq, d));
    let mut dk = Array2::zeros((nk, d));
    let mut dv = Array2::zeros((nk, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dctx_h = dctx.slice(cols);
        let vh = cache.v.slice(cols);
        let dvh = p.t().dot(&dctx_h);
        let dp = dctx_h.dot(&vh.t());
        // Softmax rows: ds = p * (dp - sum(dp * p)); masked entries have
        // p = 0, so their score gradient vanishes automatically.
        let mut dscores = Array2::zeros((nq, nk));
        for i in 0..nq {
            let dot: f64 = (0..nk).map(|j| dp[[i, j]] * p[[i, j]]).sum();
            for j in 0..nk {
                dscores[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
            }
        }
        dscores *= scale;
        let kh = cache.k.slice(cols);
        let qh = cache.q.slice(cols);
        dq.slice_mut(cols).assign(&dscores.dot(&kh));
        dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        dv.slice_mut(cols).assign(&dvh);
    }

    let proj_back =
        |grads: &mut Parameters, w: &str, b: &str, dmat: &Array2<f64>, h_in: &Array2<f64>| {
            grads
                .mat_mut(&format!("{prefix}.{w}"))
                .zip_mut_with(&h_in.t().dot(dmat), |g, &u| *g += u);
            grads
                .vec1_mut(&format!("{prefix}.{b}"))
                .zip_mut_with(&dmat.sum_axis(Axis(0)), |g, &u| *g += u);
            dmat.dot(&params.mat(&format!("{prefix}.{w}")).t())
        };
    let dh_q = proj_back(grads, "wq", "bq", &dq, &cache.h_q);
    let mut dh_kv = proj_back(grads, "wk", "bk", &dk, &cache.h_kv);
    dh_kv += &proj_back(grads, "wv", "bv", &dv, &cache.h_kv);
    (dh_q, dh_kv)
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let (n, m) = scores.dim();
    let mut p = Array2::zeros((n, m));
    for i in 0..n {
        let row = scores.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..m {
            let e = (row[j] - max).exp();
            p[[i, j]] = e;
            sum += e;
        }
        for j in 0..m {
            p[[i, j]] /= sum;
        }
    }
    p
}

struct FfnCache {
    h: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

fn ffn_forward(params: &Parameters, prefix: &str, h: &Array2<f64>) -> (Array2<f64>, FfnCache) {
    let u = h.dot(&params.mat(&format!("{prefix}.w1"))) + &params.vec1(&format!("{prefix}.b1"));
    let a = u.mapv(gelu);
    let out = a.dot(&params.mat(&format!("{prefix}.w2"))) + &params.vec1(&format!("{prefix}.b2"));
    (
        out,
        FfnCache {
            h: h.clone(),
            u,
            a,
        },
    )
}

fn ffn_backward(
    params: &Parameters,
    grads: &mut Parameters,
    prefix: &str,
    dout: &Array2<f64>,
    cache: &FfnCache,
) -> Array2<f64> {
    grads
        .mat_mut(&format!("{prefix}.w2"))
        .zip_mut_with(&cache.a.t().dot(dout), |g, &u| *g += u);
    grads
        .vec1_mut(&format!("{prefix}.b2"))
        .zip_mut_with(&dout.sum_axis(Axis(0)), |g, &u| *g += u);
    let da = dout.dot(&params.mat(&format!("{prefix}.w2")).t());
    let mut du = da;
    du.zip_mut_with(&cache.u, |d, &u| *d *= gelu_prime(u));
    grads
        .mat_mut(&format!("{prefix}.w1"))
        .zip_mut_with(&cache.h.t().dot(&du), |g, &u| *g += u);
    grads
        .vec1_mut(&format!("{prefix}.b1"))
        .zip_mut_with(&du.sum_axis(Axis(0)), |g, &u| *g += u);
    du.dot(&params.mat(&format!("{prefix}.w1")).t())
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

struct EncoderCache {
    ids: Vec<usize>,
    layers: Vec<EncLayerCache>,
    ln_f: LnCache,
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross: AttnCache,
    ln3: LnCache,
    ffn: FfnCache,
}

struct DecoderCache {
    ids: Vec<usize>,
    layers: Vec<DecLayerCache>,
    ln_f: LnCache,
}

/// All intermediate state of one forward pass; consumed by the backward
/// pass.
pub struct Forward {
    memory: Array2<f64>,
    hidden: Array2<f64>,
    enc: EncoderCache,
    dec: DecoderCache,
}

impl Forward {
    /// Final-norm decoder states, one row per decoder input position.
    #[must_use]
    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    /// Final-norm encoder states, one row per input token.
    #[must_use]
    pub fn memory(&self) -> &Array2<f64> {
        &self.memory
    }
}

/// Loss value and position count for one sequence; the loss is the sum
/// over target positions, so callers can form exact token means over a
/// batch.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss_sum: f64,
    pub n_positions: usize,
}

pub struct TransformerModel {
    cfg: ModelConfig,
}

impl TransformerModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    #[must_use]
    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<Vec<usize>, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_len,
            });
        }
        ids.iter()
            .map(|t| {
                if t.0 < self.cfg.vocab_size {
                    Ok(t.0)
                } else {
                    Err(ModelError::TokenOutOfRange(t.0))
                }
            })
            .collect()
    }

    fn embed(&self, params: &Parameters, table: &str, pos: &str, ids: &[usize]) -> Array2<f64> {
        let emb = params.mat(table);
        let pos = params.mat(pos);
        let mut x = Array2::zeros((ids.len(), self.cfg.d_model));
        for (i, &id) in ids.iter().enumerate() {
            let row = &emb.row(id) + &pos.row(i);
            x.row_mut(i).assign(&row);
        }
        x
    }

    fn encoder_forward(
        &self,
        params: &Parameters,
        ids: Vec<usize>,
    ) -> (Array2<f64>, EncoderCache) {
        let mut x = self.embed(params, "enc.embed", "enc.pos", &ids);
        let mut layers = Vec::with_capacity(self.cfg.n_encoder_layers);
        for i in 0..self.cfg.n_encoder_layers {
            let (h1, ln1) = layer_norm(
                &x,
                params.vec1(&format!("enc.{i}.ln1.g")),
                params.vec1(&format!("enc.{i}.ln1.b")),
            );
            let (a, attn) =
                attention_forward(params, &format!("enc.{i}.attn"), &h1, &h1, self.cfg.n_heads, false);
            x += &a;
            let (h2, ln2) = layer_norm(
                &x,
                params.vec1(&format!("enc.{i}.ln2.g")),
                params.vec1(&format!("enc.{i}.ln2.b")),
            );
            let (f, ffn) = ffn_forward(params, &format!("enc.{i}.ffn"), &h2);
            x += &f;
            layers.push(EncLayerCache { ln1, attn, ln2, ffn });
        }
        let (memory, ln_f) = layer_norm(&x, params.vec1("enc.ln_f.g"), params.vec1("enc.ln_f.b"));
        (memory, EncoderCache { ids, layers, ln_f })
    }

    fn decoder_forward(
        &self,
        params: &Parameters,
        memory: &Array2<f64>,
        ids: Vec<usize>,
    ) -> (Array2<f64>, DecoderCache) {
        let mut y = self.embed(params, "dec.embed", "dec.pos", &ids);
        let mut layers = Vec::with_capacity(self.cfg.n_decoder_layers);
        for i in 0..self.cfg.n_decoder_layers {
            let (h1, ln1) = layer_norm(
                &y,
                params.vec1(&format!("dec.{i}.ln1.g")),
                params.vec1(&format!("dec.{i}.ln1.b")),
            );
            let (a, self_attn) =
                attention_forward(params, &format!("dec.{i}.self"), &h1, &h1, self.cfg.n_heads, true);
            y += &a;
            let (h2, ln2) = layer_norm(
                &y,
                params.vec1(&format!("dec.{i}.ln2.g")),
                params.vec1(&format!("dec.{i}.ln2.b")),
            );
            let (c, cross) = attention_forward(
                params,
                &format!("dec.{i}.cross"),
                &h2,
                memory,
                self.cfg.n_heads,
                false,
            );
            y += &c;
            let (h3, ln3) = layer_norm(
                &y,
                params.vec1(&format!("dec.{i}.ln3.g")),
                params.vec1(&format!("dec.{i}.ln3.b")),
            );
            let (f, ffn) = ffn_forward(params, &format!("dec.{i}.ffn"), &h3);
            y += &f;
            layers.push(DecLayerCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (hidden, ln_f) = layer_norm(&y, params.vec1("dec.ln_f.g"), params.vec1("dec.ln_f.b"));
        (hidden, DecoderCache { ids, layers, ln_f })
    }

    /// Encodes an input sequence into memory states.
    pub fn encode(
        &self,
        params: &Parameters,
        input: &[TokenId],
    ) -> Result<Array2<f64>, ModelError> {
        let ids = self.check_ids(input)?;
        Ok(self.encoder_forward(params, ids).0)
    }

    /// Full forward pass keeping every cache.
    pub fn forward(
        &self,
        params: &Parameters,
        input: &[TokenId],
        decoder_input: &[TokenId],
    ) -> Result<Forward, ModelError> {
        let enc_ids = self.check_ids(input)?;
        let dec_ids = self.check_ids(decoder_input)?;
        let (memory, enc) = self.encoder_forward(params, enc_ids);
        let (hidden, dec) = self.decoder_forward(params, &memory, dec_ids);
        Ok(Forward {
            memory,
            hidden,
            enc,
            dec,
        })
    }

    /// Vocabulary logits at the given decoder input rows (e.g. the last row
    /// when scoring the next emission).
    pub fn position_logits(
        &self,
        params: &Parameters,
        memory: &Array2<f64>,
        decoder_input: &[TokenId],
        rows: &[usize],
    ) -> Result<Array2<f64>, ModelError> {
        let ids = self.check_ids(decoder_input)?;
        let (hidden, _) = self.decoder_forward(params, memory, ids);
        let mut sel = Array2::zeros((rows.len(), self.cfg.d_model));
        for (i, &r) in rows.iter().enumerate() {
            if r >= hidden.nrows() {
                return Err(ModelError::SequenceTooLong {
                    len: r + 1,
                    max: hidden.nrows(),
                });
            }
            sel.row_mut(i).assign(&hidden.row(r));
        }
        let logits = sel.dot(&params.mat("out.w")) + &params.vec1("out.b");
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite("logits"));
        }
        Ok(logits)
    }

    fn loss_parts(
        &self,
        decoder_tokens: &[TokenId],
        loss_mask: &[bool],
    ) -> Result<(Vec<TokenId>, Vec<usize>, Vec<usize>), ModelError> {
        if decoder_tokens.len() != loss_mask.len() {
            return Err(ModelError::BadMask("mask length differs from sequence length"));
        }
        if decoder_tokens.len() < 2 {
            return Err(ModelError::BadMask("sequence needs at least two tokens"));
        }
        if loss_mask[0] {
            return Err(ModelError::BadMask("first position has no prediction"));
        }
        let positions: Vec<usize> = (0..loss_mask.len()).filter(|&j| loss_mask[j]).collect();
        if positions.is_empty() {
            return Err(ModelError::BadMask("no target positions"));
        }
        // The last token is only ever predicted, never consumed.
        let dec_input = decoder_tokens[..decoder_tokens.len() - 1].to_vec();
        let targets: Vec<usize> = positions.iter().map(|&j| decoder_tokens[j].0).collect();
        Ok((dec_input, positions, targets))
    }

    /// Forward pass and masked label-smoothed loss, no gradients.
    pub fn loss_only(
        &self,
        params: &Parameters,
        input: &[TokenId],
        decoder_tokens: &[TokenId],
        loss_mask: &[bool],
        epsilon: f64,
    ) -> Result<LossOutput, ModelError> {
        let (dec_input, positions, targets) = self.loss_parts(decoder_tokens, loss_mask)?;
        let fwd = self.forward(params, input, &dec_input)?;
        let logits = self.gather_logits(params, &fwd.hidden, &positions)?;
        let (loss_sum, _) = label_smoothed_loss_and_grad(&logits, &targets, epsilon);
        if !loss_sum.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        Ok(LossOutput {
            loss_sum,
            n_positions: positions.len(),
        })
    }

    /// Forward, loss, and a full backward pass. Gradients of the position
    /// loss SUM are accumulated into `grads` (same layout as `params`);
    /// callers scale by their batch position count afterwards.
    pub fn loss_and_grad(
        &self,
        params: &Parameters,
        input: &[TokenId],
        decoder_tokens: &[TokenId],
        loss_mask: &[bool],
        epsilon: f64,
        grads: &mut Parameters,
    ) -> Result<LossOutput, ModelError> {
        let (dec_input, positions, targets) = self.loss_parts(decoder_tokens, loss_mask)?;
        let fwd = self.forward(params, input, &dec_input)?;
        let logits = self.gather_logits(params, &fwd.hidden, &positions)?;
        let (loss_sum, dlogits) = label_smoothed_loss_and_grad(&logits, &targets, epsilon);
        if !loss_sum.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }

        // Output projection backward, scattering into decoder hidden rows.
        let mut sel = Array2::zeros((positions.len(), self.cfg.d_model));
        for (i, &j) in positions.iter().enumerate() {
            sel.row_mut(i).assign(&fwd.hidden.row(j - 1));
        }
        grads
            .mat_mut("out.w")
            .zip_mut_with(&sel.t().dot(&dlogits), |g, &u| *g += u);
        grads
            .vec1_mut("out.b")
            .zip_mut_with(&dlogits.sum_axis(Axis(0)), |g, &u| *g += u);
        let dsel = dlogits.dot(&params.mat("out.w").t());
        let mut d_hidden = Array2::zeros(fwd.hidden.dim());
        for (i, &j) in positions.iter().enumerate() {
            let mut row = d_hidden.row_mut(j - 1);
            row += &dsel.row(i);
        }

        self.backward(params, grads, &fwd, d_hidden);
        Ok(LossOutput {
            loss_sum,
            n_positions: positions.len(),
        })
    }

    fn gather_logits(
        &self,
        params: &Parameters,
        hidden: &Array2<f64>,
        positions: &[usize],
    ) -> Result<Array2<f64>, ModelError> {
        let mut sel = Array2::zeros((positions.len(), self.cfg.d_model));
        for (i, &j) in positions.iter().enumerate() {
            // Position j is predicted from row j-1 of the decoder input.
            if j == 0 || j - 1 >= hidden.nrows() {
                return Err(ModelError::BadMask("target position out of range"));
            }
            sel.row_mut(i).assign(&hidden.row(j - 1));
        }
        Ok(sel.dot(&params.mat("out.w")) + &params.vec1("out.b"))
    }

    fn backward(
        &self,
        params: &Parameters,
        grads: &mut Parameters,
        fwd: &Forward,
        d_hidden: Array2<f64>,
    ) {
        // Decoder final norm.
        let mut dy = ln_back(params, grads, "dec.ln_f", &d_hidden, &fwd.dec.ln_f);
        let mut d_memory = Array2::zeros(fwd.memory.dim());
        for i in (0..self.cfg.n_decoder_layers).rev() {
            let cache = &fwd.dec.layers[i];
            let din = ffn_backward(params, grads, &format!("dec.{i}.ffn"), &dy, &cache.ffn);
            dy += &ln_back(params, grads, &format!("dec.{i}.ln3"), &din, &cache.ln3);
            let (dh_q, dh_kv) = attention_backward(
                params,
                grads,
                &format!("dec.{i}.cross"),
                &dy,
                &cache.cross,
                self.cfg.n_heads,
            );
            d_memory += &dh_kv;
            dy += &ln_back(params, grads, &format!("dec.{i}.ln2"), &dh_q, &cache.ln2);
            let (dh_q, dh_kv) = attention_backward(
                params,
                grads,
                &format!("dec.{i}.self"),
                &dy,
                &cache.self_attn,
                self.cfg.n_heads,
            );
            let dself = dh_q + dh_kv;
            dy += &ln_back(params, grads, &format!("dec.{i}.ln1"), &dself, &cache.ln1);
        }
        scatter_embed(grads, "dec.embed", "dec.pos", &fwd.dec.ids, &dy);

        // Encoder, driven by the accumulated memory gradient.
        let mut dx = ln_back(params, grads, "enc.ln_f", &d_memory, &fwd.enc.ln_f);
        for i in (0..self.cfg.n_encoder_layers).rev() {
            let cache = &fwd.enc.layers[i];
            let din = ffn_backward(params, grads, &format!("enc.{i}.ffn"), &dx, &cache.ffn);
            dx += &ln_back(params, grads, &format!("enc.{i}.ln2"), &din, &cache.ln2);
            let (dh_q, dh_kv) = attention_backward(
                params,
                grads,
                &format!("enc.{i}.attn"),
                &dx,
                &cache.attn,
                self.cfg.n_heads,
            );
            let dself = dh_q + dh_kv;
            dx += &ln_back(params, grads, &format!("enc.{i}.ln1"), &dself, &cache.ln1);
        }
        scatter_embed(grads, "enc.embed", "enc.pos", &fwd.enc.ids, &dx);
    }
}

/// Layer-norm backward that also accumulates the gain/bias gradients of
/// `{prefix}.g` / `{prefix}.b` into `grads`, returning the input gradient.
fn ln_back(
    params: &Parameters,
    grads: &mut Parameters,
    prefix: &str,
    dy: &Array2<f64>,
    cache: &LnCache,
) -> Array2<f64> {
    let gname = format!("{prefix}.g");
    let bname = format!("{prefix}.b");
    let (dx, dg, db) = layer_norm_backward(dy, cache, params.vec1(&gname));
    grads.vec1_mut(&gname).zip_mut_with(&dg, |a, &b| *a += b);
    grads.vec1_mut(&bname).zip_mut_with(&db, |a, &b| *a += b);
    dx
}

fn scatter_embed(
    grads: &mut Parameters,
    table: &str,
    pos: &str,
    ids: &[usize],
    dx: &Array2<f64>,
) {
    {
        let mut demb = grads.mat_mut(table);
        for (i, &id) in ids.iter().enumerate() {
            let mut row = demb.row_mut(id);
            row += &dx.row(i);
        }
    }
    let mut dpos = grads.mat_mut(pos);
    for i in 0..ids.len() {
        let mut row = dpos.row_mut(i);
        row += &dx.row(i);
    }
}

/// Label-smoothed cross-entropy summed over rows, with its logit gradient.
///
/// Per row with target t: `(1-eps) * nll(t) + eps * mean(nll over vocab)`;
/// the gradient per row is `softmax - ((1-eps) * onehot + eps/V)`.
#[must_use]
pub fn label_smoothed_loss_and_grad(
    logits: &Array2<f64>,
    targets: &[usize],
    epsilon: f64,
) -> (f64, Array2<f64>) {
    let (n, v) = logits.dim();
    assert_eq!(n, targets.len(), "one target per logit row");
    let mut dlogits = Array2::zeros((n, v));
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum_exp = 0.0;
        for &x in row {
            sum_exp += (x - max).exp();
        }
        let log_z = max + sum_exp.ln();
        let mut sum_lsm = 0.0;
        for j in 0..v {
            sum_lsm += row[j] - log_z;
        }
        let nll_t = log_z - row[targets[i]];
        let mean_nll = -sum_lsm / v as f64;
        loss += (1.0 - epsilon) * nll_t + epsilon * mean_nll;
        for j in 0..v {
            let p = (row[j] - log_z).exp();
            let w = if j == targets[i] { 1.0 - epsilon } else { 0.0 } + epsilon / v as f64;
            dlogits[[i, j]] = p - w;
        }
    }
    (loss, dlogits)
}

/// Mean label-smoothed loss over exactly the masked rows of a full logits
/// table. Rows (and targets) where `mask` is false are never read, which is
/// the loss-masking contract: prompt positions cannot influence the loss.
#[must_use]
pub fn masked_loss(
    logits: &Array2<f64>,
    targets: &[usize],
    mask: &[bool],
    epsilon: f64,
) -> f64 {
    assert_eq!(logits.nrows(), targets.len());
    assert_eq!(targets.len(), mask.len());
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let mut sel = Array2::zeros((rows.len(), logits.ncols()));
    let mut sel_targets = Vec::with_capacity(rows.len());
    for (k, &i) in rows.iter().enumerate() {
        sel.row_mut(k).assign(&logits.row(i));
        sel_targets.push(targets[i]);
    }
    let (sum, _) = label_smoothed_loss_and_grad(&sel, &sel_targets, epsilon);
    sum / rows.len() as f64
}

/// Central finite-difference audit of the backward pass on one randomized
/// problem. `seed` draws perturbed parameters, sequence lengths, token ids,
/// and a mask with a masked prefix; `samples` parameter entries are then
/// probed (cycling through every parameter family) and compared against the
/// analytic gradient. Returns the worst relative error observed, where a
/// well-implemented backward pass stays below 1e-4.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, samples: usize) -> Result<f64, ModelError> {
    use rand::{Rng, SeedableRng};
    let model = TransformerModel::new(cfg.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::init(cfg, seed);
    // Mildly perturb so gains differ from one and biases from zero.
    for x in &mut params.data {
        *x += rng.gen_range(-0.05..0.05);
    }
    let enc_len = rng.gen_range(2..6);
    let dec_len = rng.gen_range(3..7);
    let enc: Vec<TokenId> = (0..enc_len)
        .map(|_| TokenId(rng.gen_range(0..cfg.vocab_size)))
        .collect();
    let dec: Vec<TokenId> = (0..dec_len)
        .map(|_| TokenId(rng.gen_range(0..cfg.vocab_size)))
        .collect();
    let mut mask = vec![false; dec_len];
    for m in mask.iter_mut().skip(dec_len / 2) {
        *m = true;
    }
    let eps = 0.1;
    let mut grads = Parameters::zeros(params.layout().clone());
    model.loss_and_grad(&params, &enc, &dec, &mask, eps, &mut grads)?;

    let names: Vec<String> = params.layout().names().map(str::to_owned).collect();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for k in 0..samples {
        // Cycle through entries so every parameter family gets hit.
        let name = &names[k % names.len()];
        let (off, len) = params.span(name)?;
        let idx = off + rng.gen_range(0..len);
        let orig = params.data[idx];
        params.data[idx] = orig + h;
        let up = model.loss_only(&params, &enc, &dec, &mask, eps)?.loss_sum;
        params.data[idx] = orig - h;
        let down = model.loss_only(&params, &enc, &dec, &mask, eps)?.loss_sum;
        params.data[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.data[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(ids: &[usize]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn smoothed_loss_matches_frozen_hand_case() {
        // Frozen against an independent Python computation: V=4, logits
        // [2.0, -1.0, 0.5, 0.0], target 2, eps 0.1.
        let logits = array![[2.0, -1.0, 0.5, 0.0]];
        let (loss, dlogits) = label_smoothed_loss_and_grad(&logits, &[2], 0.1);
        assert!((loss - 1.854849582389822).abs() < 1e-12, "loss {loss}");
        // Gradient rows sum to zero: softmax and the smoothed one-hot both
        // sum to one.
        assert!(dlogits.row(0).sum().abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_log_vocab_for_any_smoothing() {
        let v = 7;
        let logits = Array2::from_elem((3, v), 0.25);
        for eps in [0.0, 0.1, 0.3] {
            let (loss, _) = label_smoothed_loss_and_grad(&logits, &[0, 3, 6], eps);
            assert!((loss / 3.0 - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let logits = array![[0.3, -0.2, 1.7]];
        let (loss, _) = label_smoothed_loss_and_grad(&logits, &[1], 0.0);
        let row = logits.row(0);
        let z: f64 = row.iter().map(|&x| x.exp()).sum();
        assert!((loss - (z.ln() - row[1])).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_never_reads_masked_out_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, v) = (9, 6);
        let logits = Array2::from_shape_fn((n, v), |_| rng.gen_range(-3.0..3.0));
        let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        let base = masked_loss(&logits, &targets, &mask, 0.1);
        for i in 0..n {
            if !mask[i] {
                let mut flipped = targets.clone();
                flipped[i] = (targets[i] + 3) % v;
                let other = masked_loss(&logits, &flipped, &mask, 0.1);
                assert_eq!(base.to_bits(), other.to_bits());
            }
        }
        // Flipping a masked-in target does change the loss.
        let mut flipped = targets.clone();
        flipped[0] = (targets[0] + 1) % v;
        assert_ne!(base.to_bits(), masked_loss(&logits, &flipped, &mask, 0.1).to_bits());
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let cfg = tiny_config(20);
        let model = TransformerModel::new(cfg.clone()).unwrap();
        let params = Parameters::init(&cfg, 3);
        let enc = toks(&[1, 4, 9, 2]);
        let dec = toks(&[0, 5, 6, 7]);
        let mask = [false, false, true, true];
        let a = model.loss_only(&params, &enc, &dec, &mask, 0.1).unwrap();
        let b = model.loss_only(&params, &enc, &dec, &mask, 0.1).unwrap();
        assert_eq!(a.loss_sum.to_bits(), b.loss_sum.to_bits());
        assert_eq!(a.n_positions, 2);
        assert!(a.loss_sum.is_finite());
    }

    #[test]
    fn gradients_are_deterministic() {
        let cfg = tiny_config(20);
        let model = TransformerModel::new(cfg.clone()).unwrap();
        let params = Parameters::init(&cfg, 3);
        let enc = toks(&[1, 4, 9, 2]);
        let dec = toks(&[0, 5, 6, 7]);
        let mask = [false, false, true, true];
        let mut g1 = Parameters::zeros(params.layout().clone());
        let mut g2 = Parameters::zeros(params.layout().clone());
        model.loss_and_grad(&params, &enc, &dec, &mask, 0.1, &mut g1).unwrap();
        model.loss_and_grad(&params, &enc, &dec, &mask, 0.1, &mut g2).unwrap();
        assert_eq!(g1.data, g2.data);
        assert!(g1.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn decoder_is_causal() {
        // Logits at earlier rows must not change when a later decoder token
        // changes, bitwise.
        let cfg = tiny_config(20);
        let model = TransformerModel::new(cfg.clone()).unwrap();
        let params = Parameters::init(&cfg, 11);
        let enc = toks(&[3, 2, 1]);
        let memory = model.encode(&params, &enc).unwrap();
        let a = model
            .position_logits(&params, &memory, &toks(&[0, 5, 6, 7]), &[0, 1])
            .unwrap();
        let b = model
            .position_logits(&params, &memory, &toks(&[0, 5, 19, 12]), &[0, 1])
            .unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn input_validation_errors() {
        let cfg = tiny_config(10);
        let model = TransformerModel::new(cfg.clone()).unwrap();
        let params = Parameters::init(&cfg, 0);
        assert!(matches!(
            model.encode(&params, &[]).unwrap_err(),
            ModelError::EmptyInput
        ));
        let long = toks(&vec![1; cfg.max_len + 1]);
        assert!(matches!(
            model.encode(&params, &long).unwrap_err(),
            ModelError::SequenceTooLong { .. }
        ));
        assert!(matches!(
            model.encode(&params, &toks(&[10])).unwrap_err(),
            ModelError::TokenOutOfRange(10)
        ));
        let enc = toks(&[1]);
        let dec = toks(&[0, 1]);
        assert!(matches!(
            model.loss_only(&params, &enc, &dec, &[true, true], 0.1).unwrap_err(),
            ModelError::BadMask(_)
        ));
        assert!(matches!(
            model.loss_only(&params, &enc, &dec, &[false, false], 0.1).unwrap_err(),
            ModelError::BadMask(_)
        ));
        assert!(matches!(
            model.loss_only(&params, &enc, &dec, &[false], 0.1).unwrap_err(),
            ModelError::BadMask(_)
        ));
    }

    /// Central finite differences over a sampled subset of parameters.
    fn check_gradients_once(seed: u64, cfg: &ModelConfig, samples: usize) -> f64 {
        gradient_check(cfg, seed, samples).unwrap()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut cfg = tiny_config(12);
        cfg.d_model = 6;
        cfg.n_heads = 2;
        cfg.d_ffn = 10;
        for seed in [1, 2, 3] {
            let worst = check_gradients_once(seed, &cfg, 40);
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
        cfg.n_encoder_layers = 2;
        cfg.n_decoder_layers = 2;
        let worst = check_gradients_once(9, &cfg, 40);
        assert!(worst < 1e-4, "deep config: max relative error {worst}");
    }

    #[test]
    fn gradient_flows_into_every_touched_family() {
        let cfg = tiny_config(15);
        let model = TransformerModel::new(cfg.clone()).unwrap();
        let params = Parameters::init(&cfg, 2);
        let mut grads = Parameters::zeros(params.layout().clone());
        let enc = toks(&[1, 2, 3, 4]);
        let dec = toks(&[0, 5, 6, 7, 8]);
        let mask = vec![false, false, true, true, true];
        model.loss_and_grad(&params, &enc, &dec, &mask, 0.1, &mut grads).unwrap();
        for name in [
            "enc.embed",
            "enc.pos",
            "enc.0.ln1.g",
            "enc.0.attn.wq",
            "enc.0.attn.bo",
            "enc.0.ffn.w1",
            "enc.ln_f.g",
            "dec.embed",
            "dec.pos",
            "dec.0.self.wk",
            "dec.0.cross.wv",
            "dec.0.ffn.w2",
            "dec.ln_f.b",
            "out.w",
            "out.b",
        ] {
            let (off, len) = grads.span(name).unwrap();
            let nonzero = grads.data[off..off + len].iter().any(|&x| x != 0.0);
            assert!(nonzero, "no gradient reached {name}");
        }
    }
}
