//! Stage two: decoder-only autoregressive Transformer over token sequences.
//!
//! Architecture: token embedding, N pre-norm blocks (RMSNorm → causal
//! multi-head attention with rotary position embeddings → RMSNorm → gated
//! feed-forward), final RMSNorm, linear head to vocabulary logits. Incremental
//! decoding reuses cached keys/values; sampling supports temperature, top-k
//! and top-p (nucleus) filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rmsnorm, rope_rotate_in_place, softmax_in_place, Graph, Var};
use crate::rng::Rng;
use crate::tensor::{dot, Tensor};

/// Epsilon inside RMS normalization, shared by the training tape and the
/// incremental decode path so both produce the same numbers.
pub const RMS_EPS: f64 = 1e-6;

/// Stage-II architecture hyperparameters. Defaults are the ETTh-scale preset
/// (192-dim, 6 layers, 6 heads, dropout 0.1, context 512).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Gated feed-forward hidden width; 0 = auto (2/3 · 4 · d_model rounded
    /// up to a multiple of 8).
    pub ffn_hidden: usize,
    /// Dropout on attention weights and feed-forward outputs, training only.
    pub dropout: f64,
    /// Codebook size K; tokens [0, K) are data tokens.
    pub codebook_size: usize,
    /// Class count C; tokens [K, K+C) are class prefixes, K+C is BOS.
    pub num_classes: usize,
    pub max_context: usize,
    pub rope_base: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            d_model: 192,
            n_layers: 6,
            n_heads: 6,
            ffn_hidden: 0,
            dropout: 0.1,
            codebook_size: 4096,
            num_classes: 0,
            max_context: 512,
            rope_base: 10000.0,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model, n_layers and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary pairs",
                self.d_model / self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be positive".into()));
        }
        if self.max_context < 2 {
            return Err(Error::Config("max_context must be at least 2".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config(format!("rope_base must be positive, got {}", self.rope_base)));
        }
        Ok(())
    }

    /// Vocabulary = K codebook tokens, C class tokens, one BOS token.
    pub fn vocab(&self) -> usize {
        self.codebook_size + self.num_classes + 1
    }

    pub fn bos_token(&self) -> usize {
        self.codebook_size + self.num_classes
    }

    pub fn class_token(&self, class: usize) -> Result<usize> {
        if class >= self.num_classes {
            return Err(Error::Config(format!(
                "class label {class} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(self.codebook_size + class)
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_hidden > 0 {
            self.ffn_hidden
        } else {
            let raw = (8 * self.d_model).div_ceil(3);
            raw.div_ceil(8) * 8
        }
    }
}

/// Sampling controls. Defaults match the generation preset (temperature 1.0,
/// top-k 1000, top-p 1.0); forecasting uses temperature 0.5, top-k 50.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { temperature: 1.0, top_k: 1000, top_p: 1.0, seed: 0 }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0,1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// One pre-norm Transformer block's parameters.
#[derive(Debug, Clone)]
pub struct ArLayer {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w3: Tensor,
    pub w2: Tensor,
}

/// Per-layer cached (rotated) keys and values for incremental decoding.
/// Entries at a position never change once written; the cache grows by one
/// position per `step_decode`.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    fn new(n_layers: usize) -> Self {
        KvCache { k: vec![Vec::new(); n_layers], v: vec![Vec::new(); n_layers], len: 0 }
    }

    pub fn current_len(&self) -> usize {
        self.len
    }
}

/// Tape handles for all Stage-II parameters.
#[derive(Debug)]
pub struct ArVars {
    pub embedding: Var,
    pub layers: Vec<ArLayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

#[derive(Debug)]
pub struct ArLayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w1: Var,
    pub w3: Var,
    pub w2: Var,
}

impl ArVars {
    /// Flat list in the same order as [`ArModel::params`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend_from_slice(&[
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.w3, l.w2,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

/// The autoregressive prior over token sequences.
#[derive(Debug, Clone)]
pub struct ArModel {
    pub cfg: ArConfig,
    pub embedding: Tensor,
    pub layers: Vec<ArLayer>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ArModel {
    pub fn new(cfg: &ArConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.ffn_width();
        let vocab = cfg.vocab();
        let std = 0.02;
        // Residual-branch output projections start smaller so depth does not
        // blow up activation scale.
        let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| ArLayer {
                attn_norm: Tensor::full(vec![d], 1.0).with_grad(),
                wq: Tensor::randn(vec![d, d], std, rng).with_grad(),
                wk: Tensor::randn(vec![d, d], std, rng).with_grad(),
                wv: Tensor::randn(vec![d, d], std, rng).with_grad(),
                wo: Tensor::randn(vec![d, d], out_std, rng).with_grad(),
                ffn_norm: Tensor::full(vec![d], 1.0).with_grad(),
                w1: Tensor::randn(vec![h, d], std, rng).with_grad(),
                w3: Tensor::randn(vec![h, d], std, rng).with_grad(),
                w2: Tensor::randn(vec![d, h], out_std, rng).with_grad(),
            })
            .collect();
        Ok(ArModel {
            cfg: cfg.clone(),
            embedding: Tensor::randn(vec![vocab, d], std, rng).with_grad(),
            layers,
            final_norm: Tensor::full(vec![d], 1.0).with_grad(),
            head: Tensor::randn(vec![vocab, d], std, rng).with_grad(),
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend_from_slice(&[
                &l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w1, &l.w3, &l.w2,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w1);
            out.push(&mut l.w3);
            out.push(&mut l.w2);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for i in 0..self.layers.len() {
            for part in ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2"] {
                out.push(format!("layer{i}.{part}"));
            }
        }
        out.push("final_norm".into());
        out.push("head".into());
        out
    }

    pub fn insert_params(&self, g: &mut Graph, trainable: bool) -> ArVars {
        let mut put = |t: &Tensor| {
            let mut c = t.clone();
            c.requires_grad = trainable;
            g.leaf(c)
        };
        ArVars {
            embedding: put(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| ArLayerVars {
                    attn_norm: put(&l.attn_norm),
                    wq: put(&l.wq),
                    wk: put(&l.wk),
                    wv: put(&l.wv),
                    wo: put(&l.wo),
                    ffn_norm: put(&l.ffn_norm),
                    w1: put(&l.w1),
                    w3: put(&l.w3),
                    w2: put(&l.w2),
                })
                .collect(),
            final_norm: put(&self.final_norm),
            head: put(&self.head),
        }
    }

    /// Full-sequence logits on the tape. `ids` holds B stacked sequences of
    /// length `seq_len`; rows of the result line up with `ids`. Dropout is
    /// applied only when `train_rng` is given.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        vars: &ArVars,
        ids: &[usize],
        seq_len: usize,
        mut train_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let rate = self.cfg.dropout;
        let mut x = g.embedding(vars.embedding, ids)?;
        for lv in &vars.layers {
            let xn = g.rmsnorm_rows(x, lv.attn_norm, RMS_EPS)?;
            let q = g.matmul(xn, lv.wq, false, true)?;
            let k = g.matmul(xn, lv.wk, false, true)?;
            let v = g.matmul(xn, lv.wv, false, true)?;
            let drop = match train_rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some((rate, r)),
                _ => None,
            };
            let attn =
                g.causal_attention(q, k, v, self.cfg.n_heads, seq_len, self.cfg.rope_base, drop)?;
            let proj = g.matmul(attn, lv.wo, false, true)?;
            x = g.add(x, proj)?;

            let fnorm = g.rmsnorm_rows(x, lv.ffn_norm, RMS_EPS)?;
            let h1 = g.matmul(fnorm, lv.w1, false, true)?;
            let h1 = g.silu(h1);
            let h3 = g.matmul(fnorm, lv.w3, false, true)?;
            let gated = g.mul(h1, h3)?;
            let mut out = g.matmul(gated, lv.w2, false, true)?;
            if rate > 0.0 {
                if let Some(r) = train_rng.as_deref_mut() {
                    out = g.dropout(out, rate, r)?;
                }
            }
            x = g.add(x, out)?;
        }
        let xf = g.rmsnorm_rows(x, vars.final_norm, RMS_EPS)?;
        g.matmul(xf, vars.head, false, true)
    }

    /// Next-token logits for every position of `tokens` under `prefix`
    /// (BOS or a class token). Row i is the logit vector for the token after
    /// tokens[0..=i], so the last row predicts the continuation of the whole
    /// sequence. Inference path: no dropout.
    pub fn forward_logits(&self, tokens: &[usize], prefix: usize) -> Result<Tensor> {
        let vocab = self.cfg.vocab();
        let n = tokens.len();
        if n + 1 > self.cfg.max_context {
            return Err(Error::Length(format!(
                "sequence of {} exceeds max_context {}",
                n + 1,
                self.cfg.max_context
            )));
        }
        if prefix >= vocab {
            return Err(Error::Vocab(format!("prefix token {prefix} out of range for vocab {vocab}")));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocab(format!("token {bad} out of range for vocab {vocab}")));
        }
        let mut ids = Vec::with_capacity(n + 1);
        ids.push(prefix);
        ids.extend_from_slice(tokens);

        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, false);
        let lg = self.logits_graph(&mut g, &vars, &ids, n + 1, None)?;
        let all = g.value(lg);
        let mut out = Tensor::zeros(vec![n, vocab]);
        out.data_mut().copy_from_slice(&all.data()[vocab..]);
        Ok(out)
    }

    /// Masked mean next-token NLL for a batch of token sequences on the tape.
    /// Each sequence is prefixed with its class token (or BOS), padded to a
    /// common length, and every real token counts once in the mean.
    pub fn build_batch_nll(
        &self,
        g: &mut Graph,
        batch: &[(&[usize], Option<usize>)],
        mut train_rng: Option<&mut Rng>,
    ) -> Result<(Var, ArVars)> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let max_len = batch.iter().map(|(t, _)| t.len()).max().unwrap();
        if max_len == 0 {
            return Err(Error::Input("cannot train on empty token sequences".into()));
        }
        let s = max_len + 1; // prefix + tokens
        if s > self.cfg.max_context {
            return Err(Error::Length(format!(
                "training sequences of {} exceed max_context {}",
                s, self.cfg.max_context
            )));
        }
        let k = self.cfg.codebook_size;
        let bos = self.cfg.bos_token();
        let mut ids = Vec::with_capacity(batch.len() * s);
        let mut targets = Vec::with_capacity(batch.len() * s);
        let mut mask = Vec::with_capacity(batch.len() * s);
        for (tokens, class) in batch {
            if let Some(&bad) = tokens.iter().find(|&&t| t >= k) {
                return Err(Error::Vocab(format!("corpus token {bad} outside codebook of size {k}")));
            }
            let prefix = match class {
                Some(c) => self.cfg.class_token(*c)?,
                None => bos,
            };
            ids.push(prefix);
            ids.extend_from_slice(tokens);
            ids.resize(ids.len() + (max_len - tokens.len()), bos);
            // Row j predicts the id at position j+1; padded rows are masked.
            targets.extend_from_slice(tokens);
            targets.resize(targets.len() + (s - tokens.len()), 0);
            mask.extend(std::iter::repeat_n(1.0, tokens.len()));
            mask.extend(std::iter::repeat_n(0.0, s - tokens.len()));
        }
        let vars = self.insert_params(g, true);
        let logits = self.logits_graph(g, &vars, &ids, s, train_rng.as_deref_mut())?;
        let loss = g.cross_entropy(logits, &targets, &mask)?;
        Ok((loss, vars))
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.n_layers)
    }

    /// The prefix token for generation: class token when a label is given,
    /// BOS otherwise. Labels require a conditional model.
    pub fn prefix_token(&self, class_label: Option<usize>) -> Result<usize> {
        match class_label {
            None => Ok(self.cfg.bos_token()),
            Some(c) if self.cfg.num_classes == 0 => {
                Err(Error::Config(format!("class label {c} given but the model is unconditional")))
            }
            Some(c) => self.cfg.class_token(c),
        }
    }

    /// Start incremental decoding: feeds the prefix embedding and returns the
    /// cache (length 1) plus the first next-token logits.
    pub fn prefill(&self, class_label: Option<usize>) -> Result<(KvCache, Vec<f64>)> {
        let prefix = self.prefix_token(class_label)?;
        let mut cache = self.new_cache();
        let logits = self.step_decode(&mut cache, prefix)?;
        Ok((cache, logits))
    }

    /// Feed one token through the model using cached keys/values; returns the
    /// next-token logits. Cost per call is linear in the cache length.
    pub fn step_decode(&self, cache: &mut KvCache, token: usize) -> Result<Vec<f64>> {
        let vocab = self.cfg.vocab();
        if token >= vocab {
            return Err(Error::Vocab(format!("token {token} out of range for vocab {vocab}")));
        }
        if cache.k.len() != self.cfg.n_layers {
            return Err(Error::State(format!(
                "cache built for {} layers, model has {}",
                cache.k.len(),
                self.cfg.n_layers
            )));
        }
        if cache.len + 1 > self.cfg.max_context {
            return Err(Error::Length(format!(
                "decoding past max_context {} (cache already at {})",
                self.cfg.max_context, cache.len
            )));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let pos = cache.len;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = self.embedding.row(token).to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let xn = rmsnorm(&x, layer.attn_norm.data(), RMS_EPS)?;
            let mut q = matvec(&layer.wq, &xn);
            let mut k = matvec(&layer.wk, &xn);
            let v = matvec(&layer.wv, &xn);
            for h in 0..heads {
                rope_rotate_in_place(&mut q[h * dh..(h + 1) * dh], pos as f64, self.cfg.rope_base);
                rope_rotate_in_place(&mut k[h * dh..(h + 1) * dh], pos as f64, self.cfg.rope_base);
            }
            cache.k[li].extend_from_slice(&k);
            cache.v[li].extend_from_slice(&v);

            let n_ctx = pos + 1;
            let mut ctx = vec![0.0; d];
            let mut scores = Vec::with_capacity(n_ctx);
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                scores.clear();
                for p in 0..n_ctx {
                    let kh = &cache.k[li][p * d + h * dh..p * d + (h + 1) * dh];
                    scores.push(dot(qh, kh) * scale);
                }
                softmax_in_place(&mut scores);
                for p in 0..n_ctx {
                    let vh = &cache.v[li][p * d + h * dh..p * d + (h + 1) * dh];
                    let w = scores[p];
                    for (o, vv) in ctx[h * dh..(h + 1) * dh].iter_mut().zip(vh) {
                        *o += w * vv;
                    }
                }
            }
            let attn_out = matvec(&layer.wo, &ctx);
            for (xo, a) in x.iter_mut().zip(&attn_out) {
                *xo += a;
            }

            let fnorm = rmsnorm(&x, layer.ffn_norm.data(), RMS_EPS)?;
            let h1 = matvec(&layer.w1, &fnorm);
            let h3 = matvec(&layer.w3, &fnorm);
            let gated: Vec<f64> =
                h1.iter().zip(&h3).map(|(&a, &b)| a / (1.0 + (-a).exp()) * b).collect();
            let f_out = matvec(&layer.w2, &gated);
            for (xo, f) in x.iter_mut().zip(&f_out) {
                *xo += f;
            }
        }
        cache.len += 1;
        let yn = rmsnorm(&x, self.final_norm.data(), RMS_EPS)?;
        Ok(matvec(&self.head, &yn))
    }

    /// Sample the next data token from logits. BOS and class tokens are
    /// always masked out, so the result is a codebook index < K.
    pub fn sample_next(&self, logits: &[f64], sp: &SamplingParams, rng: &mut Rng) -> Result<usize> {
        if logits.len() != self.cfg.vocab() {
            return Err(Error::Dimension(format!(
                "logit vector of {} vs vocab {}",
                logits.len(),
                self.cfg.vocab()
            )));
        }
        sample_from_logits(logits, self.cfg.codebook_size, sp, rng)
    }
}

/// The sampling pipeline on a raw logit vector whose first `k_data` entries
/// are the allowed tokens: mask the rest → divide by temperature → keep the
/// top-k → keep the smallest descending-probability prefix with cumulative
/// mass ≥ top_p → renormalize → categorical draw.
pub fn sample_from_logits(
    logits: &[f64],
    k_data: usize,
    sp: &SamplingParams,
    rng: &mut Rng,
) -> Result<usize> {
    sp.validate()?;
    if k_data == 0 || k_data > logits.len() {
        return Err(Error::Sampling(format!(
            "no sampleable tokens: {k_data} data tokens of {} logits",
            logits.len()
        )));
    }
    let allowed = &logits[..k_data];
    if allowed.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let mut cand: Vec<(usize, f64)> = allowed.iter().cloned().enumerate().collect();
    // Descending logits, ties to the lowest index: deterministic order.
    cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cand.truncate(sp.top_k.min(cand.len()));

    let mut probs: Vec<f64> = cand.iter().map(|(_, l)| l / sp.temperature).collect();
    softmax_in_place(&mut probs);
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if cum >= sp.top_p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    match rng.categorical(&probs) {
        Some(i) => Ok(cand[i].0),
        None => Err(Error::Sampling("all probability mass filtered out".into())),
    }
}

/// Per-position mean of −log softmax(logits)[target].
pub fn nll_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if !logits.is_matrix() || logits.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "nll: logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Input("nll over zero positions".into()));
    }
    let vocab = logits.cols();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Vocab(format!("target {t} out of range for vocab {vocab}")));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / targets.len() as f64)
}

pub(crate) fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inn) = (w.rows(), w.cols());
    debug_assert_eq!(inn, x.len());
    let mut y = Vec::with_capacity(out);
    for r in 0..out {
        y.push(dot(w.row(r), x));
    }
    y
}
