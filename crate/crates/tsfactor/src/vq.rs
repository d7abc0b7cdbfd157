//! Stage one: the factorized vector-quantized autoencoder.
//!
//! A window X ∈ R^{T×D} is mapped time-step-wise by a pointwise MLP encoder
//! to coefficients V ∈ R^{T×R}, each row quantized against a learned
//! codebook, and reconstructed as X̃ = U V̂ᵀ through a (per-class) spatial
//! basis U ∈ R^{D×R}, then refined by a 1D convolutional residual decoder:
//! X̂ = X̃ + Decoder(X̃).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::linalg::top_eigenvectors;
use crate::rng::Rng;
use crate::tensor::{matmul, sq_dist, Tensor};

/// Stage-I architecture hyperparameters. Defaults follow the ETTh-scale
/// preset (rank 32, 4096 codes, β 0.25, wide MLP, 256 decoder channels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Number of input channels D. 0 means "infer from the dataset"; it must
    /// be resolved to a concrete value before a model is constructed.
    pub num_channels: usize,
    /// Low-rank dimension R.
    pub rank: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Commitment weight β.
    pub commitment_beta: f64,
    /// Hidden widths of the pointwise encoder MLP.
    pub encoder_hidden_dims: Vec<usize>,
    /// Hidden channel count of the residual conv decoder.
    pub decoder_channels: usize,
    /// Conv kernel size (odd; 1 gives a strictly pointwise decoder).
    pub decoder_kernel_size: usize,
    /// Number of classes; 0 = unconditional (single shared basis).
    pub num_classes: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            num_channels: 0,
            rank: 32,
            codebook_size: 4096,
            commitment_beta: 0.25,
            encoder_hidden_dims: vec![512, 2048, 512],
            decoder_channels: 256,
            decoder_kernel_size: 3,
            num_classes: 0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_channels == 0 {
            return Err(Error::Config("num_channels is unresolved (0); set it or infer from data".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config(format!("codebook_size must be >= 2, got {}", self.codebook_size)));
        }
        if !(self.commitment_beta > 0.0) {
            return Err(Error::Config(format!("commitment_beta must be > 0, got {}", self.commitment_beta)));
        }
        if self.encoder_hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("encoder_hidden_dims entries must be positive".into()));
        }
        if self.decoder_channels == 0 {
            return Err(Error::Config("decoder_channels must be >= 1".into()));
        }
        if self.decoder_kernel_size % 2 == 0 || self.decoder_kernel_size == 0 {
            return Err(Error::Config(format!(
                "decoder_kernel_size must be odd, got {}",
                self.decoder_kernel_size
            )));
        }
        Ok(())
    }
}

/// Ablation switches (kept out of the architecture config so presets stay
/// orthogonal to the study variants).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Replace the (per-class) basis product with a single shared linear map.
    pub no_basis: bool,
    /// Skip residual refinement: X̂ = X̃.
    pub no_residual: bool,
}

/// A quantized window: one token per time step, optional class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub class_label: Option<usize>,
}

/// The learned code table with usage accounting for dead-code restarts.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// K×R entries, one code vector per row.
    pub entries: Tensor,
    /// Times each code was emitted by `quantize` since the last reset.
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if !entries.is_matrix() || entries.rows() == 0 {
            return Err(Error::Config(format!(
                "codebook wants a non-empty K x R matrix, got {:?}",
                entries.shape()
            )));
        }
        let k = entries.rows();
        Ok(Codebook { entries, usage_counts: vec![0; k] })
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn rank(&self) -> usize {
        self.entries.cols()
    }

    /// Nearest-entry assignment for every row of `v` (T×R): returns token
    /// indices and the quantized rows V̂. Pure — usage counts untouched.
    /// Ties break toward the lowest index.
    pub fn assign(&self, v: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        if !v.is_matrix() || v.cols() != self.rank() {
            return Err(Error::Dimension(format!(
                "quantize: input {:?} vs codebook rank {}",
                v.shape(),
                self.rank()
            )));
        }
        let (n, r) = (v.rows(), v.cols());
        let k = self.size();
        let mut tokens = Vec::with_capacity(n);
        let mut vhat = Tensor::zeros(vec![n, r]);
        for t in 0..n {
            let row = v.row(t);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(row, self.entries.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            tokens.push(best);
            vhat.data_mut()[t * r..(t + 1) * r].copy_from_slice(self.entries.row(best));
        }
        Ok((tokens, vhat))
    }

    /// Training-side quantization: like [`Codebook::assign`] but records usage.
    pub fn quantize(&mut self, v: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let (tokens, vhat) = self.assign(v)?;
        self.note_usage(&tokens);
        Ok((tokens, vhat))
    }

    /// Record emitted tokens (used when assignment happened off-model, e.g.
    /// inside a loss graph built on cloned entries).
    pub fn note_usage(&mut self, tokens: &[usize]) {
        for &t in tokens {
            self.usage_counts[t] += 1;
        }
    }

    /// Gather entry rows for a token sequence.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Tensor> {
        let (k, r) = (self.size(), self.rank());
        let mut out = Tensor::zeros(vec![tokens.len(), r]);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= k {
                return Err(Error::Vocab(format!("token {t} out of range for codebook of size {k}")));
            }
            out.data_mut()[i * r..(i + 1) * r].copy_from_slice(self.entries.row(t));
        }
        Ok(out)
    }

    /// Replace every entry used fewer than `min_usage` times since the last
    /// reset with a uniformly sampled row of `recent` (recent encoder
    /// outputs), then reset all usage counts. Returns how many were replaced.
    pub fn restart_dead_codes(&mut self, recent: &Tensor, min_usage: u64, rng: &mut Rng) -> Result<usize> {
        if recent.is_empty() || !recent.is_matrix() || recent.cols() != self.rank() {
            return Err(Error::Input(format!(
                "dead-code restart wants non-empty N x {} candidates, got {:?}",
                self.rank(),
                recent.shape()
            )));
        }
        let r = self.rank();
        let mut replaced = 0;
        for k in 0..self.size() {
            if self.usage_counts[k] < min_usage {
                let pick = rng.range(recent.rows());
                let src = recent.row(pick).to_vec();
                self.entries.data_mut()[k * r..(k + 1) * r].copy_from_slice(&src);
                replaced += 1;
            }
        }
        for u in &mut self.usage_counts {
            *u = 0;
        }
        Ok(replaced)
    }
}

/// Tape handles for every Stage-I parameter, in [`VqModel::params`] order.
pub struct VqVars {
    pub enc_w: Vec<Var>,
    pub enc_b: Vec<Var>,
    pub basis: Vec<Var>,
    pub codebook: Var,
    pub dec_w: Vec<Var>,
    pub dec_b: Vec<Var>,
}

impl VqVars {
    /// Flat list in the same order as [`VqModel::params`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.enc_w.iter().zip(&self.enc_b) {
            out.push(*w);
            out.push(*b);
        }
        out.extend_from_slice(&self.basis);
        out.push(self.codebook);
        for (w, b) in self.dec_w.iter().zip(&self.dec_b) {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

/// Scalar loss terms of one batch, as tape handles.
pub struct VqLossVars {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    /// Per-window token assignments made while building the graph.
    pub assignments: Vec<Vec<usize>>,
    pub vars: VqVars,
}

/// Stage-I model: pointwise encoder, per-class spatial basis, codebook,
/// residual conv decoder.
#[derive(Debug, Clone)]
pub struct VqModel {
    pub cfg: VqConfig,
    pub ablation: Ablation,
    /// Encoder layers, each [out, in] with a matching [out] bias.
    pub enc_w: Vec<Tensor>,
    pub enc_b: Vec<Tensor>,
    /// One D×R basis per class; exactly one when unconditional or `no_basis`.
    pub basis: Vec<Tensor>,
    pub codebook: Codebook,
    /// Conv stack: [channels, D, k], [channels, channels, k], [D, channels, 1].
    pub dec_w: Vec<Tensor>,
    pub dec_b: Vec<Tensor>,
}

impl VqModel {
    pub fn new(cfg: &VqConfig, ablation: Ablation, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.num_channels;
        let r = cfg.rank;

        let mut dims = vec![d];
        dims.extend_from_slice(&cfg.encoder_hidden_dims);
        dims.push(r);
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            enc_w.push(Tensor::randn(vec![fan_out, fan_in], std, rng).with_grad());
            enc_b.push(Tensor::zeros(vec![fan_out]).with_grad());
        }

        let n_basis = if ablation.no_basis || cfg.num_classes == 0 { 1 } else { cfg.num_classes };
        let basis = (0..n_basis)
            .map(|_| Tensor::randn(vec![d, r], 1.0 / (r as f64).sqrt(), rng).with_grad())
            .collect();

        let codebook = Codebook::new(Tensor::randn(vec![cfg.codebook_size, r], 0.1, rng).with_grad())?;

        let c = cfg.decoder_channels;
        let k = cfg.decoder_kernel_size;
        let dec_w = vec![
            Tensor::randn(vec![c, d, k], (2.0 / (d * k) as f64).sqrt(), rng).with_grad(),
            Tensor::randn(vec![c, c, k], (2.0 / (c * k) as f64).sqrt(), rng).with_grad(),
            // Zero-initialized projection: the residual branch starts as an
            // exact no-op and learns corrections from there.
            Tensor::zeros(vec![d, c, 1]).with_grad(),
        ];
        let dec_b = vec![
            Tensor::zeros(vec![c]).with_grad(),
            Tensor::zeros(vec![c]).with_grad(),
            Tensor::zeros(vec![d]).with_grad(),
        ];

        Ok(VqModel { cfg: cfg.clone(), ablation, enc_w, enc_b, basis, codebook: codebook_mark(codebook), dec_w, dec_b })
    }

    /// Parameters in a stable order (paired with [`VqModel::param_names`]).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.enc_w.iter().zip(&self.enc_b) {
            out.push(w);
            out.push(b);
        }
        out.extend(self.basis.iter());
        out.push(&self.codebook.entries);
        for (w, b) in self.dec_w.iter().zip(&self.dec_b) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (w, b) in self.enc_w.iter_mut().zip(self.enc_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.extend(self.basis.iter_mut());
        out.push(&mut self.codebook.entries);
        for (w, b) in self.dec_w.iter_mut().zip(self.dec_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.enc_w.len() {
            out.push(format!("enc_w{i}"));
            out.push(format!("enc_b{i}"));
        }
        for i in 0..self.basis.len() {
            out.push(format!("basis{i}"));
        }
        out.push("codebook".into());
        for i in 0..self.dec_w.len() {
            out.push(format!("dec_w{i}"));
            out.push(format!("dec_b{i}"));
        }
        out
    }

    /// Insert all parameters into a graph. `trainable` marks them as leaves
    /// that receive gradients; inference paths insert constants.
    pub fn insert_params(&self, g: &mut Graph, trainable: bool) -> VqVars {
        let mut put = |t: &Tensor| {
            let mut c = t.clone();
            c.requires_grad = trainable;
            g.leaf(c)
        };
        VqVars {
            enc_w: self.enc_w.iter().map(&mut put).collect(),
            enc_b: self.enc_b.iter().map(&mut put).collect(),
            basis: self.basis.iter().map(&mut put).collect(),
            codebook: put(&self.codebook.entries),
            dec_w: self.dec_w.iter().map(&mut put).collect(),
            dec_b: self.dec_b.iter().map(&mut put).collect(),
        }
    }

    /// Pointwise encoder on the tape: rows of `x` ([N, D]) are mapped
    /// independently to [N, R].
    pub fn encoder_graph(&self, g: &mut Graph, vars: &VqVars, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.cfg.num_channels {
            return Err(Error::Dimension(format!(
                "encoder expects {} channels, got {:?}",
                self.cfg.num_channels,
                g.value(x).shape()
            )));
        }
        let mut h = x;
        let n_layers = self.enc_w.len();
        for i in 0..n_layers {
            h = g.matmul(h, vars.enc_w[i], false, true)?;
            h = g.add_row(h, vars.enc_b[i])?;
            if i + 1 < n_layers {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Residual refinement on the tape: base [D, T] -> X̂ [D, T].
    /// Under `no_residual` this is the identity.
    pub fn decoder_graph(&self, g: &mut Graph, vars: &VqVars, base: Var) -> Result<Var> {
        if self.ablation.no_residual {
            return Ok(base);
        }
        let mut h = g.conv1d(base, vars.dec_w[0], vars.dec_b[0])?;
        h = g.silu(h);
        h = g.conv1d(h, vars.dec_w[1], vars.dec_b[1])?;
        h = g.silu(h);
        let residual = g.conv1d(h, vars.dec_w[2], vars.dec_b[2])?;
        g.add(base, residual)
    }

    /// Index into `basis` for a window's class, validating the label rules.
    pub fn basis_index(&self, class: Option<usize>) -> Result<usize> {
        match (self.cfg.num_classes, class) {
            (0, None) => Ok(0),
            (0, Some(c)) => Err(Error::Config(format!("class label {c} given for an unconditional model"))),
            (n, Some(c)) if c < n => Ok(if self.ablation.no_basis { 0 } else { c }),
            (n, Some(c)) => Err(Error::Config(format!("class label {c} out of range for {n} classes"))),
            (n, None) => Err(Error::Config(format!("class label required for a {n}-class model"))),
        }
    }

    pub fn basis_for(&self, class: Option<usize>) -> Result<&Tensor> {
        Ok(&self.basis[self.basis_index(class)?])
    }

    /// Encode a window X [T, D] to coefficients V [T, R] (inference path).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, false);
        let xv = g.constant(x.clone());
        let v = self.encoder_graph(&mut g, &vars, xv)?;
        Ok(g.value(v).clone())
    }

    /// Base reconstruction X̃ = U V̂ᵀ, shape [D, T].
    pub fn reconstruct_base(&self, class: Option<usize>, vhat: &Tensor) -> Result<Tensor> {
        let u = self.basis_for(class)?;
        if !vhat.is_matrix() || vhat.cols() != self.cfg.rank {
            return Err(Error::Dimension(format!(
                "reconstruct_base: coefficients {:?} vs rank {}",
                vhat.shape(),
                self.cfg.rank
            )));
        }
        matmul(u, vhat, false, true)
    }

    /// Residual refinement X̂ = X̃ + Decoder(X̃) (inference path), [D, T].
    pub fn refine(&self, base: &Tensor) -> Result<Tensor> {
        if !base.is_matrix() || base.rows() != self.cfg.num_channels {
            return Err(Error::Dimension(format!(
                "refine expects [{} x T], got {:?}",
                self.cfg.num_channels,
                base.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.insert_params(&mut g, false);
        let b = g.constant(base.clone());
        let out = self.decoder_graph(&mut g, &vars, b)?;
        Ok(g.value(out).clone())
    }

    /// Decode a token sequence back to a window [T, D] (normalized units).
    pub fn decode_tokens(&self, tokens: &[usize], class: Option<usize>) -> Result<Tensor> {
        let vhat = self.codebook.lookup(tokens)?;
        let base = self.reconstruct_base(class, &vhat)?;
        let xhat = self.refine(&base)?;
        xhat.transposed()
    }

    /// Encode-and-assign without touching usage counts (inference).
    pub fn tokenize_window(&self, x: &Tensor, class: Option<usize>) -> Result<TokenSequence> {
        self.basis_index(class)?; // validate the label against the config
        let v = self.encode(x)?;
        let (tokens, _) = self.codebook.assign(&v)?;
        Ok(TokenSequence { tokens, class_label: class })
    }

    /// Build the three-term quantization training loss for a batch on `g`.
    ///
    /// All windows must share the same T×D shape. Reconstruction is the mean
    /// squared error over all D·T entries, averaged over the batch; the
    /// codebook and commitment terms are squared distances summed over R and
    /// averaged over batch and time.
    pub fn build_batch_loss(
        &self,
        g: &mut Graph,
        batch: &[(&Tensor, Option<usize>)],
    ) -> Result<VqLossVars> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Input("empty training batch".into()))?;
        let t_len = first.0.rows();
        let d = self.cfg.num_channels;
        for (w, _) in batch {
            if !w.is_matrix() || w.rows() != t_len || w.cols() != d {
                return Err(Error::Dimension(format!(
                    "batch windows must all be [{t_len} x {d}], got {:?}",
                    w.shape()
                )));
            }
        }
        let b = batch.len();
        let vars = self.insert_params(g, true);

        // Stack windows along time and run the pointwise encoder once.
        let mut stacked = Tensor::zeros(vec![b * t_len, d]);
        for (i, (w, _)) in batch.iter().enumerate() {
            stacked.data_mut()[i * t_len * d..(i + 1) * t_len * d].copy_from_slice(w.data());
        }
        let x_all = g.constant(stacked);
        let v_all = self.encoder_graph(g, &vars, x_all)?;

        // Quantize against the current codebook (outside the tape).
        let (ids, vhat) = self.codebook.assign(g.value(v_all))?;

        // Codebook + commitment terms over the whole stacked batch.
        let (cb_term, commit_term) =
            latent_loss_terms(g, v_all, vars.codebook, &ids, self.cfg.commitment_beta)?;

        // Straight-through: reconstruction gradients reach the encoder.
        let v_st = g.straight_through(v_all, vhat)?;

        // Per-window reconstruction through basis and decoder.
        let mut losses = Vec::with_capacity(b);
        let mut assignments = Vec::with_capacity(b);
        for (i, (w, class)) in batch.iter().enumerate() {
            let u = vars.basis[self.basis_index(*class)?];
            let slice = g.slice_rows(v_st, i * t_len, t_len)?;
            let base = g.matmul(u, slice, false, true)?;
            let xhat = self.decoder_graph(g, &vars, base)?;
            let target = g.constant(w.transposed()?);
            losses.push(g.mean_sq_diff(xhat, target)?);
            assignments.push(ids[i * t_len..(i + 1) * t_len].to_vec());
        }
        let recon_sum = g.sum_vars(&losses)?;
        let recon = g.scale(recon_sum, 1.0 / b as f64);

        let total = g.sum_vars(&[recon, cb_term, commit_term])?;
        Ok(VqLossVars { total, recon, codebook: cb_term, commitment: commit_term, assignments, vars })
    }

    /// Data-driven initialization from (a sample of) the training windows:
    /// the codebook is seeded with actual encoder outputs and each basis with
    /// the top-R eigenvectors of its class's channel Gram matrix.
    pub fn data_init(&mut self, windows: &[(&Tensor, Option<usize>)], rng: &mut Rng) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::Input("data_init needs at least one window".into()));
        }
        let d = self.cfg.num_channels;
        let r = self.cfg.rank;

        // Encoder outputs for all rows of all windows.
        let total_rows: usize = windows.iter().map(|(w, _)| w.rows()).sum();
        let mut stacked = Tensor::zeros(vec![total_rows, d]);
        let mut off = 0;
        for (w, _) in windows {
            stacked.data_mut()[off..off + w.len()].copy_from_slice(w.data());
            off += w.len();
        }
        let v = self.encode(&stacked)?;

        // Codebook: sample distinct encoder outputs; jitter-pad if too few.
        let k = self.cfg.codebook_size;
        let n = v.rows();
        let mut entries = Tensor::zeros(vec![k, r]);
        if n >= k {
            let picks = rng.sample_without_replacement(n, k);
            for (slot, &row) in picks.iter().enumerate() {
                entries.data_mut()[slot * r..(slot + 1) * r].copy_from_slice(v.row(row));
            }
        } else {
            for slot in 0..k {
                let row = if slot < n { slot } else { rng.range(n) };
                let dst = &mut entries.data_mut()[slot * r..(slot + 1) * r];
                dst.copy_from_slice(v.row(row));
                if slot >= n {
                    // Small Gaussian jitter so padded entries are distinct.
                    for e in dst.iter_mut() {
                        *e += rng.normal() * 0.01;
                    }
                }
            }
        }
        entries.requires_grad = true;
        let usage = std::mem::take(&mut self.codebook.usage_counts);
        self.codebook = Codebook::new(entries)?;
        let _ = usage;

        // Basis: top-R eigenvectors of the per-class (uncentered) Gram.
        for bi in 0..self.basis.len() {
            let rows: Vec<&[f64]> = windows
                .iter()
                .filter(|(_, class)| {
                    self.basis.len() == 1 || self.basis_index(*class).map(|i| i == bi).unwrap_or(false)
                })
                .flat_map(|(w, _)| (0..w.rows()).map(move |t| w.row(t)))
                .collect();
            if rows.is_empty() {
                continue; // class absent from the sample; keep the random init
            }
            let mut m = Tensor::zeros(vec![rows.len(), d]);
            for (i, row) in rows.iter().enumerate() {
                m.data_mut()[i * d..(i + 1) * d].copy_from_slice(row);
            }
            let gram = matmul(&m, &m, true, false)?;
            let mut scaled = gram;
            for e in scaled.data_mut() {
                *e /= rows.len() as f64;
            }
            let mut u = top_eigenvectors(&scaled, r.min(d))?;
            if r > d {
                // Rank exceeds channels: pad extra columns with zeros.
                let mut padded = Tensor::zeros(vec![d, r]);
                for i in 0..d {
                    for j in 0..r.min(d) {
                        padded.data_mut()[i * r + j] = u.at2(i, j);
                    }
                }
                u = padded;
            }
            u.requires_grad = true;
            self.basis[bi] = u;
        }
        Ok(())
    }
}

// The codebook tensor must keep requires_grad through clones; small helper to
// make that explicit at construction time.
fn codebook_mark(mut cb: Codebook) -> Codebook {
    cb.entries.requires_grad = true;
    cb
}

/// Codebook and commitment terms of the quantization loss, on the tape:
///   codebook   = R * mean((sg[V] - V̂)^2)   -> gradients reach only the codebook
///   commitment = β * R * mean((V - sg[V̂])^2) -> gradients reach only the encoder
/// (mean over N·R entries; the R factor turns it into a per-step squared
/// distance averaged over batch and time).
pub fn latent_loss_terms(
    g: &mut Graph,
    v: Var,
    codebook: Var,
    ids: &[usize],
    beta: f64,
) -> Result<(Var, Var)> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("commitment beta must be > 0, got {beta}")));
    }
    let r = g.value(v).cols() as f64;
    let emb = g.embedding(codebook, ids)?;
    let v_sg = g.detach(v);
    let cb_raw = g.mean_sq_diff(v_sg, emb)?;
    let cb = g.scale(cb_raw, r);
    let emb_sg = g.detach(emb);
    let commit_raw = g.mean_sq_diff(v, emb_sg)?;
    let commit = g.scale(commit_raw, beta * r);
    Ok((cb, commit))
}

/// Full single-window quantization loss on the tape (reconstruction +
/// codebook + commitment). `x_target` and `xhat` are [D, T]; `v` is the
/// pre-quantization [T, R] encoder output; `ids` its token assignment.
#[derive(Debug, Clone, Copy)]
pub struct VqLossParts {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
}

pub fn vq_loss(
    g: &mut Graph,
    x_target: Var,
    xhat: Var,
    v: Var,
    codebook: Var,
    ids: &[usize],
    beta: f64,
) -> Result<VqLossParts> {
    let recon = g.mean_sq_diff(xhat, x_target)?;
    let (cb, commit) = latent_loss_terms(g, v, codebook, ids, beta)?;
    let total = g.sum_vars(&[recon, cb, commit])?;
    Ok(VqLossParts { total, recon, codebook: cb, commitment: commit })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn tiny_cfg() -> VqConfig {
        VqConfig {
            num_channels: 2,
            rank: 2,
            codebook_size: 4,
            commitment_beta: 0.25,
            encoder_hidden_dims: vec![8],
            decoder_channels: 4,
            decoder_kernel_size: 3,
            num_classes: 0,
        }
    }

    #[test]
    fn quantize_hand_examples() {
        let cb = Codebook::new(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0])).unwrap();
        // Squared distances 0.05 vs 1.45.
        let (tok, vhat) = cb.assign(&t(&[1, 2], &[0.2, 0.1])).unwrap();
        assert_eq!(tok, vec![0]);
        assert_eq!(vhat.data(), &[0.0, 0.0]);
        // Equidistant: lowest index wins.
        let (tok, _) = cb.assign(&t(&[1, 2], &[0.5, 0.5])).unwrap();
        assert_eq!(tok, vec![0]);
    }

    #[test]
    fn quantize_exact_match_has_zero_distance() {
        let mut rng = Rng::from_seed(1);
        let entries = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let cb = Codebook::new(entries.clone()).unwrap();
        let v = Tensor::new(vec![1, 3], entries.row(3).to_vec()).unwrap();
        let (tok, vhat) = cb.assign(&v).unwrap();
        assert_eq!(tok, vec![3]);
        assert_eq!(vhat.data(), entries.row(3));
    }

    #[test]
    fn usage_counts_and_restart() {
        let mut cb = Codebook::new(t(&[2, 1], &[0.0, 10.0])).unwrap();
        let (_, _) = cb.quantize(&t(&[3, 1], &[0.1, 0.2, 9.9])).unwrap();
        assert_eq!(cb.usage_counts, vec![2, 1]);

        // All codes used at least once: nothing replaced, counts reset.
        let mut rng = Rng::from_seed(2);
        let recent = t(&[1, 1], &[5.0]);
        let replaced = cb.restart_dead_codes(&recent, 1, &mut rng).unwrap();
        assert_eq!(replaced, 0);
        assert_eq!(cb.usage_counts, vec![0, 0]);

        // Code 1 unused now; single candidate must land in entry 1.
        cb.note_usage(&[0]);
        let replaced = cb.restart_dead_codes(&recent, 1, &mut rng).unwrap();
        assert_eq!(replaced, 1);
        assert_eq!(cb.entries.row(1), &[5.0]);
        assert_eq!(cb.usage_counts, vec![0, 0]);
    }

    #[test]
    fn encoder_is_pointwise() {
        let mut rng = Rng::from_seed(3);
        let model = VqModel::new(&tiny_cfg(), Ablation::default(), &mut rng).unwrap();
        let x = Tensor::randn(vec![5, 2], 1.0, &mut rng);
        let v = model.encode(&x).unwrap();
        // Permute time rows; outputs must permute identically.
        let perm = [4usize, 2, 0, 1, 3];
        let mut xp = Tensor::zeros(vec![5, 2]);
        for (dst, &src) in perm.iter().enumerate() {
            xp.data_mut()[dst * 2..(dst + 1) * 2].copy_from_slice(x.row(src));
        }
        let vp = model.encode(&xp).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(vp.row(dst), v.row(src));
        }
    }

    #[test]
    fn encoder_zero_weights_give_zero_output() {
        let mut rng = Rng::from_seed(4);
        let mut model = VqModel::new(&tiny_cfg(), Ablation::default(), &mut rng).unwrap();
        for w in model.enc_w.iter_mut().chain(model.enc_b.iter_mut()) {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let v = model.encode(&x).unwrap();
        assert!(v.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_linear_layer_reads_weight_columns() {
        // No hidden layers: encoder is one linear map W (R x D), zero bias.
        let mut rng = Rng::from_seed(5);
        let cfg = VqConfig { encoder_hidden_dims: vec![], ..tiny_cfg() };
        let mut model = VqModel::new(&cfg, Ablation::default(), &mut rng).unwrap();
        model.enc_w[0] = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        model.enc_b[0] = Tensor::zeros(vec![2]).with_grad();
        // X row = unit vector e_1 -> V row = column 1 of W.
        let v = model.encode(&t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(v.data(), &[2.0, 4.0]);
    }

    #[test]
    fn reconstruct_base_examples() {
        let mut rng = Rng::from_seed(6);
        let cfg = VqConfig { num_channels: 2, rank: 1, ..tiny_cfg() };
        let mut model = VqModel::new(&cfg, Ablation::default(), &mut rng).unwrap();
        model.basis[0] = t(&[2, 1], &[1.0, 2.0]).with_grad();
        let vhat = t(&[2, 1], &[3.0, 4.0]);
        let base = model.reconstruct_base(None, &vhat).unwrap();
        assert_eq!(base.shape(), &[2, 2]);
        assert_eq!(base.data(), &[3.0, 4.0, 6.0, 8.0]);

        let zeros = model.reconstruct_base(None, &Tensor::zeros(vec![3, 1])).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruct_base_matches_triple_loop() {
        let mut rng = Rng::from_seed(7);
        let cfg = VqConfig { num_channels: 3, rank: 2, ..tiny_cfg() };
        let mut model = VqModel::new(&cfg, Ablation::default(), &mut rng).unwrap();
        let u = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        model.basis[0] = u.clone().with_grad();
        let vhat = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let base = model.reconstruct_base(None, &vhat).unwrap();
        for i in 0..3 {
            for tt in 0..4 {
                let mut want = 0.0;
                for k in 0..2 {
                    want += u.at2(i, k) * vhat.at2(tt, k);
                }
                assert!((base.at2(i, tt) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_decoder_is_identity_and_shape_preserving() {
        let mut rng = Rng::from_seed(8);
        let model = VqModel::new(&tiny_cfg(), Ablation::default(), &mut rng).unwrap();
        for t_len in [1usize, 2, 7] {
            let base = Tensor::randn(vec![2, t_len], 1.0, &mut rng);
            let refined = model.refine(&base).unwrap();
            assert_eq!(refined.shape(), base.shape());
            // Zero-initialized projection layer -> exact identity at init.
            assert_eq!(refined.data(), base.data());
        }
    }

    #[test]
    fn no_residual_refine_is_identity_always() {
        let mut rng = Rng::from_seed(9);
        let ab = Ablation { no_residual: true, no_basis: false };
        let mut model = VqModel::new(&tiny_cfg(), ab, &mut rng).unwrap();
        // Perturb decoder weights; refine must still be the identity.
        for w in model.dec_w.iter_mut() {
            for v in w.data_mut() {
                *v = 1.0;
            }
        }
        let base = Tensor::randn(vec![2, 5], 1.0, &mut rng);
        assert_eq!(model.refine(&base).unwrap().data(), base.data());
    }

    #[test]
    fn vq_loss_zero_when_everything_matches() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.3, 0.7]));
        let cbv = g.constant(t(&[2, 1], &[0.5, 0.9]));
        let v = g.constant(t(&[2, 1], &[0.5, 0.9]));
        let parts = vq_loss(&mut g, x, x, v, cbv, &[0, 1], 0.25).unwrap();
        assert_eq!(g.scalar_value(parts.total), 0.0);
    }

    #[test]
    fn vq_loss_hand_arithmetic_2_25() {
        // 1x1 case: X=[[1]], X̂=[[0]], v=[1], v̂=e_0=[0], β=0.25
        // -> 1 (recon) + 1 (codebook) + 0.25 (commitment) = 2.25.
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], &[1.0]));
        let xhat = g.constant(t(&[1, 1], &[0.0]));
        let v = g.constant(t(&[1, 1], &[1.0]));
        let cbv = g.constant(t(&[1, 1], &[0.0]));
        let parts = vq_loss(&mut g, x, xhat, v, cbv, &[0], 0.25).unwrap();
        assert!((g.scalar_value(parts.recon) - 1.0).abs() < 1e-12);
        assert!((g.scalar_value(parts.codebook) - 1.0).abs() < 1e-12);
        assert!((g.scalar_value(parts.commitment) - 0.25).abs() < 1e-12);
        assert!((g.scalar_value(parts.total) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn vq_loss_rejects_nonpositive_beta() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], &[1.0]));
        let v = g.constant(t(&[1, 1], &[1.0]));
        let cbv = g.constant(t(&[1, 1], &[0.0]));
        let err = vq_loss(&mut g, x, x, v, cbv, &[0], 0.0).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn stop_gradient_isolation() {
        // Codebook term moves only the codebook; commitment only the encoder side.
        let mut rng = Rng::from_seed(10);
        let vt = Tensor::randn(vec![3, 2], 1.0, &mut rng).with_grad();
        let cbt = Tensor::randn(vec![4, 2], 1.0, &mut rng).with_grad();

        let mut g = Graph::new();
        let v = g.leaf(vt.clone());
        let cb = g.leaf(cbt.clone());
        let (cb_term, _) = latent_loss_terms(&mut g, v, cb, &[0, 1, 2], 0.25).unwrap();
        g.backward(cb_term).unwrap();
        assert!(g.grad(v).is_none(), "codebook term must not reach the encoder output");
        assert!(g.grad(cb).is_some());

        let mut g = Graph::new();
        let v = g.leaf(vt);
        let cb = g.leaf(cbt);
        let (_, commit) = latent_loss_terms(&mut g, v, cb, &[0, 1, 2], 0.25).unwrap();
        g.backward(commit).unwrap();
        assert!(g.grad(v).is_some());
        assert!(g.grad(cb).is_none(), "commitment term must not reach the codebook");
    }

    #[test]
    fn straight_through_matches_unquantized_gradient_form() {
        // Gradient of ||X - U V̂ᵀ||² w.r.t. the carrier V under straight-through
        // equals the gradient of ||X - U Wᵀ||² w.r.t. W evaluated at W = V̂.
        let mut rng = Rng::from_seed(11);
        let u_t = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        let v_t = Tensor::randn(vec![4, 2], 1.0, &mut rng).with_grad();
        let vhat_t = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let x_t = Tensor::randn(vec![3, 4], 1.0, &mut rng);

        let mut g1 = Graph::new();
        let u = g1.constant(u_t.clone());
        let v = g1.leaf(v_t.clone());
        let st = g1.straight_through(v, vhat_t.clone()).unwrap();
        let base = g1.matmul(u, st, false, true).unwrap();
        let x = g1.constant(x_t.clone());
        let l = g1.mean_sq_diff(base, x).unwrap();
        g1.backward(l).unwrap();
        let got = g1.grad(v).unwrap().clone();

        let mut g2 = Graph::new();
        let u = g2.constant(u_t);
        let w = g2.leaf(vhat_t.with_grad());
        let base = g2.matmul(u, w, false, true).unwrap();
        let x = g2.constant(x_t);
        let l = g2.mean_sq_diff(base, x).unwrap();
        g2.backward(l).unwrap();
        let want = g2.grad(w).unwrap();

        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_loss_runs_and_matches_parts() {
        let mut rng = Rng::from_seed(12);
        let mut model = VqModel::new(&tiny_cfg(), Ablation::default(), &mut rng).unwrap();
        let w1 = Tensor::randn(vec![6, 2], 1.0, &mut rng);
        let w2 = Tensor::randn(vec![6, 2], 1.0, &mut rng);
        let windows = [(&w1, None), (&w2, None)];
        model.data_init(&windows, &mut rng).unwrap();

        let mut g = Graph::new();
        let loss = model.build_batch_loss(&mut g, &windows).unwrap();
        let total = g.scalar_value(loss.total);
        let parts = g.scalar_value(loss.recon)
            + g.scalar_value(loss.codebook)
            + g.scalar_value(loss.commitment);
        assert!((total - parts).abs() < 1e-10);
        assert!(total.is_finite());
        assert_eq!(loss.assignments.len(), 2);
        assert_eq!(loss.assignments[0].len(), 6);
        g.backward(loss.total).unwrap();
        // Spot-check that gradients reached each parameter family.
        assert!(g.grad(loss.vars.enc_w[0]).is_some());
        assert!(g.grad(loss.vars.codebook).is_some());
        assert!(g.grad(loss.vars.basis[0]).is_some());
    }

    #[test]
    fn basis_index_rules() {
        let mut rng = Rng::from_seed(13);
        let uncond = VqModel::new(&tiny_cfg(), Ablation::default(), &mut rng).unwrap();
        assert_eq!(uncond.basis_index(None).unwrap(), 0);
        assert!(uncond.basis_index(Some(0)).is_err());

        let cfg = VqConfig { num_classes: 3, ..tiny_cfg() };
        let cond = VqModel::new(&cfg, Ablation::default(), &mut rng).unwrap();
        assert_eq!(cond.basis.len(), 3);
        assert_eq!(cond.basis_index(Some(2)).unwrap(), 2);
        assert!(cond.basis_index(Some(3)).is_err());
        assert!(cond.basis_index(None).is_err());

        let ab = Ablation { no_basis: true, no_residual: false };
        let shared = VqModel::new(&cfg, ab, &mut rng).unwrap();
        assert_eq!(shared.basis.len(), 1);
        assert_eq!(shared.basis_index(Some(2)).unwrap(), 0);
    }

    #[test]
    fn data_init_codebook_from_encoder_outputs() {
        let mut rng = Rng::from_seed(14);
        let cfg = VqConfig { codebook_size: 8, ..tiny_cfg() };
        let mut model = VqModel::new(&cfg, Ablation::default(), &mut rng).unwrap();
        let w = Tensor::randn(vec![16, 2], 1.0, &mut rng);
        let windows = [(&w, None)];
        model.data_init(&windows, &mut rng).unwrap();
        // Every codebook entry must match some encoder output row exactly
        // (16 rows >= 8 entries: sampled without replacement, no jitter).
        let v = model.encode(&w).unwrap();
        for k in 0..8 {
            let e = model.codebook.entries.row(k);
            let hit = (0..16).any(|t| v.row(t) == e);
            assert!(hit, "entry {k} is not an encoder output");
        }
    }

    #[test]
    fn decode_tokens_round_trip_shape() {
        let mut rng = Rng::from_seed(15);
        let model = VqModel::new(&tiny_cfg(), Ablation::default(), &mut rng).unwrap();
        let x = Tensor::randn(vec![7, 2], 1.0, &mut rng);
        let seq = model.tokenize_window(&x, None).unwrap();
        assert_eq!(seq.tokens.len(), 7);
        assert!(seq.tokens.iter().all(|&t| t < 4));
        let xhat = model.decode_tokens(&seq.tokens, None).unwrap();
        assert_eq!(xhat.shape(), &[7, 2]);
        assert!(xhat.all_finite());
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        let bad = VqConfig { commitment_beta: 0.0, ..tiny_cfg() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = VqConfig { decoder_kernel_size: 2, ..tiny_cfg() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = VqConfig { num_channels: 0, ..tiny_cfg() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let bad = VqConfig { codebook_size: 1, ..tiny_cfg() };
        assert_eq!(bad.validate().unwrap_err().category(), "config");
    }
}
