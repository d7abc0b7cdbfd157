//! Staged training orchestration, corpus tokenization, and the three
//! inference modes (unconditional, class-conditional, forecasting) tying the
//! quantizing autoencoder and the autoregressive prior together.

use std::path::{Path, PathBuf};

use crate::ar::{ArConfig, ArModel, KvCache, SamplingParams};
use crate::config::TrainingConfig;
use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{Adam, clip_global_norm};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vq::{Ablation, TokenSequence, VqConfig, VqModel};

/// Precomputed token sequences plus the hash of the frozen Stage-I
/// checkpoint they were derived from (staleness guard).
#[derive(Debug, Clone)]
pub struct TokenCorpus {
    pub sequences: Vec<TokenSequence>,
    pub source_vq_checksum: String,
}

/// Per-epoch Stage-I progress record.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Dead codebook entries restarted at the end of this epoch.
    pub restarted: usize,
}

/// Per-epoch Stage-II progress record.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub nll: f64,
}

fn window_batch_refs<'a>(
    windows: &'a [SeriesWindow],
    idx: &[usize],
) -> Vec<(&'a Tensor, Option<usize>)> {
    idx.iter().map(|&i| (&windows[i].data, windows[i].label)).collect()
}

fn check_stage1_inputs(windows: &[SeriesWindow], cfg: &VqConfig) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Input("stage 1 needs at least one training window".into()));
    }
    for w in windows {
        if !w.data.is_matrix() || w.data.cols() != cfg.num_channels {
            return Err(Error::Dimension(format!(
                "training windows must be T x {}, got {:?}",
                cfg.num_channels,
                w.data.shape()
            )));
        }
        match (w.label, cfg.num_classes) {
            (Some(_), 0) => {
                return Err(Error::Config(
                    "labeled windows passed to an unconditional model".into(),
                ))
            }
            (Some(c), n) if c >= n => {
                return Err(Error::Config(format!("label {c} outside {n} classes")))
            }
            (None, n) if n > 0 => {
                return Err(Error::Config(
                    "conditional model requires a label on every window".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Stage I: optimize encoder, per-class basis, codebook, and decoder under
/// the three-term quantization loss. Deterministic given the seed.
pub fn train_stage1(
    windows: &[SeriesWindow],
    vq_cfg: &VqConfig,
    ablation: Ablation,
    tc: &TrainingConfig,
    mut on_epoch: impl FnMut(&Stage1Epoch),
) -> Result<VqModel> {
    vq_cfg.validate()?;
    tc.validate()?;
    check_stage1_inputs(windows, vq_cfg)?;
    let stage = tc.stage1();

    let mut rng = Rng::from_seed(tc.seed).split_str("stage1");
    let mut model = VqModel::new(vq_cfg, ablation, &mut rng)?;
    let pairs: Vec<(&Tensor, Option<usize>)> =
        windows.iter().map(|w| (&w.data, w.label)).collect();
    model.data_init(&pairs, &mut rng)?;

    let mut opt = Adam::new(stage.lr, stage.adam_betas.0, stage.adam_betas.1);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..stage.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(stage.batch_size) {
            let batch = window_batch_refs(windows, chunk);
            let mut g = Graph::new();
            let loss = model.build_batch_loss(&mut g, &batch)?;
            sums[0] += g.scalar_value(loss.total);
            sums[1] += g.scalar_value(loss.recon);
            sums[2] += g.scalar_value(loss.codebook);
            sums[3] += g.scalar_value(loss.commitment);
            batches += 1;
            g.backward(loss.total)?;
            let flat = loss.vars.flat();
            let grads: Vec<Tensor> = flat
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
                })
                .collect();
            opt.step(&mut model.params_mut(), &grads)?;
            for tokens in &loss.assignments {
                model.codebook.note_usage(tokens);
            }
        }
        let n = batches as f64;

        // Restart dead codes between epochs using fresh encoder outputs.
        let restarted = if epoch + 1 < stage.epochs {
            let sample = 256.min(windows.len());
            let picked = rng.sample_without_replacement(windows.len(), sample);
            let mut rows = Vec::with_capacity(sample);
            for &i in &picked {
                rows.push(model.encode(&windows[i].data)?);
            }
            let r = model.cfg.rank;
            let total_rows: usize = rows.iter().map(|t| t.rows()).sum();
            let mut recent = Tensor::zeros(vec![total_rows, r]);
            let mut at = 0;
            for t in &rows {
                recent.data_mut()[at..at + t.len()].copy_from_slice(t.data());
                at += t.len();
            }
            model.codebook.restart_dead_codes(&recent, 1, &mut rng)?
        } else {
            0
        };

        on_epoch(&Stage1Epoch {
            epoch,
            total: sums[0] / n,
            recon: sums[1] / n,
            codebook: sums[2] / n,
            commitment: sums[3] / n,
            restarted,
        });
    }
    Ok(model)
}

/// Pooled reconstruction RMSE of encode→quantize→decode over a window set,
/// in the (normalized) units of the inputs.
pub fn reconstruction_rmse(model: &VqModel, windows: &[SeriesWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Input("rmse needs at least one window".into()));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for w in windows {
        let seq = model.tokenize_window(&w.data, w.label)?;
        let xhat = model.decode_tokens(&seq.tokens, w.label)?;
        for (a, b) in xhat.data().iter().zip(w.data.data()) {
            let d = a - b;
            se += d * d;
        }
        count += w.data.len();
    }
    Ok((se / count as f64).sqrt())
}

/// Encode and quantize every window once with the frozen Stage-I model.
pub fn tokenize_corpus(
    model: &VqModel,
    windows: &[SeriesWindow],
    vq_checksum: &str,
) -> Result<TokenCorpus> {
    if windows.is_empty() {
        return Err(Error::Input("tokenize needs at least one window".into()));
    }
    let mut sequences = Vec::with_capacity(windows.len());
    for w in windows {
        sequences.push(model.tokenize_window(&w.data, w.label)?);
    }
    Ok(TokenCorpus { sequences, source_vq_checksum: vq_checksum.to_string() })
}

fn check_corpus(corpus: &TokenCorpus, ar_cfg: &ArConfig) -> Result<()> {
    if corpus.sequences.is_empty() {
        return Err(Error::Input("stage 2 needs a non-empty corpus".into()));
    }
    for seq in &corpus.sequences {
        if seq.tokens.is_empty() {
            return Err(Error::Input("corpus contains an empty token sequence".into()));
        }
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= ar_cfg.codebook_size) {
            return Err(Error::Config(format!(
                "corpus token {bad} does not fit the configured codebook of {}",
                ar_cfg.codebook_size
            )));
        }
        if let Some(c) = seq.class_label {
            if c >= ar_cfg.num_classes {
                return Err(Error::Config(format!(
                    "corpus class {c} outside {} classes",
                    ar_cfg.num_classes
                )));
            }
        }
    }
    Ok(())
}

/// Stage II: train the autoregressive prior on precomputed token sequences.
/// Stage-I parameters are never touched.
pub fn train_stage2(
    corpus: &TokenCorpus,
    ar_cfg: &ArConfig,
    tc: &TrainingConfig,
    mut on_epoch: impl FnMut(&Stage2Epoch),
) -> Result<ArModel> {
    ar_cfg.validate()?;
    tc.validate()?;
    check_corpus(corpus, ar_cfg)?;
    let stage = tc.stage2();

    let mut rng = Rng::from_seed(tc.seed).split_str("stage2");
    let mut model = ArModel::new(ar_cfg, &mut rng)?;
    let mut drop_rng = rng.split_str("dropout");

    let mut opt = Adam::new(stage.lr, stage.adam_betas.0, stage.adam_betas.1);
    let mut order: Vec<usize> = (0..corpus.sequences.len()).collect();
    for epoch in 0..stage.epochs {
        rng.shuffle(&mut order);
        let mut nll_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<(&[usize], Option<usize>)> = chunk
                .iter()
                .map(|&i| {
                    let s = &corpus.sequences[i];
                    (s.tokens.as_slice(), s.class_label)
                })
                .collect();
            let mut g = Graph::new();
            let (loss, vars) = model.build_batch_nll(&mut g, &batch, Some(&mut drop_rng))?;
            nll_sum += g.scalar_value(loss);
            batches += 1;
            g.backward(loss)?;
            let flat = vars.flat();
            let mut grads: Vec<Tensor> = flat
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
                })
                .collect();
            if let Some(clip) = tc.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            opt.step(&mut model.params_mut(), &grads)?;
        }
        on_epoch(&Stage2Epoch { epoch, nll: nll_sum / batches as f64 });
    }
    Ok(model)
}

/// Mean per-token NLL of a corpus under the model (no dropout), weighted by
/// sequence length.
pub fn corpus_nll(model: &ArModel, corpus: &TokenCorpus) -> Result<f64> {
    check_corpus(corpus, &model.cfg)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in corpus.sequences.chunks(64) {
        let batch: Vec<(&[usize], Option<usize>)> =
            chunk.iter().map(|s| (s.tokens.as_slice(), s.class_label)).collect();
        let mut g = Graph::new();
        let (loss, _) = model.build_batch_nll(&mut g, &batch, None)?;
        let n: usize = chunk.iter().map(|s| s.tokens.len()).sum();
        total += g.scalar_value(loss) * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

fn check_pair(vq: &VqModel, ar: &ArModel) -> Result<()> {
    if vq.cfg.codebook_size != ar.cfg.codebook_size {
        return Err(Error::Config(format!(
            "codebook size mismatch: vq {} vs ar {}",
            vq.cfg.codebook_size, ar.cfg.codebook_size
        )));
    }
    if vq.cfg.num_classes != ar.cfg.num_classes {
        return Err(Error::Config(format!(
            "class count mismatch: vq {} vs ar {}",
            vq.cfg.num_classes, ar.cfg.num_classes
        )));
    }
    Ok(())
}

/// Unconditional or class-conditional generation: prefill with BOS or the
/// class token, sample `length` codebook tokens, decode to a series. The
/// output is in normalized units.
pub fn generate(
    vq: &VqModel,
    ar: &ArModel,
    length: usize,
    class_label: Option<usize>,
    sp: &SamplingParams,
) -> Result<Tensor> {
    check_pair(vq, ar)?;
    sp.validate()?;
    if length == 0 {
        return Err(Error::Input("generation length must be at least 1".into()));
    }
    if length > ar.cfg.max_context - 1 {
        return Err(Error::Length(format!(
            "length {length} exceeds max_context − 1 = {}",
            ar.cfg.max_context - 1
        )));
    }
    let mut rng = Rng::from_seed(sp.seed).split_str("generate");
    let (mut cache, mut logits) = ar.prefill(class_label)?;
    let mut tokens = Vec::with_capacity(length);
    for i in 0..length {
        let tok = ar.sample_next(&logits, sp, &mut rng)?;
        tokens.push(tok);
        if i + 1 < length {
            logits = ar.step_decode(&mut cache, tok)?;
        }
    }
    vq.decode_tokens(&tokens, class_label)
}

/// Feed one token into the cache, sliding the context window first if full:
/// the oldest half of the running history is dropped and the cache rebuilt.
fn feed_sliding(
    ar: &ArModel,
    cache: &mut KvCache,
    history: &mut Vec<usize>,
    class_label: Option<usize>,
    token: usize,
) -> Result<Vec<f64>> {
    if cache.current_len() + 1 > ar.cfg.max_context {
        let keep = history.len() - history.len() / 2;
        let tail: Vec<usize> = history[history.len() - keep..].to_vec();
        let (mut fresh, mut logits) = ar.prefill(class_label)?;
        for &t in &tail {
            logits = ar.step_decode(&mut fresh, t)?;
        }
        let _ = logits;
        *cache = fresh;
        *history = tail;
    }
    let logits = ar.step_decode(cache, token)?;
    history.push(token);
    Ok(logits)
}

/// Forecast: encode the observed window to prefix tokens, sample `horizon`
/// continuation tokens (sliding the context when it fills), decode the full
/// token sequence, and return the last `horizon` steps in normalized units.
pub fn forecast(
    vq: &VqModel,
    ar: &ArModel,
    observed: &Tensor,
    horizon: usize,
    class_label: Option<usize>,
    sp: &SamplingParams,
) -> Result<Tensor> {
    check_pair(vq, ar)?;
    sp.validate()?;
    if !observed.is_matrix() || observed.rows() == 0 {
        return Err(Error::Input("forecast needs a non-empty observed window".into()));
    }
    if horizon == 0 {
        return Err(Error::Input("forecast horizon must be at least 1".into()));
    }
    let prefix_tokens = vq.tokenize_window(observed, class_label)?.tokens;

    let mut rng = Rng::from_seed(sp.seed).split_str("forecast");
    let (mut cache, mut logits) = ar.prefill(class_label)?;
    let mut history: Vec<usize> = Vec::new();
    for &t in &prefix_tokens {
        logits = feed_sliding(ar, &mut cache, &mut history, class_label, t)?;
    }
    let mut all = prefix_tokens;
    for i in 0..horizon {
        let tok = ar.sample_next(&logits, sp, &mut rng)?;
        all.push(tok);
        if i + 1 < horizon {
            logits = feed_sliding(ar, &mut cache, &mut history, class_label, tok)?;
        }
    }
    let decoded = vq.decode_tokens(&all, class_label)?;
    let d = decoded.cols();
    let t_total = decoded.rows();
    let mut out = Tensor::zeros(vec![horizon, d]);
    out.data_mut()
        .copy_from_slice(&decoded.data()[(t_total - horizon) * d..]);
    Ok(out)
}

/// Exclusive lock on a training directory; released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "another training job holds the lock {}",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
