//! Binary checkpoint persistence and the token-corpus sidecar format.
//!
//! Layout: 8-byte magic `FARTS001`, a u64 little-endian length-prefixed JSON
//! metadata blob (config, seed, stage, tensor hash, normalization state),
//! then named tensor blocks: name length (u64 LE), name bytes, rank (u64 LE),
//! dims (u64 LE each), f32 LE payload. Saves are atomic; loads verify the
//! magic and the SHA-256 of the tensor section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ar::{ArConfig, ArModel};
use crate::data::{atomic_write, NormStats};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vq::{Ablation, TokenSequence, VqConfig, VqModel};

pub const MAGIC: &[u8; 8] = b"FARTS001";

/// Checkpoint metadata. Serialized as JSON with a fixed field order so a
/// save→load→save round trip is byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Which artifact this is: "vq" or "ar".
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_max: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_counts: Option<Vec<u64>>,
    /// For Stage-II checkpoints: the tensor hash of the Stage-I checkpoint
    /// whose tokens this model was trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_vq_hash: Option<String>,
    /// Hex SHA-256 of the tensor section; recomputed and checked on load.
    pub tensor_hash: String,
}

impl CheckpointMeta {
    pub fn new(stage: &str, seed: u64, config: serde_json::Value) -> Self {
        CheckpointMeta {
            stage: stage.to_string(),
            seed,
            config,
            ablation: None,
            norm_min: None,
            norm_max: None,
            channel_names: None,
            window_len: None,
            usage_counts: None,
            paired_vq_hash: None,
            tensor_hash: String::new(),
        }
    }

    pub fn norm_stats(&self) -> Option<NormStats> {
        match (&self.norm_min, &self.norm_max) {
            (Some(min), Some(max)) if min.len() == max.len() => {
                Some(NormStats { min: min.clone(), max: max.clone() })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Named tensors in a stable order.
    pub tensors: Vec<(String, Tensor)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_section(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Serialize and write atomically. Returns the tensor-section hash written
/// into the metadata.
pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<String> {
    let section = tensor_section(tensors);
    let hash = sha256_hex(&section);
    let mut meta = meta.clone();
    meta.tensor_hash = hash.clone();
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Format(format!("metadata serialization: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + meta_json.len() + section.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&section);
    atomic_write(path, &bytes)?;
    Ok(hash)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(8).map_err(|_| Error::Format("file shorter than magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let meta_len = cur.take_u64()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Format(format!("metadata JSON: {e}")))?;

    let section = &bytes[cur.pos..];
    let hash = sha256_hex(section);
    if hash != meta.tensor_hash {
        return Err(Error::Corruption(format!(
            "tensor hash mismatch: file {hash}, metadata {}",
            meta.tensor_hash
        )));
    }

    let mut tensors = Vec::new();
    while !cur.done() {
        let name_len = cur.take_u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.take_u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = cur.take_u64()? as usize;
            n = n.saturating_mul(d);
            shape.push(d);
        }
        let payload = cur.take(n * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { meta, tensors })
}

fn install_tensors(
    names: Vec<String>,
    mut params: Vec<&mut Tensor>,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    if names.len() != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model wants {}",
            tensors.len(),
            names.len()
        )));
    }
    for ((want, slot), (got, t)) in names.iter().zip(params.iter_mut()).zip(tensors) {
        if want != got {
            return Err(Error::Format(format!("tensor order mismatch: {got:?} where {want:?} expected")));
        }
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {want}: shape {:?} in file, model wants {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Everything needed to use a Stage-I checkpoint downstream.
#[derive(Debug, Clone)]
pub struct VqBundle {
    pub model: VqModel,
    pub meta: CheckpointMeta,
}

#[allow(clippy::too_many_arguments)]
pub fn save_vq_checkpoint(
    path: &Path,
    model: &VqModel,
    seed: u64,
    norm: Option<&NormStats>,
    channel_names: Option<&[String]>,
    window_len: Option<usize>,
) -> Result<String> {
    let config = serde_json::to_value(&model.cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    let mut meta = CheckpointMeta::new("vq", seed, config);
    meta.ablation = Some(model.ablation);
    if let Some(n) = norm {
        meta.norm_min = Some(n.min.clone());
        meta.norm_max = Some(n.max.clone());
    }
    meta.channel_names = channel_names.map(|c| c.to_vec());
    meta.window_len = window_len;
    meta.usage_counts = Some(model.codebook.usage_counts.clone());
    let tensors: Vec<(String, Tensor)> = model
        .param_names()
        .into_iter()
        .zip(model.params().into_iter().cloned())
        .collect();
    save_checkpoint(path, &meta, &tensors)
}

pub fn load_vq_checkpoint(path: &Path) -> Result<VqBundle> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.stage != "vq" {
        return Err(Error::Format(format!("expected a vq checkpoint, found stage {:?}", ckpt.meta.stage)));
    }
    let cfg: VqConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Format(format!("vq config: {e}")))?;
    let ablation = ckpt.meta.ablation.unwrap_or_default();
    let mut model = VqModel::new(&cfg, ablation, &mut Rng::from_seed(ckpt.meta.seed))?;
    install_tensors(model.param_names(), model.params_mut(), &ckpt.tensors)?;
    if let Some(usage) = &ckpt.meta.usage_counts {
        if usage.len() != model.codebook.size() {
            return Err(Error::Format(format!(
                "{} usage counts for codebook of {}",
                usage.len(),
                model.codebook.size()
            )));
        }
        model.codebook.usage_counts = usage.clone();
    }
    Ok(VqBundle { model, meta: ckpt.meta })
}

#[derive(Debug, Clone)]
pub struct ArBundle {
    pub model: ArModel,
    pub meta: CheckpointMeta,
}

pub fn save_ar_checkpoint(
    path: &Path,
    model: &ArModel,
    seed: u64,
    paired_vq_hash: Option<&str>,
) -> Result<String> {
    let config = serde_json::to_value(&model.cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    let mut meta = CheckpointMeta::new("ar", seed, config);
    meta.paired_vq_hash = paired_vq_hash.map(|s| s.to_string());
    let tensors: Vec<(String, Tensor)> = model
        .param_names()
        .into_iter()
        .zip(model.params().into_iter().cloned())
        .collect();
    save_checkpoint(path, &meta, &tensors)
}

pub fn load_ar_checkpoint(path: &Path) -> Result<ArBundle> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.stage != "ar" {
        return Err(Error::Format(format!("expected an ar checkpoint, found stage {:?}", ckpt.meta.stage)));
    }
    let cfg: ArConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Format(format!("ar config: {e}")))?;
    let mut model = ArModel::new(&cfg, &mut Rng::from_seed(ckpt.meta.seed))?;
    install_tensors(model.param_names(), model.params_mut(), &ckpt.tensors)?;
    Ok(ArBundle { model, meta: ckpt.meta })
}

/// Sidecar for a token corpus: the corpus content hash plus the tensor hash
/// of the Stage-I checkpoint that produced the tokens (staleness detection).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSidecar {
    pub corpus_sha256: String,
    pub vq_tensor_hash: String,
    pub num_sequences: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    tokens: Vec<usize>,
    class: Option<usize>,
}

pub fn corpus_sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".sha256");
    std::path::PathBuf::from(os)
}

/// Write a token corpus as JSON-lines plus its sidecar hash file.
pub fn save_corpus(path: &Path, sequences: &[TokenSequence], vq_tensor_hash: &str) -> Result<()> {
    let mut body = String::new();
    for seq in sequences {
        let line = CorpusLine { tokens: seq.tokens.clone(), class: seq.class_label };
        body.push_str(
            &serde_json::to_string(&line).map_err(|e| Error::Format(format!("corpus line: {e}")))?,
        );
        body.push('\n');
    }
    atomic_write(path, body.as_bytes())?;
    let sidecar = CorpusSidecar {
        corpus_sha256: sha256_hex(body.as_bytes()),
        vq_tensor_hash: vq_tensor_hash.to_string(),
        num_sequences: sequences.len(),
    };
    let mut sidecar_json = serde_json::to_vec(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    sidecar_json.push(b'\n');
    atomic_write(&corpus_sidecar_path(path), &sidecar_json)
}

/// Load a token corpus, verifying it against its sidecar.
pub fn load_corpus(path: &Path) -> Result<(Vec<TokenSequence>, CorpusSidecar)> {
    let body = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    let sidecar_bytes = std::fs::read(corpus_sidecar_path(path)).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Checksum(format!("missing sidecar for {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let sidecar: CorpusSidecar = serde_json::from_slice(&sidecar_bytes)
        .map_err(|e| Error::Format(format!("sidecar JSON: {e}")))?;
    if sha256_hex(body.as_bytes()) != sidecar.corpus_sha256 {
        return Err(Error::Checksum(format!("corpus {} does not match its sidecar hash", path.display())));
    }
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: i + 1, message: format!("corpus line: {e}") })?;
        out.push(TokenSequence { tokens: parsed.tokens, class_label: parsed.class });
    }
    if out.len() != sidecar.num_sequences {
        return Err(Error::Checksum(format!(
            "corpus has {} sequences, sidecar records {}",
            out.len(),
            sidecar.num_sequences
        )));
    }
    Ok((out, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::ArConfig;
    use crate::vq::VqConfig;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("tsfactor_ckpt_{}_{name}", std::process::id()))
    }

    fn demo_tensors() -> Vec<(String, Tensor)> {
        vec![
            ("alpha".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()),
            ("beta".into(), Tensor::new(vec![3], vec![0.5, 1.5, -0.125]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_bit_identical() {
        let p = tmp("roundtrip.bin");
        let meta = CheckpointMeta::new("vq", 7, serde_json::json!({"k": 1}));
        save_checkpoint(&p, &meta, &demo_tensors()).unwrap();
        let first = std::fs::read(&p).unwrap();

        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.meta.seed, 7);
        assert_eq!(loaded.tensors.len(), 2);
        // All demo values are exactly representable in f32.
        assert_eq!(loaded.tensors[0].1.data(), demo_tensors()[0].1.data());

        // Re-saving the loaded checkpoint reproduces the file byte-for-byte.
        save_checkpoint(&p, &loaded.meta, &loaded.tensors).unwrap();
        let second = std::fs::read(&p).unwrap();
        assert_eq!(first, second);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let p = tmp("magic.bin");
        let meta = CheckpointMeta::new("vq", 1, serde_json::Value::Null);
        save_checkpoint(&p, &meta, &demo_tensors()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[..8].copy_from_slice(b"XXXX0000");
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap_err().category(), "format");
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn truncation_is_corruption_error() {
        let p = tmp("trunc.bin");
        let meta = CheckpointMeta::new("vq", 1, serde_json::Value::Null);
        save_checkpoint(&p, &meta, &demo_tensors()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap_err().category(), "corruption");
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn bit_flip_is_corruption_error() {
        let p = tmp("flip.bin");
        let meta = CheckpointMeta::new("vq", 1, serde_json::Value::Null);
        save_checkpoint(&p, &meta, &demo_tensors()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap_err().category(), "corruption");
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn missing_file_is_missing_checkpoint() {
        let err = load_checkpoint(Path::new("/nonexistent/nowhere.bin")).unwrap_err();
        assert_eq!(err.category(), "missing_checkpoint");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn vq_model_round_trip() {
        let p = tmp("vq.bin");
        let cfg = VqConfig {
            num_channels: 3,
            rank: 2,
            codebook_size: 5,
            encoder_hidden_dims: vec![6],
            decoder_channels: 4,
            num_classes: 2,
            ..VqConfig::default()
        };
        let mut rng = Rng::from_seed(11);
        let mut model = VqModel::new(&cfg, Ablation::default(), &mut rng).unwrap();
        model.codebook.usage_counts = vec![3, 0, 1, 0, 9];
        let norm = NormStats { min: vec![0.0, -1.0, 2.0], max: vec![1.0, 4.0, 2.0] };
        let names = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        save_vq_checkpoint(&p, &model, 11, Some(&norm), Some(&names), Some(24)).unwrap();

        let bundle = load_vq_checkpoint(&p).unwrap();
        assert_eq!(bundle.meta.window_len, Some(24));
        assert_eq!(bundle.meta.channel_names.as_deref(), Some(names.as_slice()));
        assert_eq!(bundle.meta.norm_stats().unwrap(), norm);
        assert_eq!(bundle.model.codebook.usage_counts, model.codebook.usage_counts);
        for (a, b) in bundle.model.params().iter().zip(model.params()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64, "f32 wire round trip");
            }
        }
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn ar_model_round_trip() {
        let p = tmp("ar.bin");
        let cfg = ArConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 16,
            codebook_size: 7,
            num_classes: 1,
            max_context: 16,
            ..ArConfig::default()
        };
        let mut rng = Rng::from_seed(13);
        let model = ArModel::new(&cfg, &mut rng).unwrap();
        save_ar_checkpoint(&p, &model, 13, Some("abc123")).unwrap();
        let bundle = load_ar_checkpoint(&p).unwrap();
        assert_eq!(bundle.meta.paired_vq_hash.as_deref(), Some("abc123"));
        assert_eq!(bundle.model.cfg.vocab(), cfg.vocab());
        for (a, b) in bundle.model.params().iter().zip(model.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // Loading a vq loader on an ar file is a format error.
        assert_eq!(load_vq_checkpoint(&p).unwrap_err().category(), "format");
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn corpus_round_trip_and_tamper_detection() {
        let p = tmp("corpus.jsonl");
        let seqs = vec![
            TokenSequence { tokens: vec![1, 2, 3], class_label: Some(0) },
            TokenSequence { tokens: vec![4, 5], class_label: None },
        ];
        save_corpus(&p, &seqs, "deadbeef").unwrap();
        let (loaded, sidecar) = load_corpus(&p).unwrap();
        assert_eq!(loaded, seqs);
        assert_eq!(sidecar.vq_tensor_hash, "deadbeef");
        assert_eq!(sidecar.num_sequences, 2);

        // Tampering with the corpus body trips the checksum.
        let mut body = std::fs::read_to_string(&p).unwrap();
        body = body.replace('4', "9");
        std::fs::write(&p, body).unwrap();
        assert_eq!(load_corpus(&p).unwrap_err().category(), "checksum");
        std::fs::remove_file(corpus_sidecar_path(&p)).ok();
        std::fs::remove_file(&p).ok();
    }
}
