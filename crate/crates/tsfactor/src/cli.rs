//! Command-line surface: staged training, tokenization, the three inference
//! modes, evaluation, checkpoint inspection, and a generation benchmark.
//!
//! Conventions shared by every subcommand:
//! - stdout carries one-line JSON records (per-epoch progress, final summary);
//! - stderr carries human-readable logs, and on failure a single machine-
//!   parsable line `{"error": <category>, "message": …}`;
//! - all artifacts land under the config's `output_dir`;
//! - re-running a command with identical config, data, and seed reproduces
//!   its output files byte for byte (`bench` wall-clock times excepted).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::ar::SamplingParams;
use crate::checkpoint::{
    ArBundle, CheckpointMeta, VqBundle, load_ar_checkpoint, load_corpus, load_vq_checkpoint,
    save_ar_checkpoint, save_corpus, save_vq_checkpoint,
};
use crate::config::RunConfig;
use crate::data::{
    Dataset, NormStats, atomic_write, load_csv, synth_lowrank, windows_from_csv, windows_to_csv,
};
use crate::error::{Error, Result};
use crate::metrics::{AuxTrainConfig, EmbedderConfig, evaluate_all, forecast_errors};
use crate::pipeline::{
    DirLock, TokenCorpus, forecast, generate, reconstruction_rmse, tokenize_corpus, train_stage1,
    train_stage2,
};
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(
    name = "tsfactor",
    about = "Factorized vector-quantized time series generation",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the stage-one quantizing autoencoder; writes vq.ckpt and a loss CSV.
    TrainVq { config: PathBuf },
    /// Tokenize the training windows with a frozen stage-one checkpoint.
    Tokenize { config: PathBuf },
    /// Train the stage-two autoregressive prior; writes ar.ckpt and an NLL CSV.
    TrainAr { config: PathBuf },
    /// Sample new series from the trained pair.
    Generate {
        config: PathBuf,
        /// Steps per sample (default: the configured window length).
        #[arg(long)]
        length: Option<usize>,
        /// Class label for conditional models.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 1)]
        num_samples: usize,
        /// Overrides the sampling seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        /// Keep outputs in normalized units instead of raw units.
        #[arg(long)]
        normalized: bool,
    },
    /// Continue an observed window by `horizon` steps.
    Forecast {
        config: PathBuf,
        /// CSV with the observed rows (same layout as the training data).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Optional ground-truth CSV (`horizon` rows); enables RMSE/MAE output.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        normalized: bool,
    },
    /// Score a directory of synthetic windows against real ones.
    Evaluate {
        config: PathBuf,
        /// Directory of real window CSVs (window,step,… layout).
        #[arg(long)]
        real: PathBuf,
        /// Directory of synthetic window CSVs.
        #[arg(long)]
        synth: PathBuf,
        /// Overrides the configured repeat count.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Dump basis columns, codebook usage, and token traces from a stage-one checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Time generation at several lengths; writes a wall-clock CSV.
    Bench {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "24,48,96")]
        lengths: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parse arguments, dispatch, and map failures to the documented exit codes
/// (2 missing checkpoint, 3 config, 4 numeric, 1 anything else) with one
/// machine-parsable error line on stderr.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({"error": e.category(), "message": e.to_string()});
            eprintln!("{line}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::TrainVq { config } => cmd_train_vq(&config),
        Command::Tokenize { config } => cmd_tokenize(&config),
        Command::TrainAr { config } => cmd_train_ar(&config),
        Command::Generate {
            config,
            length,
            class,
            num_samples,
            seed,
            temperature,
            top_k,
            top_p,
            normalized,
        } => {
            let overrides = SamplingOverrides { seed, temperature, top_k, top_p };
            cmd_generate(&config, length, class, num_samples, &overrides, normalized)
        }
        Command::Forecast {
            config,
            input,
            horizon,
            truth,
            class,
            seed,
            temperature,
            top_k,
            top_p,
            normalized,
        } => {
            let overrides = SamplingOverrides { seed, temperature, top_k, top_p };
            cmd_forecast(&config, &input, horizon, truth.as_deref(), class, &overrides, normalized)
        }
        Command::Evaluate { config, real, synth, repeats } => {
            cmd_evaluate(&config, &real, &synth, repeats)
        }
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
        Command::Bench { config, lengths, seed } => cmd_bench(&config, &lengths, seed),
    }
}

#[derive(Debug, Default)]
struct SamplingOverrides {
    seed: Option<u64>,
    temperature: Option<f64>,
    top_k: Option<usize>,
    top_p: Option<f64>,
}

impl SamplingOverrides {
    fn apply(&self, base: &SamplingParams) -> Result<SamplingParams> {
        let sp = SamplingParams {
            temperature: self.temperature.unwrap_or(base.temperature),
            top_k: self.top_k.unwrap_or(base.top_k),
            top_p: self.top_p.unwrap_or(base.top_p),
            seed: self.seed.unwrap_or(base.seed),
        };
        sp.validate()?;
        Ok(sp)
    }
}

fn out_dir(rc: &RunConfig) -> PathBuf {
    PathBuf::from(&rc.output_dir)
}

/// Load the configured data source and fit normalization on its training split.
fn load_dataset(rc: &RunConfig) -> Result<Dataset> {
    let mut ds = match (&rc.data.csv_path, &rc.data.synth) {
        (Some(p), None) => load_csv(Path::new(p), rc.data.has_header, rc.data.drop_first_col)?,
        (None, Some(s)) => synth_lowrank(
            s.seed,
            s.channels,
            rc.data.window_len,
            s.rank,
            s.n_windows,
            s.n_prototypes,
            s.noise_std,
            s.n_classes,
        )?,
        _ => return Err(Error::Config("choose one data source: csv_path or synth".into())),
    };
    ds.set_train_frac(rc.data.train_frac)?;
    ds.fit_normalization()?;
    Ok(ds)
}

fn progress_line<T: Serialize>(record: &T) {
    // A newtype over numbers and strings; serialization cannot fail.
    println!("{}", serde_json::to_string(record).expect("progress record serializes"));
}

fn norm_stats_from_meta(meta: &CheckpointMeta) -> Result<NormStats> {
    match (&meta.norm_min, &meta.norm_max) {
        (Some(min), Some(max)) => Ok(NormStats { min: min.clone(), max: max.clone() }),
        _ => Err(Error::State(
            "checkpoint carries no normalization statistics; pass --normalized".into(),
        )),
    }
}

fn channel_names_from_meta(meta: &CheckpointMeta, d: usize) -> Vec<String> {
    match &meta.channel_names {
        Some(names) if names.len() == d => names.clone(),
        _ => (0..d).map(|j| format!("c{j}")).collect(),
    }
}

fn load_pair(rc: &RunConfig) -> Result<(VqBundle, ArBundle)> {
    let dir = out_dir(rc);
    let vq = load_vq_checkpoint(&dir.join("vq.ckpt"))?;
    let ar = load_ar_checkpoint(&dir.join("ar.ckpt"))?;
    if let Some(paired) = &ar.meta.paired_vq_hash {
        if paired != &vq.meta.tensor_hash {
            return Err(Error::Checksum(
                "ar.ckpt was trained against a different vq.ckpt; retokenize and retrain".into(),
            ));
        }
    }
    Ok((vq, ar))
}

#[derive(Serialize)]
struct Stage1Line {
    stage: u8,
    epoch: usize,
    total: f64,
    recon: f64,
    codebook: f64,
    commitment: f64,
    restarted: usize,
}

fn cmd_train_vq(config_path: &Path) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let ds = load_dataset(&rc)?;
    let rc = rc.with_channels(ds.channels())?;
    if ds.n_classes != rc.vq.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes but the model is configured for {}",
            ds.n_classes, rc.vq.num_classes
        )));
    }
    let windows = ds.train_windows(rc.data.window_len, rc.data.stride)?;
    eprintln!(
        "[train-vq] {} training windows of {}x{} from {:?}",
        windows.len(),
        rc.data.window_len,
        ds.channels(),
        ds.name
    );

    let dir = out_dir(&rc);
    let _lock = DirLock::acquire(&dir)?;
    let mut loss_csv = String::from("epoch,total,recon,codebook,commitment\n");
    let model = train_stage1(&windows, &rc.vq, rc.ablation, &rc.training, |e| {
        progress_line(&Stage1Line {
            stage: 1,
            epoch: e.epoch,
            total: e.total,
            recon: e.recon,
            codebook: e.codebook,
            commitment: e.commitment,
            restarted: e.restarted,
        });
        loss_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.total, e.recon, e.codebook, e.commitment
        ));
    })?;

    let rmse = reconstruction_rmse(&model, &windows)?;
    let hash = save_vq_checkpoint(
        &dir.join("vq.ckpt"),
        &model,
        rc.training.seed,
        Some(ds.stats()?),
        Some(&ds.channel_names),
        Some(rc.data.window_len),
    )?;
    atomic_write(&dir.join("stage1_loss.csv"), loss_csv.as_bytes())?;
    eprintln!("[train-vq] reconstruction rmse {rmse:.6} (normalized units)");
    eprintln!("[train-vq] wrote {} (tensors {hash})", dir.join("vq.ckpt").display());
    progress_line(&serde_json::json!({
        "done": "train-vq", "windows": windows.len(), "rmse": rmse, "tensor_hash": hash,
    }));
    Ok(())
}

fn cmd_tokenize(config_path: &Path) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let ds = load_dataset(&rc)?;
    let rc = rc.with_channels(ds.channels())?;
    let windows = ds.train_windows(rc.data.window_len, rc.data.stride)?;

    let dir = out_dir(&rc);
    let vq = load_vq_checkpoint(&dir.join("vq.ckpt"))?;
    let corpus = tokenize_corpus(&vq.model, &windows, &vq.meta.tensor_hash)?;
    let path = dir.join("corpus.jsonl");
    save_corpus(&path, &corpus.sequences, &corpus.source_vq_checksum)?;
    eprintln!(
        "[tokenize] {} sequences ({} tokens each) -> {}",
        corpus.sequences.len(),
        corpus.sequences.first().map(|s| s.tokens.len()).unwrap_or(0),
        path.display()
    );
    progress_line(&serde_json::json!({
        "done": "tokenize",
        "sequences": corpus.sequences.len(),
        "source_vq": corpus.source_vq_checksum,
    }));
    Ok(())
}

#[derive(Serialize)]
struct Stage2Line {
    stage: u8,
    epoch: usize,
    nll: f64,
}

fn cmd_train_ar(config_path: &Path) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let dir = out_dir(&rc);
    let vq = load_vq_checkpoint(&dir.join("vq.ckpt"))?;
    let (sequences, sidecar) = load_corpus(&dir.join("corpus.jsonl"))?;
    if sidecar.vq_tensor_hash != vq.meta.tensor_hash {
        return Err(Error::Checksum(
            "token corpus was built from a different vq.ckpt; re-run tokenize".into(),
        ));
    }
    let corpus = TokenCorpus { sequences, source_vq_checksum: sidecar.vq_tensor_hash };
    eprintln!("[train-ar] {} token sequences", corpus.sequences.len());

    let _lock = DirLock::acquire(&dir)?;
    let mut nll_csv = String::from("epoch,nll\n");
    let model = train_stage2(&corpus, &rc.ar, &rc.training, |e| {
        progress_line(&Stage2Line { stage: 2, epoch: e.epoch, nll: e.nll });
        nll_csv.push_str(&format!("{},{}\n", e.epoch, e.nll));
    })?;

    let hash = save_ar_checkpoint(
        &dir.join("ar.ckpt"),
        &model,
        rc.training.seed,
        Some(&vq.meta.tensor_hash),
    )?;
    atomic_write(&dir.join("stage2_nll.csv"), nll_csv.as_bytes())?;
    eprintln!("[train-ar] wrote {} (tensors {hash})", dir.join("ar.ckpt").display());
    progress_line(&serde_json::json!({"done": "train-ar", "tensor_hash": hash}));
    Ok(())
}

fn cmd_generate(
    config_path: &Path,
    length: Option<usize>,
    class: Option<usize>,
    num_samples: usize,
    overrides: &SamplingOverrides,
    normalized: bool,
) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    if num_samples == 0 {
        return Err(Error::Input("num_samples must be at least 1".into()));
    }
    let (vq, ar) = load_pair(&rc)?;
    let length = length.unwrap_or(rc.data.window_len);
    let sp = overrides.apply(&rc.sampling)?;
    let d = vq.model.cfg.num_channels;
    let names = channel_names_from_meta(&vq.meta, d);
    let stats = if normalized { None } else { Some(norm_stats_from_meta(&vq.meta)?) };

    let dir = out_dir(&rc);
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        // Sample i draws from its own stream so any one file is reproducible
        // in isolation via --seed.
        let sp_i = SamplingParams { seed: sp.seed.wrapping_add(i as u64), ..sp.clone() };
        let y = generate(&vq.model, &ar.model, length, class, &sp_i)?;
        let y = match &stats {
            Some(s) => s.denormalize(&y)?,
            None => y,
        };
        let path = dir.join(format!("generated_{i:03}.csv"));
        atomic_write(&path, windows_to_csv(&[y], &names)?.as_bytes())?;
        files.push(path.display().to_string());
    }
    eprintln!("[generate] {num_samples} samples of {length} steps -> {}", dir.display());
    progress_line(&serde_json::json!({
        "done": "generate", "samples": num_samples, "length": length, "files": files,
    }));
    Ok(())
}

fn cmd_forecast(
    config_path: &Path,
    input: &Path,
    horizon: usize,
    truth: Option<&Path>,
    class: Option<usize>,
    overrides: &SamplingOverrides,
    normalized: bool,
) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let (vq, ar) = load_pair(&rc)?;
    let sp = overrides.apply(&rc.sampling)?;
    let stats = norm_stats_from_meta(&vq.meta)?;
    let d = vq.model.cfg.num_channels;
    let names = channel_names_from_meta(&vq.meta, d);

    let observed = load_csv(input, rc.data.has_header, rc.data.drop_first_col)?;
    let obs_norm = stats.normalize(&observed.raw)?;
    eprintln!(
        "[forecast] {} observed rows -> horizon {horizon}",
        observed.raw.rows()
    );
    let pred_norm = forecast(&vq.model, &ar.model, &obs_norm, horizon, class, &sp)?;

    let dir = out_dir(&rc);
    let pred_out = if normalized { pred_norm.clone() } else { stats.denormalize(&pred_norm)? };
    atomic_write(&dir.join("forecast.csv"), windows_to_csv(&[pred_out], &names)?.as_bytes())?;

    let mut summary = serde_json::json!({"done": "forecast", "horizon": horizon});
    if let Some(tp) = truth {
        let truth_ds = load_csv(tp, rc.data.has_header, rc.data.drop_first_col)?;
        if truth_ds.raw.rows() != horizon {
            return Err(Error::Dimension(format!(
                "truth has {} rows for a horizon of {horizon}",
                truth_ds.raw.rows()
            )));
        }
        // Errors are reported in normalized units, like every other score.
        let truth_norm = stats.normalize(&truth_ds.raw)?;
        let (rmse, mae) = forecast_errors(&pred_norm, &truth_norm)?;
        let metrics = serde_json::json!({
            "rmse": rmse, "mae": mae, "horizon": horizon, "normalized_units": true,
        });
        atomic_write(
            &dir.join("forecast_metrics.json"),
            format!("{:#}\n", metrics).as_bytes(),
        )?;
        summary["rmse"] = serde_json::json!(rmse);
        summary["mae"] = serde_json::json!(mae);
        eprintln!("[forecast] rmse {rmse:.6} mae {mae:.6} (normalized units)");
    }
    progress_line(&summary);
    Ok(())
}

/// Read every `*.csv` in a directory (sorted by name) in the
/// `window,step,…` layout and pool the windows.
fn read_window_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no CSV files in {}", dir.display())));
    }
    let mut windows = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        let (mut ws, _) = windows_from_csv(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        windows.append(&mut ws);
    }
    Ok(windows)
}

/// Min-max normalize both sets with statistics fitted on the real windows,
/// matching the convention that all scores are computed in normalized units.
fn normalize_eval_sets(real: &[Tensor], synth: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let d = real.first().map(|w| w.cols()).unwrap_or(0);
    let total_rows: usize = real.iter().map(|w| w.rows()).sum();
    let mut stacked = Tensor::zeros(vec![total_rows, d]);
    let mut at = 0;
    for w in real {
        stacked.data_mut()[at..at + w.len()].copy_from_slice(w.data());
        at += w.len();
    }
    let stats = NormStats::fit(&stacked)?;
    let norm = |set: &[Tensor]| -> Result<Vec<Tensor>> {
        set.iter().map(|w| stats.normalize(w)).collect()
    };
    Ok((norm(real)?, norm(synth)?))
}

fn cmd_evaluate(
    config_path: &Path,
    real_dir: &Path,
    synth_dir: &Path,
    repeats: Option<usize>,
) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let repeats = repeats.unwrap_or(rc.eval.repeats);
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let real = read_window_dir(real_dir)?;
    let synth = read_window_dir(synth_dir)?;
    eprintln!(
        "[evaluate] {} real vs {} synthetic windows, {repeats} repeats",
        real.len(),
        synth.len()
    );
    let (real, synth) = normalize_eval_sets(&real, &synth)?;

    let aux_cfg = AuxTrainConfig { max_steps: rc.eval.aux_max_steps, ..AuxTrainConfig::default() };
    let emb_cfg = EmbedderConfig {
        embedding_dim: rc.eval.embedding_dim,
        train: aux_cfg.clone(),
        ..EmbedderConfig::default()
    };
    let report = evaluate_all(&real, &synth, rc.training.seed, repeats, &emb_cfg, &aux_cfg)?;

    let dir = out_dir(&rc);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    atomic_write(&dir.join("metrics.json"), format!("{json}\n").as_bytes())?;
    progress_line(&report);
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> Result<()> {
    let vq = load_vq_checkpoint(checkpoint)?;
    let dir = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let model = &vq.model;
    let d = model.cfg.num_channels;
    let r = model.cfg.rank;
    let names = channel_names_from_meta(&vq.meta, d);

    for (c, u) in model.basis.iter().enumerate() {
        let mut csv = String::from("channel");
        for j in 0..r {
            csv.push_str(&format!(",u{j}"));
        }
        csv.push('\n');
        for i in 0..d {
            csv.push_str(&names[i]);
            for j in 0..r {
                csv.push_str(&format!(",{}", u.at2(i, j)));
            }
            csv.push('\n');
        }
        atomic_write(&dir.join(format!("basis_c{c}.csv")), csv.as_bytes())?;
    }

    let mut usage = String::from("token,count\n");
    for (k, n) in model.codebook.usage_counts.iter().enumerate() {
        usage.push_str(&format!("{k},{n}\n"));
    }
    atomic_write(&dir.join("codebook_usage.csv"), usage.as_bytes())?;

    let corpus_path = dir.join("corpus.jsonl");
    let traces = if corpus_path.exists() {
        let (sequences, _) = load_corpus(&corpus_path)?;
        let mut csv = String::from("window,step,token,class\n");
        for (w, seq) in sequences.iter().enumerate() {
            let class = seq.class_label.map(|c| c.to_string()).unwrap_or_default();
            for (s, tok) in seq.tokens.iter().enumerate() {
                csv.push_str(&format!("{w},{s},{tok},{class}\n"));
            }
        }
        atomic_write(&dir.join("token_traces.csv"), csv.as_bytes())?;
        true
    } else {
        eprintln!("[inspect] no corpus.jsonl next to the checkpoint; skipping token traces");
        false
    };

    eprintln!(
        "[inspect] {} bases ({d}x{r}), codebook of {}, traces: {traces}",
        model.basis.len(),
        model.codebook.usage_counts.len()
    );
    progress_line(&serde_json::json!({
        "done": "inspect",
        "bases": model.basis.len(),
        "codebook_size": model.codebook.usage_counts.len(),
        "token_traces": traces,
    }));
    Ok(())
}

fn cmd_bench(config_path: &Path, lengths: &[usize], seed: Option<u64>) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    if lengths.is_empty() {
        return Err(Error::Input("bench needs at least one length".into()));
    }
    let (vq, ar) = load_pair(&rc)?;
    let sp = SamplingOverrides { seed, ..SamplingOverrides::default() }.apply(&rc.sampling)?;

    // Warm-up outside the timed region.
    generate(&vq.model, &ar.model, lengths[0].min(8), None, &sp)?;

    let mut csv = String::from("length,seconds\n");
    let mut seconds = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let t0 = Instant::now();
            let y = generate(&vq.model, &ar.model, len, None, &sp)?;
            let dt = t0.elapsed().as_secs_f64();
            if !y.all_finite() {
                return Err(Error::Numeric(format!("non-finite sample at length {len}")));
            }
            best = best.min(dt);
        }
        csv.push_str(&format!("{len},{best}\n"));
        seconds.push(best);
        eprintln!("[bench] length {len}: {best:.4}s");
    }
    let dir = out_dir(&rc);
    atomic_write(&dir.join("bench.csv"), csv.as_bytes())?;
    progress_line(&serde_json::json!({
        "done": "bench", "lengths": lengths, "seconds": seconds,
    }));
    Ok(())
}
