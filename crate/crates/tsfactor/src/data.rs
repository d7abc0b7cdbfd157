//! Dataset ingestion, windowing, min-max normalization, and the synthetic
//! low-rank generator used by the desk-scale evaluation suite.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::random_orthonormal;
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

/// Epsilon in the min-max denominator; keeps constant channels finite.
pub const NORM_EPS: f64 = 1e-8;

/// Per-channel min-max statistics fit on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(rows: &Tensor) -> Result<Self> {
        if !rows.is_matrix() || rows.rows() == 0 {
            return Err(Error::Input(format!(
                "normalization wants a non-empty N x D matrix, got {:?}",
                rows.shape()
            )));
        }
        let d = rows.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in 0..rows.rows() {
            for (j, &v) in rows.row(r).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite value in channel {j}")));
                }
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(NormStats { min, max })
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.channels() {
            return Err(Error::Dimension(format!(
                "normalization fit on {} channels, got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// y[·,j] = (x[·,j] − min_j) / (max_j − min_j + epsilon).
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.channels();
        let mut out = x.clone();
        out.requires_grad = false;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.min[j]) / (self.max[j] - self.min[j] + NORM_EPS);
        }
        Ok(out)
    }

    /// Exact inverse of [`NormStats::normalize`] up to the epsilon guard.
    pub fn denormalize(&self, y: &Tensor) -> Result<Tensor> {
        self.check(y)?;
        let d = self.channels();
        let mut out = y.clone();
        out.requires_grad = false;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = *v * (self.max[j] - self.min[j] + NORM_EPS) + self.min[j];
        }
        Ok(out)
    }
}

/// One fixed-length training/evaluation window.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    /// T×D values (normalized units once the dataset is fit).
    pub data: Tensor,
    pub label: Option<usize>,
}

/// A loaded corpus: either one continuous N×D series (CSV ingestion) or a
/// stack of pre-cut windows (synthetic generator), plus split and
/// normalization state.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// N×D raw values; for pre-windowed data, windows are stacked along rows.
    pub raw: Tensor,
    pub channel_names: Vec<String>,
    /// Some(T) when `raw` holds stacked fixed-length windows.
    pub window_len: Option<usize>,
    /// Per-window class labels (pre-windowed datasets only).
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
    /// Leading fraction of rows (or windows) used for training.
    pub train_frac: f64,
    pub norm: Option<NormStats>,
    /// Ground-truth per-class bases when synthetically generated.
    pub true_basis: Option<Vec<Tensor>>,
}

impl Dataset {
    pub fn from_matrix(name: &str, raw: Tensor, channel_names: Option<Vec<String>>) -> Result<Self> {
        if !raw.is_matrix() || raw.rows() == 0 || raw.cols() == 0 {
            return Err(Error::Input(format!("dataset wants a non-empty N x D matrix, got {:?}", raw.shape())));
        }
        let d = raw.cols();
        let channel_names = match channel_names {
            Some(n) if n.len() == d => n,
            Some(n) => {
                return Err(Error::Input(format!("{} channel names for {} channels", n.len(), d)))
            }
            None => (0..d).map(|j| format!("c{j}")).collect(),
        };
        Ok(Dataset {
            name: name.to_string(),
            raw,
            channel_names,
            window_len: None,
            labels: None,
            n_classes: 0,
            train_frac: 0.95,
            norm: None,
            true_basis: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.raw.cols()
    }

    pub fn set_train_frac(&mut self, frac: f64) -> Result<()> {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(Error::Config(format!("train fraction must be in (0,1], got {frac}")));
        }
        self.train_frac = frac;
        Ok(())
    }

    /// Number of leading raw rows in the training split (whole windows for
    /// pre-windowed data).
    pub fn train_rows(&self) -> usize {
        match self.window_len {
            Some(t) => {
                let nw = self.raw.rows() / t;
                let n_train = ((nw as f64) * self.train_frac).floor() as usize;
                n_train.max(1).min(nw) * t
            }
            None => {
                let n = ((self.raw.rows() as f64) * self.train_frac).floor() as usize;
                n.clamp(1, self.raw.rows())
            }
        }
    }

    /// Fit min-max statistics on the training split.
    pub fn fit_normalization(&mut self) -> Result<()> {
        let n = self.train_rows();
        let d = self.channels();
        let train = Tensor::new(vec![n, d], self.raw.data()[..n * d].to_vec())?;
        self.norm = Some(NormStats::fit(&train)?);
        Ok(())
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.norm
            .as_ref()
            .ok_or_else(|| Error::State("dataset normalization has not been fit".into()))
    }

    fn windows_in_range(
        &self,
        start_row: usize,
        end_row: usize,
        t: usize,
        stride: usize,
        first_window: usize,
    ) -> Result<Vec<SeriesWindow>> {
        let stats = self.stats()?;
        let d = self.channels();
        match self.window_len {
            Some(stored_t) => {
                if t != stored_t {
                    return Err(Error::Input(format!(
                        "dataset holds fixed windows of length {stored_t}; requested {t}"
                    )));
                }
                let mut out = Vec::new();
                let mut w = first_window;
                let mut row = start_row;
                while row + t <= end_row {
                    let chunk = Tensor::new(vec![t, d], self.raw.data()[row * d..(row + t) * d].to_vec())?;
                    out.push(SeriesWindow {
                        data: stats.normalize(&chunk)?,
                        label: self.labels.as_ref().map(|l| l[w]),
                    });
                    row += t;
                    w += 1;
                }
                Ok(out)
            }
            None => {
                let region = Tensor::new(
                    vec![end_row - start_row, d],
                    self.raw.data()[start_row * d..end_row * d].to_vec(),
                )?;
                let normalized = stats.normalize(&region)?;
                Ok(make_windows(&normalized, t, stride)?
                    .into_iter()
                    .map(|data| SeriesWindow { data, label: None })
                    .collect())
            }
        }
    }

    /// Normalized training windows.
    pub fn train_windows(&self, t: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
        self.windows_in_range(0, self.train_rows(), t, stride, 0)
    }

    /// Normalized held-out windows.
    pub fn test_windows(&self, t: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
        let start = self.train_rows();
        if start >= self.raw.rows() {
            return Ok(Vec::new());
        }
        let first_window = match self.window_len {
            Some(wt) => start / wt,
            None => 0,
        };
        self.windows_in_range(start, self.raw.rows(), t, stride, first_window)
    }
}

/// Sliding windows at offsets 0, stride, 2·stride, …
/// Count = floor((N − T)/stride) + 1. Values are copied verbatim.
pub fn make_windows(raw: &Tensor, t: usize, stride: usize) -> Result<Vec<Tensor>> {
    if !raw.is_matrix() {
        return Err(Error::Dimension(format!("windowing wants a matrix, got {:?}", raw.shape())));
    }
    if t == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let (n, d) = (raw.rows(), raw.cols());
    if n < t {
        return Err(Error::Input(format!("series of {n} rows shorter than window {t}")));
    }
    let count = (n - t) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        out.push(Tensor::new(vec![t, d], raw.data()[start * d..(start + t) * d].to_vec())?);
    }
    Ok(out)
}

/// Load a CSV into a dataset. `drop_first_col` discards a leading
/// (typically timestamp) column. Ragged or non-numeric rows are parse errors
/// carrying the 1-based line number.
pub fn load_csv(path: &Path, has_header: bool, drop_first_col: bool) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_reader(file);

    let mut names: Option<Vec<String>> = None;
    if has_header {
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
        let skip = drop_first_col as usize;
        names = Some(headers.iter().skip(skip).map(|s| s.trim().to_string()).collect());
    }

    let mut width: Option<usize> = None;
    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(rows + 1);
        let skip = drop_first_col as usize;
        if rec.len() <= skip {
            return Err(Error::Parse { line, message: format!("row has only {} fields", rec.len()) });
        }
        let w = rec.len() - skip;
        match width {
            None => width = Some(w),
            Some(expect) if expect != w => {
                return Err(Error::Parse {
                    line,
                    message: format!("ragged row: {w} fields, expected {expect}"),
                })
            }
            _ => {}
        }
        for field in rec.iter().skip(skip) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric cell {field:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Input(format!("no data rows in {}", path.display())));
    }
    let d = width.unwrap();
    let raw = Tensor::new(vec![rows, d], data)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::from_matrix(&name, raw, names)
}

/// Generate a synthetic dataset of low-rank windows: per class, an
/// orthonormal basis U* (D×R) and `n_prototypes` smooth coefficient
/// trajectories (an anchor point plus a small sinusoidal modulation per
/// latent dimension); each window enters the prototype cycle at a random
/// point and holds each trajectory for a few steps before advancing to the
/// next, Gaussian noise of std `noise_std` is added to the coefficients,
/// and X = U* V*ᵀ. Because the noise lives in coefficient space, every
/// window is exactly rank R regardless of noise level.
/// `n_classes = 0` gives one shared basis and no labels.
/// A smooth per-prototype coefficient curve: anchor + amp·sin(2π·freq·τ + φ)
/// in each latent dimension, with τ the window-relative time in [0, 1).
struct Trajectory {
    anchor: Vec<f64>,
    amp: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

impl Trajectory {
    fn at(&self, dim: usize, tau: f64) -> f64 {
        self.anchor[dim]
            + self.amp[dim] * (2.0 * std::f64::consts::PI * self.freq[dim] * tau + self.phase[dim]).sin()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn synth_lowrank(
    seed: u64,
    d: usize,
    t: usize,
    r: usize,
    n_windows: usize,
    n_prototypes: usize,
    noise_std: f64,
    n_classes: usize,
) -> Result<Dataset> {
    if r > d {
        return Err(Error::Config(format!("rank {r} exceeds {d} channels")));
    }
    if r == 0 || d == 0 || t == 0 || n_windows == 0 {
        return Err(Error::Config("dimensions and window count must be positive".into()));
    }
    if n_prototypes == 0 {
        return Err(Error::Config("need at least one prototype".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let mut rng = Rng::from_seed(seed);
    let classes = n_classes.max(1);

    // Keep class subspaces well separated (smallest principal angle above
    // ~0.15 rad) whenever the ambient dimension permits, so class structure
    // is actually distinguishable downstream.
    let sep_cos = 0.15f64.cos();
    let mut bases: Vec<Tensor> = Vec::with_capacity(classes);
    let mut trajectories = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut u = random_orthonormal(d, r, &mut rng)?;
        if d >= 2 * r {
            for _ in 0..50 {
                let too_close = bases.iter().any(|prev| {
                    max_subspace_cosine(prev, &u).map(|c| c >= sep_cos).unwrap_or(false)
                });
                if !too_close {
                    break;
                }
                u = random_orthonormal(d, r, &mut rng)?;
            }
        }
        bases.push(u);
        // One smooth trajectory per prototype: an anchor point plus a small
        // single-harmonic oscillation in each latent dimension.
        let anchors = Tensor::randn(vec![n_prototypes, r], 1.0, &mut rng);
        let mut protos = Vec::with_capacity(n_prototypes);
        for p in 0..n_prototypes {
            let anchor = anchors.row(p).to_vec();
            let mut amp = Vec::with_capacity(r);
            let mut freq = Vec::with_capacity(r);
            let mut phase = Vec::with_capacity(r);
            for _ in 0..r {
                amp.push(0.15 * (1.0 + rng.normal().abs()));
                freq.push((1 + rng.range(2)) as f64);
                phase.push(rng.normal() * std::f64::consts::PI);
            }
            protos.push(Trajectory { anchor, amp, freq, phase });
        }
        trajectories.push(protos);
    }

    let mut raw = Tensor::zeros(vec![n_windows * t, d]);
    let mut labels = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let class = w % classes;
        labels.push(class);
        // Hold each prototype trajectory 8..20 steps before advancing to the
        // next one in a fixed cyclic order (the entry point is random per
        // window), then jitter the coefficients; the channel series stays
        // exactly rank R.
        let mut v = Tensor::zeros(vec![t, r]);
        let mut pos = 0;
        let mut idx = rng.range(n_prototypes);
        while pos < t {
            let hold = 8 + rng.range(13);
            let traj = &trajectories[class][idx];
            for tau in pos..t.min(pos + hold) {
                for (j, e) in v.data_mut()[tau * r..(tau + 1) * r].iter_mut().enumerate() {
                    *e = traj.at(j, tau as f64 / t as f64);
                }
            }
            pos += hold;
            idx = (idx + 1) % n_prototypes;
        }
        if noise_std > 0.0 {
            for e in v.data_mut().iter_mut() {
                *e += noise_std * rng.normal();
            }
        }
        let x = matmul(&v, &bases[class], false, true)?; // [t, d]
        raw.data_mut()[w * t * d..(w + 1) * t * d].copy_from_slice(x.data());
    }

    let mut ds = Dataset::from_matrix(&format!("synth_lowrank_{seed}"), raw, None)?;
    ds.window_len = Some(t);
    ds.n_classes = n_classes;
    ds.labels = (n_classes > 0).then_some(labels);
    ds.true_basis = Some(bases);
    Ok(ds)
}

/// Largest cosine of the principal angles between the column spaces of two
/// orthonormal matrices (1 = overlapping, 0 = orthogonal).
fn max_subspace_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = matmul(a, b, true, false)?;
    let mtm = matmul(&m, &m, true, false)?;
    let (eigs, _) = crate::linalg::sym_eigen(&mtm)?;
    Ok(eigs.first().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Write bytes to `path` atomically (temp file + rename), so a failed save
/// never leaves a partial file at the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "file".into()),
        std::process::id()
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse the `window,step,<channels…>` CSV format written by
/// [`windows_to_csv`]: rows grouped by their window index (which must be
/// contiguous and start at 0), steps in order within each window.
pub fn windows_from_csv(text: &str) -> Result<(Vec<Tensor>, Vec<String>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Input("empty window CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "window" || cols[1] != "step" {
        return Err(Error::Format(format!(
            "window CSV must start with a 'window,step,…' header, got {header:?}"
        )));
    }
    let names: Vec<String> = cols[2..].iter().map(|s| s.trim().to_string()).collect();
    let d = names.len();

    let mut windows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, got {}", d + 2, fields.len()),
            });
        }
        let w: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad window index {:?}", fields[0]),
        })?;
        if w == windows.len() {
            windows.push(Vec::new());
        } else if w + 1 != windows.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("window indices must be contiguous; got {w}"),
            });
        }
        for f in &fields[2..] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("non-numeric cell {f:?}"),
            })?;
            windows[w].push(v);
        }
    }
    if windows.is_empty() {
        return Err(Error::Input("window CSV holds no data rows".into()));
    }
    let out: Result<Vec<Tensor>> = windows
        .into_iter()
        .map(|flat| {
            let t = flat.len() / d;
            Tensor::new(vec![t, d], flat)
        })
        .collect();
    Ok((out?, names))
}

/// Serialize windows as CSV: `window,step,<channel names…>`, one row per
/// time step. Plain shortest-round-trip float formatting keeps identical
/// inputs byte-identical.
pub fn windows_to_csv(windows: &[Tensor], channel_names: &[String]) -> Result<String> {
    let mut out = String::from("window,step");
    for name in channel_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (w, win) in windows.iter().enumerate() {
        if !win.is_matrix() || win.cols() != channel_names.len() {
            return Err(Error::Dimension(format!(
                "window {w} has shape {:?}, expected T x {}",
                win.shape(),
                channel_names.len()
            )));
        }
        for step in 0..win.rows() {
            out.push_str(&format!("{w},{step}"));
            for &v in win.row(step) {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen;

    fn write_tmp(name: &str, content: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("tsfactor_test_{}_{name}", std::process::id()));
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn csv_three_rows_two_cols() {
        let p = write_tmp("basic.csv", "1,2\n3,4\n5,6\n");
        let ds = load_csv(&p, false, false).unwrap();
        assert_eq!(ds.raw.shape(), &[3, 2]);
        assert_eq!(ds.raw.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ds.channel_names, vec!["c0", "c1"]);
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn csv_header_skipped_and_named() {
        let p = write_tmp("header.csv", "alpha,beta\n1,2\n3,4\n");
        let ds = load_csv(&p, true, false).unwrap();
        assert_eq!(ds.raw.rows(), 2);
        assert_eq!(ds.channel_names, vec!["alpha", "beta"]);
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn csv_ragged_row_names_line_7() {
        let mut content = String::new();
        for i in 0..6 {
            content.push_str(&format!("{i},1\n"));
        }
        content.push_str("7,8,9\n"); // line 7 has 3 fields
        let p = write_tmp("ragged.csv", &content);
        match load_csv(&p, false, false).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other}"),
        }
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn csv_non_numeric_cell_is_parse_error() {
        let p = write_tmp("nan.csv", "1,2\n3,oops\n");
        match load_csv(&p, false, false).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn csv_timestamp_column_dropped() {
        let p = write_tmp("ts.csv", "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n");
        let ds = load_csv(&p, true, true).unwrap();
        assert_eq!(ds.raw.shape(), &[2, 2]);
        assert_eq!(ds.channel_names, vec!["a", "b"]);
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn csv_empty_is_input_error() {
        let p = write_tmp("empty.csv", "");
        assert_eq!(load_csv(&p, false, false).unwrap_err().category(), "input");
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn window_count_formula() {
        let mut rng = Rng::from_seed(1);
        let raw = Tensor::randn(vec![100, 3], 1.0, &mut rng);
        assert_eq!(make_windows(&raw, 48, 1).unwrap().len(), 53);
        // N == T: exactly one window, equal to the input.
        let w = make_windows(&raw, 100, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].data(), raw.data());
        // stride == T: non-overlapping partition.
        let w = make_windows(&raw, 25, 25).unwrap();
        assert_eq!(w.len(), (100 - 25) / 25 + 1);
        assert_eq!(w[1].row(0), raw.row(25));
        // Too short.
        assert_eq!(make_windows(&raw, 101, 1).unwrap_err().category(), "input");
    }

    #[test]
    fn normalize_round_trip_and_bounds() {
        let mut rng = Rng::from_seed(2);
        let mut raw = Tensor::randn(vec![50, 3], 5.0, &mut rng);
        // Make channel 2 constant to hit the epsilon guard.
        for i in 0..50 {
            raw.data_mut()[i * 3 + 2] = 7.5;
        }
        let stats = NormStats::fit(&raw).unwrap();
        let y = stats.normalize(&raw).unwrap();
        for i in 0..50 {
            for j in 0..3 {
                let v = y.at2(i, j);
                assert!((-1e-6..=1.0 + 1e-6).contains(&v));
            }
            assert_eq!(y.at2(i, 2), 0.0, "constant channel maps to zero");
        }
        let back = stats.denormalize(&y).unwrap();
        for (a, b) in back.data().iter().zip(raw.data()) {
            let rel = (a - b).abs() / (b.abs() + 1e-9);
            assert!(rel < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn unfit_dataset_is_state_error() {
        let raw = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ds = Dataset::from_matrix("x", raw, None).unwrap();
        assert_eq!(ds.stats().unwrap_err().category(), "state");
        assert_eq!(ds.train_windows(2, 1).unwrap_err().category(), "state");
    }

    #[test]
    fn dataset_split_and_windows() {
        let raw = Tensor::new(vec![20, 1], (0..20).map(|v| v as f64).collect()).unwrap();
        let mut ds = Dataset::from_matrix("x", raw, None).unwrap();
        ds.set_train_frac(0.8).unwrap();
        ds.fit_normalization().unwrap();
        assert_eq!(ds.train_rows(), 16);
        let train = ds.train_windows(4, 2).unwrap();
        assert_eq!(train.len(), (16 - 4) / 2 + 1);
        let test = ds.test_windows(4, 1).unwrap();
        assert_eq!(test.len(), 1); // 4 held-out rows -> one window
        // Training stats: min 0, max 15 -> held-out values exceed 1.
        assert!(test[0].data.data().iter().all(|&v| v > 1.0));
    }

    #[test]
    fn synth_same_seed_identical() {
        let a = synth_lowrank(9, 4, 16, 2, 6, 5, 0.1, 2).unwrap();
        let b = synth_lowrank(9, 4, 16, 2, 6, 5, 0.1, 2).unwrap();
        assert_eq!(a.raw.data(), b.raw.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synth_noise_free_lies_in_basis_span() {
        let ds = synth_lowrank(3, 8, 24, 3, 10, 6, 0.0, 2).unwrap();
        let bases = ds.true_basis.as_ref().unwrap();
        let labels = ds.labels.as_ref().unwrap();
        let t = ds.window_len.unwrap();
        for w in 0..10 {
            let u = &bases[labels[w]];
            for step in 0..t {
                let row = &ds.raw.data()[(w * t + step) * 8..(w * t + step + 1) * 8];
                // Residual after projection onto col(U): x - U Uᵀ x.
                let mut coeff = vec![0.0; 3];
                for k in 0..3 {
                    coeff[k] = (0..8).map(|i| u.at2(i, k) * row[i]).sum();
                }
                for i in 0..8 {
                    let proj: f64 = (0..3).map(|k| u.at2(i, k) * coeff[k]).sum();
                    assert!((row[i] - proj).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn synth_step_vectors_come_from_prototypes() {
        let protos = 6;
        let t = 32;
        let ds = synth_lowrank(4, 5, t, 2, 8, protos, 0.0, 0).unwrap();
        assert!(ds.labels.is_none());
        // With a single class, rows at the same window phase τ can take at
        // most n_prototypes distinct values (one per trajectory); a noise-free
        // step is always exactly on some prototype curve.
        for tau in 0..t {
            let mut distinct: Vec<Vec<u8>> = Vec::new();
            for w in 0..8 {
                let key: Vec<u8> =
                    ds.raw.row(w * t + tau).iter().flat_map(|v| v.to_le_bytes()).collect();
                if !distinct.contains(&key) {
                    distinct.push(key);
                }
            }
            assert!(distinct.len() <= protos, "phase {tau}: {} distinct states", distinct.len());
        }
    }

    #[test]
    fn synth_two_class_bases_are_separated() {
        // D >= 2R: independently drawn subspaces have principal angles
        // bounded away from zero.
        let ds = synth_lowrank(5, 8, 16, 3, 4, 4, 0.0, 2).unwrap();
        let bases = ds.true_basis.as_ref().unwrap();
        let m = matmul(&bases[0], &bases[1], true, false).unwrap(); // R x R
        let mtm = matmul(&m, &m, true, false).unwrap();
        let (eigs, _) = sym_eigen(&mtm).unwrap();
        let sigma_max = eigs[0].max(0.0).sqrt();
        assert!(sigma_max < (0.1f64).cos(), "largest cosine {sigma_max}");
    }

    #[test]
    fn synth_rejects_bad_shapes() {
        assert_eq!(synth_lowrank(1, 2, 8, 3, 4, 4, 0.0, 0).unwrap_err().category(), "config");
        assert_eq!(synth_lowrank(1, 4, 8, 2, 4, 0, 0.0, 0).unwrap_err().category(), "config");
    }

    #[test]
    fn synth_windowed_dataset_plumbing() {
        let mut ds = synth_lowrank(6, 3, 8, 2, 10, 4, 0.0, 2).unwrap();
        ds.set_train_frac(0.8).unwrap();
        ds.fit_normalization().unwrap();
        let train = ds.train_windows(8, 1).unwrap();
        let test = ds.test_windows(8, 1).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        assert_eq!(train[0].label, Some(0));
        assert_eq!(train[1].label, Some(1));
        // Pre-windowed datasets refuse other window lengths.
        assert_eq!(ds.train_windows(4, 1).unwrap_err().category(), "input");
        // Labels line up across the split boundary.
        assert_eq!(test[0].label, Some(8 % 2));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let p = std::env::temp_dir().join(format!("tsfactor_atomic_{}", std::process::id()));
        atomic_write(&p, b"first").unwrap();
        atomic_write(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        std::fs::remove_file(p).ok();
    }

    #[test]
    fn windows_csv_format() {
        let w = vec![Tensor::new(vec![2, 2], vec![1.0, 2.5, 3.0, 4.0]).unwrap()];
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = windows_to_csv(&w, &names).unwrap();
        assert_eq!(csv, "window,step,a,b\n0,0,1,2.5\n0,1,3,4\n");
    }

    #[test]
    fn windows_csv_round_trips_bitwise() {
        let mut rng = Rng::from_seed(41);
        let w = vec![
            Tensor::randn(vec![3, 2], 1.0, &mut rng),
            Tensor::randn(vec![3, 2], 1.0, &mut rng),
        ];
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = windows_to_csv(&w, &names).unwrap();
        let (back, got_names) = windows_from_csv(&csv).unwrap();
        assert_eq!(got_names, names);
        assert_eq!(back.len(), 2);
        for (x, y) in w.iter().zip(&back) {
            assert_eq!(x.shape(), y.shape());
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn windows_csv_parser_rejects_malformed_input() {
        assert_eq!(windows_from_csv("").unwrap_err().category(), "input");
        assert_eq!(
            windows_from_csv("time,a,b\n0,1,2\n").unwrap_err().category(),
            "format"
        );
        assert_eq!(
            windows_from_csv("window,step,a\n0,0,1\n2,0,1\n").unwrap_err().category(),
            "parse"
        );
        assert_eq!(
            windows_from_csv("window,step,a\n0,0,abc\n").unwrap_err().category(),
            "parse"
        );
        assert_eq!(
            windows_from_csv("window,step,a\n").unwrap_err().category(),
            "input"
        );
    }
}
