//! Evaluation metrics: discriminative and predictive scores (recurrent
//! auxiliaries), context-FID over a self-trained temporal embedder, pooled
//! cross-channel correlational score, and forecast error measures.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::linalg::sym_matrix_sqrt;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training controls for the auxiliary networks (classifier, predictor,
/// embedder): capped step count, loss-plateau learning-rate reduction with
/// best-parameter restore, and early stop once the rate budget is spent.
#[derive(Debug, Clone)]
pub struct AuxTrainConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Epochs without sufficient improvement before halving the rate.
    pub patience: usize,
    /// Relative epoch-loss improvement required to reset patience.
    pub min_delta: f64,
    /// Rate halvings before stopping.
    pub max_reductions: usize,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            max_steps: 5000,
            lr: 1e-2,
            batch: 64,
            patience: 10,
            min_delta: 1e-4,
            max_reductions: 6,
        }
    }
}

/// Auxiliary hidden width: twice the channel count, at least 8.
fn aux_hidden(d: usize) -> usize {
    (2 * d).max(8)
}

fn check_window_set(windows: &[Tensor], what: &str) -> Result<(usize, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Input(format!("{what} window set is empty")))?;
    if !first.is_matrix() {
        return Err(Error::Dimension(format!("{what} windows must be T x D, got {:?}", first.shape())));
    }
    let (t, d) = (first.rows(), first.cols());
    for w in windows {
        if w.shape() != [t, d] {
            return Err(Error::Dimension(format!(
                "{what} windows disagree on shape: {:?} vs [{t}, {d}]",
                w.shape()
            )));
        }
    }
    Ok((t, d))
}

// ---------------------------------------------------------------------------
// GRU building block on the tape.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct GruLayer {
    wz: Tensor,
    uz: Tensor,
    bz: Tensor,
    wr: Tensor,
    ur: Tensor,
    br: Tensor,
    wh: Tensor,
    uh: Tensor,
    bh: Tensor,
}

struct GruLayerVars {
    wz: Var,
    uz: Var,
    bz: Var,
    wr: Var,
    ur: Var,
    br: Var,
    wh: Var,
    uh: Var,
    bh: Var,
}

impl GruLayer {
    fn new(in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let wi = (1.0 / in_dim as f64).sqrt();
        let wh = (1.0 / hidden as f64).sqrt();
        let m = |r: usize, c: usize, s: f64, rng: &mut Rng| Tensor::randn(vec![r, c], s, rng).with_grad();
        GruLayer {
            wz: m(hidden, in_dim, wi, rng),
            uz: m(hidden, hidden, wh, rng),
            bz: Tensor::zeros(vec![hidden]).with_grad(),
            wr: m(hidden, in_dim, wi, rng),
            ur: m(hidden, hidden, wh, rng),
            br: Tensor::zeros(vec![hidden]).with_grad(),
            wh: m(hidden, in_dim, wi, rng),
            uh: m(hidden, hidden, wh, rng),
            bh: Tensor::zeros(vec![hidden]).with_grad(),
        }
    }

    fn hidden(&self) -> usize {
        self.wz.rows()
    }

    fn vars(&self, g: &mut Graph) -> GruLayerVars {
        GruLayerVars {
            wz: g.leaf(self.wz.clone()),
            uz: g.leaf(self.uz.clone()),
            bz: g.leaf(self.bz.clone()),
            wr: g.leaf(self.wr.clone()),
            ur: g.leaf(self.ur.clone()),
            br: g.leaf(self.br.clone()),
            wh: g.leaf(self.wh.clone()),
            uh: g.leaf(self.uh.clone()),
            bh: g.leaf(self.bh.clone()),
        }
    }

    fn var_list(v: &GruLayerVars) -> Vec<Var> {
        vec![v.wz, v.uz, v.bz, v.wr, v.ur, v.br, v.wh, v.uh, v.bh]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wz, &mut self.uz, &mut self.bz,
            &mut self.wr, &mut self.ur, &mut self.br,
            &mut self.wh, &mut self.uh, &mut self.bh,
        ]
    }

    fn params_ref(&self) -> Vec<&Tensor> {
        vec![
            &self.wz, &self.uz, &self.bz,
            &self.wr, &self.ur, &self.br,
            &self.wh, &self.uh, &self.bh,
        ]
    }
}

/// One GRU step: h' = (1−z)∘h + z∘h̃ with the usual update/reset gates.
fn gru_step(g: &mut Graph, lv: &GruLayerVars, x: Var, h: Var) -> Result<Var> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, x: Var, h: Var| -> Result<Var> {
        let a = g.matmul(x, w, false, true)?;
        let c = g.matmul(h, u, false, true)?;
        let s = g.add(a, c)?;
        g.add_row(s, b)
    };
    let z_pre = gate(g, lv.wz, lv.uz, lv.bz, x, h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, lv.wr, lv.ur, lv.br, x, h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, lv.wh, lv.uh, lv.bh, x, rh)?;
    let cand = g.tanh(cand_pre);
    // h' = h - z∘h + z∘h̃
    let zh = g.mul(z, h)?;
    let zc = g.mul(z, cand)?;
    let base = g.sub(h, zh)?;
    g.add(base, zc)
}

/// Run a GRU over a step-major input sequence; returns hidden state per step.
fn gru_sequence(g: &mut Graph, lv: &GruLayerVars, inputs: &[Var], batch: usize, hidden: usize) -> Result<Vec<Var>> {
    let mut h = g.constant(Tensor::zeros(vec![batch, hidden]));
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = gru_step(g, lv, x, h)?;
        out.push(h);
    }
    Ok(out)
}

/// Gather step-major [B, D] constants for the selected windows.
fn step_inputs(g: &mut Graph, windows: &[&Tensor], steps: std::ops::Range<usize>) -> Vec<Var> {
    let b = windows.len();
    let d = windows[0].cols();
    steps
        .map(|t| {
            let mut m = Tensor::zeros(vec![b, d]);
            for (i, w) in windows.iter().enumerate() {
                m.data_mut()[i * d..(i + 1) * d].copy_from_slice(w.row(t));
            }
            g.constant(m)
        })
        .collect()
}

/// Shared training loop: minibatch Adam, learning rate halved on plateau
/// after restoring the best parameters seen, stop when the rate budget or
/// the step cap is exhausted. The best parameters are restored at the end.
trait AuxNet {
    fn item_count(&self) -> usize;
    fn build_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Var>)>;
    fn apply_step(&mut self, opt: &mut Adam, grads: &[Tensor]) -> Result<()>;
    fn snapshot(&self) -> Vec<Tensor>;
    fn restore(&mut self, snap: &[Tensor]);
}

fn train_aux(net: &mut dyn AuxNet, cfg: &AuxTrainConfig, rng: &mut Rng) -> Result<()> {
    let n = net.item_count();
    if n == 0 {
        return Err(Error::Input("auxiliary training set is empty".into()));
    }
    let mut lr = cfg.lr;
    let mut opt = Adam::new(lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    let mut best_snap = net.snapshot();
    let mut have_best = false;
    let mut stale = 0usize;
    let mut reductions = 0usize;
    let mut steps = 0usize;
    'outer: loop {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut g = Graph::new();
            let (loss, vars) = net.build_loss(&mut g, chunk)?;
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric("auxiliary training loss diverged".into()));
            }
            epoch_loss += lv;
            batches += 1;
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| {
                    g.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
                })
                .collect();
            net.apply_step(&mut opt, &grads)?;
            steps += 1;
            if steps >= cfg.max_steps {
                break 'outer;
            }
        }
        let epoch = epoch_loss / batches as f64;
        if std::env::var("TSF_AUX_DEBUG").is_ok() {
            eprintln!("aux step={steps} lr={lr} epoch_loss={epoch}");
        }
        let improved = if best.is_finite() {
            epoch < best - (best.abs() * cfg.min_delta).max(1e-12)
        } else {
            true
        };
        if improved {
            best = epoch;
            best_snap = net.snapshot();
            have_best = true;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                reductions += 1;
                if reductions > cfg.max_reductions {
                    break;
                }
                net.restore(&best_snap);
                lr /= 2.0;
                opt = Adam::new(lr, 0.9, 0.999);
                stale = 0;
                // The snapshot lags the loss it was recorded under by one
                // step, so re-anchor the target at the restored point.
                best = f64::INFINITY;
            }
        }
    }
    if have_best {
        net.restore(&best_snap);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Discriminative score.
// ---------------------------------------------------------------------------

struct ClassifierNet<'a> {
    windows: Vec<&'a Tensor>,
    labels: Vec<usize>,
    l1: GruLayer,
    l2: GruLayer,
    head_w: Tensor,
    head_b: Tensor,
}

impl<'a> ClassifierNet<'a> {
    fn new(windows: Vec<&'a Tensor>, labels: Vec<usize>, d: usize, rng: &mut Rng) -> Self {
        let h = aux_hidden(d);
        ClassifierNet {
            windows,
            labels,
            l1: GruLayer::new(d, h, rng),
            l2: GruLayer::new(h, h, rng),
            head_w: Tensor::randn(vec![2, h], (1.0 / h as f64).sqrt(), rng).with_grad(),
            head_b: Tensor::zeros(vec![2]).with_grad(),
        }
    }

    fn logits(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Var>)> {
        let picked: Vec<&Tensor> = batch.iter().map(|&i| self.windows[i]).collect();
        let t = picked[0].rows();
        let inputs = step_inputs(g, &picked, 0..t);
        let v1 = self.l1.vars(g);
        let v2 = self.l2.vars(g);
        let hw = g.leaf(self.head_w.clone());
        let hb = g.leaf(self.head_b.clone());
        let h1 = gru_sequence(g, &v1, &inputs, picked.len(), self.l1.hidden())?;
        let h2 = gru_sequence(g, &v2, &h1, picked.len(), self.l2.hidden())?;
        let last = *h2.last().unwrap();
        let logits = g.matmul(last, hw, false, true)?;
        let logits = g.add_row(logits, hb)?;
        let mut vars = GruLayer::var_list(&v1);
        vars.extend(GruLayer::var_list(&v2));
        vars.push(hw);
        vars.push(hb);
        Ok((logits, vars))
    }

    fn accuracy(&self, batch: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let (logits, _) = self.logits(&mut g, batch)?;
        let lv = g.value(logits);
        let mut correct = 0usize;
        for (row, &i) in batch.iter().enumerate() {
            let pred = if lv.at2(row, 1) > lv.at2(row, 0) { 1 } else { 0 };
            if pred == self.labels[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / batch.len() as f64)
    }
}

impl AuxNet for ClassifierNet<'_> {
    fn item_count(&self) -> usize {
        self.windows.len()
    }

    fn build_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Var>)> {
        let (logits, vars) = self.logits(g, batch)?;
        let targets: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let mask = vec![1.0; batch.len()];
        let loss = g.cross_entropy(logits, &targets, &mask)?;
        Ok((loss, vars))
    }

    fn apply_step(&mut self, opt: &mut Adam, grads: &[Tensor]) -> Result<()> {
        let mut params = self.l1.params_mut();
        params.extend(self.l2.params_mut());
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        opt.step(&mut params, grads)
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut snap: Vec<Tensor> = self.l1.params_ref().into_iter().cloned().collect();
        snap.extend(self.l2.params_ref().into_iter().cloned());
        snap.push(self.head_w.clone());
        snap.push(self.head_b.clone());
        snap
    }

    fn restore(&mut self, snap: &[Tensor]) {
        let mut params = self.l1.params_mut();
        params.extend(self.l2.params_mut());
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        for (p, s) in params.into_iter().zip(snap) {
            *p = s.clone();
        }
    }
}

fn discriminative_once(
    real: &[Tensor],
    synth: &[Tensor],
    rng: &mut Rng,
    cfg: &AuxTrainConfig,
) -> Result<f64> {
    let (_, d) = check_window_set(real, "real")?;
    let (ts, ds) = check_window_set(synth, "synthetic")?;
    if (ts, ds) != (real[0].rows(), d) {
        return Err(Error::Dimension(format!(
            "real windows are [{} x {}], synthetic [{} x {}]",
            real[0].rows(),
            d,
            ts,
            ds
        )));
    }
    let mut windows: Vec<&Tensor> = Vec::with_capacity(real.len() + synth.len());
    let mut labels = Vec::with_capacity(real.len() + synth.len());
    for w in real {
        windows.push(w);
        labels.push(1usize);
    }
    for w in synth {
        windows.push(w);
        labels.push(0usize);
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    rng.shuffle(&mut order);
    let n_test = (order.len() / 5).max(1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut net = ClassifierNet::new(windows, labels, d, rng);
    // Train on the training split only, by index remapping.
    struct SubsetNet<'b, 'a> {
        inner: &'b mut ClassifierNet<'a>,
        idx: &'b [usize],
    }
    impl AuxNet for SubsetNet<'_, '_> {
        fn item_count(&self) -> usize {
            self.idx.len()
        }
        fn build_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Var>)> {
            let mapped: Vec<usize> = batch.iter().map(|&i| self.idx[i]).collect();
            self.inner.build_loss(g, &mapped)
        }
        fn apply_step(&mut self, opt: &mut Adam, grads: &[Tensor]) -> Result<()> {
            self.inner.apply_step(opt, grads)
        }
        fn snapshot(&self) -> Vec<Tensor> {
            self.inner.snapshot()
        }
        fn restore(&mut self, snap: &[Tensor]) {
            self.inner.restore(snap)
        }
    }
    let mut subset = SubsetNet { inner: &mut net, idx: train_idx };
    train_aux(&mut subset, cfg, rng)?;
    let acc = net.accuracy(test_idx)?;
    Ok((acc - 0.5).abs())
}

/// |test accuracy − 0.5| of a 2-layer recurrent real-vs-synthetic classifier,
/// averaged over `repeats` independent runs. Returns (mean, sample std).
pub fn discriminative_score(
    real: &[Tensor],
    synth: &[Tensor],
    seed: u64,
    repeats: usize,
    cfg: &AuxTrainConfig,
) -> Result<(f64, f64)> {
    repeat_metric(seed, repeats, |rng| discriminative_once(real, synth, rng, cfg))
}

// ---------------------------------------------------------------------------
// Predictive score.
// ---------------------------------------------------------------------------

struct PredictorNet<'a> {
    windows: Vec<&'a Tensor>,
    l1: GruLayer,
    l2: GruLayer,
    head_w: Tensor,
    head_b: Tensor,
}

impl<'a> PredictorNet<'a> {
    fn new(windows: Vec<&'a Tensor>, d: usize, rng: &mut Rng) -> Self {
        let h = aux_hidden(d);
        PredictorNet {
            windows,
            l1: GruLayer::new(d, h, rng),
            l2: GruLayer::new(h, h, rng),
            head_w: Tensor::randn(vec![d, h], (1.0 / h as f64).sqrt(), rng).with_grad(),
            head_b: Tensor::zeros(vec![d]).with_grad(),
        }
    }

    /// One-step-ahead error over steps 0..T−2 → 1..T−1 for a window subset.
    /// Trains with squared error (smooth near the optimum); the reported
    /// metric is the absolute error.
    fn loss_on(&self, g: &mut Graph, windows: &[&Tensor], absolute: bool) -> Result<(Var, Vec<Var>)> {
        let t = windows[0].rows();
        let b = windows.len();
        let inputs = step_inputs(g, windows, 0..t - 1);
        let v1 = self.l1.vars(g);
        let v2 = self.l2.vars(g);
        let hw = g.leaf(self.head_w.clone());
        let hb = g.leaf(self.head_b.clone());
        let h1 = gru_sequence(g, &v1, &inputs, b, self.l1.hidden())?;
        let h2 = gru_sequence(g, &v2, &h1, b, self.l2.hidden())?;
        let targets = step_inputs(g, windows, 1..t);
        let mut per_step = Vec::with_capacity(h2.len());
        for (h, tgt) in h2.iter().zip(targets) {
            let pred = g.matmul(*h, hw, false, true)?;
            let pred = g.add_row(pred, hb)?;
            per_step.push(if absolute {
                g.mean_abs_diff(pred, tgt)?
            } else {
                g.mean_sq_diff(pred, tgt)?
            });
        }
        let total = g.sum_vars(&per_step)?;
        let loss = g.scale(total, 1.0 / per_step.len() as f64);
        let mut vars = GruLayer::var_list(&v1);
        vars.extend(GruLayer::var_list(&v2));
        vars.push(hw);
        vars.push(hb);
        Ok((loss, vars))
    }

    fn mae_on(&self, windows: &[&Tensor]) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.loss_on(&mut g, windows, true)?;
        Ok(g.scalar_value(loss))
    }
}

impl AuxNet for PredictorNet<'_> {
    fn item_count(&self) -> usize {
        self.windows.len()
    }

    fn build_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Var>)> {
        let picked: Vec<&Tensor> = batch.iter().map(|&i| self.windows[i]).collect();
        self.loss_on(g, &picked, false)
    }

    fn apply_step(&mut self, opt: &mut Adam, grads: &[Tensor]) -> Result<()> {
        let mut params = self.l1.params_mut();
        params.extend(self.l2.params_mut());
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        opt.step(&mut params, grads)
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut snap: Vec<Tensor> = self.l1.params_ref().into_iter().cloned().collect();
        snap.extend(self.l2.params_ref().into_iter().cloned());
        snap.push(self.head_w.clone());
        snap.push(self.head_b.clone());
        snap
    }

    fn restore(&mut self, snap: &[Tensor]) {
        let mut params = self.l1.params_mut();
        params.extend(self.l2.params_mut());
        params.push(&mut self.head_w);
        params.push(&mut self.head_b);
        for (p, s) in params.into_iter().zip(snap) {
            *p = s.clone();
        }
    }
}

fn predictive_once(
    real: &[Tensor],
    synth: &[Tensor],
    rng: &mut Rng,
    cfg: &AuxTrainConfig,
) -> Result<f64> {
    let (t_r, d_r) = check_window_set(real, "real")?;
    let (t_s, d_s) = check_window_set(synth, "synthetic")?;
    if (t_r, d_r) != (t_s, d_s) {
        return Err(Error::Dimension(format!(
            "real windows are [{t_r} x {d_r}], synthetic [{t_s} x {d_s}]"
        )));
    }
    if t_r < 2 {
        return Err(Error::Input("predictive score needs windows of at least 2 steps".into()));
    }
    let mut net = PredictorNet::new(synth.iter().collect(), d_s, rng);
    train_aux(&mut net, cfg, rng)?;
    let real_refs: Vec<&Tensor> = real.iter().collect();
    net.mae_on(&real_refs)
}

/// MAE on real data of a one-step-ahead recurrent predictor trained on
/// synthetic data (train-on-synthetic, test-on-real). Returns (mean, std).
pub fn predictive_score(
    real: &[Tensor],
    synth: &[Tensor],
    seed: u64,
    repeats: usize,
    cfg: &AuxTrainConfig,
) -> Result<(f64, f64)> {
    repeat_metric(seed, repeats, |rng| predictive_once(real, synth, rng, cfg))
}

// ---------------------------------------------------------------------------
// Context-FID and its embedder.
// ---------------------------------------------------------------------------

/// Embedder setup: a recurrent encoder mean-pooled over time into a fixed
/// embedding, trained as an autoencoder on the real set only.
#[derive(Debug, Clone)]
pub struct EmbedderConfig {
    pub embedding_dim: usize,
    /// 0 = auto: max(32, 2·D).
    pub hidden: usize,
    pub train: AuxTrainConfig,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { embedding_dim: 32, hidden: 0, train: AuxTrainConfig::default() }
    }
}

/// Frozen temporal embedder: GRU over time, mean-pooled hidden states,
/// linear projection to the embedding space.
#[derive(Debug, Clone)]
pub struct EmbedderCheckpoint {
    gru: GruLayer,
    w_emb: Tensor,
    b_emb: Tensor,
    pub embedding_dim: usize,
}

impl EmbedderCheckpoint {
    /// Deterministically embed a window set into [n, embedding_dim].
    pub fn embed(&self, windows: &[Tensor]) -> Result<Tensor> {
        let (t, d) = check_window_set(windows, "embedding")?;
        if d != self.gru.wz.cols() {
            return Err(Error::Dimension(format!(
                "embedder trained on {} channels, got {d}",
                self.gru.wz.cols()
            )));
        }
        let refs: Vec<&Tensor> = windows.iter().collect();
        let mut g = Graph::new();
        let (emb, _) = embed_graph(&mut g, &self.gru, &self.w_emb, &self.b_emb, &refs, t)?;
        Ok(g.value(emb).clone())
    }
}

/// Build the embedding head; returns the output and its leaf vars in
/// parameter order (gru, w_emb, b_emb).
fn embed_graph(
    g: &mut Graph,
    gru: &GruLayer,
    w_emb: &Tensor,
    b_emb: &Tensor,
    windows: &[&Tensor],
    t: usize,
) -> Result<(Var, Vec<Var>)> {
    let inputs = step_inputs(g, windows, 0..t);
    let gv = gru.vars(g);
    let hidden = gru_sequence(g, &gv, &inputs, windows.len(), gru.hidden())?;
    let sum = g.sum_vars(&hidden)?;
    let mean = g.scale(sum, 1.0 / t as f64);
    let we = g.leaf(w_emb.clone());
    let be = g.leaf(b_emb.clone());
    let proj = g.matmul(mean, we, false, true)?;
    let out = g.add_row(proj, be)?;
    let mut vars = GruLayer::var_list(&gv);
    vars.push(we);
    vars.push(be);
    Ok((out, vars))
}

struct EmbedderNet<'a> {
    windows: &'a [Tensor],
    gru: GruLayer,
    w_emb: Tensor,
    b_emb: Tensor,
    w_dec: Tensor,
    b_dec: Tensor,
}

impl AuxNet for EmbedderNet<'_> {
    fn item_count(&self) -> usize {
        self.windows.len()
    }

    fn build_loss(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Var>)> {
        let picked: Vec<&Tensor> = batch.iter().map(|&i| &self.windows[i]).collect();
        let t = picked[0].rows();
        let d = picked[0].cols();
        let (emb, mut vars) = embed_graph(g, &self.gru, &self.w_emb, &self.b_emb, &picked, t)?;
        let wd = g.leaf(self.w_dec.clone());
        let bd = g.leaf(self.b_dec.clone());
        vars.push(wd);
        vars.push(bd);
        let recon = g.matmul(emb, wd, false, true)?;
        let recon = g.add_row(recon, bd)?;
        let mut target = Tensor::zeros(vec![picked.len(), t * d]);
        for (i, w) in picked.iter().enumerate() {
            target.data_mut()[i * t * d..(i + 1) * t * d].copy_from_slice(w.data());
        }
        let tv = g.constant(target);
        let loss = g.mean_sq_diff(recon, tv)?;
        Ok((loss, vars))
    }

    fn apply_step(&mut self, opt: &mut Adam, grads: &[Tensor]) -> Result<()> {
        let mut params = self.gru.params_mut();
        params.push(&mut self.w_emb);
        params.push(&mut self.b_emb);
        params.push(&mut self.w_dec);
        params.push(&mut self.b_dec);
        opt.step(&mut params, grads)
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut snap: Vec<Tensor> = self.gru.params_ref().into_iter().cloned().collect();
        snap.push(self.w_emb.clone());
        snap.push(self.b_emb.clone());
        snap.push(self.w_dec.clone());
        snap.push(self.b_dec.clone());
        snap
    }

    fn restore(&mut self, snap: &[Tensor]) {
        let mut params = self.gru.params_mut();
        params.push(&mut self.w_emb);
        params.push(&mut self.b_emb);
        params.push(&mut self.w_dec);
        params.push(&mut self.b_dec);
        for (p, s) in params.into_iter().zip(snap) {
            *p = s.clone();
        }
    }
}

/// Train the context-FID embedder on the real set only.
pub fn train_embedder(real: &[Tensor], cfg: &EmbedderConfig, seed: u64) -> Result<EmbedderCheckpoint> {
    let (t, d) = check_window_set(real, "real")?;
    if cfg.embedding_dim == 0 {
        return Err(Error::Config("embedding_dim must be positive".into()));
    }
    let hidden = if cfg.hidden > 0 { cfg.hidden } else { (2 * d).max(32) };
    let mut rng = Rng::from_seed(seed).split_str("embedder");

    let gru = GruLayer::new(d, hidden, &mut rng);
    let w_emb =
        Tensor::randn(vec![cfg.embedding_dim, hidden], (1.0 / hidden as f64).sqrt(), &mut rng).with_grad();
    let b_emb = Tensor::zeros(vec![cfg.embedding_dim]).with_grad();
    let w_dec = Tensor::randn(
        vec![t * d, cfg.embedding_dim],
        (1.0 / cfg.embedding_dim as f64).sqrt(),
        &mut rng,
    )
    .with_grad();
    let b_dec = Tensor::zeros(vec![t * d]).with_grad();

    let mut net = EmbedderNet { windows: real, gru, w_emb, b_emb, w_dec, b_dec };
    train_aux(&mut net, &cfg.train, &mut rng)?;
    let EmbedderNet { gru, w_emb, b_emb, .. } = net;
    Ok(EmbedderCheckpoint { gru, w_emb, b_emb, embedding_dim: cfg.embedding_dim })
}

/// Fréchet distance between the embedding distributions of two window sets.
pub fn context_fid(real: &[Tensor], synth: &[Tensor], embedder: &EmbedderCheckpoint) -> Result<f64> {
    let need = embedder.embedding_dim + 1;
    if real.len() < need || synth.len() < need {
        return Err(Error::Input(format!(
            "context_fid needs at least {need} windows per set, got {} and {}",
            real.len(),
            synth.len()
        )));
    }
    let a = embedder.embed(real)?;
    let b = embedder.embed(synth)?;
    fid_from_embeddings(&a, &b)
}

/// Mean and (regularized) covariance of embedding rows.
pub fn mean_and_cov(embeddings: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if !embeddings.is_matrix() || embeddings.rows() < 2 {
        return Err(Error::Input(format!(
            "moments need at least 2 embedding rows, got {:?}",
            embeddings.shape()
        )));
    }
    let (n, d) = (embeddings.rows(), embeddings.cols());
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in embeddings.row(i).iter().enumerate() {
            mu[j] += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Tensor::zeros(vec![d, d]);
    for i in 0..n {
        let row = embeddings.row(i);
        for a in 0..d {
            let da = row[a] - mu[a];
            for b in a..d {
                let v = da * (row[b] - mu[b]);
                cov.data_mut()[a * d + b] += v;
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov.at2(a, b) / (n - 1) as f64;
            cov.data_mut()[a * d + b] = v;
            cov.data_mut()[b * d + a] = v;
        }
    }
    for a in 0..d {
        cov.data_mut()[a * d + a] += 1e-6;
    }
    Ok((mu, cov))
}

/// Fréchet distance from two embedding matrices (rows = samples).
pub fn fid_from_embeddings(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (mu1, cov1) = mean_and_cov(a)?;
    let (mu2, cov2) = mean_and_cov(b)?;
    frechet_distance(&mu1, &cov1, &mu2, &cov2)
}

/// ||μ1−μ2||² + Tr(Σ1 + Σ2 − 2(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}); square roots via
/// symmetric eigendecomposition with eigenvalues clamped at zero.
pub fn frechet_distance(mu1: &[f64], cov1: &Tensor, mu2: &[f64], cov2: &Tensor) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != [d, d] || cov2.shape() != [d, d] {
        return Err(Error::Dimension(format!(
            "moment dimensions disagree: μ {} / {}, Σ {:?} / {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    let s1 = sym_matrix_sqrt(cov1)?;
    let inner_half = crate::tensor::matmul(&s1, cov2, false, false)?;
    let inner = crate::tensor::matmul(&inner_half, &s1, false, false)?;
    let cross = sym_matrix_sqrt(&inner)?;
    let mut dist = 0.0;
    for j in 0..d {
        let dm = mu1[j] - mu2[j];
        dist += dm * dm;
        dist += cov1.at2(j, j) + cov2.at2(j, j) - 2.0 * cross.at2(j, j);
    }
    Ok(dist.max(0.0))
}

// ---------------------------------------------------------------------------
// Correlational score.
// ---------------------------------------------------------------------------

/// Pooled D×D Pearson correlation matrix over all (window, step) rows.
/// Zero-variance channels contribute correlation 0.
pub fn correlation_matrix(windows: &[Tensor]) -> Result<Tensor> {
    let (_, d) = check_window_set(windows, "correlation")?;
    let n: usize = windows.iter().map(|w| w.rows()).sum();
    let mut mu = vec![0.0; d];
    for w in windows {
        for i in 0..w.rows() {
            for (j, &v) in w.row(i).iter().enumerate() {
                mu[j] += v;
            }
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for w in windows {
        for i in 0..w.rows() {
            let row = w.row(i);
            for a in 0..d {
                let da = row[a] - mu[a];
                for b in a..d {
                    cov[a * d + b] += da * (row[b] - mu[b]);
                }
            }
        }
    }
    let mut corr = Tensor::zeros(vec![d, d]);
    for a in 0..d {
        for b in a..d {
            let denom = (cov[a * d + a] * cov[b * d + b]).sqrt();
            let v = if a == b {
                if cov[a * d + a] > 0.0 { 1.0 } else { 0.0 }
            } else if denom > 0.0 {
                cov[a * d + b] / denom
            } else {
                0.0
            };
            corr.data_mut()[a * d + b] = v;
            corr.data_mut()[b * d + a] = v;
        }
    }
    Ok(corr)
}

/// Mean over upper-triangle channel pairs of |corr_real − corr_synth|.
pub fn correlational_score(real: &[Tensor], synth: &[Tensor]) -> Result<f64> {
    let (_, d_r) = check_window_set(real, "real")?;
    let (_, d_s) = check_window_set(synth, "synthetic")?;
    if d_r != d_s {
        return Err(Error::Dimension(format!("channel mismatch: {d_r} vs {d_s}")));
    }
    if d_r < 2 {
        return Err(Error::Input("correlational score needs at least 2 channels".into()));
    }
    let cr = correlation_matrix(real)?;
    let cs = correlation_matrix(synth)?;
    let d = d_r;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..d {
        for b in (a + 1)..d {
            total += (cr.at2(a, b) - cs.at2(a, b)).abs();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

// ---------------------------------------------------------------------------
// Forecast errors and report assembly.
// ---------------------------------------------------------------------------

/// (RMSE, MAE) over all entries of equally shaped matrices.
pub fn forecast_errors(pred: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "forecast shapes disagree: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("empty forecast".into()));
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

/// One reported metric: mean ± sample std over `repeats` runs.
#[derive(Debug, Clone, Serialize)]
pub struct MetricValue {
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub context_fid: MetricValue,
    pub correlational: MetricValue,
    pub discriminative: MetricValue,
    pub predictive: MetricValue,
}

/// Run `repeats` independent retrainings, one thread each; repeat `i` seeds
/// its RNG from (seed, i) so results are identical regardless of scheduling.
fn repeat_metric<F>(seed: u64, repeats: usize, f: F) -> Result<(f64, f64)>
where
    F: Fn(&mut Rng) -> Result<f64> + Sync,
{
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let outcomes: Vec<Result<f64>> = if repeats == 1 {
        let mut rng = Rng::from_seed(seed).split(0);
        vec![f(&mut rng)]
    } else {
        let fref = &f;
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..repeats)
                .map(|rep| {
                    scope.spawn(move || {
                        let mut rng = Rng::from_seed(seed).split(rep as u64);
                        fref(&mut rng)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Numeric("metric repeat thread panicked".into()))
                    })
                })
                .collect()
        })
    };
    let mut values = Vec::with_capacity(repeats);
    for outcome in outcomes {
        values.push(outcome?);
    }
    Ok(mean_std(&values))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Run the full metric suite with `repeats` auxiliary retrainings each.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_all(
    real: &[Tensor],
    synth: &[Tensor],
    seed: u64,
    repeats: usize,
    emb_cfg: &EmbedderConfig,
    aux_cfg: &AuxTrainConfig,
) -> Result<MetricReport> {
    let (fid_mean, fid_std) = repeat_metric(seed ^ 0x66_69_64, repeats, |rng| {
        let emb = train_embedder(real, emb_cfg, rng.next_u64())?;
        context_fid(real, synth, &emb)
    })?;
    let correlational = correlational_score(real, synth)?;
    let (disc_mean, disc_std) =
        discriminative_score(real, synth, seed ^ 0x64_69_73_63, repeats, aux_cfg)?;
    let (pred_mean, pred_std) =
        predictive_score(real, synth, seed ^ 0x70_72_65_64, repeats, aux_cfg)?;
    Ok(MetricReport {
        context_fid: MetricValue { mean: fid_mean, std: fid_std, repeats },
        correlational: MetricValue { mean: correlational, std: 0.0, repeats: 1 },
        discriminative: MetricValue { mean: disc_mean, std: disc_std, repeats },
        predictive: MetricValue { mean: pred_mean, std: pred_std, repeats },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn_windows(seed: u64, n: usize, t: usize, d: usize) -> Vec<Tensor> {
        let mut rng = Rng::from_seed(seed);
        (0..n).map(|_| Tensor::randn(vec![t, d], 1.0, &mut rng)).collect()
    }

    fn quick_aux() -> AuxTrainConfig {
        AuxTrainConfig {
            max_steps: 600,
            lr: 1e-2,
            batch: 32,
            patience: 5,
            min_delta: 1e-4,
            max_reductions: 6,
        }
    }

    #[test]
    fn frechet_identical_gaussians_is_zero() {
        let cov = Tensor::new(vec![2, 2], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let d = frechet_distance(&[0.5, -1.0], &cov, &[0.5, -1.0], &cov).unwrap();
        assert!(d.abs() < 1e-8, "got {d}");
    }

    #[test]
    fn frechet_unit_mean_shift_is_one() {
        let cov = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let d = frechet_distance(&[0.0], &cov, &[1.0], &cov).unwrap();
        assert!((d - 1.0).abs() < 1e-8, "got {d}");
    }

    #[test]
    fn frechet_variance_gap_one_vs_four_is_one() {
        let c1 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let c2 = Tensor::new(vec![1, 1], vec![4.0]).unwrap();
        let d = frechet_distance(&[0.0], &c1, &[0.0], &c2).unwrap();
        assert!((d - 1.0).abs() < 1e-8, "got {d}");
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = Rng::from_seed(7);
        let a = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let mut c1 = crate::tensor::matmul(&a, &a, false, true).unwrap();
        for i in 0..3 {
            let v = c1.at2(i, i) + 0.5;
            c1.data_mut()[i * 3 + i] = v;
        }
        let b = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let mut c2 = crate::tensor::matmul(&b, &b, false, true).unwrap();
        for i in 0..3 {
            let v = c2.at2(i, i) + 0.5;
            c2.data_mut()[i * 3 + i] = v;
        }
        let mu1 = [0.1, -0.2, 0.3];
        let mu2 = [1.0, 0.0, -1.0];
        let d12 = frechet_distance(&mu1, &c1, &mu2, &c2).unwrap();
        let d21 = frechet_distance(&mu2, &c2, &mu1, &c1).unwrap();
        assert!((d12 - d21).abs() < 1e-8, "{d12} vs {d21}");
    }

    #[test]
    fn frechet_rejects_asymmetric_covariance() {
        let c1 = Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.5, 1.0]).unwrap();
        let c2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = frechet_distance(&[0.0, 0.0], &c1, &[0.0, 0.0], &c2).unwrap_err();
        assert_eq!(err.category(), "numeric");
    }

    #[test]
    fn fid_point_masses_at_unit_distance() {
        // Embedding rows all at 0 vs all at (1, 0): regularized covariances
        // cancel and the distance reduces to the squared mean gap.
        let a = Tensor::zeros(vec![8, 2]);
        let mut b = Tensor::zeros(vec![8, 2]);
        for i in 0..8 {
            b.data_mut()[i * 2] = 1.0;
        }
        let d = fid_from_embeddings(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn fid_is_order_invariant() {
        let mut rng = Rng::from_seed(11);
        let a = Tensor::randn(vec![20, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![20, 3], 1.0, &mut rng);
        let mut rows: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut rows);
        let mut a_shuf = Tensor::zeros(vec![20, 3]);
        for (dst, &src) in rows.iter().enumerate() {
            a_shuf.data_mut()[dst * 3..(dst + 1) * 3].copy_from_slice(a.row(src));
        }
        let d1 = fid_from_embeddings(&a, &b).unwrap();
        let d2 = fid_from_embeddings(&a_shuf, &b).unwrap();
        assert!((d1 - d2).abs() < 1e-8, "{d1} vs {d2}");
    }

    #[test]
    fn context_fid_same_set_is_tiny() {
        let real = randn_windows(3, 10, 6, 2);
        let cfg = EmbedderConfig {
            embedding_dim: 4,
            hidden: 8,
            train: AuxTrainConfig { max_steps: 60, ..quick_aux() },
        };
        let emb = train_embedder(&real, &cfg, 9).unwrap();
        let d = context_fid(&real, &real, &emb).unwrap();
        assert!(d < 1e-6, "got {d}");
    }

    #[test]
    fn context_fid_requires_enough_windows() {
        let real = randn_windows(3, 4, 6, 2);
        let cfg = EmbedderConfig {
            embedding_dim: 4,
            hidden: 8,
            train: AuxTrainConfig { max_steps: 20, ..quick_aux() },
        };
        let emb = train_embedder(&real, &cfg, 9).unwrap();
        let err = context_fid(&real, &real, &emb).unwrap_err();
        assert_eq!(err.category(), "input");
    }

    #[test]
    fn embedder_is_deterministic_and_frozen() {
        let real = randn_windows(21, 8, 5, 2);
        let cfg = EmbedderConfig {
            embedding_dim: 3,
            hidden: 8,
            train: AuxTrainConfig { max_steps: 30, ..quick_aux() },
        };
        let e1 = train_embedder(&real, &cfg, 5).unwrap();
        let e2 = train_embedder(&real, &cfg, 5).unwrap();
        let a = e1.embed(&real).unwrap();
        let b = e2.embed(&real).unwrap();
        assert_eq!(a.data(), b.data());
        let c = e1.embed(&real).unwrap();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn correlational_identical_sets_score_zero() {
        let w = randn_windows(5, 6, 10, 3);
        let s = correlational_score(&w, &w).unwrap();
        assert!(s.abs() < 1e-12, "got {s}");
    }

    #[test]
    fn correlational_opposite_correlations_score_two() {
        // Real: second channel equals the first (corr +1). Synthetic: second
        // channel is its negation (corr −1). |1 − (−1)| = 2.
        let mut rng = Rng::from_seed(13);
        let mut real = Vec::new();
        let mut synth = Vec::new();
        for _ in 0..5 {
            let base = Tensor::randn(vec![12, 1], 1.0, &mut rng);
            let mut pos = Tensor::zeros(vec![12, 2]);
            let mut neg = Tensor::zeros(vec![12, 2]);
            for i in 0..12 {
                let v = base.data()[i];
                pos.data_mut()[i * 2] = v;
                pos.data_mut()[i * 2 + 1] = v;
                neg.data_mut()[i * 2] = v;
                neg.data_mut()[i * 2 + 1] = -v;
            }
            real.push(pos);
            synth.push(neg);
        }
        let s = correlational_score(&real, &synth).unwrap();
        assert!((s - 2.0).abs() < 1e-6, "got {s}");
    }

    #[test]
    fn correlational_invariant_to_affine_rescale() {
        let real = randn_windows(17, 6, 10, 3);
        let synth = randn_windows(18, 6, 10, 3);
        let s1 = correlational_score(&real, &synth).unwrap();
        let rescale = |w: &Tensor| {
            let mut out = w.clone();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let scale = 2.0 + j as f64;
                    let shift = -3.0 * j as f64;
                    out.data_mut()[i * w.cols() + j] = scale * w.at2(i, j) + shift;
                }
            }
            out
        };
        let real2: Vec<Tensor> = real.iter().map(rescale).collect();
        let synth2: Vec<Tensor> = synth.iter().map(rescale).collect();
        let s2 = correlational_score(&real2, &synth2).unwrap();
        assert!((s1 - s2).abs() < 1e-9, "{s1} vs {s2}");
    }

    #[test]
    fn correlational_equivariant_under_channel_permutation() {
        let real = randn_windows(19, 6, 10, 3);
        let synth = randn_windows(20, 6, 10, 3);
        let s1 = correlational_score(&real, &synth).unwrap();
        let perm = |w: &Tensor| {
            let order = [2usize, 0, 1];
            let mut out = Tensor::zeros(vec![w.rows(), 3]);
            for i in 0..w.rows() {
                for (jdst, &jsrc) in order.iter().enumerate() {
                    out.data_mut()[i * 3 + jdst] = w.at2(i, jsrc);
                }
            }
            out
        };
        let real2: Vec<Tensor> = real.iter().map(perm).collect();
        let synth2: Vec<Tensor> = synth.iter().map(perm).collect();
        let s2 = correlational_score(&real2, &synth2).unwrap();
        assert!((s1 - s2).abs() < 1e-12, "{s1} vs {s2}");
    }

    #[test]
    fn correlational_zero_variance_channel_uses_zero_convention() {
        // One constant channel in both sets: those pairs contribute |0−0|=0,
        // so the score comes only from the live pair, which matches.
        let mut rng = Rng::from_seed(23);
        let build = |rng: &mut Rng| -> Vec<Tensor> {
            (0..4)
                .map(|_| {
                    let mut w = Tensor::randn(vec![8, 3], 1.0, rng);
                    for i in 0..8 {
                        w.data_mut()[i * 3 + 2] = 5.0;
                    }
                    w
                })
                .collect()
        };
        let real = build(&mut rng);
        let s = correlational_score(&real, &real).unwrap();
        assert!(s.abs() < 1e-12, "got {s}");
        let cm = correlation_matrix(&real).unwrap();
        assert_eq!(cm.at2(0, 2), 0.0);
        assert_eq!(cm.at2(2, 2), 0.0);
    }

    #[test]
    fn correlational_needs_two_channels() {
        let w = randn_windows(5, 4, 6, 1);
        let err = correlational_score(&w, &w).unwrap_err();
        assert_eq!(err.category(), "input");
    }

    #[test]
    fn forecast_errors_hand_examples() {
        let truth = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (rmse, mae) = forecast_errors(&truth, &truth).unwrap();
        assert_eq!((rmse, mae), (0.0, 0.0));

        let mut plus = truth.clone();
        for v in plus.data_mut() {
            *v += 1.0;
        }
        let (rmse, mae) = forecast_errors(&plus, &truth).unwrap();
        assert!((rmse - 1.0).abs() < 1e-12 && (mae - 1.0).abs() < 1e-12);

        let mut alt = truth.clone();
        for (i, v) in alt.data_mut().iter_mut().enumerate() {
            *v += if i % 2 == 0 { 2.0 } else { -2.0 };
        }
        let (rmse, mae) = forecast_errors(&alt, &truth).unwrap();
        assert!((rmse - 2.0).abs() < 1e-12 && (mae - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forecast_errors_rejects_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = forecast_errors(&a, &b).unwrap_err();
        assert_eq!(err.category(), "dimension");
    }

    #[test]
    fn discriminative_separates_real_from_zeros() {
        let real = randn_windows(31, 40, 8, 2);
        let zeros: Vec<Tensor> = (0..40).map(|_| Tensor::zeros(vec![8, 2])).collect();
        let (score, _) = discriminative_score(&real, &zeros, 4, 1, &quick_aux()).unwrap();
        assert!(score > 0.4, "got {score}");
    }

    #[test]
    fn discriminative_cannot_separate_fresh_real_from_real() {
        let real = randn_windows(37, 80, 8, 2);
        let fresh = randn_windows(41, 80, 8, 2);
        let (score, _) = discriminative_score(&real, &fresh, 4, 2, &quick_aux()).unwrap();
        assert!(score < 0.25, "got {score}");
    }

    #[test]
    fn discriminative_is_deterministic() {
        let real = randn_windows(31, 20, 6, 2);
        let zeros: Vec<Tensor> = (0..20).map(|_| Tensor::zeros(vec![6, 2])).collect();
        let cfg = AuxTrainConfig { max_steps: 60, ..quick_aux() };
        let a = discriminative_score(&real, &zeros, 4, 2, &cfg).unwrap();
        let b = discriminative_score(&real, &zeros, 4, 2, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discriminative_rejects_mismatched_shapes() {
        let real = randn_windows(1, 4, 6, 2);
        let synth = randn_windows(2, 4, 5, 2);
        let err = discriminative_score(&real, &synth, 0, 1, &quick_aux()).unwrap_err();
        assert_eq!(err.category(), "dimension");
    }

    #[test]
    fn predictive_constant_series_reach_tiny_mae() {
        let make = |v: f64| -> Vec<Tensor> { (0..20).map(|_| Tensor::full(vec![8, 2], v)).collect() };
        let real = make(0.7);
        let synth = make(0.7);
        let (score, _) = predictive_score(&real, &synth, 6, 1, &quick_aux()).unwrap();
        assert!(score < 1e-3, "got {score}");
    }

    #[test]
    fn predictive_requires_two_steps() {
        let real = randn_windows(1, 4, 1, 2);
        let err = predictive_score(&real, &real, 0, 1, &quick_aux()).unwrap_err();
        assert_eq!(err.category(), "input");
    }

    #[test]
    fn repeats_produce_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        let (m1, s1) = mean_std(&[4.5]);
        assert_eq!((m1, s1), (4.5, 0.0));
    }

    #[test]
    fn report_serializes_with_schema() {
        let real = randn_windows(51, 12, 6, 2);
        let synth = randn_windows(52, 12, 6, 2);
        let emb_cfg = EmbedderConfig {
            embedding_dim: 4,
            hidden: 8,
            train: AuxTrainConfig { max_steps: 40, ..quick_aux() },
        };
        let aux = AuxTrainConfig { max_steps: 40, ..quick_aux() };
        let report = evaluate_all(&real, &synth, 3, 2, &emb_cfg, &aux).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in ["context_fid", "correlational", "discriminative", "predictive"] {
            let entry = &json[key];
            assert!(entry["mean"].is_number(), "{key} missing mean");
            assert!(entry["std"].is_number(), "{key} missing std");
            assert!(entry["repeats"].is_u64(), "{key} missing repeats");
        }
        assert_eq!(json["discriminative"]["repeats"], 2);
        assert_eq!(json["correlational"]["repeats"], 1);
    }
}
