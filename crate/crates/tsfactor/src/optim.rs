//! Adam optimizer, gradient clipping, and the finite-difference gradient
//! checking harness used by the test suite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are keyed by parameter index,
/// so callers must pass parameters in a stable order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, step_count: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected update, in place. `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "adam: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Dimension(format!(
                "adam state tracks {} params, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "adam: param {i} shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if self.first_moment[i].shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "adam: param {i} shape {:?} vs moment shape {:?}",
                    p.shape(),
                    self.first_moment[i].shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let pd = p.data_mut();
            let gd = g.data();
            for j in 0..pd.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gd[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gd[j] * gd[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Compare analytic gradients against central finite differences.
///
/// `f(params, want_grads)` evaluates the scalar loss; when `want_grads` is
/// true it must also return analytic gradients, one tensor per parameter in
/// order. Returns the max over all parameter elements of
/// |analytic − fd| / (|analytic| + |fd| + 1e-8).
pub fn grad_check<F>(mut f: F, params: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Option<Vec<Tensor>>)>,
{
    if !(1e-5..=1e-3).contains(&fd_step) {
        return Err(Error::Config(format!("fd_step must be in [1e-5, 1e-3], got {fd_step}")));
    }
    let (loss0, grads) = f(params, true)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite at the probe point: {loss0}")));
    }
    let grads = grads.ok_or_else(|| Error::State("closure returned no gradients".into()))?;
    if grads.len() != params.len() {
        return Err(Error::Dimension(format!(
            "got {} gradient tensors for {} params",
            grads.len(),
            params.len()
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        if grads[i].shape() != params[i].shape() {
            return Err(Error::Dimension(format!(
                "grad {i} shape {:?} vs param shape {:?}",
                grads[i].shape(),
                params[i].shape()
            )));
        }
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + fd_step;
            let (lp, _) = f(&work, false)?;
            work[i].data_mut()[j] = orig - fd_step;
            let (lm, _) = f(&work, false)?;
            work[i].data_mut()[j] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric("non-finite loss during finite differencing".into()));
            }
            let fd = (lp - lm) / (2.0 * fd_step);
            let a = grads[i].data()[j];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Var};
    use crate::rng::Rng;

    #[test]
    fn adam_zero_grad_first_step_is_noop() {
        let mut p = Tensor::scalar(1.5);
        let g = Tensor::scalar(0.0);
        let mut opt = Adam::new(1e-4, 0.9, 0.999);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m̂ = g, v̂ = g² under bias correction, so the step is ≈ -lr·sign(g).
        let mut p = Tensor::scalar(2.0);
        let g = Tensor::scalar(0.5);
        let mut opt = Adam::new(1e-4, 0.9, 0.999);
        opt.step(&mut [&mut p], &[g]).unwrap();
        let delta = 2.0 - p.data()[0];
        assert!((delta - 1e-4).abs() < 1e-9, "step was {delta}");
    }

    #[test]
    fn adam_two_runs_bit_identical() {
        let run = || {
            let mut rng = Rng::from_seed(5);
            let mut p = Tensor::randn(vec![4, 3], 1.0, &mut rng);
            let mut opt = Adam::new(1e-2, 0.9, 0.95);
            for step in 0..25 {
                let g = Tensor::randn(vec![4, 3], 0.3, &mut Rng::from_seed(100 + step));
                opt.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_bad_inputs() {
        let mut p = Tensor::zeros(vec![2]);
        let mut opt = Adam::new(1e-3, 0.9, 0.999);
        let wrong_shape = Tensor::zeros(vec![3]);
        assert!(opt.step(&mut [&mut p], &[wrong_shape]).is_err());
        let mut opt2 = Adam::new(1e-3, 0.9, 0.999);
        let nan = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        let err = opt2.step(&mut [&mut p], &[nan]).unwrap_err();
        assert_eq!(err.category(), "numeric");
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut gs = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let norm = clip_global_norm(&mut gs, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(gs[0].data(), &[3.0, 4.0]);
        let norm = clip_global_norm(&mut gs, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((gs[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((gs[0].data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn grad_check_simple_square() {
        // f(w) = w² at w = 3: analytic 6.
        let params = vec![Tensor::scalar(3.0)];
        let rel = grad_check(
            |ps, want| {
                let w = ps[0].data()[0];
                let g = if want { Some(vec![Tensor::scalar(2.0 * w)]) } else { None };
                Ok((w * w, g))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let params = vec![Tensor::scalar(1.0)];
        let f = |ps: &[Tensor], _w: bool| Ok((ps[0].data()[0], Some(vec![Tensor::scalar(1.0)])));
        assert!(grad_check(f, &params, 1e-2).is_err());
    }

    /// FD-check a graph construction: `build` receives leaves (one per
    /// parameter, in order) and returns the scalar loss var.
    fn check_graph<B>(params: Vec<Tensor>, build: B) -> f64
    where
        B: Fn(&mut Graph, &[Var]) -> Var,
    {
        grad_check(
            |ps, want| {
                let mut g = Graph::new();
                let vars: Vec<Var> = ps
                    .iter()
                    .map(|p| {
                        let mut t = p.clone();
                        t.requires_grad = true;
                        g.leaf(t)
                    })
                    .collect();
                let loss = build(&mut g, &vars);
                let lv = g.scalar_value(loss);
                if !want {
                    return Ok((lv, None));
                }
                g.backward(loss)?;
                let grads = vars
                    .iter()
                    .zip(ps)
                    .map(|(&v, p)| {
                        g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
                    })
                    .collect();
                Ok((lv, Some(grads)))
            },
            &params,
            1e-4,
        )
        .unwrap()
    }

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::randn(shape.to_vec(), 1.0, rng)
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = Rng::from_seed(21);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng);
        let tgt = randn(&[3, 4], &mut rng);

        let rel = check_graph(vec![a.clone(), b.clone()], |g, vs| {
            let t = g.constant(tgt.clone());
            let s = g.add(vs[0], vs[1]).unwrap();
            let m = g.mul(s, vs[0]).unwrap();
            let d = g.sub(m, vs[1]).unwrap();
            let sc = g.scale(d, 0.7);
            g.mean_sq_diff(sc, t).unwrap()
        });
        assert!(rel < 1e-6, "elementwise rel {rel}");
    }

    #[test]
    fn fd_activations() {
        let mut rng = Rng::from_seed(22);
        let x = randn(&[2, 5], &mut rng);
        let rel = check_graph(vec![x], |g, vs| {
            let a = g.silu(vs[0]);
            let b = g.sigmoid(a);
            let c = g.tanh(b);
            g.mean_all(c)
        });
        assert!(rel < 1e-6, "activations rel {rel}");
    }

    #[test]
    fn fd_matmul_all_transpose_combos() {
        let mut rng = Rng::from_seed(23);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let (m, k, n) = (3, 4, 2);
            let a_shape = if ta { [k, m] } else { [m, k] };
            let b_shape = if tb { [n, k] } else { [k, n] };
            let a = randn(&a_shape, &mut rng);
            let b = randn(&b_shape, &mut rng);
            let tgt = randn(&[m, n], &mut rng);
            let rel = check_graph(vec![a, b], |g, vs| {
                let c = g.matmul(vs[0], vs[1], ta, tb).unwrap();
                let t = g.constant(tgt.clone());
                g.mean_sq_diff(c, t).unwrap()
            });
            assert!(rel < 1e-6, "matmul ({ta},{tb}) rel {rel}");
        }
    }

    #[test]
    fn fd_add_row_and_rmsnorm() {
        let mut rng = Rng::from_seed(24);
        let x = randn(&[4, 3], &mut rng);
        let bias = randn(&[3], &mut rng);
        let gain = randn(&[3], &mut rng);
        let tgt = randn(&[4, 3], &mut rng);
        let rel = check_graph(vec![x, bias, gain], |g, vs| {
            let y = g.add_row(vs[0], vs[1]).unwrap();
            let n = g.rmsnorm_rows(y, vs[2], 1e-6).unwrap();
            let t = g.constant(tgt.clone());
            g.mean_sq_diff(n, t).unwrap()
        });
        assert!(rel < 1e-6, "add_row/rmsnorm rel {rel}");
    }

    #[test]
    fn fd_embedding() {
        let mut rng = Rng::from_seed(25);
        let table = randn(&[6, 3], &mut rng);
        let tgt = randn(&[4, 3], &mut rng);
        let rel = check_graph(vec![table], |g, vs| {
            let e = g.embedding(vs[0], &[5, 0, 5, 2]).unwrap();
            let t = g.constant(tgt.clone());
            g.mean_sq_diff(e, t).unwrap()
        });
        assert!(rel < 1e-6, "embedding rel {rel}");
    }

    #[test]
    fn fd_causal_attention() {
        let mut rng = Rng::from_seed(26);
        // Two sequences of length 3, d_model 4, 2 heads (head dim 2, even).
        let q = randn(&[6, 4], &mut rng);
        let k = randn(&[6, 4], &mut rng);
        let v = randn(&[6, 4], &mut rng);
        let tgt = randn(&[6, 4], &mut rng);
        let rel = check_graph(vec![q, k, v], |g, vs| {
            let o = g.causal_attention(vs[0], vs[1], vs[2], 2, 3, 10000.0, None).unwrap();
            let t = g.constant(tgt.clone());
            g.mean_sq_diff(o, t).unwrap()
        });
        assert!(rel < 1e-6, "attention rel {rel}");
    }

    #[test]
    fn fd_causal_attention_with_dropout() {
        let mut rng = Rng::from_seed(27);
        let q = randn(&[4, 4], &mut rng);
        let k = randn(&[4, 4], &mut rng);
        let v = randn(&[4, 4], &mut rng);
        let tgt = randn(&[4, 4], &mut rng);
        // Fixed seed inside the closure: identical mask on every evaluation.
        let rel = check_graph(vec![q, k, v], |g, vs| {
            let mut mask_rng = Rng::from_seed(999);
            let o = g
                .causal_attention(vs[0], vs[1], vs[2], 1, 4, 10000.0, Some((0.3, &mut mask_rng)))
                .unwrap();
            let t = g.constant(tgt.clone());
            g.mean_sq_diff(o, t).unwrap()
        });
        assert!(rel < 1e-6, "attention+dropout rel {rel}");
    }

    #[test]
    fn fd_conv1d() {
        let mut rng = Rng::from_seed(28);
        let x = randn(&[3, 7], &mut rng);
        let w = randn(&[2, 3, 3], &mut rng);
        let b = randn(&[2], &mut rng);
        let tgt = randn(&[2, 7], &mut rng);
        let rel = check_graph(vec![x, w, b], |g, vs| {
            let y = g.conv1d(vs[0], vs[1], vs[2]).unwrap();
            let t = g.constant(tgt.clone());
            g.mean_sq_diff(y, t).unwrap()
        });
        assert!(rel < 1e-6, "conv1d rel {rel}");
    }

    #[test]
    fn fd_dropout() {
        let mut rng = Rng::from_seed(29);
        let x = randn(&[5, 4], &mut rng);
        let tgt = randn(&[5, 4], &mut rng);
        let rel = check_graph(vec![x], |g, vs| {
            let mut drop_rng = Rng::from_seed(7);
            let y = g.dropout(vs[0], 0.4, &mut drop_rng).unwrap();
            let t = g.constant(tgt.clone());
            g.mean_sq_diff(y, t).unwrap()
        });
        assert!(rel < 1e-6, "dropout rel {rel}");
    }

    #[test]
    fn fd_cross_entropy() {
        let mut rng = Rng::from_seed(30);
        let logits = randn(&[4, 6], &mut rng);
        let rel = check_graph(vec![logits], |g, vs| {
            g.cross_entropy(vs[0], &[1, 5, 0, 3], &[1.0, 1.0, 0.0, 1.0]).unwrap()
        });
        assert!(rel < 1e-6, "cross_entropy rel {rel}");
    }

    #[test]
    fn fd_mean_abs_diff() {
        let mut rng = Rng::from_seed(31);
        let a = randn(&[3, 3], &mut rng);
        let b = randn(&[3, 3], &mut rng);
        let rel = check_graph(vec![a, b.clone()], |g, vs| g.mean_abs_diff(vs[0], vs[1]).unwrap());
        assert!(rel < 1e-6, "mean_abs_diff rel {rel}");
    }

    // Note: the straight-through estimator is deliberately NOT the true
    // derivative of its forward map, so it is excluded from FD checks here
    // and verified by exact hand-derived assertions in the graph tests.
    #[test]
    fn fd_slice_and_sum() {
        let mut rng = Rng::from_seed(32);
        let x = randn(&[6, 2], &mut rng);
        let tgt = randn(&[3, 2], &mut rng);
        let rel = check_graph(vec![x], |g, vs| {
            let top = g.slice_rows(vs[0], 0, 3).unwrap();
            let bottom = g.slice_rows(vs[0], 3, 3).unwrap();
            let t = g.constant(tgt.clone());
            let l1 = g.mean_sq_diff(top, t).unwrap();
            let l2 = g.mean_sq_diff(bottom, t).unwrap();
            let s = g.sum_vars(&[l1, l2]).unwrap();
            g.scale(s, 0.5)
        });
        assert!(rel < 1e-6, "slice/sum rel {rel}");
    }
}
