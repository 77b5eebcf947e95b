//! AdamW training with a reduce-on-plateau learning-rate schedule.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_adjoint, LossTerms, LossWeights};
use super::net::{self, encode_row, encode_tangent_row, encoded_width, Extra, ForwardOpts, Rows, BN_MOMENTUM};
use super::FieldModel;
use crate::dataset::FieldSample;
use crate::error::{Error, Result};

/// How input gradients are obtained inside the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GradMode {
    /// Forward-mode tangents through the network, differentiated exactly.
    Analytic,
    /// Central differences with `step` in normalized input units.
    FiniteDifference { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement needed to reset the plateau counter.
    pub threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub weights: LossWeights,
    pub grad_mode: GradMode,
    /// Skip all parameter and statistics updates.
    pub freeze: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            factor: 0.5,
            min_lr: 1e-6,
            threshold: 1e-4,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            val_fraction: 0.2,
            weights: LossWeights::default(),
            grad_mode: GradMode::Analytic,
            freeze: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid("need lr > 0 and 0 < factor < 1"));
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("need batch_size >= 1 and val_fraction in [0, 1)"));
        }
        if let GradMode::FiniteDifference { step } = self.grad_mode {
            if !(step > 0.0) {
                return Err(Error::invalid("finite-difference step must be positive"));
            }
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Unweighted validation terms.
    pub val_dist: f64,
    pub val_eik: f64,
    pub val_dir: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FieldModel,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,val_dist,val_eik,val_dir\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.val_dist, r.val_eik, r.val_dir
            ));
        }
        s
    }
}

/// Appends one tangent block per joint to the encoded primal rows.
pub(crate) fn with_tangent_rows(model: &FieldModel, u: &Array2<f64>, x: Array2<f64>) -> (Array2<f64>, Rows) {
    let k = u.nrows();
    let n = model.dof();
    let f = model.spec().frequencies;
    let e = x.ncols();
    let mut all = Array2::<f64>::zeros((k * (1 + n), e));
    all.slice_mut(s![..k, ..]).assign(&x);
    for j in 0..n {
        for r in 0..k {
            encode_tangent_row(u[[r, j]], j, f, all.row_mut((1 + j) * k + r));
        }
    }
    (
        all,
        Rows {
            batch: k,
            blocks: n,
            kind: Extra::Tangent,
        },
    )
}

/// Splits tangent-block outputs into values and raw-q gradients.
pub(crate) fn split_tangents(model: &FieldModel, y: &Array1<f64>, k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = model.dof();
    let scale = model.q_scale();
    let vals = y.slice(s![..k]).to_vec();
    let mut g = vec![0.0; k * n];
    for r in 0..k {
        for j in 0..n {
            g[r * n + j] = scale[j] * y[(1 + j) * k + r];
        }
    }
    (vals, g)
}

/// Network input rows for a batch under the given gradient mode.
fn batch_rows(model: &FieldModel, batch: &[&FieldSample], with_grads: bool, mode: GradMode) -> (Array2<f64>, Rows) {
    let k = batch.len();
    let d = model.dof() + model.point_dim();
    let f = model.spec().frequencies;
    let e = encoded_width(d, f);
    let mut u = Array2::<f64>::zeros((k, d));
    for (r, smp) in batch.iter().enumerate() {
        model.input_row(&smp.q, &smp.p, u.row_mut(r).into_slice().expect("standard layout"));
    }
    let mut x = Array2::<f64>::zeros((k, e));
    for r in 0..k {
        encode_row(u.row(r).as_slice().expect("standard layout"), f, x.row_mut(r));
    }
    if !with_grads {
        return (x, Rows::primal(k));
    }
    match mode {
        GradMode::Analytic => with_tangent_rows(model, &u, x),
        GradMode::FiniteDifference { step } => {
            let n = model.dof();
            let mut all = Array2::<f64>::zeros((k * (1 + 2 * n), e));
            all.slice_mut(s![..k, ..]).assign(&x);
            let mut shifted = vec![0.0; d];
            for j in 0..n {
                for (blk, sign) in [(1 + 2 * j, 1.0), (2 + 2 * j, -1.0)] {
                    for r in 0..k {
                        shifted.copy_from_slice(u.row(r).as_slice().expect("standard layout"));
                        shifted[j] += sign * step;
                        encode_row(&shifted, f, all.row_mut(blk * k + r));
                    }
                }
            }
            (
                all,
                Rows {
                    batch: k,
                    blocks: 2 * n,
                    kind: Extra::Shifted,
                },
            )
        }
    }
}

/// Values and raw-q gradients from a forward tape, plus a map from
/// gradient adjoints back to output-row adjoints.
fn read_outputs(model: &FieldModel, y: &Array1<f64>, rows: Rows, mode: GradMode) -> (Vec<f64>, Vec<f64>) {
    let k = rows.batch;
    let n = model.dof();
    match rows.kind {
        Extra::None => (y.slice(s![..k]).to_vec(), vec![0.0; k * n]),
        Extra::Tangent => split_tangents(model, y, k),
        Extra::Shifted => {
            let step = match mode {
                GradMode::FiniteDifference { step } => step,
                GradMode::Analytic => unreachable!("shifted rows only in finite-difference mode"),
            };
            let scale = model.q_scale();
            let mut g = vec![0.0; k * n];
            for r in 0..k {
                for j in 0..n {
                    let yp = y[(1 + 2 * j) * k + r];
                    let ym = y[(2 + 2 * j) * k + r];
                    g[r * n + j] = scale[j] * (yp - ym) / (2.0 * step);
                }
            }
            (y.slice(s![..k]).to_vec(), g)
        }
    }
}

fn output_adjoint(model: &FieldModel, ybar: &[f64], gbar: &[f64], rows: Rows, mode: GradMode) -> Array1<f64> {
    let k = rows.batch;
    let n = model.dof();
    let scale = model.q_scale();
    let mut out = Array1::<f64>::zeros(rows.total());
    out.slice_mut(s![..k]).assign(&Array1::from(ybar.to_vec()));
    match rows.kind {
        Extra::None => {}
        Extra::Tangent => {
            for j in 0..n {
                for r in 0..k {
                    out[(1 + j) * k + r] = scale[j] * gbar[r * n + j];
                }
            }
        }
        Extra::Shifted => {
            let step = match mode {
                GradMode::FiniteDifference { step } => step,
                GradMode::Analytic => unreachable!(),
            };
            for j in 0..n {
                for r in 0..k {
                    let a = scale[j] * gbar[r * n + j] / (2.0 * step);
                    out[(1 + 2 * j) * k + r] = a;
                    out[(2 + 2 * j) * k + r] = -a;
                }
            }
        }
    }
    out
}

struct Step {
    terms: LossTerms,
    grad: Vec<f64>,
    stats: Vec<(Array1<f64>, Array1<f64>)>,
}

fn train_step(
    model: &FieldModel,
    batch: &[&FieldSample],
    weights: &LossWeights,
    mode: GradMode,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
    want_grad: bool,
) -> Step {
    let with_grads = weights.needs_gradients();
    let (x, rows) = batch_rows(model, batch, with_grads, mode);
    let tape = net::forward(
        model.layout(),
        &model.params,
        &model.running,
        x,
        rows,
        ForwardOpts {
            batch_stats: model.spec().batch_norm,
            dropout,
        },
    );
    let (vals, grads) = read_outputs(model, &tape.y, rows, mode);
    let n = model.dof();
    let target: Vec<f64> = batch.iter().map(|s| s.value).collect();
    let mut tg = Vec::with_capacity(batch.len() * n);
    for s in batch {
        tg.extend_from_slice(&s.grad);
    }
    let adj = loss_adjoint(&vals, &grads, &target, &tg, n, weights);
    let mut terms = adj.terms;
    if !with_grads {
        // gradients were never computed; their terms are reported on validation
        terms.eik = 0.0;
        terms.dir = 0.0;
        terms.zero_grads = 0;
        terms.total = weights.dist * terms.dist;
    }
    let mut grad = Vec::new();
    if want_grad {
        grad = vec![0.0; model.params.len()];
        let ybar = output_adjoint(model, &adj.ybar, &adj.gbar, rows, mode);
        net::backward(model.layout(), &model.params, &tape, ybar.view(), Some(&mut grad), false);
    }
    let stats = tape
        .layers
        .iter()
        .filter_map(|l| Some((l.batch_mean.clone()?, l.batch_var.clone()?)))
        .collect();
    Step { terms, grad, stats }
}

/// Training-mode loss (batch statistics, no dropout) and its exact
/// parameter gradient. Used to check the double-backprop path.
pub fn loss_and_param_grad(
    model: &FieldModel,
    batch: &[FieldSample],
    weights: &LossWeights,
    mode: GradMode,
) -> Result<(LossTerms, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let refs: Vec<&FieldSample> = batch.iter().collect();
    let st = train_step(model, &refs, weights, mode, None, true);
    Ok((st.terms, st.grad))
}

/// Eval-mode validation terms over `set`.
fn validate_terms(model: &FieldModel, set: &[&FieldSample], weights: &LossWeights) -> LossTerms {
    let n = model.dof();
    let mut acc = LossTerms::default();
    let mut count = 0.0;
    for chunk in set.chunks(1024) {
        let (x, rows) = batch_rows(model, chunk, true, GradMode::Analytic);
        let tape = net::forward(model.layout(), &model.params, &model.running, x, rows, ForwardOpts::eval());
        let (vals, grads) = split_tangents(model, &tape.y, chunk.len());
        let target: Vec<f64> = chunk.iter().map(|s| s.value).collect();
        let mut tg = Vec::with_capacity(chunk.len() * n);
        for s in chunk {
            tg.extend_from_slice(&s.grad);
        }
        let t = loss_adjoint(&vals, &grads, &target, &tg, n, weights).terms;
        let w = chunk.len() as f64;
        acc.dist += t.dist * w;
        acc.eik += t.eik * w;
        acc.dir += t.dir * w;
        acc.zero_grads += t.zero_grads;
        count += w;
    }
    acc.dist /= count;
    acc.eik /= count;
    acc.dir /= count;
    acc.total = weights.dist * acc.dist + weights.eik * acc.eik + weights.dir * acc.dir;
    acc
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            params[i] -= lr * cfg.weight_decay * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Deterministic 8:2-style split of sample indices.
pub fn split_indices(len: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5_11d7));
    let n_val = ((len as f64) * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let tr = idx[n_val..].to_vec();
    (tr, val)
}

/// Trains `model` on `data`. Returns the final model with parameters rounded
/// to the checkpoint precision, and the per-epoch history.
pub fn train(mut model: FieldModel, data: &[FieldSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    for s in data {
        Error::check_dim(model.dof(), s.q.len())?;
        Error::check_dim(model.point_dim(), s.p.len())?;
        Error::check_dim(model.dof(), s.grad.len())?;
    }
    let (tr_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<&FieldSample> = if val_idx.is_empty() {
        tr_idx.iter().map(|&i| &data[i]).collect()
    } else {
        val_idx.iter().map(|&i| &data[i]).collect()
    };
    let mut order: Vec<usize> = tr_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params.len());
    let mut lr = cfg.lr;
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    let dropout = model.spec().dropout;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FieldSample> = chunk.iter().map(|&i| &data[i]).collect();
            let drop = if dropout > 0.0 { Some((dropout, &mut rng)) } else { None };
            let st = train_step(&model, &batch, &cfg.weights, cfg.grad_mode, drop, !cfg.freeze);
            if !st.terms.total.is_finite() || st.grad.iter().any(|g| !g.is_finite()) {
                let mut good = last_good.clone();
                good.quantize();
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(TrainOutcome { model: good, history }),
                });
            }
            sum += st.terms.total * batch.len() as f64;
            seen += batch.len();
            if !cfg.freeze {
                opt.step(&mut model.params, &st.grad, lr, cfg);
                let bn = batch.len() as f64;
                for (run, (mean, var)) in model.running.iter_mut().zip(st.stats) {
                    let unbiased = if bn > 1.0 { bn / (bn - 1.0) } else { 1.0 };
                    for k in 0..run.mean.len() {
                        run.mean[k] = (1.0 - BN_MOMENTUM) * run.mean[k] + BN_MOMENTUM * mean[k];
                        run.var[k] = (1.0 - BN_MOMENTUM) * run.var[k] + BN_MOMENTUM * var[k] * unbiased;
                    }
                }
            }
        }
        let vt = validate_terms(&model, &val, &cfg.weights);
        if !vt.total.is_finite() {
            let mut good = last_good.clone();
            good.quantize();
            return Err(Error::Diverged {
                epoch,
                last_good: Box::new(TrainOutcome { model: good, history }),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: sum / seen.max(1) as f64,
            val_loss: vt.total,
            lr,
            val_dist: vt.dist,
            val_eik: vt.eik,
            val_dir: vt.dir,
        });
        log::debug!("epoch {epoch}: train {:.5} val {:.5} lr {lr:.2e}", sum / seen.max(1) as f64, vt.total);
        if vt.total < best * (1.0 - cfg.threshold) {
            best = vt.total;
            bad = 0;
        } else {
            bad += 1;
            if bad > cfg.patience {
                lr = (lr * cfg.factor).max(cfg.min_lr);
                bad = 0;
            }
        }
        last_good = model.clone();
    }
    model.quantize();
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSpec;
    use crate::robot::RobotModel;
    use rand::Rng;

    fn toy_samples(k: usize, seed: u64) -> Vec<FieldSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let q: Vec<f64> = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
                let value = r - 1.5;
                FieldSample {
                    grad: vec![q[0] / r, q[1] / r],
                    label: value < 0.0,
                    p: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    q,
                    value,
                }
            })
            .collect()
    }

    fn toy_model(bn: bool) -> FieldModel {
        let m = RobotModel::planar_benchmark();
        let mut spec = FieldSpec::for_robot(&m, 1.5).unwrap().with_hidden(vec![8, 8]);
        spec.dropout = 0.0;
        spec.batch_norm = bn;
        spec.frequencies = 1;
        FieldModel::new(spec, 3).unwrap()
    }

    fn param_fd_check(bn: bool, mode: GradMode) -> f64 {
        let model = toy_model(bn);
        let data = toy_samples(12, 1);
        let w = LossWeights::default();
        let (_, g) = loss_and_param_grad(&model, &data, &w, mode).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for i in 0..model.params.len() {
            let mut mp = model.clone();
            mp.params[i] += h;
            let mut mm = model.clone();
            mm.params[i] -= h;
            let lp = loss_and_param_grad(&mp, &data, &w, mode).unwrap().0.total;
            let lm = loss_and_param_grad(&mm, &data, &w, mode).unwrap().0.total;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-3 * gmax));
        }
        worst
    }

    #[test]
    fn double_backprop_matches_finite_differences() {
        assert!(param_fd_check(false, GradMode::Analytic) < 1e-4);
        assert!(param_fd_check(true, GradMode::Analytic) < 1e-4);
    }

    #[test]
    fn finite_difference_mode_gradients_are_exact_for_its_loss() {
        assert!(param_fd_check(true, GradMode::FiniteDifference { step: 1e-3 }) < 1e-4);
    }

    #[test]
    fn frozen_training_keeps_validation_loss() {
        let data = toy_samples(200, 2);
        let cfg = TrainConfig {
            epochs: 3,
            freeze: true,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let out = train(toy_model(true), &data, &cfg).unwrap();
        let v: Vec<f64> = out.history.iter().map(|r| r.val_loss).collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = toy_samples(400, 3);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 32,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let a = train(toy_model(true), &data, &cfg).unwrap();
        let b = train(toy_model(true), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert!(a.history.last().unwrap().val_loss < a.history[0].val_loss);
    }

    #[test]
    fn divergence_is_reported_with_last_good_model() {
        let mut data = toy_samples(64, 4);
        data[5].value = f64::NAN;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 64,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        match train(toy_model(false), &data, &cfg) {
            Err(Error::Diverged { epoch, last_good }) => {
                assert_eq!(epoch, 0);
                assert!(last_good.history.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
