//! The learned configuration-space distance field.
//!
//! An MLP maps a normalized, Fourier-encoded `[q; p]` to a signed distance.
//! Input gradients come from reverse mode at inference time and from forward
//! mode inside training, where the loss depends on them.

mod checkpoint;
pub mod loss;
pub(crate) mod net;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::robot::RobotModel;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{LossTerms, LossWeights};
pub use net::BnStats;
pub use train::{train, EpochRecord, GradMode, TrainConfig, TrainOutcome};

use net::{encode_pullback, encode_row, encoded_width, ForwardOpts, Layout, Rows};

pub const DEFAULT_HIDDEN: [usize; 5] = [216; 5];
pub const DEFAULT_FREQUENCIES: usize = 4;
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Rows per inference chunk.
const CHUNK: usize = 512;

/// Architecture and normalization bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub dof: usize,
    pub point_dim: usize,
    pub hidden: Vec<usize>,
    pub frequencies: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
    pub p_lower: Vec<f64>,
    pub p_upper: Vec<f64>,
}

impl FieldSpec {
    /// Default architecture for `model`: q normalized over the extended joint
    /// limits, p over the workspace box scaled by `extension`.
    pub fn for_robot(model: &RobotModel, extension: f64) -> Result<Self> {
        let (q_lower, q_upper) = model.extended_limits();
        let wb = model.workspace_bounds(extension)?;
        Ok(FieldSpec {
            dof: model.dof(),
            point_dim: model.point_dim(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            frequencies: DEFAULT_FREQUENCIES,
            dropout: DEFAULT_DROPOUT,
            batch_norm: true,
            q_lower,
            q_upper,
            p_lower: wb.min,
            p_upper: wb.max,
        })
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dof == 0 || !(2..=3).contains(&self.point_dim) {
            return Err(Error::invalid("field needs dof >= 1 and point_dim in {2, 3}"));
        }
        Error::check_dim(self.dof, self.q_lower.len())?;
        Error::check_dim(self.dof, self.q_upper.len())?;
        Error::check_dim(self.point_dim, self.p_lower.len())?;
        Error::check_dim(self.point_dim, self.p_upper.len())?;
        let ordered = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).all(|(l, h)| l.is_finite() && h.is_finite() && l < h);
        if !ordered(&self.q_lower, &self.q_upper) || !ordered(&self.p_lower, &self.p_upper) {
            return Err(Error::invalid("normalization bounds must be finite with lower < upper"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.dof + self.point_dim
    }

    /// Widens bounds to the nearest enclosing f32 values so the checkpoint
    /// stores them exactly.
    fn round_bounds(&mut self) {
        self.dropout = self.dropout as f32 as f64;
        for v in self.q_lower.iter_mut().chain(self.p_lower.iter_mut()) {
            *v = f32_down(*v);
        }
        for v in self.q_upper.iter_mut().chain(self.p_upper.iter_mut()) {
            *v = f32_up(*v);
        }
    }
}

fn f32_down(v: f64) -> f64 {
    let f = v as f32;
    if (f as f64) > v {
        f32::from_bits(if f > 0.0 { f.to_bits() - 1 } else { f.to_bits() + 1 }) as f64
    } else {
        f as f64
    }
}

fn f32_up(v: f64) -> f64 {
    -f32_down(-v)
}

/// Trainable field model.
#[derive(Debug)]
pub struct FieldModel {
    spec: FieldSpec,
    layout: Layout,
    pub(crate) params: Vec<f64>,
    pub(crate) running: Vec<BnStats>,
    clamped: AtomicU64,
}

impl Clone for FieldModel {
    fn clone(&self) -> Self {
        FieldModel {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            running: self.running.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for FieldModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.running == other.running
    }
}

impl FieldModel {
    /// Randomly initialized model (He-uniform hidden weights, small output layer).
    pub fn new(spec: FieldSpec, seed: u64) -> Result<Self> {
        let mut spec = spec;
        spec.validate()?;
        spec.round_bounds();
        let enc = encoded_width(spec.input_dim(), spec.frequencies);
        let layout = Layout::new(enc, &spec.hidden, spec.batch_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for ls in &layout.layers {
            let bound = (6.0 / ls.fan_in as f64).sqrt();
            for w in &mut params[ls.w..ls.w + ls.fan_in * ls.fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
            let bb = 1.0 / (ls.fan_in as f64).sqrt();
            for b in &mut params[ls.b..ls.b + ls.fan_out] {
                *b = rng.gen_range(-bb..bb);
            }
            if let Some((g, _)) = ls.bn {
                params[g..g + ls.fan_out].fill(1.0);
            }
        }
        let bound = 1.0 / (layout.last_width as f64).sqrt();
        for w in &mut params[layout.out_w..layout.out_w + layout.last_width] {
            *w = rng.gen_range(-bound..bound);
        }
        let running = if spec.batch_norm {
            spec.hidden.iter().map(|&w| BnStats::identity(w)).collect()
        } else {
            Vec::new()
        };
        let mut m = FieldModel {
            spec,
            layout,
            params,
            running,
            clamped: AtomicU64::new(0),
        };
        m.quantize();
        Ok(m)
    }

    /// Default-architecture model for a robot.
    pub fn for_robot(model: &RobotModel, seed: u64) -> Result<Self> {
        Self::new(FieldSpec::for_robot(model, crate::robot::DEFAULT_WORKSPACE_EXTENSION)?, seed)
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn dof(&self) -> usize {
        self.spec.dof
    }

    pub fn point_dim(&self) -> usize {
        self.spec.point_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[BnStats] {
        &self.running
    }

    /// Number of inference inputs clamped into the normalization box so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Zeroes the output layer, making the model constant.
    pub fn zero_output_layer(&mut self) {
        let l = &self.layout;
        self.params[l.out_w..l.out_w + l.last_width].fill(0.0);
    }

    /// Zeroes weights and biases of every residual block.
    pub fn zero_residual_blocks(&mut self) {
        for ls in self.layout.layers.clone() {
            if ls.residual {
                self.params[ls.w..ls.w + ls.fan_in * ls.fan_out].fill(0.0);
                self.params[ls.b..ls.b + ls.fan_out].fill(0.0);
                if let Some((_, beta)) = ls.bn {
                    self.params[beta..beta + ls.fan_out].fill(0.0);
                }
            }
        }
    }

    /// Rounds parameters and statistics to f32-representable values.
    pub(crate) fn quantize(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
        for s in &mut self.running {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Normalization scale `du/dq` per joint.
    pub fn q_scale(&self) -> Vec<f64> {
        self.spec
            .q_lower
            .iter()
            .zip(&self.spec.q_upper)
            .map(|(l, h)| 2.0 / (h - l))
            .collect()
    }

    /// Maps joint values to [-1, 1] over the extended limits (no clamping).
    pub fn normalize_q(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(self.spec.q_lower.iter().zip(&self.spec.q_upper))
            .map(|(x, (l, h))| 2.0 * (x - l) / (h - l) - 1.0)
            .collect()
    }

    pub fn denormalize_q(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.spec.q_lower.iter().zip(&self.spec.q_upper))
            .map(|(x, (l, h))| l + (x + 1.0) * (h - l) / 2.0)
            .collect()
    }

    /// Normalized, clamped network input for one (q, p) pair.
    pub(crate) fn input_row(&self, q: &[f64], p: &[f64], out: &mut [f64]) -> bool {
        let s = &self.spec;
        let mut clamped = false;
        let mut put = |i: usize, x: f64, l: f64, h: f64| {
            let u = 2.0 * (x - l) / (h - l) - 1.0;
            let c = u.clamp(-1.0, 1.0);
            if c != u || !u.is_finite() {
                clamped = true;
            }
            out[i] = if u.is_nan() { 0.0 } else { c };
        };
        for j in 0..s.dof {
            put(j, q[j], s.q_lower[j], s.q_upper[j]);
        }
        for a in 0..s.point_dim {
            put(s.dof + a, p[a], s.p_lower[a], s.p_upper[a]);
        }
        clamped
    }

    fn check_batch(&self, qs: &[f64], ps: &[f64]) -> Result<usize> {
        let n = self.spec.dof;
        let w = self.spec.point_dim;
        if qs.len() % n != 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: qs.len() % n,
            });
        }
        let k = qs.len() / n;
        Error::check_dim(k * w, ps.len())?;
        Ok(k)
    }

    /// Normalized inputs and their encodings for `k` rows.
    fn encode_batch(&self, qs: &[f64], ps: &[f64], k: usize) -> (Array2<f64>, Array2<f64>) {
        let d = self.spec.input_dim();
        let n = self.spec.dof;
        let w = self.spec.point_dim;
        let mut u = Array2::<f64>::zeros((k, d));
        let mut clamps = 0;
        for r in 0..k {
            let row = u.row_mut(r).into_slice().expect("standard layout");
            if self.input_row(&qs[r * n..(r + 1) * n], &ps[r * w..(r + 1) * w], row) {
                clamps += 1;
            }
        }
        if clamps > 0 {
            let before = self.clamped.fetch_add(clamps, Ordering::Relaxed);
            if before == 0 {
                log::warn!("field inputs outside the normalization box were clamped");
            }
        }
        let e = encoded_width(d, self.spec.frequencies);
        let mut x = Array2::<f64>::zeros((k, e));
        for r in 0..k {
            encode_row(u.row(r).as_slice().expect("standard layout"), self.spec.frequencies, x.row_mut(r));
        }
        (u, x)
    }

    fn values_chunk(&self, qs: &[f64], ps: &[f64], k: usize) -> Vec<f64> {
        let (_, x) = self.encode_batch(qs, ps, k);
        let tape = net::forward(&self.layout, &self.params, &self.running, x, Rows::primal(k), ForwardOpts::eval());
        tape.y.to_vec()
    }

    fn grads_chunk(&self, qs: &[f64], ps: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
        let (u, x) = self.encode_batch(qs, ps, k);
        let tape = net::forward(&self.layout, &self.params, &self.running, x, Rows::primal(k), ForwardOpts::eval());
        let ones = Array1::<f64>::ones(k);
        let xbar = net::backward(&self.layout, &self.params, &tape, ones.view(), None, true).expect("input adjoint");
        let n = self.spec.dof;
        let scale = self.q_scale();
        let mut g = Vec::with_capacity(k * n);
        for r in 0..k {
            for j in 0..n {
                g.push(scale[j] * encode_pullback(xbar.row(r), u[[r, j]], j, self.spec.frequencies));
            }
        }
        (tape.y.to_vec(), g)
    }

    /// Signed distance for one (q, p) pair.
    pub fn predict(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(q, p)?[0])
    }

    /// Signed distances for `k` rows (`qs` is k x dof, `ps` is k x point_dim, row-major).
    pub fn predict_batch(&self, qs: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
        let k = self.check_batch(qs, ps)?;
        let (n, w) = (self.spec.dof, self.spec.point_dim);
        let out: Vec<Vec<f64>> = (0..k.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let a = c * CHUNK;
                let b = (a + CHUNK).min(k);
                self.values_chunk(&qs[a * n..b * n], &ps[a * w..b * w], b - a)
            })
            .collect();
        Ok(out.concat())
    }

    /// Signed distance and its gradient with respect to raw q.
    pub fn predict_with_grad(&self, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.predict_with_grad_batch(q, p)?;
        Ok((v[0], g))
    }

    /// Batched values and gradients (gradients k x dof, row-major).
    pub fn predict_with_grad_batch(&self, qs: &[f64], ps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.check_batch(qs, ps)?;
        let (n, w) = (self.spec.dof, self.spec.point_dim);
        let out: Vec<(Vec<f64>, Vec<f64>)> = (0..k.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let a = c * CHUNK;
                let b = (a + CHUNK).min(k);
                self.grads_chunk(&qs[a * n..b * n], &ps[a * w..b * w], b - a)
            })
            .collect();
        let mut vals = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k * n);
        for (v, g) in out {
            vals.extend(v);
            grads.extend(g);
        }
        Ok((vals, grads))
    }

    /// Values and gradients of one configuration against many points.
    pub fn predict_points_with_grad(&self, q: &[f64], points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        Error::check_dim(self.spec.dof, q.len())?;
        let mut qs = Vec::with_capacity(points.len() * q.len());
        let mut ps = Vec::with_capacity(points.len() * self.spec.point_dim);
        for p in points {
            Error::check_dim(self.spec.point_dim, p.len())?;
            qs.extend_from_slice(q);
            ps.extend_from_slice(p);
        }
        self.predict_with_grad_batch(&qs, &ps)
    }

    /// Forward-mode input gradients in eval mode (the training code path).
    pub fn predict_with_grad_forward_mode(&self, qs: &[f64], ps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.check_batch(qs, ps)?;
        let (u, x) = self.encode_batch(qs, ps, k);
        let (x, rows) = train::with_tangent_rows(self, &u, x);
        let tape = net::forward(&self.layout, &self.params, &self.running, x, rows, ForwardOpts::eval());
        Ok(train::split_tangents(self, &tape.y, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small(seed: u64) -> FieldModel {
        let m = RobotModel::planar_benchmark();
        let spec = FieldSpec::for_robot(&m, 1.5).unwrap().with_hidden(vec![32; 3]);
        FieldModel::new(spec, seed).unwrap()
    }

    fn random_inputs(model: &FieldModel, k: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = model.spec();
        let mut qs = Vec::new();
        let mut ps = Vec::new();
        for _ in 0..k {
            for j in 0..s.dof {
                qs.push(rng.gen_range(s.q_lower[j]..s.q_upper[j]));
            }
            for a in 0..s.point_dim {
                ps.push(rng.gen_range(s.p_lower[a]..s.p_upper[a]));
            }
        }
        (qs, ps)
    }

    #[test]
    fn bounds_are_extended_limits() {
        let m = RobotModel::planar(&[1.0, 1.0], 0.1, 5, 1.0).unwrap();
        let s = FieldSpec::for_robot(&m, 1.5).unwrap();
        assert_eq!(s.q_lower, vec![-PI, -PI]);
        assert_eq!(s.q_upper, vec![PI, PI]);
        let f = FieldModel::new(s, 0).unwrap();
        // bounds widened to f32 values, still enclosing +-pi
        assert!(f.spec().q_lower[0] <= -PI && f.spec().q_upper[0] >= PI);
        assert_eq!(f.normalize_q(&f.spec().q_lower.clone()), vec![-1.0, -1.0]);
        assert_eq!(f.normalize_q(&f.spec().q_upper.clone()), vec![1.0, 1.0]);
    }

    #[test]
    fn normalization_round_trip() {
        let f = small(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = [rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)];
            let back = f.denormalize_q(&f.normalize_q(&q));
            assert!((back[0] - q[0]).abs() < 1e-12 && (back[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_and_finite() {
        let f = FieldModel::for_robot(&RobotModel::planar_benchmark(), 1).unwrap();
        let (qs, ps) = random_inputs(&f, 100_000, 5);
        let a = f.predict_batch(&qs, &ps).unwrap();
        let b = f.predict_batch(&qs, &ps).unwrap();
        assert_eq!(a.len(), 100_000);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_and_forward_mode_gradients_agree() {
        let f = small(2);
        let (qs, ps) = random_inputs(&f, 200, 6);
        let (v1, g1) = f.predict_with_grad_batch(&qs, &ps).unwrap();
        let (v2, g2) = f.predict_with_grad_forward_mode(&qs, &ps).unwrap();
        for (a, b) in v1.iter().zip(&v2) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = small(4);
        let (qs, ps) = random_inputs(&f, 300, 7);
        let (_, g) = f.predict_with_grad_batch(&qs, &ps).unwrap();
        let scale = f.q_scale();
        let h = 1e-7;
        let mut worst = 0.0f64;
        for r in 0..300 {
            for j in 0..2 {
                let mut qp = qs[r * 2..r * 2 + 2].to_vec();
                let mut qm = qp.clone();
                qp[j] += h / scale[j];
                qm[j] -= h / scale[j];
                let p = &ps[r * 2..r * 2 + 2];
                let fd = (f.predict(&qp, p).unwrap() - f.predict(&qm, p).unwrap()) / (2.0 * h / scale[j]);
                let an = g[r * 2 + j];
                worst = worst.max((fd - an).abs() / an.abs().max(1e-2));
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn constant_model_has_zero_gradient() {
        let mut f = small(5);
        f.zero_output_layer();
        let (qs, ps) = random_inputs(&f, 50, 8);
        let (_, g) = f.predict_with_grad_batch(&qs, &ps).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn linear_surrogate_gradient_is_weight_times_scale() {
        let m = RobotModel::planar_benchmark();
        let mut spec = FieldSpec::for_robot(&m, 1.5).unwrap().with_hidden(vec![]);
        spec.frequencies = 0;
        spec.batch_norm = false;
        let f = FieldModel::new(spec, 9).unwrap();
        let (_, g) = f.predict_with_grad(&[0.3, -1.0], &[0.5, 0.5]).unwrap();
        let scale = f.q_scale();
        let w = f.params();
        assert_eq!(g[0], w[0] * scale[0]);
        assert_eq!(g[1], w[1] * scale[1]);
    }

    #[test]
    fn out_of_bounds_inputs_are_clamped_and_counted() {
        let f = small(6);
        assert_eq!(f.clamp_count(), 0);
        let a = f.predict(&[10.0, 0.0], &[0.0, 0.0]).unwrap();
        let b = f.predict(&[f.spec().q_upper[0], 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(f.clamp_count(), 1);
        assert!(f.predict(&[0.0], &[0.0, 0.0]).is_err());
    }
}
