//! Composite training loss: value error, unit-gradient penalty and gradient
//! direction alignment.

use serde::{Deserialize, Serialize};

use super::FieldModel;
use crate::dataset::FieldSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub dist: f64,
    pub eik: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dist: 5.0,
            eik: 0.1,
            dir: 0.2,
        }
    }
}

impl LossWeights {
    pub fn distance_only() -> Self {
        LossWeights {
            eik: 0.0,
            dir: 0.0,
            ..Self::default()
        }
    }

    /// Distance plus the unit-norm penalty.
    pub fn with_magnitude() -> Self {
        LossWeights {
            dir: 0.0,
            ..Self::default()
        }
    }

    /// Distance plus direction alignment.
    pub fn with_direction() -> Self {
        LossWeights {
            eik: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.dist, self.eik, self.dir].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub(crate) fn needs_gradients(&self) -> bool {
        self.eik > 0.0 || self.dir > 0.0
    }
}

/// Unweighted per-term means and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub dist: f64,
    pub eik: f64,
    pub dir: f64,
    /// Samples whose predicted gradient was zero (cosine taken as 0).
    pub zero_grads: usize,
}

/// Loss terms plus adjoints with respect to predicted values and gradients.
pub(crate) struct Adjoint {
    pub terms: LossTerms,
    pub ybar: Vec<f64>,
    pub gbar: Vec<f64>,
}

/// Evaluates the loss on aligned predictions and targets (`grads` row-major, `n` per row).
pub fn loss_terms(
    values: &[f64],
    grads: &[f64],
    target: &[f64],
    target_grads: &[f64],
    n: usize,
    weights: &LossWeights,
) -> LossTerms {
    loss_adjoint(values, grads, target, target_grads, n, weights).terms
}

pub(crate) fn loss_adjoint(
    values: &[f64],
    grads: &[f64],
    target: &[f64],
    target_grads: &[f64],
    n: usize,
    weights: &LossWeights,
) -> Adjoint {
    let b = values.len();
    assert!(b > 0, "empty batch");
    let bf = b as f64;
    let mut t = LossTerms::default();
    let mut ybar = vec![0.0; b];
    let mut gbar = vec![0.0; b * n];
    for i in 0..b {
        let e = values[i] - target[i];
        t.dist += e * e;
        ybar[i] = weights.dist * 2.0 * e / bf;

        let g = &grads[i * n..(i + 1) * n];
        let tg = &target_grads[i * n..(i + 1) * n];
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tn = tg.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ge = gn - 1.0;
        t.eik += ge * ge;
        let out = &mut gbar[i * n..(i + 1) * n];
        if gn > 0.0 {
            let c = g.iter().zip(tg).map(|(a, b)| a * b).sum::<f64>() / (gn * tn);
            let r = 1.0 - c;
            t.dir += r * r;
            for k in 0..n {
                let dc = tg[k] / (gn * tn) - c * g[k] / (gn * gn);
                out[k] = weights.eik * 2.0 * ge * g[k] / gn / bf - weights.dir * 2.0 * r * dc / bf;
            }
        } else {
            t.dir += 1.0;
            t.zero_grads += 1;
        }
    }
    t.dist /= bf;
    t.eik /= bf;
    t.dir /= bf;
    t.total = weights.dist * t.dist + weights.eik * t.eik + weights.dir * t.dir;
    Adjoint { terms: t, ybar, gbar }
}

/// Eval-mode loss of `model` on `batch`.
pub fn loss(model: &FieldModel, batch: &[FieldSample], weights: &LossWeights) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    weights.validate()?;
    let n = model.dof();
    let mut qs = Vec::with_capacity(batch.len() * n);
    let mut ps = Vec::with_capacity(batch.len() * model.point_dim());
    let mut target = Vec::with_capacity(batch.len());
    let mut tg = Vec::with_capacity(batch.len() * n);
    for s in batch {
        Error::check_dim(n, s.q.len())?;
        qs.extend_from_slice(&s.q);
        ps.extend_from_slice(&s.p);
        target.push(s.value);
        tg.extend_from_slice(&s.grad);
    }
    let (v, g) = model.predict_with_grad_forward_mode(&qs, &ps)?;
    Ok(loss_terms(&v, &g, &target, &tg, n, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let t = loss_terms(&[0.3, -0.2], &[1.0, 0.0, 0.6, 0.8], &[0.3, -0.2], &[1.0, 0.0, 0.6, 0.8], 2, &LossWeights::default());
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn doubled_gradient_only_hits_eikonal_term() {
        let t = loss_terms(&[0.1], &[1.2, 1.6], &[0.1], &[0.6, 0.8], 2, &LossWeights::default());
        assert!(t.dir.abs() < 1e-15);
        assert!((t.eik - 1.0).abs() < 1e-15);
        assert!((t.total - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_sample_batch() {
        // sample 1: error 0.1, |G| = 2 along the target (eik 1, dir 0)
        // sample 2: error -0.2, G = (0, 0.5) vs target (1, 0): eik 0.25, cos 0 -> dir 1
        let t = loss_terms(&[0.6, -0.4], &[2.0, 0.0, 0.0, 0.5], &[0.5, -0.2], &[1.0, 0.0, 1.0, 0.0], 2, &LossWeights::default());
        let dist = (0.01 + 0.04) / 2.0;
        let eik = (1.0 + 0.25) / 2.0;
        let dir = (0.0 + 1.0) / 2.0;
        assert!((t.dist - dist).abs() < 1e-12);
        assert!((t.eik - eik).abs() < 1e-12);
        assert!((t.dir - dir).abs() < 1e-12);
        assert!((t.total - (5.0 * dist + 0.1 * eik + 0.2 * dir)).abs() < 1e-12);
    }

    #[test]
    fn zero_predicted_gradient_counts_as_max_penalty() {
        let t = loss_terms(&[0.0], &[0.0, 0.0], &[0.0], &[1.0, 0.0], 2, &LossWeights::default());
        assert_eq!(t.zero_grads, 1);
        assert_eq!(t.dir, 1.0);
        assert_eq!(t.eik, 1.0);
    }

    #[test]
    fn adjoints_match_finite_differences() {
        let w = LossWeights::default();
        let v = [0.3, -0.1, 0.7];
        let g = [0.9, 0.3, -0.2, 1.4, 0.5, -0.5];
        let tv = [0.2, 0.0, 0.6];
        let tg = [1.0, 0.0, 0.0, 1.0, 0.6, -0.8];
        let a = loss_adjoint(&v, &g, &tv, &tg, 2, &w);
        let h = 1e-6;
        for i in 0..3 {
            let mut vp = v;
            vp[i] += h;
            let mut vm = v;
            vm[i] -= h;
            let fd = (loss_terms(&vp, &g, &tv, &tg, 2, &w).total - loss_terms(&vm, &g, &tv, &tg, 2, &w).total) / (2.0 * h);
            assert!((fd - a.ybar[i]).abs() < 1e-8);
        }
        for i in 0..6 {
            let mut gp = g;
            gp[i] += h;
            let mut gm = g;
            gm[i] -= h;
            let fd = (loss_terms(&v, &gp, &tv, &tg, 2, &w).total - loss_terms(&v, &gm, &tv, &tg, 2, &w).total) / (2.0 * h);
            assert!((fd - a.gbar[i]).abs() < 1e-8);
        }
    }
}
