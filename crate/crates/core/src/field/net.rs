//! Row-batched MLP kernels.
//!
//! A batch is laid out as `1 + blocks` row blocks of `batch` rows each. Block
//! 0 holds the primal inputs. Extra blocks either carry forward-mode
//! tangents (one block per differentiated input dimension: no bias, no BN
//! shift, ReLU mask shared with the primal row) or shifted copies of the
//! primal rows used for finite-difference input gradients (own ReLU mask,
//! BN statistics taken from the primal block). All blocks go through one
//! GEMM per layer, and the backward pass differentiates the whole thing, so
//! losses on input gradients get exact parameter gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: usize,
    pub b: usize,
    /// Offsets of (gamma, beta) when the layer is batch-normalized.
    pub bn: Option<(usize, usize)>,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub layers: Vec<LayerShape>,
    pub out_w: usize,
    pub out_b: usize,
    pub last_width: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(input: usize, hidden: &[usize], batch_norm: bool) -> Self {
        let mut off = 0;
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for (i, &fan_out) in hidden.iter().enumerate() {
            let w = off;
            off += fan_in * fan_out;
            let b = off;
            off += fan_out;
            let bn = if batch_norm {
                let g = off;
                off += 2 * fan_out;
                Some((g, g + fan_out))
            } else {
                None
            };
            layers.push(LayerShape {
                fan_in,
                fan_out,
                w,
                b,
                bn,
                residual: i > 0 && fan_in == fan_out,
            });
            fan_in = fan_out;
        }
        let out_w = off;
        off += fan_in;
        Layout {
            layers,
            out_w,
            out_b: off,
            last_width: fan_in,
            total: off + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(width: usize) -> Self {
        BnStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Extra {
    None,
    Tangent,
    Shifted,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Rows {
    pub batch: usize,
    pub blocks: usize,
    pub kind: Extra,
}

impl Rows {
    pub fn primal(batch: usize) -> Self {
        Rows {
            batch,
            blocks: 0,
            kind: Extra::None,
        }
    }

    pub fn total(&self) -> usize {
        self.batch * (1 + self.blocks)
    }

    /// Rows that carry biases and BN shifts.
    fn offset_rows(&self) -> usize {
        match self.kind {
            Extra::Tangent => self.batch,
            _ => self.total(),
        }
    }
}

/// Encoded width of `dim` inputs with `freqs` Fourier octaves.
pub(crate) fn encoded_width(dim: usize, freqs: usize) -> usize {
    dim * (1 + 2 * freqs)
}

/// `[u, sin(2^k pi u), cos(2^k pi u)]` for each input, k < freqs.
pub(crate) fn encode_row(u: &[f64], freqs: usize, mut out: ArrayViewMut1<f64>) {
    let per = 1 + 2 * freqs;
    for (i, &ui) in u.iter().enumerate() {
        let base = i * per;
        out[base] = ui;
        let mut f = std::f64::consts::PI;
        for k in 0..freqs {
            let (sn, cs) = (f * ui).sin_cos();
            out[base + 1 + 2 * k] = sn;
            out[base + 2 + 2 * k] = cs;
            f *= 2.0;
        }
    }
}

/// Derivative of the encoding with respect to input `j` (other columns zero).
pub(crate) fn encode_tangent_row(uj: f64, j: usize, freqs: usize, mut out: ArrayViewMut1<f64>) {
    let per = 1 + 2 * freqs;
    let base = j * per;
    out.fill(0.0);
    out[base] = 1.0;
    let mut f = std::f64::consts::PI;
    for k in 0..freqs {
        let (sn, cs) = (f * uj).sin_cos();
        out[base + 1 + 2 * k] = f * cs;
        out[base + 2 + 2 * k] = -f * sn;
        f *= 2.0;
    }
}

/// Contracts an encoded-input adjoint row back to input `j`.
pub(crate) fn encode_pullback(xbar: ArrayView1<f64>, uj: f64, j: usize, freqs: usize) -> f64 {
    let per = 1 + 2 * freqs;
    let base = j * per;
    let mut acc = xbar[base];
    let mut f = std::f64::consts::PI;
    for k in 0..freqs {
        let (sn, cs) = (f * uj).sin_cos();
        acc += xbar[base + 1 + 2 * k] * f * cs - xbar[base + 2 + 2 * k] * f * sn;
        f *= 2.0;
    }
    acc
}

pub(crate) struct LayerTape {
    input: Array2<f64>,
    /// Normalized pre-activation (pre-activation itself without BN).
    xh: Array2<f64>,
    /// ReLU mask times dropout scale.
    mult: Array2<f64>,
    sigma: Option<Array1<f64>>,
    pub batch_mean: Option<Array1<f64>>,
    pub batch_var: Option<Array1<f64>>,
}

pub(crate) struct Tape {
    pub layers: Vec<LayerTape>,
    pub last: Array2<f64>,
    pub y: Array1<f64>,
    rows: Rows,
    batch_stats: bool,
}

pub(crate) struct ForwardOpts<'a> {
    /// Normalize with statistics of the primal block (training) instead of
    /// the running statistics.
    pub batch_stats: bool,
    pub dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        ForwardOpts {
            batch_stats: false,
            dropout: None,
        }
    }
}

fn weight<'a>(params: &'a [f64], ls: &LayerShape) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((ls.fan_out, ls.fan_in), &params[ls.w..ls.w + ls.fan_out * ls.fan_in]).expect("layout")
}

fn weight_mut<'a>(params: &'a mut [f64], ls: &LayerShape) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((ls.fan_out, ls.fan_in), &mut params[ls.w..ls.w + ls.fan_out * ls.fan_in])
        .expect("layout")
}

fn vec_view<'a>(params: &'a [f64], off: usize, n: usize) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[off..off + n])
}

pub(crate) fn forward(
    layout: &Layout,
    params: &[f64],
    running: &[BnStats],
    x: Array2<f64>,
    rows: Rows,
    mut opts: ForwardOpts<'_>,
) -> Tape {
    let nrows = rows.total();
    debug_assert_eq!(x.nrows(), nrows);
    let b = rows.batch;
    let off_rows = rows.offset_rows();
    let mut h = x;
    let mut tapes = Vec::with_capacity(layout.layers.len());
    for (li, ls) in layout.layers.iter().enumerate() {
        let w = weight(params, ls);
        let bias = vec_view(params, ls.b, ls.fan_out);
        let mut z = Array2::<f64>::zeros((nrows, ls.fan_out));
        general_mat_mul(1.0, &h, &w.t(), 0.0, &mut z);
        {
            let mut zo = z.slice_mut(s![..off_rows, ..]);
            zo += &bias;
        }

        let (xh, n, sigma, bmean, bvar) = if let Some((go, bo)) = ls.bn {
            let gamma = vec_view(params, go, ls.fan_out);
            let beta = vec_view(params, bo, ls.fan_out);
            let (mean, var) = if opts.batch_stats {
                let zp = z.slice(s![..b, ..]);
                let mean = zp.mean_axis(Axis(0)).expect("non-empty batch");
                let var = zp.var_axis(Axis(0), 0.0);
                (mean, var)
            } else {
                (Array1::from(running[li].mean.clone()), Array1::from(running[li].var.clone()))
            };
            let sigma = var.mapv(|v| (v + BN_EPS).sqrt());
            let mut xh = z;
            {
                let mut xo = xh.slice_mut(s![..off_rows, ..]);
                xo -= &mean;
            }
            xh /= &sigma;
            let mut n = &xh * &gamma;
            {
                let mut no = n.slice_mut(s![..off_rows, ..]);
                no += &beta;
            }
            let (bm, bv) = if opts.batch_stats { (Some(mean), Some(var)) } else { (None, None) };
            (xh, n, Some(sigma), bm, bv)
        } else {
            let n = z.clone();
            (z, n, None, None, None)
        };

        // ReLU mask times dropout scale, shared per primal row
        let mut drop = None;
        if let Some((p, rng)) = opts.dropout.as_mut() {
            if *p > 0.0 {
                let keep = 1.0 - *p;
                let scale = 1.0 / keep;
                drop = Some(Array2::from_shape_fn((b, ls.fan_out), |_| {
                    if rng.gen::<f64>() < keep {
                        scale
                    } else {
                        0.0
                    }
                }));
            }
        }
        let mut mult = n.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        if rows.kind == Extra::Tangent {
            let primal = mult.slice(s![..b, ..]).to_owned();
            for k in 1..=rows.blocks {
                mult.slice_mut(s![k * b..(k + 1) * b, ..]).assign(&primal);
            }
        }
        if let Some(d) = &drop {
            for k in 0..=rows.blocks {
                let mut blk = mult.slice_mut(s![k * b..(k + 1) * b, ..]);
                blk *= d;
            }
        }
        let a = &n * &mult;
        let h_next = if ls.residual { &h + &a } else { a };
        tapes.push(LayerTape {
            input: h,
            xh,
            mult,
            sigma,
            batch_mean: bmean,
            batch_var: bvar,
        });
        h = h_next;
    }
    let wo = vec_view(params, layout.out_w, layout.last_width);
    let mut y = h.dot(&wo);
    {
        let mut yo = y.slice_mut(s![..off_rows]);
        yo += params[layout.out_b];
    }
    Tape {
        layers: tapes,
        last: h,
        y,
        rows,
        batch_stats: opts.batch_stats,
    }
}

/// Reverse pass. Accumulates parameter gradients into `grad` when given and
/// returns the adjoint of the encoded input when `want_input` is set.
pub(crate) fn backward(
    layout: &Layout,
    params: &[f64],
    tape: &Tape,
    ybar: ArrayView1<f64>,
    mut grad: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Array2<f64>> {
    let rows = tape.rows;
    let b = rows.batch;
    let off_rows = rows.offset_rows();
    let wo = vec_view(params, layout.out_w, layout.last_width);
    if let Some(g) = grad.as_deref_mut() {
        let gw = tape.last.t().dot(&ybar);
        for (gi, v) in g[layout.out_w..layout.out_w + layout.last_width].iter_mut().zip(gw.iter()) {
            *gi += v;
        }
        g[layout.out_b] += ybar.slice(s![..off_rows]).sum();
    }
    let mut hbar = Array2::<f64>::zeros((rows.total(), layout.last_width));
    Zip::from(hbar.rows_mut()).and(&ybar).for_each(|mut r, &yb| {
        r.assign(&(&wo * yb));
    });

    for (li, ls) in layout.layers.iter().enumerate().rev() {
        let lt = &tape.layers[li];
        let nbar = &hbar * &lt.mult;
        let zbar = if let Some((go, bo)) = ls.bn {
            let gamma = vec_view(params, go, ls.fan_out);
            let sigma = lt.sigma.as_ref().expect("bn layer keeps sigma");
            if let Some(g) = grad.as_deref_mut() {
                let gg = (&nbar * &lt.xh).sum_axis(Axis(0));
                let gb = nbar.slice(s![..off_rows, ..]).sum_axis(Axis(0));
                for k in 0..ls.fan_out {
                    g[go + k] += gg[k];
                    g[bo + k] += gb[k];
                }
            }
            let a = &nbar * &gamma;
            if tape.batch_stats {
                let mut zbar = Array2::<f64>::zeros(a.raw_dim());
                // dependent rows see the batch statistics as functions of the primal block
                let dep_a = a.slice(s![b.., ..]);
                let dep_xh = lt.xh.slice(s![b.., ..]);
                let sbar = -(&dep_a * &dep_xh).sum_axis(Axis(0)) / sigma;
                let mbar = if rows.kind == Extra::Shifted {
                    -dep_a.sum_axis(Axis(0)) / sigma
                } else {
                    Array1::zeros(ls.fan_out)
                };
                zbar.slice_mut(s![b.., ..]).assign(&(&dep_a / sigma));
                let pa = a.slice(s![..b, ..]);
                let px = lt.xh.slice(s![..b, ..]);
                let bf = b as f64;
                let mean_a = pa.mean_axis(Axis(0)).expect("non-empty");
                let mean_ax = (&pa * &px).mean_axis(Axis(0)).expect("non-empty");
                let mut pz = &pa - &mean_a;
                pz -= &(&px * &mean_ax);
                pz /= sigma;
                pz += &(&mbar / bf);
                pz += &(&px * &(&sbar / bf));
                zbar.slice_mut(s![..b, ..]).assign(&pz);
                zbar
            } else {
                a / sigma
            }
        } else {
            nbar
        };
        if let Some(g) = grad.as_deref_mut() {
            let gb = zbar.slice(s![..off_rows, ..]).sum_axis(Axis(0));
            for k in 0..ls.fan_out {
                g[ls.b + k] += gb[k];
            }
            let mut gw = weight_mut(g, ls);
            general_mat_mul(1.0, &zbar.t(), &lt.input, 1.0, &mut gw);
        }
        if li == 0 && !want_input {
            return None;
        }
        let w = weight(params, ls);
        let mut hin = zbar.dot(&w);
        if ls.residual {
            hin += &hbar;
        }
        hbar = hin;
    }
    if want_input {
        Some(hbar)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let l = Layout::new(36, &[216; 5], true);
        assert_eq!(l.layers.len(), 5);
        assert!(!l.layers[0].residual);
        assert!(l.layers[1..].iter().all(|x| x.residual));
        let expect = 36 * 216 + 216 * 3 + 4 * (216 * 216 + 216 * 3) + 216 + 1;
        assert_eq!(l.total, expect);
        let l = Layout::new(5, &[], false);
        assert_eq!(l.total, 6);
    }

    #[test]
    fn encoding_tangent_matches_finite_difference() {
        let u = [0.3, -0.7];
        let freqs = 4;
        let w = encoded_width(2, freqs);
        let h = 1e-6;
        for j in 0..2 {
            let mut t = Array1::zeros(w);
            encode_tangent_row(u[j], j, freqs, t.view_mut());
            let mut up = u;
            up[j] += h;
            let mut um = u;
            um[j] -= h;
            let mut ep = Array1::zeros(w);
            let mut em = Array1::zeros(w);
            encode_row(&up, freqs, ep.view_mut());
            encode_row(&um, freqs, em.view_mut());
            for c in 0..w {
                assert!(((ep[c] - em[c]) / (2.0 * h) - t[c]).abs() < 1e-6);
            }
            // pullback is the transpose of the tangent map
            let xbar = Array1::from_shape_fn(w, |c| (c as f64 * 0.37).sin());
            assert!((encode_pullback(xbar.view(), u[j], j, freqs) - xbar.dot(&t)).abs() < 1e-12);
        }
    }
}
