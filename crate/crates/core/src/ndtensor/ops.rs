//! Differentiable operations.
//!
//! Every op follows one protocol: validate shapes and finiteness, compute the
//! forward value, then hand the result to [`emit`]. If no input is bound to
//! the graph the value passes through as a plain tensor; otherwise `emit`
//! records a node whose backward rule maps the output gradient to one
//! gradient buffer per input, in the op's argument order. Backward rules
//! capture (clones of) whatever forward values they need, so a node stays
//! self-contained once recorded.

use crate::error::{Error, Result};
use crate::ndtensor::graph::NodeId;
use crate::ndtensor::{DiffGraph, DiffTensor};

// ---- scalar kernels shared with the ssm module ----

pub(crate) fn sigmoid(x: f64) -> f64 {
    // Split on sign so the exponent never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), returning x directly above 30 where the difference is below
/// f64 resolution (e^-30 < 1e-13).
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

// ---- recording plumbing ----

pub(crate) fn finite_in(op: &str, role: &str, t: &DiffTensor) -> Result<()> {
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{op}: non-finite value in {role} at flat index {i}"
        )));
    }
    Ok(())
}

/// Validates the computed output and records a node when any input is bound.
/// `make_backward` is only invoked on the recording path, so detached runs
/// never pay for the captured clones.
pub(crate) fn emit<B, F>(
    g: &mut DiffGraph,
    op: &str,
    shape: Vec<usize>,
    data: Vec<f64>,
    inputs: &[&DiffTensor],
    make_backward: B,
) -> Result<DiffTensor>
where
    B: FnOnce() -> F,
    F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
{
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite output at flat index {i}")));
    }
    if inputs.iter().all(|t| t.node().is_none()) {
        return Ok(DiffTensor::raw(shape, data));
    }
    let parents: Vec<Option<NodeId>> = inputs.iter().map(|t| t.node()).collect();
    let id = g.record(data.len(), parents, Box::new(make_backward()));
    Ok(DiffTensor::raw_bound(shape, data, id))
}

// ---- dense linear algebra ----

/// x[B,Din] · W[Din,Dout] + b[Dout], applied row-wise.
pub fn linear(
    g: &mut DiffGraph,
    x: &DiffTensor,
    w: &DiffTensor,
    b: &DiffTensor,
) -> Result<DiffTensor> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(Error::Dim(format!(
            "linear: want x[B,Din] w[Din,Dout] b[Dout], got x{:?} w{:?} b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (rows, din) = (x.shape()[0], x.shape()[1]);
    let (win, dout) = (w.shape()[0], w.shape()[1]);
    if din != win || b.shape()[0] != dout {
        return Err(Error::Dim(format!(
            "linear: x{:?} is incompatible with w{:?}, b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    finite_in("linear", "x", x)?;
    finite_in("linear", "w", w)?;
    finite_in("linear", "b", b)?;

    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; rows * dout];
    for i in 0..rows {
        let orow = &mut out[i * dout..(i + 1) * dout];
        orow.copy_from_slice(bd);
        for k in 0..din {
            let xv = xd[i * din + k];
            let wrow = &wd[k * dout..(k + 1) * dout];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }

    emit(g, "linear", vec![rows, dout], out, &[x, w, b], || {
        let xd = x.data().to_vec();
        let wd = w.data().to_vec();
        move |gy: &[f64]| {
            let mut dx = vec![0.0; rows * din];
            let mut dw = vec![0.0; din * dout];
            let mut db = vec![0.0; dout];
            for i in 0..rows {
                let grow = &gy[i * dout..(i + 1) * dout];
                for k in 0..din {
                    let wrow = &wd[k * dout..(k + 1) * dout];
                    let mut acc = 0.0;
                    for j in 0..dout {
                        acc += grow[j] * wrow[j];
                    }
                    dx[i * din + k] = acc;
                    let xv = xd[i * din + k];
                    let dwrow = &mut dw[k * dout..(k + 1) * dout];
                    for j in 0..dout {
                        dwrow[j] += xv * grow[j];
                    }
                }
                for j in 0..dout {
                    db[j] += grow[j];
                }
            }
            vec![dx, dw, db]
        }
    })
}

/// Per-channel 2-D cross-correlation with odd kernels and zero same-padding;
/// no channel mixing. x[C,H,W] ⋆ k[C,Kh,Kw] + b[C] → [C,H,W].
pub fn depthwise_conv2d(
    g: &mut DiffGraph,
    x: &DiffTensor,
    k: &DiffTensor,
    b: &DiffTensor,
) -> Result<DiffTensor> {
    if x.rank() != 3 || k.rank() != 3 || b.rank() != 1 {
        return Err(Error::Dim(format!(
            "depthwise_conv2d: want x[C,H,W] k[C,Kh,Kw] b[C], got x{:?} k{:?} b{:?}",
            x.shape(),
            k.shape(),
            b.shape()
        )));
    }
    let (ch, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if kc != ch || b.shape()[0] != ch {
        return Err(Error::Dim(format!(
            "depthwise_conv2d: channel counts disagree (x {ch}, k {kc}, b {})",
            b.shape()[0]
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise_conv2d: kernel must be odd-sized, got {kh}x{kw}"
        )));
    }
    finite_in("depthwise_conv2d", "x", x)?;
    finite_in("depthwise_conv2d", "k", k)?;
    finite_in("depthwise_conv2d", "b", b)?;

    let (rh, rw) = (kh / 2, kw / 2);
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let mut out = vec![0.0; ch * hh * ww];
    for c in 0..ch {
        for i in 0..hh {
            for j in 0..ww {
                let mut acc = bd[c];
                for u in 0..kh {
                    let ii = i as isize + u as isize - rh as isize;
                    if ii < 0 || ii >= hh as isize {
                        continue;
                    }
                    for v in 0..kw {
                        let jj = j as isize + v as isize - rw as isize;
                        if jj < 0 || jj >= ww as isize {
                            continue;
                        }
                        acc += xd[(c * hh + ii as usize) * ww + jj as usize]
                            * kd[(c * kh + u) * kw + v];
                    }
                }
                out[(c * hh + i) * ww + j] = acc;
            }
        }
    }

    emit(g, "depthwise_conv2d", vec![ch, hh, ww], out, &[x, k, b], || {
        let xd = x.data().to_vec();
        let kd = k.data().to_vec();
        move |gy: &[f64]| {
            let mut dx = vec![0.0; ch * hh * ww];
            let mut dk = vec![0.0; ch * kh * kw];
            let mut db = vec![0.0; ch];
            for c in 0..ch {
                for i in 0..hh {
                    for j in 0..ww {
                        let go = gy[(c * hh + i) * ww + j];
                        db[c] += go;
                        for u in 0..kh {
                            let ii = i as isize + u as isize - rh as isize;
                            if ii < 0 || ii >= hh as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = j as isize + v as isize - rw as isize;
                                if jj < 0 || jj >= ww as isize {
                                    continue;
                                }
                                let xi = (c * hh + ii as usize) * ww + jj as usize;
                                let ki = (c * kh + u) * kw + v;
                                dx[xi] += go * kd[ki];
                                dk[ki] += go * xd[xi];
                            }
                        }
                    }
                }
            }
            vec![dx, dk, db]
        }
    })
}

/// 1x1 convolution: a per-pixel linear map across channels.
/// x[Cin,H,W] with W[Cin,Cout] + b[Cout] → [Cout,H,W].
pub fn pointwise_conv2d(
    g: &mut DiffGraph,
    x: &DiffTensor,
    w: &DiffTensor,
    b: &DiffTensor,
) -> Result<DiffTensor> {
    if x.rank() != 3 || w.rank() != 2 || b.rank() != 1 {
        return Err(Error::Dim(format!(
            "pointwise_conv2d: want x[Cin,H,W] w[Cin,Cout] b[Cout], got x{:?} w{:?} b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (cin, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (win, cout) = (w.shape()[0], w.shape()[1]);
    if win != cin || b.shape()[0] != cout {
        return Err(Error::Dim(format!(
            "pointwise_conv2d: x{:?} is incompatible with w{:?}, b{:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    finite_in("pointwise_conv2d", "x", x)?;
    finite_in("pointwise_conv2d", "w", w)?;
    finite_in("pointwise_conv2d", "b", b)?;

    let pix = hh * ww;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; cout * pix];
    for o in 0..cout {
        let orow = &mut out[o * pix..(o + 1) * pix];
        orow.fill(bd[o]);
        for c in 0..cin {
            let wv = wd[c * cout + o];
            let xrow = &xd[c * pix..(c + 1) * pix];
            for (ov, xv) in orow.iter_mut().zip(xrow) {
                *ov += wv * xv;
            }
        }
    }

    emit(g, "pointwise_conv2d", vec![cout, hh, ww], out, &[x, w, b], || {
        let xd = x.data().to_vec();
        let wd = w.data().to_vec();
        move |gy: &[f64]| {
            let mut dx = vec![0.0; cin * pix];
            let mut dw = vec![0.0; cin * cout];
            let mut db = vec![0.0; cout];
            for o in 0..cout {
                let grow = &gy[o * pix..(o + 1) * pix];
                for c in 0..cin {
                    let wv = wd[c * cout + o];
                    let xrow = &xd[c * pix..(c + 1) * pix];
                    let dxrow = &mut dx[c * pix..(c + 1) * pix];
                    let mut acc = 0.0;
                    for p in 0..pix {
                        dxrow[p] += wv * grow[p];
                        acc += xrow[p] * grow[p];
                    }
                    dw[c * cout + o] += acc;
                }
                db[o] += grow.iter().sum::<f64>();
            }
            vec![dx, dw, db]
        }
    })
}

// ---- elementwise ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Silu,
    Softplus,
    Exp,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
        }
    }

    /// d value / d x.
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => x.exp(),
        }
    }
}

/// Elementwise nonlinearity; shape-preserving.
pub fn activation(g: &mut DiffGraph, x: &DiffTensor, kind: Activation) -> Result<DiffTensor> {
    finite_in("activation", "x", x)?;
    let out: Vec<f64> = x.data().iter().map(|&v| kind.value(v)).collect();
    emit(g, "activation", x.shape().to_vec(), out, &[x], || {
        let xd = x.data().to_vec();
        move |gy: &[f64]| {
            vec![gy.iter().zip(&xd).map(|(&go, &v)| go * kind.slope(v)).collect()]
        }
    })
}

/// Normalizes the last axis to zero mean and unit (population) variance, then
/// applies the affine scale–shift gamma/beta.
pub fn layer_norm(
    g: &mut DiffGraph,
    x: &DiffTensor,
    gamma: &DiffTensor,
    beta: &DiffTensor,
    eps: f64,
) -> Result<DiffTensor> {
    if x.rank() == 0 {
        return Err(Error::Dim("layer_norm: x must have at least one axis".into()));
    }
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dim(format!(
            "layer_norm: gamma{:?}/beta{:?} must both be [{d}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("layer_norm: eps must be positive, got {eps}")));
    }
    finite_in("layer_norm", "x", x)?;
    finite_in("layer_norm", "gamma", gamma)?;
    finite_in("layer_norm", "beta", beta)?;

    let rows = x.len() / d;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_s = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_s[r] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[r * d + j] = xh;
            out[r * d + j] = gd[j] * xh + bd[j];
        }
    }

    emit(g, "layer_norm", x.shape().to_vec(), out, &[x, gamma, beta], || {
        let gd = gamma.data().to_vec();
        move |gy: &[f64]| {
            let mut dx = vec![0.0; rows * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let grow = &gy[r * d..(r + 1) * d];
                let xh = &xhat[r * d..(r + 1) * d];
                // gh = gy ⊙ gamma; dx = (gh - mean(gh) - xhat*mean(gh ⊙ xhat)) / s
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let gh = grow[j] * gd[j];
                    m1 += gh;
                    m2 += gh * xh[j];
                    dgamma[j] += grow[j] * xh[j];
                    dbeta[j] += grow[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let gh = grow[j] * gd[j];
                    dx[r * d + j] = (gh - m1 - xh[j] * m2) * inv_s[r];
                }
            }
            vec![dx, dgamma, dbeta]
        }
    })
}

/// Mean over the batch of −log softmax(logits)[target], computed with
/// max-subtraction. Returns a scalar (shape `[1]`).
pub fn softmax_cross_entropy(
    g: &mut DiffGraph,
    logits: &DiffTensor,
    targets: &[usize],
) -> Result<DiffTensor> {
    if logits.rank() != 2 {
        return Err(Error::Dim(format!(
            "softmax_cross_entropy: want logits[B,K], got {:?}",
            logits.shape()
        )));
    }
    let (bsz, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != bsz {
        return Err(Error::Dim(format!(
            "softmax_cross_entropy: {} logit rows but {} targets",
            bsz,
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Index(format!(
            "softmax_cross_entropy: target class {t} out of range (K = {k})"
        )));
    }
    finite_in("softmax_cross_entropy", "logits", logits)?;

    let zd = logits.data();
    let mut probs = vec![0.0; bsz * k];
    let mut total = 0.0;
    for i in 0..bsz {
        let row = &zd[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            probs[i * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[i * k + j] /= denom;
        }
        total += denom.ln() - (row[targets[i]] - m);
    }
    let loss = total / bsz as f64;

    emit(g, "softmax_cross_entropy", vec![1], vec![loss], &[logits], || {
        let targets = targets.to_vec();
        move |gy: &[f64]| {
            let go = gy[0] / bsz as f64;
            let mut dz = vec![0.0; bsz * k];
            for i in 0..bsz {
                for j in 0..k {
                    let ind = if j == targets[i] { 1.0 } else { 0.0 };
                    dz[i * k + j] = go * (probs[i * k + j] - ind);
                }
            }
            vec![dz]
        }
    })
}

/// Per-leading-index full spatial inner product:
/// out[l] = Σ_{i,j} a[l,i,j]·b[l,i,j].
pub fn spatial_contract(g: &mut DiffGraph, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    if a.rank() != 3 || a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "spatial_contract: want equal [L,P,P] shapes, got a{:?} b{:?}",
            a.shape(),
            b.shape()
        )));
    }
    finite_in("spatial_contract", "a", a)?;
    finite_in("spatial_contract", "b", b)?;

    let l = a.shape()[0];
    let pix = a.shape()[1] * a.shape()[2];
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<f64> = (0..l)
        .map(|i| {
            ad[i * pix..(i + 1) * pix]
                .iter()
                .zip(&bd[i * pix..(i + 1) * pix])
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect();

    emit(g, "spatial_contract", vec![l], out, &[a, b], || {
        let ad = a.data().to_vec();
        let bd = b.data().to_vec();
        move |gy: &[f64]| {
            let mut da = vec![0.0; ad.len()];
            let mut db = vec![0.0; bd.len()];
            for i in 0..l {
                let go = gy[i];
                for p in 0..pix {
                    da[i * pix + p] = go * bd[i * pix + p];
                    db[i * pix + p] = go * ad[i * pix + p];
                }
            }
            vec![da, db]
        }
    })
}

/// Elementwise sum of two equal-shaped tensors.
pub fn add(g: &mut DiffGraph, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "add: shapes disagree, a{:?} b{:?}",
            a.shape(),
            b.shape()
        )));
    }
    finite_in("add", "a", a)?;
    finite_in("add", "b", b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    emit(g, "add", a.shape().to_vec(), out, &[a, b], || {
        move |gy: &[f64]| vec![gy.to_vec(), gy.to_vec()]
    })
}

/// Elementwise product of two equal-shaped tensors.
pub fn mul(g: &mut DiffGraph, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "mul: shapes disagree, a{:?} b{:?}",
            a.shape(),
            b.shape()
        )));
    }
    finite_in("mul", "a", a)?;
    finite_in("mul", "b", b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    emit(g, "mul", a.shape().to_vec(), out, &[a, b], || {
        let ad = a.data().to_vec();
        let bd = b.data().to_vec();
        move |gy: &[f64]| {
            let da = gy.iter().zip(&bd).map(|(g, v)| g * v).collect();
            let db = gy.iter().zip(&ad).map(|(g, v)| g * v).collect();
            vec![da, db]
        }
    })
}

/// Multiplication by a compile-time-known constant.
pub fn scale(g: &mut DiffGraph, x: &DiffTensor, c: f64) -> Result<DiffTensor> {
    if !c.is_finite() {
        return Err(Error::Numeric(format!("scale: factor {c} is not finite")));
    }
    finite_in("scale", "x", x)?;
    let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
    emit(g, "scale", x.shape().to_vec(), out, &[x], || {
        move |gy: &[f64]| vec![gy.iter().map(|g| g * c).collect()]
    })
}

/// Full reduction to a scalar (shape `[1]`).
pub fn sum(g: &mut DiffGraph, x: &DiffTensor) -> Result<DiffTensor> {
    finite_in("sum", "x", x)?;
    let total = x.data().iter().sum::<f64>();
    let n = x.len();
    emit(g, "sum", vec![1], vec![total], &[x], || {
        move |gy: &[f64]| vec![vec![gy[0]; n]]
    })
}

/// out[i] = x[flat index map[i]]; the backward pass scatter-adds, so indices
/// may repeat (e.g. replication padding routes all copies' gradients to the
/// shared source element).
pub fn gather(
    g: &mut DiffGraph,
    x: &DiffTensor,
    map: &[usize],
    out_shape: &[usize],
) -> Result<DiffTensor> {
    let numel: usize = out_shape.iter().product();
    if numel != map.len() {
        return Err(Error::Dim(format!(
            "gather: out shape {out_shape:?} implies {numel} values but map has {}",
            map.len()
        )));
    }
    if let Some(&i) = map.iter().find(|&&i| i >= x.len()) {
        return Err(Error::Index(format!(
            "gather: map entry {i} out of range for {} source elements",
            x.len()
        )));
    }
    finite_in("gather", "x", x)?;
    let xd = x.data();
    let out: Vec<f64> = map.iter().map(|&i| xd[i]).collect();
    let src_len = x.len();
    emit(g, "gather", out_shape.to_vec(), out, &[x], || {
        let map = map.to_vec();
        move |gy: &[f64]| {
            let mut dx = vec![0.0; src_len];
            for (go, &i) in gy.iter().zip(&map) {
                dx[i] += go;
            }
            vec![dx]
        }
    })
}

/// Same data, new shape (element count must match).
pub fn reshape(g: &mut DiffGraph, x: &DiffTensor, shape: &[usize]) -> Result<DiffTensor> {
    let numel: usize = shape.iter().product();
    if numel != x.len() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dim(format!(
            "reshape: {:?} ({} values) cannot become {shape:?}",
            x.shape(),
            x.len()
        )));
    }
    finite_in("reshape", "x", x)?;
    emit(g, "reshape", shape.to_vec(), x.data().to_vec(), &[x], || {
        move |gy: &[f64]| vec![gy.to_vec()]
    })
}

/// Stacks B equal-length vectors into a [B,d] matrix.
pub fn stack_rows(g: &mut DiffGraph, rows: &[&DiffTensor]) -> Result<DiffTensor> {
    if rows.is_empty() {
        return Err(Error::Dim("stack_rows: no rows given".into()));
    }
    let d = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.rank() != 1 || r.len() != d {
            return Err(Error::Dim(format!(
                "stack_rows: row {i} has shape {:?}, want [{d}]",
                r.shape()
            )));
        }
        finite_in("stack_rows", "row", r)?;
    }
    let mut out = Vec::with_capacity(rows.len() * d);
    for r in rows {
        out.extend_from_slice(r.data());
    }
    let b = rows.len();
    emit(g, "stack_rows", vec![b, d], out, rows, || {
        move |gy: &[f64]| (0..b).map(|i| gy[i * d..(i + 1) * d].to_vec()).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> DiffTensor {
        DiffTensor::new(shape, data.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    // ---- linear ----

    #[test]
    fn linear_identity_weights() {
        let mut g = DiffGraph::new();
        let y = linear(
            &mut g,
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &t(&[2], &[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        assert_eq!(y.shape(), &[1, 2]);
    }

    #[test]
    fn linear_bias_passthrough() {
        let mut g = DiffGraph::new();
        let y = linear(
            &mut g,
            &t(&[1, 2], &[1.0, 1.0]),
            &t(&[2, 2], &[0.0; 4]),
            &t(&[2], &[3.0, 4.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_dot_products() {
        // [[1,2],[3,4]] · [[1],[1]] + [1] = [[4],[8]]
        let mut g = DiffGraph::new();
        let y = linear(
            &mut g,
            &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]),
            &t(&[2, 1], &[1.0, 1.0]),
            &t(&[1], &[1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[4.0, 8.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut g = DiffGraph::new();
        let err = linear(
            &mut g,
            &t(&[1, 3], &[1.0, 2.0, 3.0]),
            &t(&[2, 2], &[0.0; 4]),
            &t(&[2], &[0.0; 2]),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "dim");
    }

    #[test]
    fn linear_gradient_of_sum_wrt_weights_is_outer_with_x() {
        // loss = sum(x·W + b) with x = ones[1,2]: dW = 1ᵀ·x = all ones, db = ones.
        let mut g = DiffGraph::new();
        let x = t(&[1, 2], &[1.0, 1.0]);
        let w = g.leaf(&t(&[2, 2], &[0.3, -0.2, 0.1, 0.4]).requiring_grad()).unwrap();
        let b = g.leaf(&t(&[2], &[0.0, 0.0]).requiring_grad()).unwrap();
        let y = linear(&mut g, &x, &w, &b).unwrap();
        let loss = sum(&mut g, &y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.get(&b).unwrap(), &[1.0, 1.0]);
    }

    // ---- depthwise conv ----

    #[test]
    fn depthwise_zero_kernel_zeroes_output() {
        let mut g = DiffGraph::new();
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let y = depthwise_conv2d(&mut g, &x, &t(&[1, 3, 3], &[0.0; 9]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[0.0; 9]);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut g = DiffGraph::new();
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut k = vec![0.0; 2 * 9];
        k[4] = 1.0; // channel 0 center
        k[13] = 1.0; // channel 1 center
        let y = depthwise_conv2d(&mut g, &x, &t(&[2, 3, 3], &k), &t(&[2], &[0.0; 2])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_ones_kernel_counts_in_bounds_neighbors() {
        // 3x3 ones ⋆ 3x3 ones with zero padding: corners see 4 cells, edges 6,
        // the center all 9.
        let mut g = DiffGraph::new();
        let x = t(&[1, 3, 3], &[1.0; 9]);
        let y = depthwise_conv2d(&mut g, &x, &t(&[1, 3, 3], &[1.0; 9]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_even_kernel_rejected() {
        let mut g = DiffGraph::new();
        let err = depthwise_conv2d(
            &mut g,
            &t(&[1, 3, 3], &[0.0; 9]),
            &t(&[1, 2, 2], &[0.0; 4]),
            &t(&[1], &[0.0]),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    // ---- pointwise conv ----

    #[test]
    fn pointwise_identity() {
        let mut g = DiffGraph::new();
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = pointwise_conv2d(&mut g, &x, &w, &t(&[2], &[0.0; 2])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pointwise_channel_sum() {
        let mut g = DiffGraph::new();
        let x = t(&[2, 1, 2], &[1.0, 2.0, 10.0, 20.0]);
        let y = pointwise_conv2d(&mut g, &x, &t(&[2, 1], &[1.0, 1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
        assert_eq!(y.shape(), &[1, 1, 2]);
    }

    #[test]
    fn pointwise_per_pixel_linear_map() {
        // channels (1,2), W=[[2,0],[0,3]], b=[1,1] -> (1·2+1, 2·3+1) = (3,7)
        let mut g = DiffGraph::new();
        let x = t(&[2, 1, 1], &[1.0, 2.0]);
        let w = t(&[2, 2], &[2.0, 0.0, 0.0, 3.0]);
        let y = pointwise_conv2d(&mut g, &x, &w, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    // ---- activations ----

    #[test]
    fn activation_fixed_points() {
        let mut g = DiffGraph::new();
        let x = t(&[1], &[0.0]);
        assert_eq!(activation(&mut g, &x, Activation::Sigmoid).unwrap().item(), 0.5);
        assert_eq!(activation(&mut g, &x, Activation::Silu).unwrap().item(), 0.0);
        close(
            activation(&mut g, &x, Activation::Softplus).unwrap().item(),
            std::f64::consts::LN_2, // softplus(0) = ln 2
            1e-15,
        );
        assert_eq!(activation(&mut g, &x, Activation::Exp).unwrap().item(), 1.0);
    }

    #[test]
    fn softplus_overflow_branch_is_continuous() {
        let mut g = DiffGraph::new();
        let y = activation(&mut g, &t(&[1], &[31.0]), Activation::Softplus).unwrap();
        assert_eq!(y.item(), 31.0);
        let y = activation(&mut g, &t(&[1], &[29.999]), Activation::Softplus).unwrap();
        close(y.item(), 29.999, 1e-12);
        // Saturated sigmoid stays finite and in range.
        let y = activation(&mut g, &t(&[1], &[-900.0]), Activation::Sigmoid).unwrap();
        assert_eq!(y.item(), 0.0);
    }

    // ---- layer norm ----

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let mut g = DiffGraph::new();
        let y = layer_norm(
            &mut g,
            &t(&[3], &[1.0, 1.0, 1.0]),
            &t(&[3], &[1.0; 3]),
            &t(&[3], &[0.0; 3]),
            1e-5,
        )
        .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_unit_row_passes_through_as_eps_vanishes() {
        let mut g = DiffGraph::new();
        let y = layer_norm(
            &mut g,
            &t(&[2], &[-1.0, 1.0]),
            &t(&[2], &[1.0; 2]),
            &t(&[2], &[0.0; 2]),
            1e-12,
        )
        .unwrap();
        close(y.data()[0], -1.0, 1e-9);
        close(y.data()[1], 1.0, 1e-9);
    }

    #[test]
    fn layer_norm_hand_case() {
        // [0,2,4]: mean 2, population var 8/3, so (0-2)/sqrt(8/3) = -1.22474
        let mut g = DiffGraph::new();
        let y = layer_norm(
            &mut g,
            &t(&[3], &[0.0, 2.0, 4.0]),
            &t(&[3], &[1.0; 3]),
            &t(&[3], &[0.0; 3]),
            1e-5,
        )
        .unwrap();
        close(y.data()[0], -1.2247, 5e-4);
        close(y.data()[1], 0.0, 1e-12);
        close(y.data()[2], 1.2247, 5e-4);
    }

    #[test]
    fn layer_norm_output_rows_are_standardized() {
        let mut g = DiffGraph::new();
        let x = t(&[2, 4], &[0.3, -1.2, 4.0, 2.2, 9.0, 0.5, -3.0, 1.1]);
        let y = layer_norm(&mut g, &x, &t(&[4], &[1.0; 4]), &t(&[4], &[0.0; 4]), 1e-9).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    // ---- cross entropy ----

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = DiffGraph::new();
        let y = softmax_cross_entropy(&mut g, &t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        close(y.item(), std::f64::consts::LN_2, 1e-15);
    }

    #[test]
    fn cross_entropy_saturated_correct_class() {
        let mut g = DiffGraph::new();
        let y = softmax_cross_entropy(&mut g, &t(&[1, 2], &[1000.0, 0.0]), &[0]).unwrap();
        assert!(y.item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // -log softmax([1,2,3])[2] = ln(e^1+e^2+e^3) - 3 ≈ 0.40761
        let mut g = DiffGraph::new();
        let y = softmax_cross_entropy(&mut g, &t(&[1, 3], &[1.0, 2.0, 3.0]), &[2]).unwrap();
        close(y.item(), 0.40761, 1e-5);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut g = DiffGraph::new();
        let a = softmax_cross_entropy(&mut g, &t(&[1, 3], &[0.1, -2.0, 1.3]), &[1]).unwrap();
        let b =
            softmax_cross_entropy(&mut g, &t(&[1, 3], &[100.1, 98.0, 101.3]), &[1]).unwrap();
        close(a.item(), b.item(), 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = DiffGraph::new();
        let err = softmax_cross_entropy(&mut g, &t(&[1, 2], &[0.0, 0.0]), &[2]).unwrap_err();
        assert_eq!(err.kind(), "index");
    }

    // ---- spatial contract ----

    #[test]
    fn contract_single_pixel_reduces_to_a() {
        let mut g = DiffGraph::new();
        let a = t(&[3, 1, 1], &[2.0, -1.0, 0.5]);
        let ones = t(&[3, 1, 1], &[1.0; 3]);
        let y = spatial_contract(&mut g, &a, &ones).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn contract_ones_counts_pixels() {
        let mut g = DiffGraph::new();
        let a = t(&[2, 3, 3], &[1.0; 18]);
        let y = spatial_contract(&mut g, &a, &a).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0]);
    }

    #[test]
    fn contract_hand_case_and_symmetry() {
        // [[1,2],[3,4]] ⊙ [[1,0],[0,1]] sums to 5
        let mut g = DiffGraph::new();
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let ab = spatial_contract(&mut g, &a, &b).unwrap();
        let ba = spatial_contract(&mut g, &b, &a).unwrap();
        assert_eq!(ab.data(), &[5.0]);
        assert_eq!(ab.data(), ba.data());
    }

    // ---- plumbing ops ----

    #[test]
    fn gather_replication_accumulates_gradient() {
        let mut g = DiffGraph::new();
        let x = g.leaf(&t(&[2], &[3.0, 7.0]).requiring_grad()).unwrap();
        let y = gather(&mut g, &x, &[1, 1, 0], &[3]).unwrap();
        assert_eq!(y.data(), &[7.0, 7.0, 3.0]);
        let loss = sum(&mut g, &y).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn stack_rows_roundtrip() {
        let mut g = DiffGraph::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let y = stack_rows(&mut g, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn detached_inputs_record_nothing() {
        let mut g = DiffGraph::new();
        let a = t(&[2], &[1.0, 2.0]);
        let y = add(&mut g, &a, &a).unwrap();
        assert!(y.node().is_none());
        assert!(g.is_empty());
    }
}
