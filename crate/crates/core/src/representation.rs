//! One representation layer: a multi-head graph convolution followed by a
//! position-wise feed-forward sublayer, each wrapped as `LN(act(·) + input)`.
//!
//! ```text
//! Z = LN1( act( [S_1·X·Wz_1 | … | S_K·X·Wz_K] ) + X )
//! H = LN2( act( [Z·Wh_1 + bh_1 | … | Z·Wh_K + bh_K] ) + Z )
//! ```

use rand::Rng;

use crate::error::{Result, TdnError};
use crate::linalg::{Activation, Matrix};
use crate::structure::head_width;

pub const EPS_LN: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ReprHead {
    pub wz: Matrix,
    pub wh: Matrix,
    pub bh: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReprLayerParams {
    pub heads: Vec<ReprHead>,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl ReprLayerParams {
    /// All-zero tensors, layer-norm gains included. Used as a gradient
    /// accumulator and optimizer moment.
    pub fn zeros(m: usize, k: usize) -> Result<Self> {
        let w = head_width(m, k)?;
        Ok(ReprLayerParams {
            heads: (0..k)
                .map(|_| ReprHead {
                    wz: Matrix::zeros(m, w),
                    wh: Matrix::zeros(m, w),
                    bh: Matrix::zeros(1, w),
                })
                .collect(),
            ln1_gain: Matrix::zeros(1, m),
            ln1_bias: Matrix::zeros(1, m),
            ln2_gain: Matrix::zeros(1, m),
            ln2_bias: Matrix::zeros(1, m),
        })
    }

    /// Zero weights with unit layer-norm gains.
    pub fn identity(m: usize, k: usize) -> Result<Self> {
        let mut p = Self::zeros(m, k)?;
        p.ln1_gain = Matrix::filled(1, m, 1.0);
        p.ln2_gain = Matrix::filled(1, m, 1.0);
        Ok(p)
    }

    /// Glorot-uniform weights, zero biases, unit gains.
    pub fn init<R: Rng>(m: usize, k: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::identity(m, k)?;
        let w = head_width(m, k)?;
        let bound = (6.0 / (m + w) as f64).sqrt();
        for head in &mut p.heads {
            head.wz = Matrix::random_uniform(m, w, bound, rng);
            head.wh = Matrix::random_uniform(m, w, bound, rng);
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        let heads: usize = self
            .heads
            .iter()
            .map(|h| h.wz.len() + h.wh.len() + h.bh.len())
            .sum();
        heads + self.ln1_gain.len() + self.ln1_bias.len() + self.ln2_gain.len() + self.ln2_bias.len()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps_ln: f64) -> Result<Matrix> {
    layer_norm_cached(x, gain, bias, eps_ln).map(|(y, _)| y)
}

fn layer_norm_cached(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps_ln: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let m = x.cols();
    if gain.shape() != (1, m) || bias.shape() != (1, m) {
        return Err(TdnError::shape("layer_norm", x.shape(), gain.shape()));
    }
    if !(eps_ln > 0.0) {
        return Err(TdnError::validation(format!("eps_ln must be positive, got {eps_ln}")));
    }
    let mut normalized = Matrix::zeros(x.rows(), m);
    let mut out = Matrix::zeros(x.rows(), m);
    let mut inv_std = Vec::with_capacity(x.rows());
    let g = gain.as_slice();
    let b = bias.as_slice();
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let r = 1.0 / (var + eps_ln).sqrt();
        inv_std.push(r);
        let n_row = normalized.row_mut(i);
        for (dst, &v) in n_row.iter_mut().zip(row) {
            *dst = (v - mean) * r;
        }
        let n_row = normalized.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = g[j] * n_row[j] + b[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(∂x, ∂gain, ∂bias)`.
fn layer_norm_backward(
    grad_y: &Matrix,
    cache: &LayerNormCache,
    gain: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (n, m) = grad_y.shape();
    let g = gain.as_slice();
    let mut grad_x = Matrix::zeros(n, m);
    let mut grad_gain = Matrix::zeros(1, m);
    let grad_bias = grad_y.col_sums();
    for i in 0..n {
        let dy = grad_y.row(i);
        let xhat = cache.normalized.row(i);
        for (j, gg) in grad_gain.as_mut_slice().iter_mut().enumerate() {
            *gg += dy[j] * xhat[j];
        }
        let dxhat: Vec<f64> = dy.iter().zip(g).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / m as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / m as f64;
        let r = cache.inv_std[i];
        for (j, o) in grad_x.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    (grad_x, grad_gain, grad_bias)
}

/// Cached forward values of one layer.
#[derive(Clone, Debug)]
pub struct ReprCache {
    input: Matrix,
    /// `S_k · X` per head.
    propagated: Vec<Matrix>,
    conv_pre: Matrix,
    conv_act: Matrix,
    ln1: LayerNormCache,
    z: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
    ln2: LayerNormCache,
}

fn check_heads(s: &[Matrix], p: &ReprLayerParams, x: &Matrix) -> Result<()> {
    if s.len() != p.heads.len() {
        return Err(TdnError::validation(format!(
            "{} adjacency matrices for {} heads",
            s.len(),
            p.heads.len()
        )));
    }
    for sk in s {
        if sk.shape() != (x.rows(), x.rows()) {
            return Err(TdnError::shape("graph_conv_sublayer", sk.shape(), x.shape()));
        }
    }
    Ok(())
}

struct ConvOut {
    z: Matrix,
    propagated: Vec<Matrix>,
    pre: Matrix,
    act_out: Matrix,
    ln: LayerNormCache,
}

fn conv_forward(
    x: &Matrix,
    s: &[Matrix],
    p: &ReprLayerParams,
    act: Activation,
    eps_ln: f64,
) -> Result<ConvOut> {
    check_heads(s, p, x)?;
    let mut propagated = Vec::with_capacity(s.len());
    let mut outputs = Vec::with_capacity(s.len());
    for (sk, head) in s.iter().zip(&p.heads) {
        let sx = sk.matmul(x)?;
        outputs.push(sx.matmul(&head.wz)?);
        propagated.push(sx);
    }
    let pre = Matrix::horizontal_concat(&outputs)?;
    let act_out = pre.map_elementwise(act);
    let (z, ln) = layer_norm_cached(&act_out.add(x)?, &p.ln1_gain, &p.ln1_bias, eps_ln)?;
    Ok(ConvOut {
        z,
        propagated,
        pre,
        act_out,
        ln,
    })
}

struct FfnOut {
    h: Matrix,
    pre: Matrix,
    act_out: Matrix,
    ln: LayerNormCache,
}

fn ffn_forward(z: &Matrix, p: &ReprLayerParams, act: Activation, eps_ln: f64) -> Result<FfnOut> {
    let outputs = p
        .heads
        .iter()
        .map(|head| z.matmul(&head.wh)?.broadcast_add_row(&head.bh))
        .collect::<Result<Vec<_>>>()?;
    let pre = Matrix::horizontal_concat(&outputs)?;
    let act_out = pre.map_elementwise(act);
    let (h, ln) = layer_norm_cached(&act_out.add(z)?, &p.ln2_gain, &p.ln2_bias, eps_ln)?;
    Ok(FfnOut { h, pre, act_out, ln })
}

pub fn graph_conv_sublayer(
    x: &Matrix,
    s: &[Matrix],
    p: &ReprLayerParams,
    act: Activation,
    eps_ln: f64,
) -> Result<Matrix> {
    conv_forward(x, s, p, act, eps_ln).map(|c| c.z)
}

pub fn ffn_sublayer(z: &Matrix, p: &ReprLayerParams, act: Activation, eps_ln: f64) -> Result<Matrix> {
    ffn_forward(z, p, act, eps_ln).map(|f| f.h)
}

/// Full layer forward, returning `H` and the cache for the reverse pass.
pub fn repr_layer_forward(
    x: &Matrix,
    s: &[Matrix],
    p: &ReprLayerParams,
    act: Activation,
    eps_ln: f64,
) -> Result<(Matrix, ReprCache)> {
    let conv = conv_forward(x, s, p, act, eps_ln)?;
    let ffn = ffn_forward(&conv.z, p, act, eps_ln)?;
    let cache = ReprCache {
        input: x.clone(),
        propagated: conv.propagated,
        conv_pre: conv.pre,
        conv_act: conv.act_out,
        ln1: conv.ln,
        z: conv.z,
        ffn_pre: ffn.pre,
        ffn_act: ffn.act_out,
        ln2: ffn.ln,
    };
    Ok((ffn.h, cache))
}

fn activation_grad(grad: &Matrix, pre: &Matrix, out: &Matrix, act: Activation) -> Result<Matrix> {
    let mut g = grad.clone();
    for ((gv, &x), &y) in g.as_mut_slice().iter_mut().zip(pre.as_slice()).zip(out.as_slice()) {
        *gv *= act.derivative(x, y);
    }
    if g.shape() != pre.shape() {
        return Err(TdnError::shape("activation_grad", grad.shape(), pre.shape()));
    }
    Ok(g)
}

/// Gradients of one layer: `(∂X, ∂S_k per head, ∂params)`.
pub fn repr_layer_backward(
    grad_h: &Matrix,
    cache: &ReprCache,
    s: &[Matrix],
    p: &ReprLayerParams,
    act: Activation,
) -> Result<(Matrix, Vec<Matrix>, ReprLayerParams)> {
    let x = &cache.input;
    if grad_h.shape() != x.shape() || s.len() != p.heads.len() || cache.propagated.len() != p.heads.len() {
        return Err(TdnError::contract(format!(
            "layer backward: gradient {:?} vs cached input {:?}, {} heads",
            grad_h.shape(),
            x.shape(),
            p.heads.len()
        )));
    }
    let k = p.heads.len();

    // H = LN2(act(ffn_pre) + Z)
    let (grad_r2, ln2_gain, ln2_bias) = layer_norm_backward(grad_h, &cache.ln2, &p.ln2_gain);
    let grad_ffn_pre = activation_grad(&grad_r2, &cache.ffn_pre, &cache.ffn_act, act)?;
    let mut grad_z = grad_r2;
    let grad_q = grad_ffn_pre.split_columns(k)?;
    let mut head_grads: Vec<ReprHead> = Vec::with_capacity(k);
    for (gq, head) in grad_q.iter().zip(&p.heads) {
        grad_z.add_assign(&gq.matmul_transposed(&head.wh)?)?;
        head_grads.push(ReprHead {
            wz: Matrix::zeros(0, 0),
            wh: cache.z.transposed_matmul(gq)?,
            bh: gq.col_sums(),
        });
    }

    // Z = LN1(act(conv_pre) + X)
    let (grad_r1, ln1_gain, ln1_bias) = layer_norm_backward(&grad_z, &cache.ln1, &p.ln1_gain);
    let grad_conv_pre = activation_grad(&grad_r1, &cache.conv_pre, &cache.conv_act, act)?;
    let mut grad_x = grad_r1;
    let grad_p = grad_conv_pre.split_columns(k)?;
    let mut grad_s = Vec::with_capacity(k);
    for (head, (gp, (sk, sx))) in grad_p.iter().zip(s.iter().zip(&cache.propagated)).enumerate() {
        // P = (S·X)·Wz
        head_grads[head].wz = sx.transposed_matmul(gp)?;
        let grad_sx = gp.matmul_transposed(&p.heads[head].wz)?;
        grad_s.push(grad_sx.matmul_transposed(x)?);
        grad_x.add_assign(&sk.transposed_matmul(&grad_sx)?)?;
    }

    Ok((
        grad_x,
        grad_s,
        ReprLayerParams {
            heads: head_grads,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
        },
    ))
}
