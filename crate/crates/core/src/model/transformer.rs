use super::{LayerOffsets, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::{gemm, softmax_in_place, MatMut, MatRef, Real};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

/// Row-major `rows x vocab` pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Real> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    x_in: Vec<T>,
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    att: Vec<T>,
    att_y: Vec<T>,
    x_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fc: Vec<T>,
    fc_act: Vec<T>,
}

/// Activations of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    len: usize,
    ids: Vec<TokenId>,
    layers: Vec<LayerCache<T>>,
    resid: Vec<T>,
    lnf: Vec<T>,
    lnf_mean: Vec<T>,
    lnf_rstd: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Attention probabilities of `layer`, laid out `heads x len x len`.
    pub fn attention(&self, layer: usize) -> &[T] {
        &self.layers[layer].att
    }

    /// Final normalised hidden states, `len x d`.
    pub fn final_hidden(&self) -> &[T] {
        &self.lnf
    }
}

fn check_input<T: Real>(params: &ModelParams<T>, ids: &[TokenId]) -> Result<()> {
    let c = params.config();
    if ids.is_empty() {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if ids.len() > c.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            c.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= c.vocab_size) {
        return Err(Error::OutOfVocab {
            id: bad,
            size: c.vocab_size as u32,
        });
    }
    Ok(())
}

fn layernorm<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    rows: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); rows * d];
    let mut means = vec![T::zero(); rows];
    let mut rstds = vec![T::zero(); rows];
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * rstd * gain[i] + bias[i];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (out, means, rstds)
}

/// Accumulates parameter grads into `dgain`/`dbias` and returns the input grad.
#[allow(clippy::too_many_arguments)]
fn layernorm_backward<T: Real>(
    dout: &[T],
    x: &[T],
    mean: &[T],
    rstd: &[T],
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    rows: usize,
    d: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * d];
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let (m, s) = (mean[r], rstd[r]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            let xhat = (x[r * d + i] - m) * s;
            let g = dout[r * d + i];
            dgain[i] = dgain[i] + g * xhat;
            dbias[i] = dbias[i] + g;
            let dxhat = g * gain[i];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        for i in 0..d {
            let xhat = (x[r * d + i] - m) * s;
            let dxhat = dout[r * d + i] * gain[i];
            dx[r * d + i] = s * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x)
}

fn broadcast_rows<T: Real>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(bias.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_col_sums<T: Real>(m: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c] = out[c] + m[r * cols + c];
        }
    }
}

fn layer_forward<T: Real>(
    w: &[T],
    o: &LayerOffsets,
    x_in: Vec<T>,
    len: usize,
    d: usize,
    heads: usize,
    f: usize,
) -> (LayerCache<T>, Vec<T>) {
    let dh = d / heads;
    let (ln1, ln1_mean, ln1_rstd) =
        layernorm(&x_in, &w[o.ln1_g..o.ln1_g + d], &w[o.ln1_b..o.ln1_b + d], len, d);

    let mut qkv = broadcast_rows(&w[o.qkv_b..o.qkv_b + 3 * d], len);
    gemm(
        T::one(),
        MatRef::new(&ln1, len, d),
        MatRef::new(&w[o.qkv_w..o.qkv_w + 3 * d * d], d, 3 * d),
        T::one(),
        MatMut::new(&mut qkv, len, 3 * d),
    );

    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut att = vec![T::zero(); heads * len * len];
    let mut att_y = vec![T::zero(); len * d];
    for h in 0..heads {
        let scores = &mut att[h * len * len..(h + 1) * len * len];
        gemm(
            scale,
            MatRef::strided(&qkv[h * dh..], len, dh, 3 * d, 1),
            MatRef::strided(&qkv[d + h * dh..], len, dh, 3 * d, 1).t(),
            T::zero(),
            MatMut::new(scores, len, len),
        );
        for row in scores.chunks_exact_mut(len) {
            softmax_in_place(row);
        }
        gemm(
            T::one(),
            MatRef::new(scores, len, len),
            MatRef::strided(&qkv[2 * d + h * dh..], len, dh, 3 * d, 1),
            T::zero(),
            MatMut::strided(&mut att_y[h * dh..], len, dh, d, 1),
        );
    }

    let mut x_mid = x_in.clone();
    add_rows(&mut x_mid, &w[o.proj_b..o.proj_b + d], len);
    gemm(
        T::one(),
        MatRef::new(&att_y, len, d),
        MatRef::new(&w[o.proj_w..o.proj_w + d * d], d, d),
        T::one(),
        MatMut::new(&mut x_mid, len, d),
    );

    let (ln2, ln2_mean, ln2_rstd) =
        layernorm(&x_mid, &w[o.ln2_g..o.ln2_g + d], &w[o.ln2_b..o.ln2_b + d], len, d);
    let mut fc = broadcast_rows(&w[o.fc_b..o.fc_b + f], len);
    gemm(
        T::one(),
        MatRef::new(&ln2, len, d),
        MatRef::new(&w[o.fc_w..o.fc_w + d * f], d, f),
        T::one(),
        MatMut::new(&mut fc, len, f),
    );
    let fc_act: Vec<T> = fc.iter().map(|&v| gelu(v)).collect();
    let mut x_out = x_mid.clone();
    add_rows(&mut x_out, &w[o.out_b..o.out_b + d], len);
    gemm(
        T::one(),
        MatRef::new(&fc_act, len, f),
        MatRef::new(&w[o.out_w..o.out_w + f * d], f, d),
        T::one(),
        MatMut::new(&mut x_out, len, d),
    );

    (
        LayerCache {
            x_in,
            ln1,
            ln1_mean,
            ln1_rstd,
            qkv,
            att,
            att_y,
            x_mid,
            ln2,
            ln2_mean,
            ln2_rstd,
            fc,
            fc_act,
        },
        x_out,
    )
}

fn add_rows<T: Real>(m: &mut [T], bias: &[T], rows: usize) {
    let d = bias.len();
    for r in 0..rows {
        for i in 0..d {
            m[r * d + i] = m[r * d + i] + bias[i];
        }
    }
}

/// Runs the transformer body and final norm, keeping every activation.
pub fn hidden_states<T: Real>(params: &ModelParams<T>, ids: &[TokenId]) -> Result<ForwardCache<T>> {
    check_input(params, ids)?;
    let c = params.config();
    let o = params.offsets();
    let w = params.data();
    let (len, d, f) = (ids.len(), c.d, c.ffn_dim());

    let mut x = vec![T::zero(); len * d];
    for (t, &id) in ids.iter().enumerate() {
        let tok = &w[o.wte + id as usize * d..o.wte + (id as usize + 1) * d];
        let pos = &w[o.wpe + t * d..o.wpe + (t + 1) * d];
        for i in 0..d {
            x[t * d + i] = tok[i] + pos[i];
        }
    }
    let mut layers = Vec::with_capacity(c.n_layers);
    for lo in &o.layers {
        let (cache, x_out) = layer_forward(w, lo, x, len, d, c.n_heads, f);
        layers.push(cache);
        x = x_out;
    }
    let (lnf, lnf_mean, lnf_rstd) =
        layernorm(&x, &w[o.lnf_g..o.lnf_g + d], &w[o.lnf_b..o.lnf_b + d], len, d);
    Ok(ForwardCache {
        len,
        ids: ids.to_vec(),
        layers,
        resid: x,
        lnf,
        lnf_mean,
        lnf_rstd,
    })
}

/// Output-head logits for selected rows of a finished forward pass.
pub fn logits_for_rows<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    rows: &[usize],
) -> Logits<T> {
    let c = params.config();
    let (d, v) = (c.d, c.vocab_size);
    let o = params.offsets();
    let mut hidden = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        hidden.extend_from_slice(&cache.lnf[r * d..(r + 1) * d]);
    }
    let mut data = vec![T::zero(); rows.len() * v];
    gemm(
        T::one(),
        MatRef::new(&hidden, rows.len(), d),
        MatRef::new(&params.data()[o.head..o.head + d * v], d, v),
        T::zero(),
        MatMut::new(&mut data, rows.len(), v),
    );
    Logits {
        rows: rows.len(),
        vocab: v,
        data,
    }
}

/// Full forward pass: `len x vocab_size` logits.
pub fn forward<T: Real>(params: &ModelParams<T>, ids: &[TokenId]) -> Result<Logits<T>> {
    let cache = hidden_states(params, ids)?;
    let rows: Vec<usize> = (0..ids.len()).collect();
    Ok(logits_for_rows(params, &cache, &rows))
}

/// Mean cross-entropy over `positions` and its exact gradient.
pub fn masked_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    ids: &[TokenId],
    positions: &[usize],
    targets: &[TokenId],
) -> Result<(f64, Vec<T>)> {
    loss_and_grad(params, ids, positions, targets, positions.len() as f64)
}

/// Forward-only value of [`masked_loss_and_grad`].
pub fn masked_loss<T: Real>(
    params: &ModelParams<T>,
    ids: &[TokenId],
    positions: &[usize],
    targets: &[TokenId],
) -> Result<f64> {
    if positions.is_empty() || positions.len() != targets.len() {
        return Err(Error::Contract("loss needs matching, non-empty positions and targets".into()));
    }
    let cache = hidden_states(params, ids)?;
    let mut logits = logits_for_rows(params, &cache, positions);
    let v = logits.vocab;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &mut logits.data[r * v..(r + 1) * v];
        let picked = row[t as usize];
        let (max, lse) = softmax_in_place(row);
        loss -= (picked - max - lse).as_f64();
    }
    Ok(loss / positions.len() as f64)
}

/// `sum_{p in positions} -log softmax(logits[p])[target] / normalizer` and its
/// gradient with respect to every parameter.
pub fn loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    ids: &[TokenId],
    positions: &[usize],
    targets: &[TokenId],
    normalizer: f64,
) -> Result<(f64, Vec<T>)> {
    if positions.is_empty() {
        return Err(Error::Contract("loss needs at least one masked position".into()));
    }
    if positions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} positions but {} targets",
            positions.len(),
            targets.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= ids.len()) {
        return Err(Error::Contract(format!("masked position {p} outside the sequence")));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Contract(format!("loss normaliser {normalizer} must be positive")));
    }
    let c = *params.config();
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::OutOfVocab {
            id: bad,
            size: c.vocab_size as u32,
        });
    }
    let cache = hidden_states(params, ids)?;
    let o = params.offsets();
    let w = params.data();
    let (len, d, v, f, heads) = (ids.len(), c.d, c.vocab_size, c.ffn_dim(), c.n_heads);
    let dh = d / heads;
    let mut grads = vec![T::zero(); params.len()];

    // Output head and cross-entropy.
    let mut logits = logits_for_rows(params, &cache, positions);
    let inv_norm = T::lit(1.0 / normalizer);
    let mut loss = 0.0f64;
    for (r, &target) in targets.iter().enumerate() {
        let row = &mut logits.data[r * v..(r + 1) * v];
        let picked = row[target as usize];
        let (max, lse) = softmax_in_place(row);
        loss -= (picked - max - lse).as_f64();
        row[target as usize] = row[target as usize] - T::one();
        row.iter_mut().for_each(|g| *g = *g * inv_norm);
    }
    loss /= normalizer;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("masked cross-entropy is {loss}")));
    }
    let dlogits = logits.data;
    let m = positions.len();
    let mut hidden = Vec::with_capacity(m * d);
    for &p in positions {
        hidden.extend_from_slice(&cache.lnf[p * d..(p + 1) * d]);
    }
    gemm(
        T::one(),
        MatRef::new(&hidden, m, d).t(),
        MatRef::new(&dlogits, m, v),
        T::zero(),
        MatMut::new(&mut grads[o.head..o.head + d * v], d, v),
    );
    let mut dhidden = vec![T::zero(); m * d];
    gemm(
        T::one(),
        MatRef::new(&dlogits, m, v),
        MatRef::new(&w[o.head..o.head + d * v], d, v).t(),
        T::zero(),
        MatMut::new(&mut dhidden, m, d),
    );
    let mut dlnf = vec![T::zero(); len * d];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..d {
            dlnf[p * d + i] = dlnf[p * d + i] + dhidden[r * d + i];
        }
    }

    let mut dx = {
        let (head, tail) = grads.split_at_mut(o.lnf_b);
        layernorm_backward(
            &dlnf,
            &cache.resid,
            &cache.lnf_mean,
            &cache.lnf_rstd,
            &w[o.lnf_g..o.lnf_g + d],
            &mut head[o.lnf_g..o.lnf_g + d],
            &mut tail[..d],
            len,
            d,
        )
    };

    let scale = T::one() / T::lit(dh as f64).sqrt();
    for (lo, lc) in o.layers.iter().zip(&cache.layers).rev() {
        // MLP branch: x_out = x_mid + gelu(ln2 W_fc + b_fc) W_out + b_out.
        gemm(
            T::one(),
            MatRef::new(&lc.fc_act, len, f).t(),
            MatRef::new(&dx, len, d),
            T::zero(),
            MatMut::new(&mut grads[lo.out_w..lo.out_w + f * d], f, d),
        );
        add_col_sums(&dx, len, d, &mut grads[lo.out_b..lo.out_b + d]);
        let mut dfc = vec![T::zero(); len * f];
        gemm(
            T::one(),
            MatRef::new(&dx, len, d),
            MatRef::new(&w[lo.out_w..lo.out_w + f * d], f, d).t(),
            T::zero(),
            MatMut::new(&mut dfc, len, f),
        );
        for (g, &pre) in dfc.iter_mut().zip(&lc.fc) {
            *g = *g * gelu_grad(pre);
        }
        gemm(
            T::one(),
            MatRef::new(&lc.ln2, len, d).t(),
            MatRef::new(&dfc, len, f),
            T::zero(),
            MatMut::new(&mut grads[lo.fc_w..lo.fc_w + d * f], d, f),
        );
        add_col_sums(&dfc, len, f, &mut grads[lo.fc_b..lo.fc_b + f]);
        let mut dln2 = vec![T::zero(); len * d];
        gemm(
            T::one(),
            MatRef::new(&dfc, len, f),
            MatRef::new(&w[lo.fc_w..lo.fc_w + d * f], d, f).t(),
            T::zero(),
            MatMut::new(&mut dln2, len, d),
        );
        let dmid_ln = {
            let (head, tail) = grads.split_at_mut(lo.ln2_b);
            layernorm_backward(
                &dln2,
                &lc.x_mid,
                &lc.ln2_mean,
                &lc.ln2_rstd,
                &w[lo.ln2_g..lo.ln2_g + d],
                &mut head[lo.ln2_g..lo.ln2_g + d],
                &mut tail[..d],
                len,
                d,
            )
        };
        let mut dmid = dx;
        crate::linalg::add_assign(&mut dmid, &dmid_ln);

        // Attention branch: x_mid = x_in + attn(ln1) W_proj + b_proj.
        gemm(
            T::one(),
            MatRef::new(&lc.att_y, len, d).t(),
            MatRef::new(&dmid, len, d),
            T::zero(),
            MatMut::new(&mut grads[lo.proj_w..lo.proj_w + d * d], d, d),
        );
        add_col_sums(&dmid, len, d, &mut grads[lo.proj_b..lo.proj_b + d]);
        let mut datt_y = vec![T::zero(); len * d];
        gemm(
            T::one(),
            MatRef::new(&dmid, len, d),
            MatRef::new(&w[lo.proj_w..lo.proj_w + d * d], d, d).t(),
            T::zero(),
            MatMut::new(&mut datt_y, len, d),
        );
        let mut dqkv = vec![T::zero(); len * 3 * d];
        let mut dp = vec![T::zero(); len * len];
        for h in 0..heads {
            let probs = &lc.att[h * len * len..(h + 1) * len * len];
            let dy_h = MatRef::strided(&datt_y[h * dh..], len, dh, d, 1);
            // dV = P^T dY
            gemm(
                T::one(),
                MatRef::new(probs, len, len).t(),
                dy_h,
                T::zero(),
                MatMut::strided(&mut dqkv[2 * d + h * dh..], len, dh, 3 * d, 1),
            );
            // dP = dY V^T
            gemm(
                T::one(),
                dy_h,
                MatRef::strided(&lc.qkv[2 * d + h * dh..], len, dh, 3 * d, 1).t(),
                T::zero(),
                MatMut::new(&mut dp, len, len),
            );
            // Softmax backward, folded with the score scale.
            for r in 0..len {
                let prow = &probs[r * len..(r + 1) * len];
                let drow = &mut dp[r * len..(r + 1) * len];
                let dot = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum::<T>();
                for (g, &p) in drow.iter_mut().zip(prow) {
                    *g = p * (*g - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                T::one(),
                MatRef::new(&dp, len, len),
                MatRef::strided(&lc.qkv[d + h * dh..], len, dh, 3 * d, 1),
                T::zero(),
                MatMut::strided(&mut dqkv[h * dh..], len, dh, 3 * d, 1),
            );
            gemm(
                T::one(),
                MatRef::new(&dp, len, len).t(),
                MatRef::strided(&lc.qkv[h * dh..], len, dh, 3 * d, 1),
                T::zero(),
                MatMut::strided(&mut dqkv[d + h * dh..], len, dh, 3 * d, 1),
            );
        }
        gemm(
            T::one(),
            MatRef::new(&lc.ln1, len, d).t(),
            MatRef::new(&dqkv, len, 3 * d),
            T::zero(),
            MatMut::new(&mut grads[lo.qkv_w..lo.qkv_w + 3 * d * d], d, 3 * d),
        );
        add_col_sums(&dqkv, len, 3 * d, &mut grads[lo.qkv_b..lo.qkv_b + 3 * d]);
        let mut dln1 = vec![T::zero(); len * d];
        gemm(
            T::one(),
            MatRef::new(&dqkv, len, 3 * d),
            MatRef::new(&w[lo.qkv_w..lo.qkv_w + 3 * d * d], d, 3 * d).t(),
            T::zero(),
            MatMut::new(&mut dln1, len, d),
        );
        let din_ln = {
            let (head, tail) = grads.split_at_mut(lo.ln1_b);
            layernorm_backward(
                &dln1,
                &lc.x_in,
                &lc.ln1_mean,
                &lc.ln1_rstd,
                &w[lo.ln1_g..lo.ln1_g + d],
                &mut head[lo.ln1_g..lo.ln1_g + d],
                &mut tail[..d],
                len,
                d,
            )
        };
        crate::linalg::add_assign(&mut dmid, &din_ln);
        dx = dmid;
    }

    for (t, &id) in cache.ids.iter().enumerate() {
        let te = o.wte + id as usize * d;
        let pe = o.wpe + t * d;
        for i in 0..d {
            grads[te + i] = grads[te + i] + dx[t * d + i];
            grads[pe + i] = grads[pe + i] + dx[t * d + i];
        }
    }
    Ok((loss, grads))
}
