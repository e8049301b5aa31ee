//! Pre-LayerNorm decoder-only transformer: forward pass with cached
//! activations and an exact reverse-mode backward pass.
//!
//! The input is always `[BOS] ++ context`; row `r` of the output predicts
//! `context[r]` (row 0 predicts the first event from BOS alone), and the last
//! row predicts the event following the context.

use super::layout::{LayerLayout, Layout};
use super::scalar::{axpy, dot, Scalar};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    /// Attention probabilities, `[head][row][col]` with `col <= row`.
    att: Vec<T>,
    y: Vec<T>,
    ln2: LnCache<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Cached activations of one forward pass.
pub(crate) struct Forward<T> {
    pub rows: usize,
    tokens: Vec<u16>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    /// Final normalized hidden states, `rows x d`.
    f: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], rows: usize, d: usize, gain: &[T], bias: &[T], out: &mut [T]) -> LnCache<T> {
    let eps = T::of(LN_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    dout: &[T],
    rows: usize,
    d: usize,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] += dy[j] * xh[j];
            dbias[j] += dy[j];
            dxhat[j] = dy[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// `out[r] = bias + x[r] W` for `W: [n_in][n_out]`.
fn linear<T: Scalar>(x: &[T], rows: usize, n_in: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let n_out = bias.len();
    for r in 0..rows {
        let o = &mut out[r * n_out..(r + 1) * n_out];
        o.copy_from_slice(bias);
        for i in 0..n_in {
            let xi = x[r * n_in + i];
            if xi != T::zero() {
                axpy(o, &w[i * n_out..(i + 1) * n_out], xi);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    rows: usize,
    n_in: usize,
    w: &[T],
    dw: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let n_out = dbias.len();
    for r in 0..rows {
        let dy = &dout[r * n_out..(r + 1) * n_out];
        if dy.iter().all(|&v| v == T::zero()) {
            continue;
        }
        for (b, &g) in dbias.iter_mut().zip(dy) {
            *b += g;
        }
        for i in 0..n_in {
            let wi = &w[i * n_out..(i + 1) * n_out];
            let xi = x[r * n_in + i];
            if xi != T::zero() {
                axpy(&mut dw[i * n_out..(i + 1) * n_out], dy, xi);
            }
            if let Some(dx) = dx.as_deref_mut() {
                dx[r * n_in + i] += dot(dy, wi);
            }
        }
    }
}

#[inline]
fn gelu<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * u * u)
}

fn attention<T: Scalar>(qkv: &[T], rows: usize, d: usize, heads: usize, att: &mut [T], y: &mut [T]) {
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    for h in 0..heads {
        for t in 0..rows {
            let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
            let arow = &mut att[(h * rows + t) * rows..(h * rows + t + 1) * rows];
            let mut max = T::neg_infinity();
            for s in 0..=t {
                let k = &qkv[s * 3 * d + d + h * hd..s * 3 * d + d + (h + 1) * hd];
                let v = dot(q, k) * scale;
                arow[s] = v;
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for a in &mut arow[..=t] {
                *a = (*a - max).exp();
                sum += *a;
            }
            let inv = T::one() / sum;
            let yrow = &mut y[t * d + h * hd..t * d + (h + 1) * hd];
            yrow.iter_mut().for_each(|v| *v = T::zero());
            for s in 0..=t {
                arow[s] *= inv;
                let v = &qkv[s * 3 * d + 2 * d + h * hd..s * 3 * d + 2 * d + (h + 1) * hd];
                axpy(yrow, v, arow[s]);
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    qkv: &[T],
    att: &[T],
    dy: &[T],
    rows: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut datt = vec![T::zero(); rows];
    for h in 0..heads {
        for t in 0..rows {
            let dyr = &dy[t * d + h * hd..t * d + (h + 1) * hd];
            if dyr.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let arow = &att[(h * rows + t) * rows..(h * rows + t + 1) * rows];
            let mut weighted = T::zero();
            for s in 0..=t {
                let voff = s * 3 * d + 2 * d + h * hd;
                datt[s] = dot(dyr, &qkv[voff..voff + hd]);
                weighted += arow[s] * datt[s];
                axpy(&mut dqkv[voff..voff + hd], dyr, arow[s]);
            }
            let qoff = t * 3 * d + h * hd;
            for s in 0..=t {
                let ds = arow[s] * (datt[s] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let koff = s * 3 * d + d + h * hd;
                // dq_t += ds * k_s ; dk_s += ds * q_t
                for j in 0..hd {
                    let qj = qkv[qoff + j];
                    let kj = qkv[koff + j];
                    dqkv[qoff + j] += ds * kj;
                    dqkv[koff + j] += ds * qj;
                }
            }
        }
    }
}

/// Runs the network on `[BOS] ++ context`.
///
/// `context.len()` must not exceed `layout.positions - 1`.
pub(crate) fn forward<T: Scalar>(params: &[T], layout: &Layout, context: &[u16]) -> Forward<T> {
    let d = layout.d;
    let rows = context.len() + 1;
    assert!(rows <= layout.positions, "context longer than the position table");

    let mut x = vec![T::zero(); rows * d];
    let pos = &params[layout.position_embedding.clone()];
    let tok = &params[layout.token_embedding.clone()];
    x[..d].copy_from_slice(&params[layout.bos.clone()]);
    for (r, &t) in context.iter().enumerate() {
        let t = usize::from(t);
        x[(r + 1) * d..(r + 2) * d].copy_from_slice(&tok[t * d..(t + 1) * d]);
    }
    for r in 0..rows {
        axpy(&mut x[r * d..(r + 1) * d], &pos[r * d..(r + 1) * d], T::one());
    }

    let mut layers = Vec::with_capacity(layout.layers.len());
    for l in &layout.layers {
        let (cache, next) = layer_forward(params, layout, l, &x, rows);
        layers.push(cache);
        x = next;
    }

    let mut f = vec![T::zero(); rows * d];
    let lnf = layer_norm(
        &x,
        rows,
        d,
        &params[layout.final_gain.clone()],
        &params[layout.final_bias.clone()],
        &mut f,
    );
    Forward {
        rows,
        tokens: context.to_vec(),
        layers,
        lnf,
        f,
    }
}

fn layer_forward<T: Scalar>(
    params: &[T],
    layout: &Layout,
    l: &LayerLayout,
    x: &[T],
    rows: usize,
) -> (LayerCache<T>, Vec<T>) {
    let (d, hdim, heads) = (layout.d, layout.hidden, layout.heads);
    let p = |r: &std::ops::Range<usize>| &params[r.clone()];

    let mut a = vec![T::zero(); rows * d];
    let ln1 = layer_norm(x, rows, d, p(&l.ln1_gain), p(&l.ln1_bias), &mut a);
    let mut qkv = vec![T::zero(); rows * 3 * d];
    linear(&a, rows, d, p(&l.qkv), p(&l.qkv_bias), &mut qkv);
    let mut att = vec![T::zero(); heads * rows * rows];
    let mut y = vec![T::zero(); rows * d];
    attention(&qkv, rows, d, heads, &mut att, &mut y);
    let mut mid = vec![T::zero(); rows * d];
    linear(&y, rows, d, p(&l.attn_out), p(&l.attn_out_bias), &mut mid);
    for (m, &xi) in mid.iter_mut().zip(x) {
        *m += xi;
    }

    let mut b = vec![T::zero(); rows * d];
    let ln2 = layer_norm(&mid, rows, d, p(&l.ln2_gain), p(&l.ln2_bias), &mut b);
    let mut u = vec![T::zero(); rows * hdim];
    linear(&b, rows, d, p(&l.fc), p(&l.fc_bias), &mut u);
    let g: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
    let mut out = vec![T::zero(); rows * d];
    linear(&g, rows, hdim, p(&l.proj), p(&l.proj_bias), &mut out);
    for (o, &m) in out.iter_mut().zip(&mid) {
        *o += m;
    }
    (
        LayerCache {
            ln1,
            a,
            qkv,
            att,
            y,
            ln2,
            b,
            u,
            g,
        },
        out,
    )
}

impl<T: Scalar> Forward<T> {
    /// Unnormalized output scores of `row`.
    pub fn logits(&self, params: &[T], layout: &Layout, row: usize) -> Vec<T> {
        let d = layout.d;
        let mut out = params[layout.output_bias.clone()].to_vec();
        let w = &params[layout.output.clone()];
        let f = &self.f[row * d..(row + 1) * d];
        for (i, &fi) in f.iter().enumerate() {
            axpy(&mut out, &w[i * layout.vocab..(i + 1) * layout.vocab], fi);
        }
        out
    }
}

/// Log-softmax computed with the max-shift.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

/// Reverse pass given gradients with respect to the logits of selected rows.
///
/// Gradients are *added* into `grad` (length `layout.total`).
pub(crate) fn backward<T: Scalar>(
    params: &[T],
    layout: &Layout,
    fwd: &Forward<T>,
    dlogits: &[(usize, Vec<T>)],
    grad: &mut [T],
) {
    let (d, v, rows) = (layout.d, layout.vocab, fwd.rows);

    // Output projection, only for rows that carry a gradient.
    let mut df = vec![T::zero(); rows * d];
    {
        let w = &params[layout.output.clone()];
        let (head, tail) = grad.split_at_mut(layout.output_bias.start);
        let dw = &mut head[layout.output.clone()];
        let db = &mut tail[..v];
        for (row, dz) in dlogits {
            let row = *row;
            for (b, &g) in db.iter_mut().zip(dz) {
                *b += g;
            }
            let f = &fwd.f[row * d..(row + 1) * d];
            for i in 0..d {
                axpy(&mut dw[i * v..(i + 1) * v], dz, f[i]);
                df[row * d + i] += dot(dz, &w[i * v..(i + 1) * v]);
            }
        }
    }

    let mut dx = vec![T::zero(); rows * d];
    {
        let (g, b) = split_pair(grad, &layout.final_gain, &layout.final_bias);
        layer_norm_backward(&fwd.lnf, &df, rows, d, &params[layout.final_gain.clone()], g, b, &mut dx);
    }

    for (l, cache) in layout.layers.iter().zip(&fwd.layers).rev() {
        dx = layer_backward(params, layout, l, cache, dx, rows, grad);
    }

    // Embeddings.
    let pos = layout.position_embedding.start;
    for r in 0..rows {
        let dr = &dx[r * d..(r + 1) * d];
        axpy(&mut grad[pos + r * d..pos + (r + 1) * d], dr, T::one());
        if r == 0 {
            axpy(&mut grad[layout.bos.clone()], dr, T::one());
        } else {
            let t = usize::from(fwd.tokens[r - 1]);
            let off = layout.token_embedding.start + t * d;
            axpy(&mut grad[off..off + d], dr, T::one());
        }
    }
}

fn layer_backward<T: Scalar>(
    params: &[T],
    layout: &Layout,
    l: &LayerLayout,
    c: &LayerCache<T>,
    dout: Vec<T>,
    rows: usize,
    grad: &mut [T],
) -> Vec<T> {
    let (d, hdim, heads) = (layout.d, layout.hidden, layout.heads);
    let p = |r: &std::ops::Range<usize>| &params[r.clone()];

    // MLP branch: out = mid + proj(gelu(fc(ln2(mid))))
    let mut dg = vec![T::zero(); rows * hdim];
    {
        let (w, b) = split_pair(grad, &l.proj, &l.proj_bias);
        linear_backward(&c.g, &dout, rows, hdim, p(&l.proj), w, b, Some(&mut dg));
    }
    for (dgi, &ui) in dg.iter_mut().zip(&c.u) {
        *dgi *= gelu_grad(ui);
    }
    let mut dbn = vec![T::zero(); rows * d];
    {
        let (w, b) = split_pair(grad, &l.fc, &l.fc_bias);
        linear_backward(&c.b, &dg, rows, d, p(&l.fc), w, b, Some(&mut dbn));
    }
    let mut dmid = dout;
    {
        let (g, b) = split_pair(grad, &l.ln2_gain, &l.ln2_bias);
        layer_norm_backward(&c.ln2, &dbn, rows, d, p(&l.ln2_gain), g, b, &mut dmid);
    }

    // Attention branch: mid = x + out_proj(attn(qkv(ln1(x))))
    let mut dy = vec![T::zero(); rows * d];
    {
        let (w, b) = split_pair(grad, &l.attn_out, &l.attn_out_bias);
        linear_backward(&c.y, &dmid, rows, d, p(&l.attn_out), w, b, Some(&mut dy));
    }
    let mut dqkv = vec![T::zero(); rows * 3 * d];
    attention_backward(&c.qkv, &c.att, &dy, rows, d, heads, &mut dqkv);
    let mut da = vec![T::zero(); rows * d];
    {
        let (w, b) = split_pair(grad, &l.qkv, &l.qkv_bias);
        linear_backward(&c.a, &dqkv, rows, d, p(&l.qkv), w, b, Some(&mut da));
    }
    let mut dx = dmid;
    {
        let (g, b) = split_pair(grad, &l.ln1_gain, &l.ln1_bias);
        layer_norm_backward(&c.ln1, &da, rows, d, p(&l.ln1_gain), g, b, &mut dx);
    }
    dx
}

/// Two disjoint mutable views; `first` must end at or before `second` starts.
fn split_pair<'a, T>(
    buf: &'a mut [T],
    first: &std::ops::Range<usize>,
    second: &std::ops::Range<usize>,
) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(first.end <= second.start);
    let (head, tail) = buf.split_at_mut(second.start);
    (&mut head[first.clone()], &mut tail[..second.len()])
}
