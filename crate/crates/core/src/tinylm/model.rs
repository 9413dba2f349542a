//! Forward and reverse-mode passes of the pre-norm decoder.
//!
//! Per block: `x += Attn(LN1(x))`, `x += MLP(LN2(x))`, then a final norm and
//! an untied output projection followed by log-softmax. All arithmetic is
//! f64 and every reduction runs in a fixed order, so results are
//! bit-reproducible.

use rayon::prelude::*;

use super::{ModelError, Parameters, TokenId};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][t][s]` attention probabilities; zero above the diagonal.
    att: Vec<f64>,
    y: Vec<f64>,
    ln2: NormCache,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Log-distributions for every position of one sequence, plus the
/// activations the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    ids: Vec<TokenId>,
    vocab: usize,
    logprobs: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    hf: Vec<f64>,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// `log p(· | ids[..=pos])`, the distribution of the token after `pos`.
    pub fn logprobs_at(&self, pos: usize) -> &[f64] {
        &self.logprobs[pos * self.vocab..(pos + 1) * self.vocab]
    }

    /// Row-major `[len × vocab]` matrix of log-probabilities.
    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn into_logprobs(self) -> Vec<f64> {
        self.logprobs
    }
}

// out[t×n] = a[t×m] · w[m×n]
fn matmul(a: &[f64], w: &[f64], t: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * n];
    for r in 0..t {
        let row = &a[r * m..(r + 1) * m];
        let dst = &mut out[r * n..(r + 1) * n];
        for (i, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let wrow = &w[i * n..(i + 1) * n];
            for (o, &wv) in dst.iter_mut().zip(wrow) {
                *o += x * wv;
            }
        }
    }
    out
}

// dw[m×n] += aᵀ · dout ; returns da[t×m] = dout · wᵀ
fn matmul_backward(
    a: &[f64],
    w: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    t: usize,
    m: usize,
    n: usize,
) -> Vec<f64> {
    let mut da = vec![0.0; t * m];
    for r in 0..t {
        let drow = &dout[r * n..(r + 1) * n];
        if drow.iter().all(|&x| x == 0.0) {
            continue;
        }
        let arow = &a[r * m..(r + 1) * m];
        let darow = &mut da[r * m..(r + 1) * m];
        for i in 0..m {
            let wrow = &w[i * n..(i + 1) * n];
            let dwrow = &mut dw[i * n..(i + 1) * n];
            let x = arow[i];
            let mut acc = 0.0;
            for j in 0..n {
                acc += drow[j] * wrow[j];
                dwrow[j] += x * drow[j];
            }
            darow[i] = acc;
        }
    }
    da
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], t: usize, d: usize) -> (Vec<f64>, NormCache) {
    let mut out = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            out[r * d + i] = gain[i] * h + bias[i];
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dout: &[f64],
    cache: &NormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    t: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; t * d];
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let drow = &dout[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..d {
            dgain[i] += drow[i] * xh[i];
            dbias[i] += drow[i];
            dxhat[i] = drow[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// In-place numerically stable log-softmax over each row.
pub(crate) fn log_softmax_rows(logits: &mut [f64], n: usize) {
    for row in logits.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        row.iter_mut().for_each(|z| *z -= lse);
    }
}

/// Run the model over `ids`. Position `i` of the output is the distribution
/// of the token following `ids[..=i]`.
pub fn forward(params: &Parameters, ids: &[TokenId]) -> Result<ForwardOutput, ModelError> {
    let cfg = params.config();
    let (vocab, d, nh, hd, hidden) = (
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.head_dim(),
        cfg.hidden_dim(),
    );
    let t = ids.len();
    if t > cfg.context_window {
        return Err(ModelError::ContextOverflow {
            len: t,
            window: cfg.context_window,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(ModelError::InvalidToken(bad));
    }
    let lay = params.layout();
    let p = params.values();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; t * d];
    for (pos, &id) in ids.iter().enumerate() {
        let te = &p[lay.tok_emb + id as usize * d..][..d];
        let pe = &p[lay.pos_emb + pos * d..][..d];
        for i in 0..d {
            x[pos * d + i] = te[i] + pe[i];
        }
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for l in &lay.layers {
        let (a, ln1) = layer_norm(&x, &p[l.ln1_gain..][..d], &p[l.ln1_bias..][..d], t, d);
        let q = matmul(&a, &p[l.wq..][..d * d], t, d, d);
        let k = matmul(&a, &p[l.wk..][..d * d], t, d, d);
        let v = matmul(&a, &p[l.wv..][..d * d], t, d, d);

        let mut att = vec![0.0; nh * t * t];
        let mut y = vec![0.0; t * d];
        for h in 0..nh {
            let off = h * hd;
            for ti in 0..t {
                let qrow = &q[ti * d + off..][..hd];
                let arow = &mut att[(h * t + ti) * t..][..t];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=ti {
                    let krow = &k[s * d + off..][..hd];
                    let score = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    arow[s] = score;
                    max = max.max(score);
                }
                let mut sum = 0.0;
                for a in &mut arow[..=ti] {
                    *a = (*a - max).exp();
                    sum += *a;
                }
                for a in &mut arow[..=ti] {
                    *a /= sum;
                }
                let yrow = &mut y[ti * d + off..][..hd];
                for s in 0..=ti {
                    let w = arow[s];
                    let vrow = &v[s * d + off..][..hd];
                    for j in 0..hd {
                        yrow[j] += w * vrow[j];
                    }
                }
            }
        }
        let o = matmul(&y, &p[l.wo..][..d * d], t, d, d);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }

        let (m, ln2) = layer_norm(&x, &p[l.ln2_gain..][..d], &p[l.ln2_bias..][..d], t, d);
        let u = matmul(&m, &p[l.w_up..][..d * hidden], t, d, hidden);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let f = matmul(&g, &p[l.w_down..][..hidden * d], t, hidden, d);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }

        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            att,
            y,
            ln2,
            m,
            u,
            g,
        });
    }

    let (hf, lnf) = layer_norm(&x, &p[lay.lnf_gain..][..d], &p[lay.lnf_bias..][..d], t, d);
    let mut logprobs = matmul(&hf, &p[lay.out_proj..][..d * vocab], t, d, vocab);
    log_softmax_rows(&mut logprobs, vocab);

    Ok(ForwardOutput {
        ids: ids.to_vec(),
        vocab,
        logprobs,
        layers,
        lnf,
        hf,
    })
}

/// Accumulate `∂loss/∂θ` into `grad` given `∂loss/∂logprobs` for one
/// forward output.
pub fn backward(
    params: &Parameters,
    out: &ForwardOutput,
    d_logprobs: &[f64],
    grad: &mut [f64],
) -> Result<(), ModelError> {
    let cfg = params.config();
    let (vocab, d, nh, hd, hidden) = (
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.head_dim(),
        cfg.hidden_dim(),
    );
    let t = out.len();
    if d_logprobs.len() != t * vocab {
        return Err(ModelError::ShapeMismatch {
            expected: t * vocab,
            got: d_logprobs.len(),
        });
    }
    if grad.len() != params.len() {
        return Err(ModelError::ShapeMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    let lay = params.layout();
    let p = params.values();
    let scale = 1.0 / (hd as f64).sqrt();

    // log-softmax: dz = g - softmax · Σg
    let mut dlogits = vec![0.0; t * vocab];
    for r in 0..t {
        let g = &d_logprobs[r * vocab..(r + 1) * vocab];
        let total: f64 = g.iter().sum();
        let lp = out.logprobs_at(r);
        let dz = &mut dlogits[r * vocab..(r + 1) * vocab];
        if total == 0.0 && g.iter().all(|&x| x == 0.0) {
            continue;
        }
        for j in 0..vocab {
            dz[j] = g[j] - lp[j].exp() * total;
        }
    }

    let dhf = {
        let (w, dw) = (&p[lay.out_proj..][..d * vocab], &mut grad[lay.out_proj..][..d * vocab]);
        matmul_backward(&out.hf, w, &dlogits, dw, t, d, vocab)
    };
    let mut dx = {
        let (dg, db) = split_pair(grad, lay.lnf_gain, lay.lnf_bias, d);
        layer_norm_backward(&dhf, &out.lnf, &p[lay.lnf_gain..][..d], dg, db, t, d)
    };

    for (l, c) in lay.layers.iter().zip(&out.layers).rev() {
        // MLP branch
        let dg_act = matmul_backward(
            &c.g,
            &p[l.w_down..][..hidden * d],
            &dx,
            &mut grad[l.w_down..][..hidden * d],
            t,
            hidden,
            d,
        );
        let du: Vec<f64> = dg_act
            .iter()
            .zip(&c.u)
            .map(|(&dg, &u)| dg * gelu_grad(u))
            .collect();
        let dm = matmul_backward(
            &c.m,
            &p[l.w_up..][..d * hidden],
            &du,
            &mut grad[l.w_up..][..d * hidden],
            t,
            d,
            hidden,
        );
        let dx2 = {
            let (dgain, dbias) = split_pair(grad, l.ln2_gain, l.ln2_bias, d);
            layer_norm_backward(&dm, &c.ln2, &p[l.ln2_gain..][..d], dgain, dbias, t, d)
        };
        for (a, b) in dx.iter_mut().zip(&dx2) {
            *a += b;
        }

        // attention branch
        let dy = matmul_backward(&c.y, &p[l.wo..][..d * d], &dx, &mut grad[l.wo..][..d * d], t, d, d);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut datt = vec![0.0; t];
        for h in 0..nh {
            let off = h * hd;
            for ti in 0..t {
                let arow = &c.att[(h * t + ti) * t..][..t];
                let dyrow = &dy[ti * d + off..][..hd];
                let mut dot = 0.0;
                for s in 0..=ti {
                    let vrow = &c.v[s * d + off..][..hd];
                    datt[s] = dyrow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += arow[s] * datt[s];
                    let dvrow = &mut dv[s * d + off..][..hd];
                    for j in 0..hd {
                        dvrow[j] += arow[s] * dyrow[j];
                    }
                }
                for s in 0..=ti {
                    let ds = arow[s] * (datt[s] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        dq[ti * d + off + j] += ds * c.k[s * d + off + j];
                        dk[s * d + off + j] += ds * c.q[ti * d + off + j];
                    }
                }
            }
        }
        let mut da = matmul_backward(&c.a, &p[l.wq..][..d * d], &dq, &mut grad[l.wq..][..d * d], t, d, d);
        let da_k = matmul_backward(&c.a, &p[l.wk..][..d * d], &dk, &mut grad[l.wk..][..d * d], t, d, d);
        let da_v = matmul_backward(&c.a, &p[l.wv..][..d * d], &dv, &mut grad[l.wv..][..d * d], t, d, d);
        for i in 0..da.len() {
            da[i] += da_k[i] + da_v[i];
        }
        let dx1 = {
            let (dgain, dbias) = split_pair(grad, l.ln1_gain, l.ln1_bias, d);
            layer_norm_backward(&da, &c.ln1, &p[l.ln1_gain..][..d], dgain, dbias, t, d)
        };
        for (a, b) in dx.iter_mut().zip(&dx1) {
            *a += b;
        }
    }

    for (pos, &id) in out.ids.iter().enumerate() {
        let row = &dx[pos * d..(pos + 1) * d];
        let te = &mut grad[lay.tok_emb + id as usize * d..][..d];
        for i in 0..d {
            te[i] += row[i];
        }
        let pe = &mut grad[lay.pos_emb + pos * d..][..d];
        for i in 0..d {
            pe[i] += row[i];
        }
    }
    Ok(())
}

// Mutable views of two adjacent `d`-length blocks (gain then bias).
fn split_pair(grad: &mut [f64], gain: usize, bias: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(gain + d, bias);
    let (g, b) = grad[gain..bias + d].split_at_mut(d);
    (g, b)
}

/// Scalar loss over a set of forward outputs together with its derivative
/// with respect to each output's log-probability matrix. An empty gradient
/// vector means "no dependence on this sequence".
pub struct LossGrad {
    pub value: f64,
    pub d_logprobs: Vec<Vec<f64>>,
}

/// Forward every sequence, evaluate `loss`, and return `(value, ∇θ value)`.
///
/// Per-sequence backward passes run in parallel; their gradients are summed
/// in sequence order so the result does not depend on scheduling.
pub fn value_and_grad<F>(
    params: &Parameters,
    sequences: &[&[TokenId]],
    loss: F,
) -> Result<(f64, Vec<f64>), ModelError>
where
    F: FnOnce(&[ForwardOutput]) -> LossGrad,
{
    let outputs = sequences
        .par_iter()
        .map(|ids| forward(params, ids))
        .collect::<Result<Vec<_>, _>>()?;
    let LossGrad { value, d_logprobs } = loss(&outputs);
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss(value));
    }
    if d_logprobs.len() != outputs.len() {
        return Err(ModelError::ShapeMismatch {
            expected: outputs.len(),
            got: d_logprobs.len(),
        });
    }
    let partials = outputs
        .par_iter()
        .zip(d_logprobs.par_iter())
        .filter(|(_, dl)| !dl.is_empty())
        .map(|(out, dl)| {
            let mut g = vec![0.0; params.len()];
            backward(params, out, dl, &mut g).map(|_| g)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut grad = vec![0.0; params.len()];
    for part in &partials {
        for (a, b) in grad.iter_mut().zip(part) {
            *a += b;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{ModelConfig, PAD, VOCAB_SIZE};

    fn params(init_std: f64, seed: u64) -> Parameters {
        Parameters::init(&ModelConfig {
            init_std,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn rows_are_normalized() {
        let p = params(0.5, 3);
        let ids: Vec<TokenId> = b"normalization check".iter().map(|&b| b as u32).collect();
        let out = forward(&p, &ids).unwrap();
        for pos in 0..ids.len() {
            let s: f64 = out.logprobs_at(pos).iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-6, "pos {pos}: {s}");
        }
    }

    #[test]
    fn zero_init_is_uniform() {
        let p = params(0.0, 0);
        let out = forward(&p, &[256, 10, 20, 30]).unwrap();
        let u = -(VOCAB_SIZE as f64).ln();
        assert!(out.logprobs().iter().all(|&x| (x - u).abs() < 1e-15));
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let p = params(0.3, 5);
        let a: Vec<TokenId> = (0..40).map(|i| (i * 7 % 256) as u32).collect();
        for j in [0usize, 1, 17, 39] {
            let mut b = a.clone();
            b[j] = (b[j] + 1) % 256;
            let oa = forward(&p, &a).unwrap();
            let ob = forward(&p, &b).unwrap();
            let n = j * VOCAB_SIZE;
            assert_eq!(&oa.logprobs()[..n], &ob.logprobs()[..n]);
            assert_ne!(&oa.logprobs()[n..], &ob.logprobs()[n..]);
        }
    }

    #[test]
    fn overflow_and_bad_tokens_error() {
        let p = params(0.02, 0);
        assert!(matches!(
            forward(&p, &[1; 65]),
            Err(ModelError::ContextOverflow { len: 65, window: 64 })
        ));
        assert!(matches!(forward(&p, &[1, 300]), Err(ModelError::InvalidToken(300))));
        assert!(forward(&p, &[]).unwrap().is_empty());
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let p = params(0.3, 1);
        let ids: Vec<TokenId> = vec![256, 1, 2, 3, 4];
        let (_, g) = value_and_grad(&p, &[&ids], |outs| {
            let o = &outs[0];
            let mut dl = vec![0.0; o.len() * o.vocab()];
            let mut v = 0.0;
            for pos in 0..o.len() - 1 {
                let target = o.ids()[pos + 1] as usize;
                v -= o.logprobs_at(pos)[target];
                dl[pos * o.vocab() + target] -= 1.0;
            }
            LossGrad {
                value: v,
                d_logprobs: vec![dl],
            }
        })
        .unwrap();
        let d = p.config().d_model;
        let pad_row = &g[p.layout().tok_emb + PAD as usize * d..][..d];
        assert!(pad_row.iter().all(|&x| x == 0.0));
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn repeated_grad_is_bit_identical() {
        let p = params(0.2, 9);
        let a: Vec<TokenId> = (0..30).map(|i| (i * 13 % 256) as u32).collect();
        let b: Vec<TokenId> = (0..20).map(|i| (i * 5 % 256) as u32).collect();
        let run = || {
            value_and_grad(&p, &[&a, &b], |outs| LossGrad {
                value: outs.iter().map(|o| -o.logprobs_at(0)[7]).sum(),
                d_logprobs: outs
                    .iter()
                    .map(|o| {
                        let mut dl = vec![0.0; o.logprobs().len()];
                        dl[7] = -1.0;
                        dl
                    })
                    .collect(),
            })
            .unwrap()
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = params(0.02, 0);
        let r = value_and_grad(&p, &[&[1, 2]], |_| LossGrad {
            value: f64::NAN,
            d_logprobs: vec![vec![]],
        });
        assert!(matches!(r, Err(ModelError::NonFiniteLoss(_))));
    }
}
