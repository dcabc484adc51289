use super::scalar::{gemm, Scalar, View};
use super::{BlockLayout, Checkpoint, ModelConfig, ModelError, ParamLayout};

const LN_EPS: f64 = 1e-5;

/// Per-position next-token scores, one row of `vocab` entries per input token.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl LogitMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Softmax of row `i`, computed in f64.
    pub fn softmax_row(&self, i: usize) -> Vec<f64> {
        let row = self.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// `ln p(token)` under row `i`.
    pub fn log_prob(&self, i: usize, token: u32) -> f64 {
        let row = self.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let z: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        row[token as usize] as f64 - max - z.ln()
    }
}

pub(crate) struct BlockActs<S> {
    x_in: Vec<S>,
    ln1_mean: Vec<S>,
    ln1_rstd: Vec<S>,
    h1: Vec<S>,
    qkv: Vec<S>,
    /// heads × n × n attention probabilities, zero above the diagonal.
    att: Vec<S>,
    att_out: Vec<S>,
    x_mid: Vec<S>,
    ln2_mean: Vec<S>,
    ln2_rstd: Vec<S>,
    h2: Vec<S>,
    fc_pre: Vec<S>,
    fc_act: Vec<S>,
}

/// Everything the backward pass needs from one sequence's forward pass.
pub(crate) struct Activations<S> {
    pub n: usize,
    tokens: Vec<u32>,
    blocks: Vec<BlockActs<S>>,
    x_final: Vec<S>,
    lnf_mean: Vec<S>,
    lnf_rstd: Vec<S>,
    hf: Vec<S>,
    pub logits: Vec<S>,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > cfg.context_len {
        return Err(ModelError::OverLength {
            len: tokens.len(),
            context_len: cfg.context_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Forward pass of a checkpoint in f32.
pub fn forward(model: &Checkpoint, tokens: &[u32]) -> Result<LogitMatrix, ModelError> {
    check_tokens(&model.config, tokens)?;
    let layout = ParamLayout::new(&model.config);
    let acts = run_forward(&model.config, &layout, &model.parameters, tokens);
    Ok(LogitMatrix {
        rows: tokens.len(),
        vocab: model.config.vocab_size,
        data: acts.logits,
    })
}

/// Forward pass over an arbitrary-precision copy of the parameters.
pub fn forward_with<S: Scalar>(
    cfg: &ModelConfig,
    params: &[S],
    tokens: &[u32],
) -> Result<Vec<S>, ModelError> {
    check_tokens(cfg, tokens)?;
    let layout = ParamLayout::new(cfg);
    if params.len() != layout.total {
        return Err(ModelError::ShapeMismatch(format!(
            "{} parameters, expected {}",
            params.len(),
            layout.total
        )));
    }
    Ok(run_forward(cfg, &layout, params, tokens).logits)
}

fn layer_norm<S: Scalar>(
    x: &[S],
    g: &[S],
    b: &[S],
    c: usize,
    y: &mut [S],
    mean: &mut [S],
    rstd: &mut [S],
) {
    let inv_c = S::one() / S::from(c).unwrap();
    let eps = S::from(LN_EPS).unwrap();
    for (r, (xr, yr)) in x.chunks_exact(c).zip(y.chunks_exact_mut(c)).enumerate() {
        let mut m = S::zero();
        for &v in xr {
            m += v;
        }
        m = m * inv_c;
        let mut var = S::zero();
        for &v in xr {
            let d = v - m;
            var += d * d;
        }
        var = var * inv_c;
        let rs = S::one() / (var + eps).sqrt();
        for j in 0..c {
            yr[j] = (xr[j] - m) * rs * g[j] + b[j];
        }
        mean[r] = m;
        rstd[r] = rs;
    }
}

/// Accumulates parameter gradients into `dg`/`db` and writes the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    mean: &[S],
    rstd: &[S],
    g: &[S],
    c: usize,
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    let inv_c = S::one() / S::from(c).unwrap();
    let mut dxhat = vec![S::zero(); c];
    for (r, ((dyr, xr), dxr)) in dy
        .chunks_exact(c)
        .zip(x.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
        .enumerate()
    {
        let (m, rs) = (mean[r], rstd[r]);
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..c {
            let xhat = (xr[j] - m) * rs;
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat;
        }
        let mean_dxhat = sum_dxhat * inv_c;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_c;
        for j in 0..c {
            let xhat = (xr[j] - m) * rs;
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

fn gelu_consts<S: Scalar>() -> (S, S, S) {
    (
        S::from(0.5).unwrap(),
        S::from((2.0 / std::f64::consts::PI).sqrt()).unwrap(),
        S::from(0.044715).unwrap(),
    )
}

fn gelu<S: Scalar>(x: S) -> S {
    let (half, k, a) = gelu_consts::<S>();
    half * x * (S::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let (half, k, a) = gelu_consts::<S>();
    let three = S::from(3.0).unwrap();
    let t = (k * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + three * a * x * x)
}

/// `y = x·W + b` with `x: n×din`, `W: din×dout`.
fn linear<S: Scalar>(x: &[S], w: &[S], b: &[S], n: usize, din: usize, dout: usize, y: &mut [S]) {
    for row in y.chunks_exact_mut(dout) {
        row.copy_from_slice(b);
    }
    gemm(
        x,
        View::row_major(n, din),
        w,
        View::row_major(din, dout),
        S::one(),
        y,
        View::row_major(n, dout),
    );
}

/// Backward of [`linear`]: accumulates `dW`, `db` and writes `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    w: &[S],
    n: usize,
    din: usize,
    dout: usize,
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    gemm(
        x,
        View::row_major(n, din).t(),
        dy,
        View::row_major(n, dout),
        S::one(),
        dw,
        View::row_major(din, dout),
    );
    for row in dy.chunks_exact(dout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    gemm(
        dy,
        View::row_major(n, dout),
        w,
        View::row_major(din, dout).t(),
        S::zero(),
        dx,
        View::row_major(n, din),
    );
}

fn slice<S>(p: &[S], off: usize, len: usize) -> &[S] {
    &p[off..off + len]
}

fn causal_attention<S: Scalar>(
    cfg: &ModelConfig,
    n: usize,
    qkv: &[S],
    att: &mut [S],
    out: &mut [S],
) {
    let c = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = S::one() / S::from(hd).unwrap().sqrt();
    for h in 0..cfg.heads {
        let p = &mut att[h * n * n..(h + 1) * n * n];
        let q = &qkv[h * hd..];
        let k = &qkv[c + h * hd..];
        let v = &qkv[2 * c + h * hd..];
        gemm(
            q,
            View::strided(n, hd, 3 * c),
            k,
            View::strided(n, hd, 3 * c).t(),
            S::zero(),
            p,
            View::row_major(n, n),
        );
        for i in 0..n {
            let row = &mut p[i * n..(i + 1) * n];
            let mut max = S::neg_infinity();
            for s in row[..=i].iter_mut() {
                *s = *s * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut z = S::zero();
            for s in row[..=i].iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let inv = S::one() / z;
            for s in row[..=i].iter_mut() {
                *s = *s * inv;
            }
            row[i + 1..].fill(S::zero());
        }
        gemm(
            p,
            View::row_major(n, n),
            v,
            View::strided(n, hd, 3 * c),
            S::zero(),
            &mut out[h * hd..],
            View::strided(n, hd, c),
        );
    }
}

fn causal_attention_backward<S: Scalar>(
    cfg: &ModelConfig,
    n: usize,
    qkv: &[S],
    att: &[S],
    d_out: &[S],
    d_qkv: &mut [S],
) {
    let c = cfg.embed_dim;
    let hd = cfg.head_dim();
    let scale = S::one() / S::from(hd).unwrap().sqrt();
    let mut dp = vec![S::zero(); n * n];
    for h in 0..cfg.heads {
        let p = &att[h * n * n..(h + 1) * n * n];
        let q = &qkv[h * hd..];
        let k = &qkv[c + h * hd..];
        let v = &qkv[2 * c + h * hd..];
        let dout_h = &d_out[h * hd..];
        // dP = dOut·Vᵀ, dV = Pᵀ·dOut
        gemm(
            dout_h,
            View::strided(n, hd, c),
            v,
            View::strided(n, hd, 3 * c).t(),
            S::zero(),
            &mut dp,
            View::row_major(n, n),
        );
        gemm(
            p,
            View::row_major(n, n).t(),
            dout_h,
            View::strided(n, hd, c),
            S::zero(),
            &mut d_qkv[2 * c + h * hd..],
            View::strided(n, hd, 3 * c),
        );
        // softmax backward, then the score scale
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let mut dot = S::zero();
            for j in 0..=i {
                dot += pr[j] * dr[j];
            }
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - dot) * scale;
            }
            dr[i + 1..].fill(S::zero());
        }
        // dQ = dS·K, dK = dSᵀ·Q
        gemm(
            &dp,
            View::row_major(n, n),
            k,
            View::strided(n, hd, 3 * c),
            S::zero(),
            &mut d_qkv[h * hd..],
            View::strided(n, hd, 3 * c),
        );
        gemm(
            &dp,
            View::row_major(n, n).t(),
            q,
            View::strided(n, hd, 3 * c),
            S::zero(),
            &mut d_qkv[c + h * hd..],
            View::strided(n, hd, 3 * c),
        );
    }
}

pub(crate) fn run_forward<S: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    p: &[S],
    tokens: &[u32],
) -> Activations<S> {
    let n = tokens.len();
    let c = cfg.embed_dim;
    let f = 4 * c;
    let v = cfg.vocab_size;

    let mut x = vec![S::zero(); n * c];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = slice(p, layout.wte + tok as usize * c, c);
        let pe = slice(p, layout.wpe + t * c, c);
        for j in 0..c {
            x[t * c + j] = e[j] + pe[j];
        }
    }

    let mut blocks = Vec::with_capacity(cfg.layers);
    for bl in &layout.blocks {
        let x_in = x;
        let mut a = BlockActs {
            ln1_mean: vec![S::zero(); n],
            ln1_rstd: vec![S::zero(); n],
            h1: vec![S::zero(); n * c],
            qkv: vec![S::zero(); n * 3 * c],
            att: vec![S::zero(); cfg.heads * n * n],
            att_out: vec![S::zero(); n * c],
            x_mid: vec![S::zero(); n * c],
            ln2_mean: vec![S::zero(); n],
            ln2_rstd: vec![S::zero(); n],
            h2: vec![S::zero(); n * c],
            fc_pre: vec![S::zero(); n * f],
            fc_act: vec![S::zero(); n * f],
            x_in: Vec::new(),
        };
        layer_norm(
            &x_in,
            slice(p, bl.ln1_g, c),
            slice(p, bl.ln1_b, c),
            c,
            &mut a.h1,
            &mut a.ln1_mean,
            &mut a.ln1_rstd,
        );
        linear(
            &a.h1,
            slice(p, bl.qkv_w, 3 * c * c),
            slice(p, bl.qkv_b, 3 * c),
            n,
            c,
            3 * c,
            &mut a.qkv,
        );
        causal_attention(cfg, n, &a.qkv, &mut a.att, &mut a.att_out);
        linear(
            &a.att_out,
            slice(p, bl.proj_w, c * c),
            slice(p, bl.proj_b, c),
            n,
            c,
            c,
            &mut a.x_mid,
        );
        for (m, &xi) in a.x_mid.iter_mut().zip(&x_in) {
            *m += xi;
        }
        layer_norm(
            &a.x_mid,
            slice(p, bl.ln2_g, c),
            slice(p, bl.ln2_b, c),
            c,
            &mut a.h2,
            &mut a.ln2_mean,
            &mut a.ln2_rstd,
        );
        linear(
            &a.h2,
            slice(p, bl.fc_w, c * f),
            slice(p, bl.fc_b, f),
            n,
            c,
            f,
            &mut a.fc_pre,
        );
        for (o, &i) in a.fc_act.iter_mut().zip(&a.fc_pre) {
            *o = gelu(i);
        }
        let mut x_out = vec![S::zero(); n * c];
        linear(
            &a.fc_act,
            slice(p, bl.out_w, f * c),
            slice(p, bl.out_b, c),
            n,
            f,
            c,
            &mut x_out,
        );
        for (o, &m) in x_out.iter_mut().zip(&a.x_mid) {
            *o += m;
        }
        a.x_in = x_in;
        blocks.push(a);
        x = x_out;
    }

    let mut lnf_mean = vec![S::zero(); n];
    let mut lnf_rstd = vec![S::zero(); n];
    let mut hf = vec![S::zero(); n * c];
    layer_norm(
        &x,
        slice(p, layout.lnf_g, c),
        slice(p, layout.lnf_b, c),
        c,
        &mut hf,
        &mut lnf_mean,
        &mut lnf_rstd,
    );
    let mut logits = vec![S::zero(); n * v];
    let wte = slice(p, layout.wte, v * c);
    gemm(
        &hf,
        View::row_major(n, c),
        wte,
        View::row_major(v, c).t(),
        S::zero(),
        &mut logits,
        View::row_major(n, v),
    );

    Activations {
        n,
        tokens: tokens.to_vec(),
        blocks,
        x_final: x,
        lnf_mean,
        lnf_rstd,
        hf,
        logits,
    }
}

/// Accumulates `∂L/∂params` into `grad`, given `∂L/∂logits`.
pub(crate) fn run_backward<S: Scalar>(
    cfg: &ModelConfig,
    layout: &ParamLayout,
    p: &[S],
    acts: &Activations<S>,
    dlogits: &[S],
    grad: &mut [S],
) {
    let n = acts.n;
    let c = cfg.embed_dim;
    let f = 4 * c;
    let v = cfg.vocab_size;

    // tied head
    let mut dhf = vec![S::zero(); n * c];
    gemm(
        dlogits,
        View::row_major(n, v),
        slice(p, layout.wte, v * c),
        View::row_major(v, c),
        S::zero(),
        &mut dhf,
        View::row_major(n, c),
    );
    {
        let dwte = &mut grad[layout.wte..layout.wte + v * c];
        gemm(
            dlogits,
            View::row_major(n, v).t(),
            &acts.hf,
            View::row_major(n, c),
            S::one(),
            dwte,
            View::row_major(v, c),
        );
    }

    let mut dx = vec![S::zero(); n * c];
    {
        let (dg, db) = split_pair(grad, layout.lnf_g, layout.lnf_b, c);
        layer_norm_backward(
            &dhf,
            &acts.x_final,
            &acts.lnf_mean,
            &acts.lnf_rstd,
            slice(p, layout.lnf_g, c),
            c,
            &mut dx,
            dg,
            db,
        );
    }

    let mut d_tmp = vec![S::zero(); n * c];
    let mut d_fc = vec![S::zero(); n * f];
    let mut d_qkv = vec![S::zero(); n * 3 * c];
    for (bl, a) in layout.blocks.iter().zip(&acts.blocks).rev() {
        block_backward(
            cfg, bl, p, a, n, c, f, &mut dx, &mut d_tmp, &mut d_fc, &mut d_qkv, grad,
        );
    }

    for (t, &tok) in acts.tokens.iter().enumerate() {
        let row = &dx[t * c..(t + 1) * c];
        let e = layout.wte + tok as usize * c;
        for (g, &d) in grad[e..e + c].iter_mut().zip(row) {
            *g += d;
        }
        let pe = layout.wpe + t * c;
        for (g, &d) in grad[pe..pe + c].iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// `dx` holds the gradient w.r.t. the block output on entry and w.r.t. the block input on exit.
#[allow(clippy::too_many_arguments)]
fn block_backward<S: Scalar>(
    cfg: &ModelConfig,
    bl: &BlockLayout,
    p: &[S],
    a: &BlockActs<S>,
    n: usize,
    c: usize,
    f: usize,
    dx: &mut [S],
    d_tmp: &mut [S],
    d_fc: &mut [S],
    d_qkv: &mut [S],
    grad: &mut [S],
) {
    // MLP branch: x_out = x_mid + W_out·gelu(W_fc·LN2(x_mid))
    {
        let (dw, db) = split_pair(grad, bl.out_w, bl.out_b, f * c);
        let db = &mut db[..c];
        linear_backward(
            dx,
            &a.fc_act,
            slice(p, bl.out_w, f * c),
            n,
            f,
            c,
            d_fc,
            dw,
            db,
        );
    }
    for (d, &pre) in d_fc.iter_mut().zip(&a.fc_pre) {
        *d = *d * gelu_grad(pre);
    }
    {
        let (dw, db) = split_pair(grad, bl.fc_w, bl.fc_b, c * f);
        let db = &mut db[..f];
        linear_backward(
            d_fc,
            &a.h2,
            slice(p, bl.fc_w, c * f),
            n,
            c,
            f,
            d_tmp,
            dw,
            db,
        );
    }
    {
        let mut d_ln = vec![S::zero(); n * c];
        let (dg, db) = split_pair(grad, bl.ln2_g, bl.ln2_b, c);
        layer_norm_backward(
            d_tmp,
            &a.x_mid,
            &a.ln2_mean,
            &a.ln2_rstd,
            slice(p, bl.ln2_g, c),
            c,
            &mut d_ln,
            dg,
            db,
        );
        for (d, &l) in dx.iter_mut().zip(&d_ln) {
            *d += l;
        }
    }

    // attention branch: x_mid = x_in + W_proj·attn(W_qkv·LN1(x_in))
    let mut d_att = vec![S::zero(); n * c];
    {
        let (dw, db) = split_pair(grad, bl.proj_w, bl.proj_b, c * c);
        let db = &mut db[..c];
        linear_backward(
            dx,
            &a.att_out,
            slice(p, bl.proj_w, c * c),
            n,
            c,
            c,
            &mut d_att,
            dw,
            db,
        );
    }
    causal_attention_backward(cfg, n, &a.qkv, &a.att, &d_att, d_qkv);
    {
        let (dw, db) = split_pair(grad, bl.qkv_w, bl.qkv_b, 3 * c * c);
        let db = &mut db[..3 * c];
        linear_backward(
            d_qkv,
            &a.h1,
            slice(p, bl.qkv_w, 3 * c * c),
            n,
            c,
            3 * c,
            d_tmp,
            dw,
            db,
        );
    }
    {
        let mut d_ln = vec![S::zero(); n * c];
        let (dg, db) = split_pair(grad, bl.ln1_g, bl.ln1_b, c);
        layer_norm_backward(
            d_tmp,
            &a.x_in,
            &a.ln1_mean,
            &a.ln1_rstd,
            slice(p, bl.ln1_g, c),
            c,
            &mut d_ln,
            dg,
            db,
        );
        for (d, &l) in dx.iter_mut().zip(&d_ln) {
            *d += l;
        }
    }
}

/// Two disjoint mutable slices: `[first, first+len)` and `[second, ..)`, with `first < second`.
fn split_pair<S>(grad: &mut [S], first: usize, second: usize, len: usize) -> (&mut [S], &mut [S]) {
    debug_assert!(first + len <= second);
    let (lo, hi) = grad.split_at_mut(second);
    (&mut lo[first..first + len], hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> Checkpoint {
        init_model(ModelConfig {
            layers: 2,
            heads: 2,
            embed_dim: 16,
            context_len: 12,
            vocab_size: 40,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn rows_match_input_length() {
        let m = tiny();
        assert_eq!(forward(&m, &[5]).unwrap().rows, 1);
        let l = forward(&m, &[1, 2, 3, 4]).unwrap();
        assert_eq!(l.rows, 4);
        assert_eq!(l.data.len(), 4 * 40);
    }

    #[test]
    fn rows_are_causal() {
        let m = tiny();
        let a = forward(&m, &[1, 2, 3, 4, 5, 6]).unwrap();
        let b = forward(&m, &[1, 2, 3, 9, 5, 6]).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = tiny();
        let l = forward(&m, &[7, 3, 1, 0, 39]).unwrap();
        for i in 0..l.rows {
            let s: f64 = l.softmax_row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny();
        assert_eq!(
            forward(&m, &[1, 2, 3]).unwrap(),
            forward(&m, &[1, 2, 3]).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(matches!(
            forward(&m, &[1; 13]),
            Err(ModelError::OverLength {
                len: 13,
                context_len: 12
            })
        ));
        assert!(matches!(forward(&m, &[]), Err(ModelError::EmptyInput)));
        assert!(matches!(
            forward(&m, &[40]),
            Err(ModelError::TokenOutOfRange { id: 40, .. })
        ));
    }

    #[test]
    fn f64_path_agrees_with_f32() {
        let m = tiny();
        let p64: Vec<f64> = m.parameters.iter().map(|&x| x as f64).collect();
        let l64 = forward_with(&m.config, &p64, &[4, 8, 15, 16]).unwrap();
        let l32 = forward(&m, &[4, 8, 15, 16]).unwrap();
        for (a, b) in l64.iter().zip(&l32.data) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
