use crate::tensor::{Tape, Var};

use super::Result;

/// Output of an attention call together with its weight matrices, one per
/// head.
#[derive(Debug, Clone)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// `softmax(Q·Kᵀ / √d_k)·V`. `allowed` is a row-major `[q×k]` mask; false
/// entries get exactly zero weight. Returns the output and the weights.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let d_k = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f32).sqrt())?;
    let weights = tape.masked_softmax_rows(scores, allowed)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention with projections `[wq, wk, wv, wo]`, each
/// `d_model × d_model`. Head `h` uses columns `h·d_k .. (h+1)·d_k` of the
/// query, key and value projections; heads are concatenated and projected
/// by `wo`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_k: Var,
    x_v: Var,
    w: [Var; 4],
    n_heads: usize,
    allowed: Option<&[bool]>,
) -> Result<Attention> {
    let [wq, wk, wv, wo] = w;
    let q = tape.matmul(x_q, wq)?;
    let k = tape.matmul(x_k, wk)?;
    let v = tape.matmul(x_v, wv)?;
    let d_k = tape.value(q).cols() / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        let (out, a) = scaled_dot_attention(tape, qh, kh, vh, allowed)?;
        heads.push(out);
        weights.push(a);
    }
    let concat = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let output = tape.matmul(concat, wo)?;
    Ok(Attention { output, weights })
}

/// `max(0, x·W1 + b1)·W2 + b2`, row by row.
pub fn position_wise_ffn(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    Ok(tape.add_bias(o, b2)?)
}

/// Visual context vector: scores `c_i = b_i·g`, weights `a = softmax(c)`,
/// output `g* = Σ a_i b_i`. `b` is `[n×d]`, `g` is `[1×d]`; returns `g*`
/// as `[1×d]` and `a` as `[1×n]`.
pub fn visual_attention(tape: &mut Tape, b: Var, g: Var) -> Result<(Var, Var)> {
    let bt = tape.transpose(b)?;
    let c = tape.matmul(g, bt)?;
    let a = tape.softmax_rows(c)?;
    let g_star = tape.matmul(a, b)?;
    Ok((g_star, a))
}
