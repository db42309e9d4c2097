use crate::data::{BOS_ID, EOS_ID, PAD_ID};
use crate::region::{global_vector, grid_features, normalized_boxes, RegionFeatureSet};
use crate::tensor::{Tape, Tensor, Var};

use super::attention::{multi_head_attention, position_wise_ffn, visual_attention, Attention};
use super::{Ablation, Ctx, Model, ModelError, Result, LN_EPS};

/// Textual context vectors and the padding mask of the source.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[m × d_model]`.
    pub z_star: Var,
    /// True where the source token is PAD.
    pub pad_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct VisualOutput {
    /// `[1 × d_visual]`.
    pub g_star: Var,
    /// Attention over regions or grid cells, `[1 × n]`; absent for `T`/`TV`.
    pub weights: Option<Var>,
}

fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::matrix(len, d, data).expect("finite by construction")
}

fn embed(ctx: &mut Ctx<'_>, ids: &[usize]) -> Result<Var> {
    let vocab = ctx.config.vocab_size;
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::TokenOutOfRange { id, vocab });
    }
    let table = ctx.p("embed.token")?;
    let x = ctx.tape.gather_rows(table, ids)?;
    let pe = ctx.tape.constant(positional_encoding(ids.len(), ctx.config.d_model));
    let x = ctx.tape.add(x, pe)?;
    ctx.dropout(x)
}

fn attention_block(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    allowed: &[bool],
) -> Result<Attention> {
    let w = [
        ctx.p(&format!("{prefix}.wq"))?,
        ctx.p(&format!("{prefix}.wk"))?,
        ctx.p(&format!("{prefix}.wv"))?,
        ctx.p(&format!("{prefix}.wo"))?,
    ];
    multi_head_attention(ctx.tape, x_q, x_kv, x_kv, w, ctx.config.n_heads, Some(allowed))
}

fn ffn_block(ctx: &mut Ctx<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = ctx.p(&format!("{prefix}.w1"))?;
    let b1 = ctx.p(&format!("{prefix}.b1"))?;
    let w2 = ctx.p(&format!("{prefix}.w2"))?;
    let b2 = ctx.p(&format!("{prefix}.b2"))?;
    position_wise_ffn(ctx.tape, x, w1, b1, w2, b2)
}

/// `layer_norm(x + dropout(sub))` with the gain and bias under `prefix`.
fn add_norm(ctx: &mut Ctx<'_>, prefix: &str, x: Var, sub: Var) -> Result<Var> {
    let sub = ctx.dropout(sub)?;
    let s = ctx.tape.add(x, sub)?;
    let gain = ctx.p(&format!("{prefix}.gain"))?;
    let bias = ctx.p(&format!("{prefix}.bias"))?;
    Ok(ctx.tape.layer_norm(s, gain, bias, LN_EPS)?)
}

fn key_mask(rows: usize, key_pad: &[bool], causal: bool) -> Vec<bool> {
    let k = key_pad.len();
    (0..rows * k)
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            !key_pad[j] && (!causal || j <= i)
        })
        .collect()
}

/// Token embedding plus sinusoidal positions, then `n_layers_enc` blocks of
/// self-attention and feed-forward, each followed by add & norm. PAD
/// positions are never attended to.
pub fn encode_text(ctx: &mut Ctx<'_>, ids: &[usize]) -> Result<EncoderOutput> {
    if ids.is_empty() {
        return Err(ModelError::EmptyInput("source text"));
    }
    if ids.len() > ctx.config.max_text_len {
        return Err(ModelError::InputTooLong {
            len: ids.len(),
            max: ctx.config.max_text_len,
        });
    }
    let pad_mask: Vec<bool> = ids.iter().map(|&id| id == PAD_ID).collect();
    if pad_mask.iter().all(|&p| p) {
        return Err(ModelError::EmptyInput("source text"));
    }
    let allowed = key_mask(ids.len(), &pad_mask, false);
    let mut x = embed(ctx, ids)?;
    for l in 0..ctx.config.n_layers_enc {
        let a = attention_block(ctx, &format!("enc.{l}.self"), x, x, &allowed)?;
        x = add_norm(ctx, &format!("enc.{l}.ln_self"), x, a.output)?;
        let f = ffn_block(ctx, &format!("enc.{l}.ffn"), x)?;
        x = add_norm(ctx, &format!("enc.{l}.ln_ffn"), x, f)?;
    }
    Ok(EncoderOutput { z_star: x, pad_mask })
}

fn rows_tensor(rows: &[Vec<f32>]) -> Result<Tensor> {
    Ok(Tensor::from_rows(rows)?)
}

/// Visual context vector for one image.
///
/// `T` and `TV` return the pooled global vector unchanged. `TVA` projects
/// the 2×2 grid-pooled features and the global vector by `visual.proj` and
/// attends over the cells; `TVAR` attends over the individual regions, each
/// projected and offset by its embedded box geometry.
pub fn visual_attend(ctx: &mut Ctx<'_>, rfs: &RegionFeatureSet) -> Result<VisualOutput> {
    if rfs.d_v() != ctx.config.d_visual {
        return Err(ModelError::RegionWidth {
            expected: ctx.config.d_visual,
            got: rfs.d_v(),
        });
    }
    let g = ctx.tape.constant(rows_tensor(&[global_vector(rfs)])?);
    let ablation = ctx.config.ablation;
    if ablation <= Ablation::TV {
        return Ok(VisualOutput {
            g_star: g,
            weights: None,
        });
    }
    let proj = ctx.p("visual.proj")?;
    let b = if ablation == Ablation::TVA {
        let cells = ctx.tape.constant(rows_tensor(&grid_features(rfs, 2))?);
        ctx.tape.matmul(cells, proj)?
    } else {
        let feats = ctx.tape.constant(rows_tensor(rfs.features())?);
        let geometry: Vec<Vec<f32>> = normalized_boxes(rfs).iter().map(|b| b.to_vec()).collect();
        let geometry = ctx.tape.constant(rows_tensor(&geometry)?);
        let w_box = ctx.p("visual.box")?;
        let projected = ctx.tape.matmul(feats, proj)?;
        let offset = ctx.tape.matmul(geometry, w_box)?;
        ctx.tape.add(projected, offset)?
    };
    let gp = ctx.tape.matmul(g, proj)?;
    let (g_star, a) = visual_attention(ctx.tape, b, gp)?;
    Ok(VisualOutput {
        g_star,
        weights: Some(a),
    })
}

/// `y*_t = [z*_t ; g*]·W_fuse + b_fuse` for every position `t`.
pub fn fuse_multimodal(tape: &mut Tape, z_star: Var, g_star: Var, w_fuse: Var, b_fuse: Var) -> Result<Var> {
    let m = tape.value(z_star).rows();
    let g = tape.repeat_rows(g_star, m)?;
    let cat = tape.concat_cols(&[z_star, g])?;
    let y = tape.matmul(cat, w_fuse)?;
    Ok(tape.add_bias(y, b_fuse)?)
}

/// Encoder output and, for visual ablations, the fused context `y*`.
pub fn encode_inputs(
    ctx: &mut Ctx<'_>,
    src_ids: &[usize],
    rfs: Option<&RegionFeatureSet>,
) -> Result<(EncoderOutput, Option<Var>)> {
    let enc = encode_text(ctx, src_ids)?;
    if !ctx.config.ablation.uses_visual() {
        return Ok((enc, None));
    }
    let rfs = rfs.ok_or_else(|| ModelError::MissingRegions(String::new()))?;
    let vis = visual_attend(ctx, rfs)?;
    let w = ctx.p("fuse.w")?;
    let b = ctx.p("fuse.b")?;
    let y = fuse_multimodal(ctx.tape, enc.z_star, vis.g_star, w, b)?;
    Ok((enc, Some(y)))
}

/// Decoder logits `[t × vocab_size]` for the teacher-forced input `target_in`
/// (starting with BOS). Each block runs causal self-attention, attention
/// over `z*`, attention over `y*` (skipped for ablation `T`) and a
/// feed-forward layer, each followed by add & norm.
pub fn decode(
    ctx: &mut Ctx<'_>,
    target_in: &[usize],
    enc: &EncoderOutput,
    y_star: Option<Var>,
) -> Result<Var> {
    if target_in.is_empty() {
        return Err(ModelError::EmptyInput("target"));
    }
    let uses_visual = ctx.config.ablation.uses_visual();
    if uses_visual && y_star.is_none() {
        return Err(ModelError::MissingRegions(String::new()));
    }
    let t = target_in.len();
    let target_pad: Vec<bool> = target_in.iter().map(|&id| id == PAD_ID).collect();
    let self_allowed = key_mask(t, &target_pad, true);
    let src_allowed = key_mask(t, &enc.pad_mask, false);
    let mut x = embed(ctx, target_in)?;
    for l in 0..ctx.config.n_layers_dec {
        let a = attention_block(ctx, &format!("dec.{l}.self"), x, x, &self_allowed)?;
        x = add_norm(ctx, &format!("dec.{l}.ln_self"), x, a.output)?;
        let c = attention_block(ctx, &format!("dec.{l}.cross"), x, enc.z_star, &src_allowed)?;
        x = add_norm(ctx, &format!("dec.{l}.ln_cross"), x, c.output)?;
        if let (true, Some(y)) = (uses_visual, y_star) {
            let m = attention_block(ctx, &format!("dec.{l}.mm"), x, y, &src_allowed)?;
            x = add_norm(ctx, &format!("dec.{l}.ln_mm"), x, m.output)?;
        }
        let f = ffn_block(ctx, &format!("dec.{l}.ffn"), x)?;
        x = add_norm(ctx, &format!("dec.{l}.ln_ffn"), x, f)?;
    }
    let w = ctx.p("out.w")?;
    let b = ctx.p("out.b")?;
    let logits = ctx.tape.matmul(x, w)?;
    Ok(ctx.tape.add_bias(logits, b)?)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_gen_len` tokens. The returned
/// ids exclude BOS and include the EOS when one was produced.
pub fn generate_greedy(
    model: &Model,
    src_ids: &[usize],
    rfs: Option<&RegionFeatureSet>,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, model, None);
    let (enc, y) = encode_inputs(&mut ctx, src_ids, rfs)?;
    let mut ids = vec![BOS_ID];
    for _ in 0..model.config.max_gen_len {
        let logits = decode(&mut ctx, &ids, &enc, y)?;
        let t = ctx.tape.value(logits);
        let next = argmax(t.row(t.rows() - 1));
        ids.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(ids.split_off(1))
}
