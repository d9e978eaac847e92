//! Token/volume bridges, attention, feed-forward, ConvBlock and the UFE block.

use mctseg_tensor::{Scalar, Tape, Var, NORM_EPS};

use crate::error::{Error, Result};

/// A `[C, D, H, W]` feature map flattened to one row per voxel.
#[derive(Clone, Copy, Debug)]
pub struct TokenSeq {
    /// `[N, C]`, voxels in row-major `(D, H, W)` order.
    pub tokens: Var,
    pub origin_shape: [usize; 4],
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.origin_shape[1..].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.origin_shape[0]
    }
}

fn shape4(tape: &Tape<impl Scalar>, x: Var) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(tape.shape(x))
        .map_err(|_| Error::Shape(format!("expected [C, D, H, W], got {:?}", tape.shape(x))))
}

pub fn tokenize<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<TokenSeq> {
    let origin_shape = shape4(tape, x)?;
    let [c, d, h, w] = origin_shape;
    let flat = tape.reshape(x, &[c, d * h * w])?;
    let tokens = tape.transpose(flat)?;
    Ok(TokenSeq { tokens, origin_shape })
}

/// Inverse of [`tokenize`] for any `[N, C]` tensor laid out like `seq`.
pub fn detokenize<T: Scalar>(tape: &mut Tape<T>, seq: TokenSeq) -> Result<Var> {
    let flat = tape.transpose(seq.tokens)?;
    Ok(tape.reshape(flat, &seq.origin_shape)?)
}

fn with_tokens(seq: TokenSeq, tokens: Var) -> TokenSeq {
    TokenSeq { tokens, ..seq }
}

/// Projection weights of one attention layer. Linear weights are `[C_in, C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub ln_g: Var,
    pub ln_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub num_heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Conv (3x3x3, pad 1) followed by a per-token linear layer and GELU.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockParams {
    pub conv_w: Var,
    pub conv_b: Var,
    pub lin_w: Var,
    pub lin_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct UfeParams {
    pub attn: AttentionParams,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ffn: FfnParams,
    /// `None` when the ConvBlock branches are ablated.
    pub cb1: Option<ConvBlockParams>,
    pub cb2: Option<ConvBlockParams>,
}

/// `[N, h*dk]` -> `[h, N, dk]`
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [n, c] = [tape.shape(x)[0], tape.shape(x)[1]];
    let x = tape.reshape(x, &[n, heads, c / heads])?;
    Ok(tape.permute(x, &[1, 0, 2])?)
}

/// Multi-head attention of `q_src` tokens over `kv_src` tokens; both sources
/// are layer-normalized with the same `ln_g`/`ln_b`. Returns the output
/// sequence and the `[heads, N_q, N_kv]` attention weights.
pub fn mhsa_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    q_src: TokenSeq,
    kv_src: TokenSeq,
    p: &AttentionParams,
    key_mask: Option<&[bool]>,
) -> Result<(TokenSeq, Var)> {
    let c = q_src.channels();
    if kv_src.channels() != c {
        return Err(Error::Shape(format!(
            "attention channels differ: {} vs {}",
            c,
            kv_src.channels()
        )));
    }
    if p.num_heads == 0 || c % p.num_heads != 0 {
        return Err(Error::Shape(format!(
            "{c} channels cannot be split into {} heads",
            p.num_heads
        )));
    }
    let h = p.num_heads;
    let dk = c / h;

    let qn = tape.layer_norm(q_src.tokens, p.ln_g, p.ln_b, NORM_EPS)?;
    let kvn = if q_src.tokens == kv_src.tokens {
        qn
    } else {
        tape.layer_norm(kv_src.tokens, p.ln_g, p.ln_b, NORM_EPS)?
    };
    let q = tape.matmul(qn, p.wq)?;
    let k = tape.matmul(kvn, p.wk)?;
    let v = tape.matmul(kvn, p.wv)?;

    let q = split_heads(tape, q, h)?;
    let v = split_heads(tape, v, h)?;
    let nk = tape.shape(k)[0];
    let k = tape.reshape(k, &[nk, h, dk])?;
    let kt = tape.permute(k, &[1, 2, 0])?;

    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt())?;
    let attn = match key_mask {
        Some(mask) => tape.softmax_masked(logits, mask)?,
        None => tape.softmax(logits, 2)?,
    };
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[1, 0, 2])?;
    let nq = q_src.len();
    let out = tape.reshape(out, &[nq, c])?;
    let out = tape.matmul(out, p.wo)?;
    Ok((with_tokens(q_src, out), attn))
}

pub fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    q_src: TokenSeq,
    kv_src: TokenSeq,
    p: &AttentionParams,
    key_mask: Option<&[bool]>,
) -> Result<TokenSeq> {
    Ok(mhsa_with_weights(tape, q_src, kv_src, p, key_mask)?.0)
}

/// `Linear -> GELU -> Linear`; the hidden width is fixed by `fc1_w`.
pub fn ffn<T: Scalar>(tape: &mut Tape<T>, x: TokenSeq, p: &FfnParams) -> Result<TokenSeq> {
    let hidden = tape.linear(x.tokens, p.fc1_w, Some(p.fc1_b))?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.linear(hidden, p.fc2_w, Some(p.fc2_b))?;
    Ok(with_tokens(x, out))
}

/// The convolutional adapter. Input channels may differ from output channels
/// (the fusion module reduces `4C -> C` with it); the output has the conv's
/// channel count and the input's spatial size.
pub fn conv_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvBlockParams) -> Result<Var> {
    let y = tape.conv3d(x, p.conv_w, Some(p.conv_b), 1, 1)?;
    let seq = tokenize(tape, y)?;
    let t = tape.linear(seq.tokens, p.lin_w, Some(p.lin_b))?;
    let t = tape.gelu(t)?;
    detokenize(tape, with_tokens(seq, t))
}

fn layer_norm_3d<T: Scalar>(tape: &mut Tape<T>, x: TokenSeq, g: Var, b: Var) -> Result<Var> {
    let t = tape.layer_norm(x.tokens, g, b, NORM_EPS)?;
    detokenize(tape, with_tokens(x, t))
}

/// Two-stage parallel transformer/ConvBlock residual block:
///
/// ```text
/// F'  = F* + MHSA(LN1(F*)) + ConvBlock1(LN1(F*))
/// F'' = F' + FFN(LN2(F'))  + ConvBlock2(LN2(F'))
/// ```
pub fn ufe_forward<T: Scalar>(tape: &mut Tape<T>, f_star: Var, p: &UfeParams) -> Result<Var> {
    let seq = tokenize(tape, f_star)?;
    let attn = mhsa(tape, seq, seq, &p.attn, None)?;
    let attn = detokenize(tape, attn)?;
    let mut f1 = tape.add(f_star, attn)?;
    if let Some(cb) = &p.cb1 {
        let normed = layer_norm_3d(tape, seq, p.attn.ln_g, p.attn.ln_b)?;
        let conv = conv_block(tape, normed, cb)?;
        f1 = tape.add(f1, conv)?;
    }

    let seq1 = tokenize(tape, f1)?;
    let normed = tape.layer_norm(seq1.tokens, p.ln2_g, p.ln2_b, NORM_EPS)?;
    let ff = ffn(tape, with_tokens(seq1, normed), &p.ffn)?;
    let ff = detokenize(tape, ff)?;
    let mut f2 = tape.add(f1, ff)?;
    if let Some(cb) = &p.cb2 {
        let normed3d = detokenize(tape, with_tokens(seq1, normed))?;
        let conv = conv_block(tape, normed3d, cb)?;
        f2 = tape.add(f2, conv)?;
    }
    Ok(f2)
}
