//! The full network: encoders, distillation loss, UFE, cross-modal fusion and
//! decoders, wired for training (all branches) and inference (fusion path).

pub mod checkpoint;
pub mod config;
pub mod params;

use mctseg_tensor::{Scalar, Tape, Tensor, Var, LEAKY_SLOPE, NORM_EPS};

use crate::blocks::{self, AttentionParams, ConvBlockParams, FfnParams, TokenSeq, UfeParams};
use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalityMask};
pub use config::{check_crop_dims, ModelConfig, NUM_CLASSES};
pub use params::{param_shapes, Graph, ParamStore};

/// Which encoder or decoder family a call refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Unimodal(ModalityId),
    Multimodal,
    Seg,
}

impl Branch {
    pub fn key(self) -> &'static str {
        match self {
            Self::Unimodal(m) => m.key(),
            Self::Multimodal => "multi",
            Self::Seg => "seg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Feature maps of encoder layers 1..=5 (index 0 is layer 1).
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures(pub [Var; 5]);

impl EncoderFeatures {
    pub fn layer(&self, l: usize) -> Var {
        self.0[l - 1]
    }

    pub fn bottleneck(&self) -> Var {
        self.0[4]
    }
}

fn conv_norm_act<T: Scalar>(g: &mut Graph<T>, x: Var, prefix: &str, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{prefix}.conv.w"))?;
    let gamma = g.param(&format!("{prefix}.norm.g"))?;
    let beta = g.param(&format!("{prefix}.norm.b"))?;
    let y = g.tape.conv3d(x, w, None, stride, 1)?;
    let y = g.tape.instance_norm(y, gamma, beta, NORM_EPS)?;
    Ok(g.tape.leaky_relu(y, LEAKY_SLOPE)?)
}

/// Five `conv3x3x3 -> instance norm -> LeakyReLU` layers; layers 2..=5 use
/// stride 2.
pub fn encode<T: Scalar>(g: &mut Graph<T>, x: Var, which: Branch) -> Result<EncoderFeatures> {
    let shape = g.tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "encoder input must be [C, D, H, W], got {shape:?}"
        )));
    }
    check_crop_dims(&shape[1..])?;
    let mut feats = Vec::with_capacity(5);
    let mut h = x;
    for l in 1..=5 {
        h = conv_norm_act(g, h, &format!("enc.{}.l{l}", which.key()), if l == 1 { 1 } else { 2 })?;
        feats.push(h);
    }
    Ok(EncoderFeatures(feats.try_into().expect("five layers")))
}

fn l1_distance<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    Ok(tape.sum(d)?)
}

/// Sum over available modalities and encoder layers 3..=5 of the L1 distance
/// between teacher and student features. The teacher side is detached.
pub fn mfd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: &EncoderFeatures,
    students: &[Option<EncoderFeatures>; 4],
    mask: ModalityMask,
) -> Result<Var> {
    let targets: Vec<Var> = (3..=5)
        .map(|l| tape.detach(teacher.layer(l)))
        .collect::<std::result::Result<_, _>>()?;
    let mut total: Option<Var> = None;
    for m in mask.available() {
        let Some(student) = &students[m.ordinal()] else {
            continue;
        };
        for (l, &t) in (3..=5).zip(&targets) {
            let d = l1_distance(tape, t, student.layer(l))?;
            total = Some(match total {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
    }
}

fn attention_params<T: Scalar>(g: &mut Graph<T>, prefix: &str, ln: &str, heads: usize) -> Result<AttentionParams> {
    Ok(AttentionParams {
        ln_g: g.param(&format!("{ln}.g"))?,
        ln_b: g.param(&format!("{ln}.b"))?,
        wq: g.param(&format!("{prefix}.wq"))?,
        wk: g.param(&format!("{prefix}.wk"))?,
        wv: g.param(&format!("{prefix}.wv"))?,
        wo: g.param(&format!("{prefix}.wo"))?,
        num_heads: heads,
    })
}

fn conv_block_params<T: Scalar>(g: &mut Graph<T>, prefix: &str) -> Result<ConvBlockParams> {
    Ok(ConvBlockParams {
        conv_w: g.param(&format!("{prefix}.conv.w"))?,
        conv_b: g.param(&format!("{prefix}.conv.b"))?,
        lin_w: g.param(&format!("{prefix}.lin.w"))?,
        lin_b: g.param(&format!("{prefix}.lin.b"))?,
    })
}

pub fn ufe_params<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, m: ModalityId, depth: usize) -> Result<UfeParams> {
    let p = format!("ufe.{}.d{depth}", m.key());
    let cb = |g: &mut Graph<T>, name: &str| -> Result<Option<ConvBlockParams>> {
        if cfg.convblock {
            conv_block_params(g, &format!("{p}.{name}")).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(UfeParams {
        attn: attention_params(g, &format!("{p}.attn"), &format!("{p}.ln1"), cfg.num_heads)?,
        ln2_g: g.param(&format!("{p}.ln2.g"))?,
        ln2_b: g.param(&format!("{p}.ln2.b"))?,
        ffn: FfnParams {
            fc1_w: g.param(&format!("{p}.ffn.fc1.w"))?,
            fc1_b: g.param(&format!("{p}.ffn.fc1.b"))?,
            fc2_w: g.param(&format!("{p}.ffn.fc2.w"))?,
            fc2_b: g.param(&format!("{p}.ffn.fc2.b"))?,
        },
        cb1: cb(g, "cb1")?,
        cb2: cb(g, "cb2")?,
    })
}

/// Stacked UFE blocks for modality `m`.
pub fn enhance<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, m: ModalityId, f_star: Var) -> Result<Var> {
    let mut f = f_star;
    for d in 1..=cfg.ufe_depth {
        let p = ufe_params(g, cfg, m, d)?;
        f = blocks::ufe_forward(&mut g.tape, f, &p)?;
    }
    Ok(f)
}

fn masked_mean<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = *xs.first().ok_or(Error::AllModalitiesMissing)?;
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64)?)
}

/// Cross-modal fusion of UFE outputs. Slots with `δ_m = 0` are replaced by
/// zeros before anything reads them, so the result cannot depend on them.
pub fn cmf_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    features: &[Option<Var>; 4],
    mask: ModalityMask,
) -> Result<Var> {
    let shape: [usize; 4] = mask
        .available()
        .find_map(|m| features[m.ordinal()])
        .map(|v| g.tape.shape(v).try_into().expect("[C, D, H, W] features"))
        .ok_or(Error::AllModalitiesMissing)?;
    let masked: Vec<Var> = ModalityId::ALL
        .iter()
        .map(|&m| match features[m.ordinal()] {
            Some(v) if mask.has(m) => Ok(v),
            Some(_) | None if !mask.has(m) => Ok(g.tape.constant(Tensor::zeros(&shape))),
            _ => Err(Error::MaskInputMismatch(m.key())),
        })
        .collect::<Result<_>>()?;

    let attn = attention_params(g, "cmf.attn", "cmf.ln", cfg.num_heads)?;
    let mut seqs = Vec::with_capacity(4);
    for (m, &f) in ModalityId::ALL.iter().zip(&masked) {
        let seq = blocks::tokenize(&mut g.tape, f)?;
        let e = g.param(&format!("cmf.embed.{}", m.key()))?;
        let tokens = g.tape.add(seq.tokens, e)?;
        seqs.push(TokenSeq { tokens, ..seq });
    }
    let n = seqs[0].len();
    let avail: Vec<usize> = mask.available().map(ModalityId::ordinal).collect();

    let pooled = if cfg.pairwise_cmf {
        let mut outs = Vec::with_capacity(avail.len() * avail.len());
        for &a in &avail {
            for &b in &avail {
                outs.push(blocks::mhsa(&mut g.tape, seqs[a], seqs[b], &attn, None)?.tokens);
            }
        }
        masked_mean(&mut g.tape, &outs)?
    } else {
        let tokens: Vec<Var> = seqs.iter().map(|s| s.tokens).collect();
        let joint = g.tape.concat(&tokens, 0)?;
        let key_mask: Vec<bool> = ModalityId::ALL
            .iter()
            .flat_map(|&m| std::iter::repeat_n(mask.has(m), n))
            .collect();
        let joint_seq = TokenSeq {
            tokens: joint,
            origin_shape: [shape[0], 4 * n, 1, 1],
        };
        let out = blocks::mhsa(&mut g.tape, joint_seq, joint_seq, &attn, Some(&key_mask))?;
        let slots: Vec<Var> = avail
            .iter()
            .map(|&i| g.tape.narrow(out.tokens, 0, i * n, n))
            .collect::<std::result::Result<_, _>>()?;
        masked_mean(&mut g.tape, &slots)?
    };
    let f_trans = blocks::detokenize(
        &mut g.tape,
        TokenSeq {
            tokens: pooled,
            origin_shape: shape,
        },
    )?;
    if !cfg.convblock {
        return Ok(f_trans);
    }
    let stacked = g.tape.concat(&masked, 0)?;
    let cb = conv_block_params(g, "cmf.cb")?;
    let f_conv = blocks::conv_block(&mut g.tape, stacked, &cb)?;
    Ok(g.tape.add(f_trans, f_conv)?)
}

fn upsample_to<T: Scalar>(tape: &mut Tape<T>, x: Var, dims: &[usize]) -> Result<Var> {
    let mut y = x;
    for (axis, &n) in (1..4).zip(dims) {
        if tape.shape(y)[axis] != n {
            y = tape.resize_linear(y, axis, n)?;
        }
    }
    Ok(y)
}

fn head<T: Scalar>(g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    Ok(g.tape.conv3d(x, w, Some(b), 1, 0)?)
}

/// Decoder output: full-resolution logits plus, when requested (fusion
/// decoder only), the deep-supervision logits of decoder layers 1..=4 (1/2 .. 1/16 resolution).
#[derive(Clone, Debug)]
pub struct Decoded {
    pub logits: Var,
    pub aux: Vec<Var>,
}

/// Symmetric decoder. Layer 5 refines the bottleneck in place; layers 4..=1
/// upsample trilinearly to the matching skip, convolve, and add the skip.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    bottleneck: Var,
    skips: &[Var; 4],
    which: Branch,
    with_aux: bool,
) -> Result<Decoded> {
    let name = which.key();
    let mut aux = Vec::new();
    let mut x = conv_norm_act(g, bottleneck, &format!("dec.{name}.l5"), 1)?;
    for l in (1..=4).rev() {
        if with_aux {
            aux.push(head(g, x, &format!("dec.{name}.aux{l}"))?);
        }
        let skip = skips[l - 1];
        let dims = g.tape.shape(skip)[1..].to_vec();
        x = upsample_to(&mut g.tape, x, &dims)?;
        x = conv_norm_act(g, x, &format!("dec.{name}.l{l}"), 1)?;
        x = g.tape.add(x, skip)?;
    }
    aux.reverse();
    let logits = head(g, x, &format!("dec.{name}.head"))?;
    Ok(Decoded { logits, aux })
}

fn skips(f: &EncoderFeatures) -> [Var; 4] {
    [f.0[0], f.0[1], f.0[2], f.0[3]]
}

/// Everything a training step needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub seg: Var,
    /// Deep-supervision logits for decoder layers 1..=4.
    pub aux: Vec<Var>,
    /// `Y_m` for available modalities (train mode only).
    pub unimodal: [Option<Var>; 4],
    /// `Y_M` (train mode with distillation enabled).
    pub multimodal: Option<Var>,
    /// Scalar distillation loss (train mode with distillation enabled).
    pub mfd: Option<Var>,
    pub fusion: Var,
}

/// Runs the network. `images[m]` is a `[1, D, H, W]` volume; in inference
/// mode it must be present exactly for the available modalities, in training
/// mode all four must be present (the mask simulates absence).
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    images: &[Option<Tensor<T>>; 4],
    mask: ModalityMask,
    mode: Mode,
) -> Result<ForwardOutputs> {
    for m in ModalityId::ALL {
        let present = images[m.ordinal()].is_some();
        let ok = match mode {
            Mode::Train => present,
            Mode::Infer => present == mask.has(m),
        };
        if !ok {
            return Err(Error::MaskInputMismatch(m.key()));
        }
    }
    let inputs: [Option<Var>; 4] = std::array::from_fn(|i| images[i].clone().map(|t| g.tape.constant(t)));

    let mut students: [Option<EncoderFeatures>; 4] = [None; 4];
    for m in mask.available() {
        let x = inputs[m.ordinal()].expect("checked above");
        students[m.ordinal()] = Some(encode(g, x, Branch::Unimodal(m))?);
    }

    let mut unimodal = [None; 4];
    let (mut multimodal, mut mfd) = (None, None);
    if mode == Mode::Train {
        if cfg.mfd {
            let all: Vec<Var> = inputs.iter().map(|v| v.expect("train inputs")).collect();
            let x_m = g.tape.concat(&all, 0)?;
            let teacher = encode(g, x_m, Branch::Multimodal)?;
            mfd = Some(mfd_loss(&mut g.tape, &teacher, &students, mask)?);
            multimodal = Some(decode(g, teacher.bottleneck(), &skips(&teacher), Branch::Multimodal, false)?.logits);
        }
        for m in mask.available() {
            let f = students[m.ordinal()].expect("encoded");
            unimodal[m.ordinal()] = Some(decode(g, f.bottleneck(), &skips(&f), Branch::Unimodal(m), false)?.logits);
        }
    }

    let mut enhanced: [Option<Var>; 4] = [None; 4];
    for m in mask.available() {
        let f = students[m.ordinal()].expect("encoded").bottleneck();
        enhanced[m.ordinal()] = Some(if cfg.ufe { enhance(g, cfg, m, f)? } else { f });
    }
    let fusion = if cfg.cmf {
        cmf_forward(g, cfg, &enhanced, mask)?
    } else {
        let avail: Vec<Var> = enhanced.iter().flatten().copied().collect();
        masked_mean(&mut g.tape, &avail)?
    };

    let mut seg_skips = Vec::with_capacity(4);
    for l in 1..=4 {
        let fs: Vec<Var> = students.iter().flatten().map(|f| f.layer(l)).collect();
        seg_skips.push(masked_mean(&mut g.tape, &fs)?);
    }
    let seg_skips: [Var; 4] = seg_skips.try_into().expect("four skips");
    let Decoded { logits: seg, aux } = decode(g, fusion, &seg_skips, Branch::Seg, mode == Mode::Train)?;
    Ok(ForwardOutputs {
        seg,
        aux,
        unimodal,
        multimodal,
        mfd,
        fusion,
    })
}

/// Per-voxel argmax over the class axis of `[K, D, H, W]` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let d = logits.data();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + v] > d[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
