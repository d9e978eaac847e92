//! Segmentation objectives, the Dice metric and tumor-region decomposition.

use mctseg_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::modality::{ModalityId, ModalityMask};
use crate::model::{ForwardOutputs, NUM_CLASSES};

/// Soft-Dice smoothing constant.
pub const DICE_EPS: f64 = 1e-5;

/// Integer class per voxel: 0 background, 1 necrosis/non-enhancing,
/// 2 edema, 3 enhancing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} labels for dims {dims:?}", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Shape(format!("label value {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &v in &self.data {
            c[v as usize] += 1;
        }
        c
    }

    /// Majority vote over each 2x2x2 block (partial blocks at odd edges);
    /// ties go to the highest class index.
    pub fn downsample_majority(&self) -> Self {
        let [d, h, w] = self.dims;
        let out = [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
        let mut data = Vec::with_capacity(out.iter().product());
        for z in 0..out[0] {
            for y in 0..out[1] {
                for x in 0..out[2] {
                    let mut votes = [0u8; NUM_CLASSES];
                    for zz in 2 * z..(2 * z + 2).min(d) {
                        for yy in 2 * y..(2 * y + 2).min(h) {
                            for xx in 2 * x..(2 * x + 2).min(w) {
                                votes[self.at(zz, yy, xx) as usize] += 1;
                            }
                        }
                    }
                    let best = (0..NUM_CLASSES).max_by_key(|&c| votes[c]).expect("classes");
                    data.push(best as u8);
                }
            }
        }
        Self { dims: out, data }
    }
}

/// Evaluation regions, nested as ET ⊂ TC ⊂ WT.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionId {
    Et,
    Tc,
    Wt,
}

impl RegionId {
    pub const ALL: [RegionId; 3] = [Self::Et, Self::Tc, Self::Wt];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Self::Et => label == 3,
            Self::Tc => label == 1 || label == 3,
            Self::Wt => (1..=3).contains(&label),
        }
    }
}

pub fn region_map(labels: &LabelVolume, region: RegionId) -> Vec<bool> {
    labels.data.iter().map(|&v| region.contains(v)).collect()
}

/// Hard Dice `2|P∩T| / (|P| + |T|)`; 1.0 when both regions are empty.
pub fn dice_score(pred: &LabelVolume, truth: &LabelVolume, region: RegionId) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(Error::Shape(format!("dice on {:?} vs {:?}", pred.dims, truth.dims)));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        let (ia, ib) = (region.contains(a), region.contains(b));
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

fn check_logits<T: Scalar>(tape: &Tape<T>, logits: Var, target: &LabelVolume, op: &str) -> Result<()> {
    let s = tape.shape(logits);
    if s.len() != 4 || s[0] != NUM_CLASSES || s[1..] != target.dims {
        return Err(Error::Shape(format!("{op}: logits {s:?} vs labels {:?}", target.dims)));
    }
    Ok(())
}

/// Mean over voxels of `-w[y] * log softmax(logits)[y]`.
pub fn wce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &LabelVolume,
    weights: &[f64; NUM_CLASSES],
) -> Result<Var> {
    check_logits(tape, logits, target, "wce_loss")?;
    if let Some(&w) = weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::NonPositiveWeight(w));
    }
    let n = target.len();
    let mut coef = vec![T::zero(); NUM_CLASSES * n];
    for (v, &y) in target.data.iter().enumerate() {
        coef[y as usize * n + v] = T::from_f64(-weights[y as usize] / n as f64);
    }
    let coef = tape.constant(Tensor::new(tape.shape(logits), coef)?);
    let logp = tape.log_softmax(logits, 0)?;
    let weighted = tape.mul(logp, coef)?;
    Ok(tape.sum(weighted)?)
}

/// Unweighted cross-entropy: [`wce_loss`] with unit weights.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &LabelVolume) -> Result<Var> {
    wce_loss(tape, logits, target, &[1.0; NUM_CLASSES])
}

/// `1 - mean_c (2 Σ p_c y_c + eps) / (Σ p_c + Σ y_c + eps)` over the
/// foreground classes, with `p` the per-voxel softmax.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &LabelVolume, eps: f64) -> Result<Var> {
    check_logits(tape, logits, target, "dice_loss")?;
    let n = target.len();
    let mut onehot = vec![T::zero(); NUM_CLASSES * n];
    for (v, &y) in target.data.iter().enumerate() {
        onehot[y as usize * n + v] = T::one();
    }
    let counts = target.counts();
    let fg = NUM_CLASSES - 1;
    let y_sum: Vec<T> = counts[1..].iter().map(|&c| T::from_f64(c as f64)).collect();
    let onehot = tape.constant(Tensor::new(&[NUM_CLASSES, n], onehot)?);
    let y_sum = tape.constant(Tensor::new(&[fg], y_sum)?);

    let p = tape.softmax(logits, 0)?;
    let p = tape.reshape(p, &[NUM_CLASSES, n])?;
    let inter = tape.mul(p, onehot)?;
    let inter = tape.sum_last(inter)?;
    let inter = tape.narrow(inter, 0, 1, fg)?;
    let p_sum = tape.sum_last(p)?;
    let p_sum = tape.narrow(p_sum, 0, 1, fg)?;

    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add(p_sum, y_sum)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let total = tape.sum(ratio)?;
    let mean = tape.scale(total, -1.0 / fg as f64)?;
    Ok(tape.add_scalar(mean, 1.0)?)
}

/// `WCE + Dice` for one prediction.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &LabelVolume,
    weights: &[f64; NUM_CLASSES],
) -> Result<Var> {
    let a = wce_loss(tape, logits, target, weights)?;
    let b = dice_loss(tape, logits, target, DICE_EPS)?;
    Ok(tape.add(a, b)?)
}

/// Loss components of one training step, all scalar vars on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_um: Var,
    pub l_mm: Var,
    pub l_seg: Var,
    pub l_layer: Var,
    pub l_mfd: Var,
    pub l_total: Var,
}

/// Plain numbers read off a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l_um: f64,
    pub l_mm: f64,
    pub l_seg: f64,
    pub l_layer: f64,
    pub l_mfd: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().to_f64();
        LossValues {
            l_um: v(self.l_um),
            l_mm: v(self.l_mm),
            l_seg: v(self.l_seg),
            l_layer: v(self.l_layer),
            l_mfd: v(self.l_mfd),
            l_total: v(self.l_total),
        }
    }
}

fn sum_all<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = xs.split_first() else {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    };
    let mut acc = first;
    for &x in rest {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

/// All training objectives for one forward pass.
///
/// `l_total = l_um + l_mm + l_seg + l_layer + lambda_mfd * l_mfd`, summed in
/// that order.
pub fn branch_losses<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutputs,
    target: &LabelVolume,
    mask: ModalityMask,
    weights: &[f64; NUM_CLASSES],
    lambda_mfd: f64,
) -> Result<LossBreakdown> {
    let mut um = Vec::new();
    for m in ModalityId::ALL {
        match (mask.has(m), out.unimodal[m.ordinal()]) {
            (true, Some(y)) => um.push(seg_loss(tape, y, target, weights)?),
            (false, None) => {}
            _ => return Err(Error::MaskInputMismatch(m.key())),
        }
    }
    let l_um = sum_all(tape, &um)?;
    let l_mm = match out.multimodal {
        Some(y) => seg_loss(tape, y, target, weights)?,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let l_seg = seg_loss(tape, out.seg, target, weights)?;

    let mut layer = Vec::with_capacity(out.aux.len());
    let mut down = target.clone();
    for &aux in &out.aux {
        down = down.downsample_majority();
        layer.push(seg_loss(tape, aux, &down, weights)?);
    }
    let l_layer = sum_all(tape, &layer)?;
    let l_mfd = match out.mfd {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(T::zero())),
    };

    let total = sum_all(tape, &[l_um, l_mm, l_seg, l_layer])?;
    let weighted_mfd = tape.scale(l_mfd, lambda_mfd)?;
    let l_total = tape.add(total, weighted_mfd)?;
    Ok(LossBreakdown {
        l_um,
        l_mm,
        l_seg,
        l_layer,
        l_mfd,
        l_total,
    })
}

/// Inverse class frequency over `labels`, normalized to mean 1 and clamped
/// to `[0.1, 10]`.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a LabelVolume>) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        for (c, n) in counts.iter_mut().zip(l.counts()) {
            *c += n;
        }
    }
    let total: usize = counts.iter().sum();
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { f64::INFINITY } else { total as f64 / c as f64 })
        .collect();
    let finite: Vec<f64> = inv.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = if finite.is_empty() {
        1.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    std::array::from_fn(|c| (inv[c] / mean).clamp(0.1, 10.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_ties_prefer_tumor() {
        // 4 background, 4 edema in one block
        let l = LabelVolume::new([2, 2, 2], vec![0, 2, 0, 2, 0, 2, 0, 2]).unwrap();
        assert_eq!(l.downsample_majority().data(), &[2]);
        let l = LabelVolume::new([2, 2, 2], vec![0, 0, 0, 0, 0, 1, 3, 3]).unwrap();
        assert_eq!(l.downsample_majority().data(), &[0]);
    }

    #[test]
    fn odd_dims_use_partial_blocks() {
        let l = LabelVolume::new([1, 1, 3], vec![1, 1, 3]).unwrap();
        let d = l.downsample_majority();
        assert_eq!(d.dims(), [1, 1, 2]);
        assert_eq!(d.data(), &[1, 3]);
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let l = LabelVolume::new([1, 1, 8], vec![0, 0, 0, 0, 1, 1, 2, 3]).unwrap();
        let w = class_weights([&l]);
        // inverse freqs 2, 4, 8, 8 -> mean 5.5
        let want = [2.0 / 5.5, 4.0 / 5.5, 8.0 / 5.5, 8.0 / 5.5];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
