use std::fmt::Write as _;

use mctseg_tensor::Scalar;
use rayon::prelude::*;

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::losses::{dice_score, LabelVolume, RegionId};
use crate::modality::{ModalityId, ModalityMask};
use crate::model::{argmax_labels, model_forward, Graph, Mode, ModelConfig, ParamStore};

/// Produces a label map for a sample seen through `mask`.
pub trait Predictor: Sync {
    fn predict(&self, sample: &VolumeSample, mask: ModalityMask) -> Result<LabelVolume>;
}

/// Argmax of the fusion decoder's logits, with withheld modalities never
/// passed to the network.
pub struct ModelPredictor<'a, T: Scalar> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&self, sample: &VolumeSample, mask: ModalityMask) -> Result<LabelVolume> {
        let images = std::array::from_fn(|i| {
            let m = ModalityId::from_ordinal(i).expect("four modalities");
            mask.has(m).then(|| sample.image(m).cast::<T>())
        });
        let mut g = Graph::new(self.params, false);
        let out = model_forward(&mut g, self.config, &images, mask, Mode::Infer)?;
        LabelVolume::new(sample.dims(), argmax_labels(g.tape.value(out.seg)))
    }
}

/// Mean Dice (ET, TC, WT) per mask in canonical order, plus their average.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceMatrix {
    pub rows: Vec<(ModalityMask, [f64; 3])>,
    pub average: [f64; 3],
}

/// Sum in ascending order so the result does not depend on sample order.
fn ordered_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Dice of `predictor` on every sample under each of the 15 masks. Samples
/// are expected to be normalized and already cropped to the model's input
/// size.
pub fn eval_matrix(predictor: &impl Predictor, eval_set: &[VolumeSample]) -> Result<DiceMatrix> {
    if eval_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let masks = ModalityMask::canonical();
    let jobs: Vec<(usize, usize)> = (0..masks.len())
        .flat_map(|m| (0..eval_set.len()).map(move |s| (m, s)))
        .collect();
    let scores: Vec<[f64; 3]> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let sample = &eval_set[s];
            let pred = predictor.predict(sample, masks[m])?;
            let mut out = [0.0; 3];
            for (o, r) in out.iter_mut().zip(RegionId::ALL) {
                *o = dice_score(&pred, &sample.labels, r)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n = eval_set.len();
    let rows: Vec<(ModalityMask, [f64; 3])> = masks
        .iter()
        .enumerate()
        .map(|(m, &mask)| {
            let per = &scores[m * n..(m + 1) * n];
            (
                mask,
                std::array::from_fn(|r| ordered_mean(per.iter().map(|s| s[r]).collect())),
            )
        })
        .collect();
    let average = std::array::from_fn(|r| rows.iter().map(|(_, d)| d[r]).sum::<f64>() / rows.len() as f64);
    Ok(DiceMatrix { rows, average })
}

pub const DICE_CSV_HEADER: &str = "mask_flair,mask_t1ce,mask_t1,mask_t2,dice_et,dice_tc,dice_wt";

/// Header plus 15 mask rows and a final `avg` row.
pub fn write_dice_csv(m: &DiceMatrix) -> String {
    let mut s = String::from(DICE_CSV_HEADER);
    s.push('\n');
    for (mask, d) in &m.rows {
        let bits: Vec<&str> = mask.delta().iter().map(|&b| if b { "1" } else { "0" }).collect();
        writeln!(s, "{},{:.6},{:.6},{:.6}", bits.join(","), d[0], d[1], d[2]).expect("string write");
    }
    let a = m.average;
    writeln!(s, "avg,avg,avg,avg,{:.6},{:.6},{:.6}", a[0], a[1], a[2]).expect("string write");
    s
}
