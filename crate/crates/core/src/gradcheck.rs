//! Finite-difference verification of the whole network's loss gradient.

use mctseg_tensor::{relative_error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{branch_losses, LabelVolume};
use crate::modality::ModalityMask;
use crate::model::{model_forward, Graph, Mode, ModelConfig, ParamStore, NUM_CLASSES};

/// Tiny problem on which every parameter's gradient is checked.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub config: ModelConfig,
    pub crop: usize,
    pub mask: ModalityMask,
    pub seed: u64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor
    /// is smaller).
    pub coords_per_tensor: usize,
    pub h: f64,
    pub lambda_mfd: f64,
    /// Check only keys starting with one of these (all keys if empty).
    pub key_prefixes: Vec<String>,
    /// Test fixture: corrupt the backward rule of this primitive.
    pub corrupt: Option<&'static str>,
}

impl Default for ModelCheck {
    fn default() -> Self {
        Self {
            config: ModelConfig {
                widths: [2, 4, 8, 16, 32],
                ..ModelConfig::default()
            },
            crop: 4,
            mask: ModalityMask::FULL,
            seed: 0,
            coords_per_tensor: 3,
            h: 1e-4,
            lambda_mfd: 1.0,
            key_prefixes: Vec::new(),
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub key: String,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct ModelCheckReport {
    pub params: Vec<ParamCheck>,
    pub coords_checked: usize,
}

impl ModelCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_error)
    }
}

struct Problem {
    images: [Option<Tensor<f64>>; 4],
    labels: LabelVolume,
    weights: [f64; NUM_CLASSES],
}

impl ModelCheck {
    /// Initialized parameters with every entry jittered, so zero-initialized
    /// projections and unit norms do not hide gradient paths.
    pub fn params(&self) -> ParamStore<f64> {
        let mut p = ParamStore::<f64>::init(&self.config, self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6a17);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    fn problem(&self) -> Result<Problem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xda7a);
        let c = self.crop;
        let n = c * c * c;
        let images = std::array::from_fn(|_| {
            let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            Some(Tensor::new(&[1, c, c, c], data).expect("crop shape"))
        });
        let labels = LabelVolume::new([c; 3], (0..n).map(|i| (i % NUM_CLASSES) as u8).collect())?;
        Ok(Problem {
            images,
            labels,
            weights: [0.4, 1.3, 0.9, 1.4],
        })
    }

    fn loss(&self, params: &ParamStore<f64>, prob: &Problem, lambda_mfd: f64) -> Result<f64> {
        let mut g = Graph::new(params, false);
        let out = model_forward(&mut g, &self.config, &prob.images, self.mask, Mode::Train)?;
        let l = branch_losses(&mut g.tape, &out, &prob.labels, self.mask, &prob.weights, lambda_mfd)?;
        Ok(g.tape.value(l.l_total).item())
    }

    pub fn run(&self) -> Result<ModelCheckReport> {
        let prob = self.problem()?;
        let params = self.params();
        let grads = {
            let mut g = Graph::new(&params, true);
            g.tape.corrupt_gradient_of(self.corrupt);
            let out = model_forward(&mut g, &self.config, &prob.images, self.mask, Mode::Train)?;
            let l = branch_losses(
                &mut g.tape,
                &out,
                &prob.labels,
                self.mask,
                &prob.weights,
                self.lambda_mfd,
            )?;
            g.tape.backward(l.l_total)?;
            g.grads()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xc00d);
        let mut perturbed = params.clone();
        let mut report = ModelCheckReport {
            params: Vec::new(),
            coords_checked: 0,
        };
        let keys: Vec<String> = params
            .keys()
            .filter(|k| self.key_prefixes.is_empty() || self.key_prefixes.iter().any(|p| k.starts_with(p)))
            .cloned()
            .collect();
        for key in keys {
            let base = params.get(&key)?.clone();
            let zeros = Tensor::zeros(base.shape());
            let grad = grads.get(&key).unwrap_or(&zeros);
            let coords: Vec<usize> = if base.numel() <= self.coords_per_tensor {
                (0..base.numel()).collect()
            } else {
                (0..self.coords_per_tensor)
                    .map(|_| rng.random_range(0..base.numel()))
                    .collect()
            };
            // The distillation term treats teacher features as constants, so
            // the teacher's true gradient is that of the loss without it.
            let lambda = if key.starts_with("enc.multi.") {
                0.0
            } else {
                self.lambda_mfd
            };
            let mut entry = ParamCheck {
                key: key.clone(),
                max_rel_error: 0.0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for i in coords {
                let orig = base.data()[i];
                let mut at = |v: f64| -> Result<f64> {
                    perturbed.get_mut(&key).expect("same keys").data_mut()[i] = v;
                    self.loss(&perturbed, &prob, lambda)
                };
                let plus = at(orig + self.h)?;
                let minus = at(orig - self.h)?;
                perturbed.get_mut(&key).expect("same keys").data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let analytic = grad.data()[i];
                let err = relative_error(analytic, numeric);
                report.coords_checked += 1;
                if err >= entry.max_rel_error {
                    entry = ParamCheck {
                        key: key.clone(),
                        max_rel_error: err,
                        analytic,
                        numeric,
                    };
                }
            }
            report.params.push(entry);
        }
        Ok(report)
    }
}
