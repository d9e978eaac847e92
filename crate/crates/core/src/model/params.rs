use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use mctseg_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::modality::ModalityId;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

struct Spec {
    shape: Vec<usize>,
    init: Init,
}

fn conv_spec(cout: usize, cin: usize, k: usize, leaky: bool) -> Spec {
    let fan_in = (cin * k * k * k) as f64;
    let bound = if leaky {
        (6.0 / fan_in).sqrt()
    } else {
        1.0 / fan_in.sqrt()
    };
    Spec {
        shape: vec![cout, cin, k, k, k],
        init: Init::Uniform(bound),
    }
}

fn linear_spec(cin: usize, cout: usize, zero: bool) -> Spec {
    Spec {
        shape: vec![cin, cout],
        init: if zero {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / (cin as f64).sqrt())
        },
    }
}

fn vector(n: usize, init: Init) -> Spec {
    Spec { shape: vec![n], init }
}

struct Schema(BTreeMap<String, Spec>);

impl Schema {
    fn add(&mut self, key: String, spec: Spec) {
        let prev = self.0.insert(key, spec);
        debug_assert!(prev.is_none());
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.g"), vector(c, Init::Ones));
        self.add(format!("{prefix}.b"), vector(c, Init::Zeros));
    }

    fn encoder(&mut self, name: &str, cin: usize, widths: &[usize; 5]) {
        let mut prev = cin;
        for (l, &c) in widths.iter().enumerate() {
            let p = format!("enc.{name}.l{}", l + 1);
            self.add(format!("{p}.conv.w"), conv_spec(c, prev, 3, true));
            self.norm(&format!("{p}.norm"), c);
            prev = c;
        }
    }

    fn head(&mut self, prefix: &str, cin: usize) {
        self.add(format!("{prefix}.w"), conv_spec(NUM_CLASSES, cin, 1, false));
        self.add(format!("{prefix}.b"), vector(NUM_CLASSES, Init::Zeros));
    }

    fn decoder(&mut self, name: &str, widths: &[usize; 5], aux: bool) {
        for l in (1..=5).rev() {
            let cin = widths[(l).min(4)];
            let p = format!("dec.{name}.l{l}");
            self.add(format!("{p}.conv.w"), conv_spec(widths[l - 1], cin, 3, true));
            self.norm(&format!("{p}.norm"), widths[l - 1]);
        }
        self.head(&format!("dec.{name}.head"), widths[0]);
        if aux {
            for l in 1..=4 {
                self.head(&format!("dec.{name}.aux{l}"), widths[l]);
            }
        }
    }

    fn conv_block(&mut self, prefix: &str, cin: usize, c: usize, zero_out: bool) {
        self.add(format!("{prefix}.conv.w"), conv_spec(c, cin, 3, false));
        self.add(format!("{prefix}.conv.b"), vector(c, Init::Zeros));
        self.add(format!("{prefix}.lin.w"), linear_spec(c, c, zero_out));
        self.add(format!("{prefix}.lin.b"), vector(c, Init::Zeros));
    }

    fn attention(&mut self, prefix: &str, c: usize, zero_out: bool) {
        for w in ["wq", "wk", "wv"] {
            self.add(format!("{prefix}.{w}"), linear_spec(c, c, false));
        }
        self.add(format!("{prefix}.wo"), linear_spec(c, c, zero_out));
    }
}

fn schema(cfg: &ModelConfig) -> Schema {
    let mut s = Schema(BTreeMap::new());
    let w = &cfg.widths;
    let c = cfg.bottleneck();
    for m in ModalityId::ALL {
        s.encoder(m.key(), 1, w);
        s.decoder(m.key(), w, false);
        if cfg.ufe {
            for d in 1..=cfg.ufe_depth {
                let p = format!("ufe.{}.d{d}", m.key());
                s.norm(&format!("{p}.ln1"), c);
                s.attention(&format!("{p}.attn"), c, true);
                s.norm(&format!("{p}.ln2"), c);
                s.add(format!("{p}.ffn.fc1.w"), linear_spec(c, cfg.ffn_mult * c, false));
                s.add(format!("{p}.ffn.fc1.b"), vector(cfg.ffn_mult * c, Init::Zeros));
                s.add(format!("{p}.ffn.fc2.w"), linear_spec(cfg.ffn_mult * c, c, true));
                s.add(format!("{p}.ffn.fc2.b"), vector(c, Init::Zeros));
                if cfg.convblock {
                    s.conv_block(&format!("{p}.cb1"), c, c, true);
                    s.conv_block(&format!("{p}.cb2"), c, c, true);
                }
            }
        }
        if cfg.cmf {
            s.add(format!("cmf.embed.{}", m.key()), vector(c, Init::Normal(0.02)));
        }
    }
    if cfg.mfd {
        s.encoder("multi", 4, w);
        s.decoder("multi", w, false);
    }
    if cfg.cmf {
        s.norm("cmf.ln", c);
        s.attention("cmf.attn", c, false);
        if cfg.convblock {
            s.conv_block("cmf.cb", 4 * c, c, false);
        }
    }
    s.decoder("seg", w, true);
    s
}

/// Parameter key set implied by `cfg`, with shapes.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    schema(cfg).0.into_iter().map(|(k, s)| (k, s.shape)).collect()
}

fn key_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

/// Named model parameters. Reads through [`ParamStore::get`] are recorded so
/// tests can prove which branches a forward pass touched.
#[derive(Debug)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    accessed: Mutex<BTreeSet<String>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self::from_map(self.params.clone())
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        Self {
            params,
            accessed: Mutex::new(BTreeSet::new()),
        }
    }

    /// Fresh parameters for `cfg`. Each tensor draws from its own stream keyed
    /// by `(seed, key)`, so adding a branch never perturbs the others.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let params = schema(cfg)
            .0
            .into_iter()
            .map(|(key, spec)| {
                let n: usize = spec.shape.iter().product();
                let mut rng = key_rng(seed, &key);
                let data: Vec<T> = match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Uniform(b) => (0..n).map(|_| T::from_f64(rng.random_range(-b..=b))).collect(),
                    Init::Normal(s) => (0..n)
                        .map(|_| T::from_f64(s * rng.sample::<f64, _>(StandardNormal)))
                        .collect(),
                };
                let t = Tensor::new(&spec.shape, data).expect("schema shape");
                (key, t)
            })
            .collect();
        Self::from_map(params)
    }

    /// Fails unless the key set and every shape match `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_shapes(cfg);
        for (k, shape) in &want {
            match self.params.get(k) {
                None => return Err(Error::KeySetMismatch(format!("missing {k}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::KeySetMismatch(format!(
                        "{k} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !want.contains_key(*k)) {
            return Err(Error::KeySetMismatch(format!("unexpected {extra}")));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<T>> {
        let t = self
            .params
            .get(key)
            .ok_or_else(|| Error::KeySetMismatch(format!("missing {key}")))?;
        self.accessed.lock().expect("access log").insert(key.to_owned());
        Ok(t)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Iterates without recording accesses.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn accessed(&self) -> BTreeSet<String> {
        self.accessed.lock().expect("access log").clone()
    }

    pub fn clear_accessed(&self) {
        self.accessed.lock().expect("access log").clear();
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore::from_map(self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect())
    }
}

/// A tape plus lazily bound parameters for one forward (and backward) pass.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// With `trainable == false` parameters enter the tape as constants and
    /// no activations are retained for backward.
    pub fn new(store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn param(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let value = self.store.get(key)?.clone();
        let v = self.tape.leaf(value, self.trainable);
        self.bound.insert(key.to_owned(), v);
        Ok(v)
    }

    pub fn bound_keys(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    /// Gradients of every bound parameter after [`Tape::backward`]. Bound
    /// parameters the loss did not reach get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(k, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}
