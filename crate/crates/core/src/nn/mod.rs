//! Minimal CPU network engine: parameters, layers with explicit backward
//! passes, and the Adam optimizer.
//!
//! Layers cache what their backward pass needs during `forward` and
//! accumulate parameter gradients into [`Param::grad`] during `backward`.

pub mod layers;
pub mod optim;

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{name_hash, stream_rng};
use crate::scalar::Scalar;

pub use layers::{
    AvgPool2, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, L2Normalize, Linear, MaxPool2, Relu,
    Upsample2,
};
pub use optim::Adam;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Joins a parameter prefix and a local name with `.`.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// How fresh parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// He-normal with the given fan-in.
    HeNormal { fan_in: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
}

/// Anything that owns named parameters. Names are canonical across model
/// kinds so weights transfer between training stages by name and shape.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.fill(T::zero()));
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value.len());
        n
    }

    /// Copy of all parameter values keyed by canonical name.
    fn state_dict(&self) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |n, p| {
            out.insert(n.to_string(), p.value.clone());
        });
        out
    }

    /// Copy of all gradients keyed by canonical name.
    fn grad_dict(&self) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |n, p| {
            out.insert(n.to_string(), p.grad.clone());
        });
        out
    }

    /// Load every parameter whose name and shape match; report the rest.
    fn load_matching(&mut self, source: &BTreeMap<String, ArrayD<T>>) -> TransferReport {
        let mut report = TransferReport::default();
        let mut seen = std::collections::BTreeSet::new();
        self.visit_mut("", &mut |n, p| match source.get(n) {
            Some(v) if v.shape() == p.value.shape() => {
                p.value.assign(v);
                report.matched.push(n.to_string());
                seen.insert(n.to_string());
            }
            Some(v) => {
                report
                    .shape_mismatch
                    .push((n.to_string(), p.value.shape().to_vec(), v.shape().to_vec()));
                seen.insert(n.to_string());
            }
            None => report.missing_in_source.push(n.to_string()),
        });
        report.unused_in_source = source.keys().filter(|k| !seen.contains(*k)).cloned().collect();
        report
    }

    /// Re-draw parameters from streams keyed by `(seed, name)`; the draw for a
    /// parameter does not depend on which other parameters exist.
    fn init_params(&mut self, seed: u64, init_of: &dyn Fn(&str, &[usize]) -> Init) {
        self.init_params_under("", seed, init_of);
    }

    /// As [`Parameterized::init_params`], with names (and so streams) under `prefix`.
    fn init_params_under(&mut self, prefix: &str, seed: u64, init_of: &dyn Fn(&str, &[usize]) -> Init) {
        self.visit_mut(prefix, &mut |n, p| {
            let mut rng = stream_rng(seed, &[name_hash(n)]);
            match init_of(n, p.value.shape()) {
                Init::Zeros => p.value.fill(T::zero()),
                Init::Ones => p.value.fill(T::one()),
                Init::HeNormal { fan_in } => {
                    let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("std");
                    p.value.mapv_inplace(|_| T::lit(dist.sample(&mut rng)));
                }
                Init::Uniform { fan_in } => {
                    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                    p.value.mapv_inplace(|_| T::lit(rng.random_range(-b..b)));
                }
            }
            p.grad.fill(T::zero());
        });
    }
}

/// Default initializer: He-normal for conv weights, uniform for linear
/// weights, zeros for biases; normalization layers start at the identity.
pub fn default_init(name: &str, shape: &[usize]) -> Init {
    if name.ends_with("running_var") || (shape.len() == 1 && name.ends_with("weight")) {
        Init::Ones
    } else if name.ends_with("bias") || name.ends_with("running_mean") {
        Init::Zeros
    } else if shape.len() == 4 {
        Init::HeNormal {
            fan_in: shape[1] * shape[2] * shape[3],
        }
    } else {
        Init::Uniform {
            fan_in: shape.get(1).copied().unwrap_or(1),
        }
    }
}

/// Outcome of a by-name weight transfer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub matched: Vec<String>,
    pub missing_in_source: Vec<String>,
    pub unused_in_source: Vec<String>,
    /// `(name, model shape, source shape)`.
    pub shape_mismatch: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl TransferReport {
    pub fn describe(&self) -> String {
        let mut parts = vec![format!("{} matched", self.matched.len())];
        if !self.shape_mismatch.is_empty() {
            let diffs: Vec<String> = self
                .shape_mismatch
                .iter()
                .map(|(n, a, b)| format!("{n}: model {a:?} vs checkpoint {b:?}"))
                .collect();
            parts.push(format!("shape mismatches [{}]", diffs.join(", ")));
        }
        if !self.missing_in_source.is_empty() {
            parts.push(format!("not in checkpoint [{}]", self.missing_in_source.join(", ")));
        }
        if !self.unused_in_source.is_empty() {
            parts.push(format!("unused [{}]", self.unused_in_source.join(", ")));
        }
        parts.join("; ")
    }
}

/// Forward-pass mode. Training mode enables dropout and keeps caches.
pub struct Mode<'a> {
    pub train: bool,
    pub rng: Option<&'a mut rand_chacha::ChaCha8Rng>,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut rand_chacha::ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: Some(rng),
        }
    }
}
