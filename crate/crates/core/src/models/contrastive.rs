//! Contrastive encoder and the momentum (query/key) pair with its queue of
//! negative keys.

use log::debug;
use ndarray::{Array2, Array4, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{Error, Result};
use crate::nn::{default_init, join, GlobalAvgPool, L2Normalize, Linear, Mode, Param, Parameterized, Relu};
use crate::rng::{name_hash, stream_rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone)]
pub struct ProjectionHead<T> {
    fc1: Linear<T>,
    hidden: Option<(Relu<T>, Linear<T>)>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new(kind: ProjectionKind, in_dim: usize, out_dim: usize) -> Self {
        match kind {
            ProjectionKind::Linear => Self {
                fc1: Linear::new(in_dim, out_dim),
                hidden: None,
            },
            ProjectionKind::Mlp => Self {
                fc1: Linear::new(in_dim, in_dim),
                hidden: Some((Relu::new(), Linear::new(in_dim, out_dim))),
            },
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.hidden {
            Some((_, fc2)) => fc2.out_dim(),
            None => self.fc1.out_dim(),
        }
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        let h = self.fc1.forward(x);
        match &mut self.hidden {
            Some((relu, fc2)) => fc2.forward(&relu.forward(&h)),
            None => h,
        }
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let d = match &mut self.hidden {
            Some((relu, fc2)) => relu.backward(&fc2.backward(dy)),
            None => dy.clone(),
        };
        self.fc1.backward(&d)
    }
}

impl<T: Scalar> Parameterized<T> for ProjectionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        if let Some((_, fc2)) = &self.hidden {
            fc2.visit(&join(prefix, "fc2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        if let Some((_, fc2)) = &mut self.hidden {
            fc2.visit_mut(&join(prefix, "fc2"), f);
        }
    }
}

/// Backbone → global average pool → projection → L2 normalization.
#[derive(Debug, Clone)]
pub struct ContrastiveEncoder<T> {
    pub encoder: Backbone<T>,
    pool: GlobalAvgPool,
    pub projection: ProjectionHead<T>,
    norm: L2Normalize<T>,
}

impl<T: Scalar> ContrastiveEncoder<T> {
    pub fn new(encoder: Backbone<T>, kind: ProjectionKind, proj_dim: usize, seed: u64) -> Self {
        let mut projection = ProjectionHead::new(kind, encoder.feature_dim(), proj_dim);
        projection.init_params_under("projection", seed, &default_init);
        Self {
            encoder,
            pool: GlobalAvgPool::default(),
            projection,
            norm: L2Normalize::new(),
        }
    }

    /// Unit-norm embeddings, one row per image.
    pub fn forward(&mut self, x: &Array4<T>, mode: &Mode<'_>) -> Array2<T> {
        let feats = self.encoder.forward(x, mode);
        let pooled = self.pool.forward(feats.last().expect("scales"));
        self.norm.forward(&self.projection.forward(&pooled))
    }

    pub fn backward(&mut self, d_emb: &Array2<T>) {
        let d = self.projection.backward(&self.norm.backward(d_emb));
        let mut grads = vec![None; self.encoder.scale_channels().len()];
        *grads.last_mut().expect("scales") = Some(self.pool.backward(&d));
        self.encoder.backward(grads);
    }
}

impl<T: Scalar> Parameterized<T> for ContrastiveEncoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.projection.visit(&join(prefix, "projection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q` over parameters visited in the same order.
pub fn momentum_update<T: Scalar>(key: &mut dyn Parameterized<T>, query: &dyn Parameterized<T>, m: f64) {
    let mut q = Vec::new();
    query.visit("", &mut |n, p| q.push((n.to_string(), p.value.clone())));
    let (m, one_minus) = (T::lit(m), T::lit(1.0 - m));
    let mut it = q.into_iter();
    key.visit_mut("", &mut |n, p| {
        let (qn, qv) = it.next().expect("query and key encoders differ in parameter count");
        assert_eq!(qn, n, "query and key encoders differ in structure");
        assert_eq!(qv.shape(), p.value.shape(), "shape mismatch at {n}");
        Zip::from(&mut p.value).and(&qv).for_each(|k, &q| *k = m * *k + one_minus * q);
    });
}

/// Fixed-size FIFO ring of unit-norm key rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyQueue<T> {
    pub rows: Array2<T>,
    pub ptr: usize,
}

impl<T: Scalar> KeyQueue<T> {
    /// Queue of `k` random unit vectors drawn from `seed`.
    pub fn random(k: usize, dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[name_hash("queue")]);
        let mut rows = Array2::from_shape_fn((k, dim), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        });
        for mut r in rows.outer_iter_mut() {
            let norm = r.iter().map(|v| *v * *v).sum::<T>().sqrt();
            r.mapv_inplace(|v| v / norm);
        }
        Self { rows, ptr: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Overwrite the oldest rows with `keys`; the pointer advances mod K.
    pub fn enqueue(&mut self, keys: &Array2<T>) -> Result<()> {
        let (b, d) = keys.dim();
        let k = self.len();
        if b > k {
            return Err(Error::Validation(format!("batch of {b} keys exceeds queue size {k}")));
        }
        if d != self.rows.ncols() {
            return Err(Error::Validation(format!(
                "key dim {d} differs from queue dim {}",
                self.rows.ncols()
            )));
        }
        let tol = T::lit(1e-5);
        for (i, row) in keys.outer_iter().enumerate() {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let slot = (self.ptr + i) % k;
            if (norm - T::one()).abs() > tol {
                debug!("enqueued key {i} has norm {norm}; normalizing");
                let safe = norm.max(T::lit(1e-12));
                self.rows.row_mut(slot).assign(&row.mapv(|v| v / safe));
            } else {
                self.rows.row_mut(slot).assign(&row);
            }
        }
        self.ptr = (self.ptr + b) % k;
        Ok(())
    }
}

/// Query encoder, its momentum-averaged key twin, and the negatives queue.
#[derive(Debug, Clone)]
pub struct MomentumPair<T> {
    pub query: ContrastiveEncoder<T>,
    pub key: ContrastiveEncoder<T>,
    pub queue: KeyQueue<T>,
    pub momentum: f64,
    pub temperature: f64,
}

impl<T: Scalar> MomentumPair<T> {
    /// The key encoder starts as an exact copy of the query encoder.
    pub fn new(query: ContrastiveEncoder<T>, queue_size: usize, momentum: f64, temperature: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1], got {momentum}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        if queue_size == 0 {
            return Err(Error::Config("queue size must be positive".into()));
        }
        Ok(Self {
            key: query.clone(),
            queue: KeyQueue::random(queue_size, query.projection.out_dim(), seed),
            query,
            momentum,
            temperature,
        })
    }

    pub fn momentum_update(&mut self) {
        momentum_update(&mut self.key, &self.query, self.momentum);
    }

    pub fn enqueue_keys(&mut self, keys: &Array2<T>) -> Result<()> {
        self.queue.enqueue(keys)
    }

    /// Mutable view of the query encoder for the optimizer.
    pub fn query_params(&mut self) -> QueryParams<'_, T> {
        QueryParams(&mut self.query)
    }
}

/// The query encoder's parameters under the `query.` prefix. This is the only
/// part of a [`MomentumPair`] handed to an optimizer.
pub struct QueryParams<'a, T>(pub &'a mut ContrastiveEncoder<T>);

impl<T: Scalar> Parameterized<T> for QueryParams<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.0.visit(&join(prefix, "query"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.0.visit_mut(&join(prefix, "query"), f);
    }
}

impl<T: Scalar> Parameterized<T> for MomentumPair<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
    }
}
