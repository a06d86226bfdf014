//! Linear hash layer over precomputed features.
//!
//! A model maps a feature vector `f` to relaxed outputs `u = squash(Wᵀ f)`
//! and to the binary code `sign(u)`. Training minimizes, per minibatch,
//! the mean pairwise loss over all unordered in-batch pairs plus
//! `reg_weight` times the mean quantization regularizer.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::hamming::HashCode;
use crate::loss::{
    loss_derivative, loss_unchecked, regularizer, regularizer_grad, LossSpec, PairWeights, Relaxation, SimilarityLabels,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseHashModel<T> {
    /// `D x Q` projection.
    pub w: Array2<T>,
    pub relaxation: Relaxation,
    pub spec: LossSpec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reg_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 256,
            reg_weight: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.reg_weight < 0.0 {
            return Err(Error::Config("weight decay and reg weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A trained model with its mean batch objective per epoch.
#[derive(Clone, Debug)]
pub struct BaseTraining<T> {
    pub model: BaseHashModel<T>,
    pub epoch_objective: Vec<T>,
}

impl<T: Scalar> BaseHashModel<T> {
    pub fn new(w: Array2<T>, relaxation: Relaxation, spec: LossSpec<T>) -> Result<Self> {
        let (d, q) = w.dim();
        if d == 0 || q == 0 {
            return Err(Error::dim("model needs D, Q > 0"));
        }
        check_len(spec.q, q)?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite model weight".into()));
        }
        Ok(BaseHashModel { w, relaxation, spec })
    }

    /// Gaussian initialization with standard deviation `scale / sqrt(D)`.
    pub fn gaussian(d: usize, spec: LossSpec<T>, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = scale / (d.max(1) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((d, spec.q), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z * std)
        });
        Self::new(w, spec.kind.relaxation(), spec)
    }

    /// `W = I`; requires `D == Q`. Codes are then the signs of the features.
    pub fn identity(spec: LossSpec<T>) -> Result<Self> {
        Self::new(Array2::eye(spec.q), spec.kind.relaxation(), spec)
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    /// Relaxed output and binary code for one feature vector.
    pub fn encode(&self, f: ArrayView1<'_, T>) -> Result<(Array1<T>, HashCode)> {
        check_len(self.dim(), f.len())?;
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        let u = f.dot(&self.w).mapv(|z| self.relaxation.squash(z));
        let code = HashCode::from_signs(u.as_slice().expect("contiguous"))?;
        Ok((u, code))
    }

    /// Row-wise [`encode`](Self::encode).
    pub fn encode_batch(&self, features: ArrayView2<'_, T>) -> Result<(Array2<T>, Vec<HashCode>)> {
        check_len(self.dim(), features.ncols())?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        let u = features.dot(&self.w).mapv(|z| self.relaxation.squash(z));
        let codes = u
            .rows()
            .into_iter()
            .map(|r| HashCode::from_signs(r.to_vec().as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok((u, codes))
    }

    pub fn codes(&self, features: ArrayView2<'_, T>) -> Result<Vec<HashCode>> {
        Ok(self.encode_batch(features)?.1)
    }
}

/// Untrained random-hyperplane encoder with standard normal `W`.
pub fn lsh_random<T: Scalar>(d: usize, q: usize, seed: u64) -> Result<BaseHashModel<T>> {
    let spec = LossSpec::new(crate::loss::LossKind::Dch, q);
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((d, q), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::lit(z)
    });
    BaseHashModel::new(w, Relaxation::Continuous, spec)
}

/// Objective of one minibatch and its gradient with respect to `W`.
///
/// `features` holds the batch rows; `labels` is indexed by batch row.
pub fn batch_objective<T: Scalar>(
    model: &BaseHashModel<T>,
    features: ArrayView2<'_, T>,
    labels: &SimilarityLabels,
    reg_weight: T,
) -> Result<(T, Array2<T>)> {
    let b = features.nrows();
    check_len(b, labels.n())?;
    check_len(model.dim(), features.ncols())?;
    if b < 2 {
        return Err(Error::arg("a batch needs at least two items"));
    }
    let spec = &model.spec;
    let relax = model.relaxation;
    let u = features.dot(&model.w).mapv(|z| relax.squash(z));
    let q = model.q();
    let q_t = T::from_usize(q).unwrap();
    let half = T::lit(0.5);

    let n_pairs = b * (b - 1) / 2;
    let mut n_sim = 0;
    for i in 0..b {
        for j in i + 1..b {
            n_sim += labels.similar(i, j) as usize;
        }
    }
    let weights = PairWeights::<T>::for_pairs(spec.weight_scheme, n_sim, n_pairs - n_sim);
    let pair_norm = T::from_usize(n_pairs).unwrap();

    let mut obj = T::zero();
    let mut du = Array2::<T>::zeros((b, q));
    for i in 0..b {
        let ui = u.row(i);
        for j in i + 1..b {
            let uj = u.row(j);
            let s = labels.similar(i, j);
            let w = weights.get(s);
            let raw = (q_t - ui.dot(&uj)) * half;
            let (d, active) = match relax {
                Relaxation::Continuous => {
                    let c = spec.clamp_distance(raw);
                    (c, c == raw)
                }
                Relaxation::Smoothing => (raw, true),
            };
            obj += loss_unchecked(spec, d, s, w) / pair_norm;
            if active {
                let g = loss_derivative(spec, d, s, w) / pair_norm * -half;
                // d(d_ij)/du_i = -u_j / 2
                du.row_mut(i).scaled_add(g, &uj);
                du.row_mut(j).scaled_add(g, &ui);
            }
        }
    }

    if reg_weight > T::zero() {
        let scale = reg_weight / T::from_usize(b).unwrap();
        for i in 0..b {
            let ui = u.row(i).to_vec();
            let code = HashCode::from_signs(&ui)?;
            obj += scale * regularizer(spec, &code, &ui)?;
            let g = regularizer_grad(spec, &code, &ui)?;
            du.row_mut(i).iter_mut().zip(g).for_each(|(acc, x)| *acc += scale * x);
        }
    }

    let dz = &du * &u.mapv(|x| relax.squash_grad(x));
    let grad = features.t().dot(&dz);
    Ok((obj, grad))
}

/// Trains from a Gaussian initialization seeded by `cfg.seed`.
pub fn train_base<T: Scalar>(
    features: ArrayView2<'_, T>,
    labels: &SimilarityLabels,
    spec: LossSpec<T>,
    cfg: &TrainConfig,
) -> Result<BaseTraining<T>> {
    let init = BaseHashModel::gaussian(features.ncols(), spec, 1.0, cfg.seed)?;
    train_base_from(init, features, labels, cfg)
}

/// Minibatch momentum SGD on [`batch_objective`], starting from `init`.
///
/// Batch order comes from a `ChaCha8` stream seeded by `cfg.seed`; a
/// trailing batch of fewer than two items is dropped.
pub fn train_base_from<T: Scalar>(
    init: BaseHashModel<T>,
    features: ArrayView2<'_, T>,
    labels: &SimilarityLabels,
    cfg: &TrainConfig,
) -> Result<BaseTraining<T>> {
    cfg.validate()?;
    init.spec.validate()?;
    let n = features.nrows();
    check_len(n, labels.n())?;
    check_len(init.dim(), features.ncols())?;
    if n < 2 {
        return Err(Error::DegenerateLabels("need at least two training items".into()));
    }
    let mut any_sim = false;
    let mut any_dis = false;
    'scan: for i in 0..n {
        for j in i + 1..n {
            if labels.similar(i, j) {
                any_sim = true;
            } else {
                any_dis = true;
            }
            if any_sim && any_dis {
                break 'scan;
            }
        }
    }
    if !(any_sim && any_dis) {
        return Err(Error::DegenerateLabels(
            "training labels need both a similar and a dissimilar pair".into(),
        ));
    }

    let lr = T::lit(cfg.learning_rate);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    let reg = T::lit(cfg.reg_weight);
    let mut model = init;
    let mut velocity = Array2::<T>::zeros(model.w.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba5e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = T::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch_features = features.select(Axis(0), chunk);
            let batch_labels = labels.subset(chunk);
            let (obj, mut grad) = batch_objective(&model, batch_features.view(), &batch_labels, reg)?;
            if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite objective or gradient in epoch {epoch}"
                )));
            }
            grad.scaled_add(wd, &model.w);
            velocity.mapv_inplace(|v| v * mu);
            velocity += &grad;
            model.w.scaled_add(-lr, &velocity);
            epoch_sum += obj;
            batches += 1;
        }
        let mean = epoch_sum / T::from_usize(batches.max(1)).unwrap();
        log::debug!("base epoch {epoch}: objective {mean}");
        trace.push(mean);
    }
    Ok(BaseTraining {
        model,
        epoch_objective: trace,
    })
}
