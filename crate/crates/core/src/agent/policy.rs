//! Five-layer keep/discard policy network.
//!
//! Each of the four hidden layers is `linear -> standardize -> relu`; the
//! output layer is `linear -> softmax` over `[discard, keep]`.
//! Standardization uses batch statistics in training mode and the running
//! statistics otherwise. It carries no affine parameters of its own.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

use super::{Action, StateVector};

pub const HIDDEN_LAYERS: usize = 4;
pub const NORM_EPS: f64 = 1e-5;
/// Weight on the previous running statistic at each update.
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `in x out`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork<T> {
    pub layers: Vec<Dense<T>>,
    pub stats: Vec<RunningStats<T>>,
    pub training: bool,
}

/// Gradient with the same shapes as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrad<T> {
    pub w: Vec<Array2<T>>,
    pub b: Vec<Array1<T>>,
}

impl<T: Scalar> PolicyGrad<T> {
    pub fn zeros_like(net: &PolicyNetwork<T>) -> Self {
        PolicyGrad {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn scale(&mut self, c: T) {
        self.w.iter_mut().for_each(|w| w.mapv_inplace(|x| x * c));
        self.b.iter_mut().for_each(|b| b.mapv_inplace(|x| x * c));
    }
}

struct HiddenCache<T> {
    input: Array2<T>,
    normed: Array2<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
}

pub(crate) struct ForwardCache<T> {
    hidden: Vec<HiddenCache<T>>,
    last_input: Array2<T>,
    pub(crate) probs: Array2<T>,
    batch_stats: bool,
}

impl<T: Scalar> PolicyNetwork<T> {
    /// He-initialized weights, zero biases, unit running variance.
    pub fn new(input: usize, hidden: [usize; HIDDEN_LAYERS], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(input, hidden, |fan_in| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z * (2.0 / fan_in as f64).sqrt())
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(input: usize, hidden: [usize; HIDDEN_LAYERS]) -> Result<Self> {
        Self::build(input, hidden, |_| T::zero())
    }

    fn build(input: usize, hidden: [usize; HIDDEN_LAYERS], mut init: impl FnMut(usize) -> T) -> Result<Self> {
        if input == 0 || hidden.contains(&0) {
            return Err(Error::dim("policy layer widths must be positive"));
        }
        let mut dims = vec![input];
        dims.extend(hidden);
        dims.push(2);
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                w: Array2::from_shape_simple_fn((w[0], w[1]), || init(w[0])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        let stats = hidden
            .iter()
            .map(|&h| RunningStats {
                mean: Array1::zeros(h),
                var: Array1::ones(h),
            })
            .collect();
        Ok(PolicyNetwork {
            layers,
            stats,
            training: false,
        })
    }

    /// Rebuilds a network from stored parts, checking shapes.
    pub fn from_parts(layers: Vec<Dense<T>>, stats: Vec<RunningStats<T>>) -> Result<Self> {
        if layers.len() != HIDDEN_LAYERS + 1 || stats.len() != HIDDEN_LAYERS {
            return Err(Error::Format(format!(
                "policy needs {} layers, found {}",
                HIDDEN_LAYERS + 1,
                layers.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            check_len(l.w.ncols(), l.b.len())?;
            if i + 1 < layers.len() {
                check_len(l.w.ncols(), layers[i + 1].w.nrows())?;
                check_len(l.w.ncols(), stats[i].mean.len())?;
                check_len(l.w.ncols(), stats[i].var.len())?;
            }
        }
        check_len(2, layers[HIDDEN_LAYERS].w.ncols())?;
        Ok(PolicyNetwork {
            layers,
            stats,
            training: false,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.nrows()
    }

    /// Widths from input to output, `HIDDEN_LAYERS + 2` entries.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_width()];
        d.extend(self.layers.iter().map(|l| l.w.ncols()));
        d
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub(crate) fn forward_cache(&self, x: ArrayView2<'_, T>, batch_stats: bool) -> Result<ForwardCache<T>> {
        check_len(self.input_width(), x.ncols())?;
        let eps = T::lit(NORM_EPS);
        let mut act = x.to_owned();
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        for (layer, stats) in self.layers.iter().zip(&self.stats) {
            let z = act.dot(&layer.w) + &layer.b;
            let (mean, var) = if batch_stats {
                let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                let var = z.var_axis(Axis(0), T::zero());
                (mean, var)
            } else {
                (stats.mean.clone(), stats.var.clone())
            };
            let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
            let normed = (&z - &mean) * &inv_std;
            let next = normed.mapv(|v| v.max(T::zero()));
            hidden.push(HiddenCache {
                input: act,
                normed,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
            act = next;
        }
        let out = &self.layers[HIDDEN_LAYERS];
        let logits = act.dot(&out.w) + &out.b;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite policy logits".into()));
        }
        let mut probs = logits;
        for mut row in probs.rows_mut() {
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Ok(ForwardCache {
            hidden,
            last_input: act,
            probs,
            batch_stats,
        })
    }

    /// Probabilities for a batch of states stacked as rows.
    pub fn forward_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let batch_stats = self.training && x.nrows() > 1;
        Ok(self.forward_cache(x, batch_stats)?.probs)
    }

    /// Gradient of `sum_i coeff_i * ln pi(a_i | x_i)` with respect to every
    /// weight and bias, back-propagated through the cached forward pass.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, actions: &[Action], coeffs: &[T]) -> PolicyGrad<T> {
        let n = cache.probs.nrows();
        let mut grad = PolicyGrad::zeros_like(self);
        let mut dlogits = cache.probs.mapv(|p| -p);
        for i in 0..n {
            dlogits[[i, actions[i].index()]] += T::one();
            let c = coeffs[i];
            dlogits.row_mut(i).mapv_inplace(|v| v * c);
        }

        let out = &self.layers[HIDDEN_LAYERS];
        grad.w[HIDDEN_LAYERS] = cache.last_input.t().dot(&dlogits);
        grad.b[HIDDEN_LAYERS] = dlogits.sum_axis(Axis(0));
        let mut dact = dlogits.dot(&out.w.t());

        let n_t = T::from_usize(n).unwrap();
        for l in (0..HIDDEN_LAYERS).rev() {
            let hc = &cache.hidden[l];
            // relu
            Zip::from(&mut dact).and(&hc.normed).for_each(|d, &x| {
                if x <= T::zero() {
                    *d = T::zero();
                }
            });
            let dz = if cache.batch_stats {
                let sum_d = dact.sum_axis(Axis(0));
                let sum_dx = (&dact * &hc.normed).sum_axis(Axis(0));
                let mut dz = &dact * n_t - &sum_d - &(&hc.normed * &sum_dx);
                dz *= &(&hc.inv_std / n_t);
                dz
            } else {
                &dact * &hc.inv_std
            };
            grad.w[l] = hc.input.t().dot(&dz);
            grad.b[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                dact = dz.dot(&self.layers[l].w.t());
            }
        }
        grad
    }

    /// Folds the batch statistics of `cache` into the running statistics.
    pub(crate) fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        if !cache.batch_stats {
            return;
        }
        let m = T::lit(NORM_MOMENTUM);
        let one_m = T::one() - m;
        for (stats, hc) in self.stats.iter_mut().zip(&cache.hidden) {
            Zip::from(&mut stats.mean)
                .and(&hc.batch_mean)
                .for_each(|r, &b| *r = m * *r + one_m * b);
            Zip::from(&mut stats.var)
                .and(&hc.batch_var)
                .for_each(|r, &b| *r = m * *r + one_m * b);
        }
    }

    /// `theta += step * g` for every parameter.
    pub fn apply(&mut self, g: &PolicyGrad<T>, step: T) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(g.w.iter().zip(&g.b)) {
            layer.w.scaled_add(step, gw);
            layer.b.scaled_add(step, gb);
        }
    }

    /// Mutable access to parameter `k` in [`PolicyGrad::flatten`] order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut T {
        for layer in &mut self.layers {
            if k < layer.w.len() {
                return layer.w.iter_mut().nth(k).expect("in range");
            }
            k -= layer.w.len();
            if k < layer.b.len() {
                return &mut layer.b[k];
            }
            k -= layer.b.len();
        }
        panic!("parameter index out of range");
    }
}

/// `(p_discard, p_keep)` for one state, always using running statistics.
pub fn policy_forward<T: Scalar>(net: &PolicyNetwork<T>, h: &StateVector<T>) -> Result<(T, T)> {
    let x = h.values.view().insert_axis(Axis(0));
    let cache = net.forward_cache(x, false)?;
    Ok((cache.probs[[0, 0]], cache.probs[[0, 1]]))
}

/// Draws an action from `(p_discard, p_keep)`; returns it with its log-probability.
pub fn sample_from<T: Scalar, R: Rng + ?Sized>(probs: (T, T), rng: &mut R) -> (Action, T) {
    let u: f64 = rng.gen();
    if u < probs.1.to_f64_lossy() {
        (Action::Keep, probs.1.ln())
    } else {
        (Action::Discard, probs.0.ln())
    }
}

pub fn sample_action<T: Scalar, R: Rng + ?Sized>(
    net: &PolicyNetwork<T>,
    h: &StateVector<T>,
    rng: &mut R,
) -> Result<(Action, T)> {
    Ok(sample_from(policy_forward(net, h)?, rng))
}

/// Ascent direction of `(1/N) sum_i ln pi(a_i | h_i) R_i`.
///
/// Uses batch statistics when the network is in training mode and the batch
/// has more than one state, running statistics otherwise.
pub fn reinforce_gradient<T: Scalar>(
    net: &PolicyNetwork<T>,
    batch: &[(StateVector<T>, Action, T)],
) -> Result<PolicyGrad<T>> {
    if batch.is_empty() {
        return Err(Error::Empty("REINFORCE batch"));
    }
    if let Some((_, _, r)) = batch.iter().find(|(_, _, r)| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reward {r}")));
    }
    let width = net.input_width();
    let mut x = Array2::<T>::zeros((batch.len(), width));
    for (mut row, (h, _, _)) in x.rows_mut().into_iter().zip(batch) {
        check_len(width, h.values.len())?;
        row.assign(&h.values);
    }
    let batch_stats = net.training && batch.len() > 1;
    let cache = net.forward_cache(x.view(), batch_stats)?;
    let n = T::from_usize(batch.len()).unwrap();
    let actions: Vec<Action> = batch.iter().map(|b| b.1).collect();
    let coeffs: Vec<T> = batch.iter().map(|b| b.2 / n).collect();
    Ok(net.backward(&cache, &actions, &coeffs))
}
