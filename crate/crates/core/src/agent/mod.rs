//! Keep/discard agent for region codes.
//!
//! The agent sees a whole item and one of its regions, both as features and
//! as codes, and decides whether the region code is worth storing as an
//! extra entry in the index. Keeping earns the drop in pairwise loss that the
//! extra code buys against the peers; discarding earns nothing.

mod policy;

pub use policy::{
    policy_forward, reinforce_gradient, sample_action, sample_from, Dense, PolicyGrad, PolicyNetwork, RunningStats,
    HIDDEN_LAYERS, NORM_EPS, NORM_MOMENTUM,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basemodel::{BaseHashModel, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::hamming::{distance_unchecked, HashCode};
use crate::loss::{loss_unchecked, LossSpec, SimilarityLabels};
use crate::scalar::Scalar;

pub const DEFAULT_HIDDEN: [usize; HIDDEN_LAYERS] = [512, 256, 128, 64];

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector<T> {
    pub values: Array1<T>,
}

/// `[f; f*; b; b*]` with the codes written as ±1.
pub fn build_state<T: Scalar>(
    f_whole: ArrayView1<'_, T>,
    f_region: ArrayView1<'_, T>,
    b: &HashCode,
    b_region: &HashCode,
) -> Result<StateVector<T>> {
    check_len(f_whole.len(), f_region.len())?;
    check_len(b.len(), b_region.len())?;
    let mut values = Vec::with_capacity(2 * f_whole.len() + 2 * b.len());
    values.extend(f_whole.iter().copied());
    values.extend(f_region.iter().copied());
    values.extend(b.to_pm1::<T>());
    values.extend(b_region.to_pm1::<T>());
    Ok(StateVector {
        values: Array1::from(values),
    })
}

/// Index 0 discards the region code, index 1 keeps it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Discard,
    Keep,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Discard => 0,
            Action::Keep => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairScope {
    /// Every training item is a peer.
    Full,
    /// Peers are the other members of the current batch.
    Sampled,
}

impl fmt::Display for PairScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairScope::Full => "full",
            PairScope::Sampled => "sampled",
        })
    }
}

impl FromStr for PairScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(PairScope::Full),
            "sampled" => Ok(PairScope::Sampled),
            _ => Err(Error::Config(format!("unknown pair scope {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig<T> {
    pub pair_scope: PairScope,
    /// Upper bound on peers per item under [`PairScope::Sampled`].
    pub sample_size: usize,
    pub spec: LossSpec<T>,
}

impl<T: Scalar> RewardConfig<T> {
    pub fn sampled(spec: LossSpec<T>, sample_size: usize) -> Self {
        RewardConfig {
            pair_scope: PairScope::Sampled,
            sample_size,
            spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.pair_scope == PairScope::Sampled && self.sample_size == 0 {
            return Err(Error::Config("sampled reward needs a sample size of at least 1".into()));
        }
        Ok(())
    }
}

/// Network shape and variance-reduction switch for [`train_agent`].
#[derive(Clone, Debug, PartialEq)]
pub struct AgentOptions {
    pub hidden: [usize; HIDDEN_LAYERS],
    /// Subtract a moving average of the batch reward before the update.
    pub baseline: bool,
}

impl Default for AgentOptions {
    fn default() -> Self {
        AgentOptions {
            hidden: DEFAULT_HIDDEN,
            baseline: false,
        }
    }
}

fn keep_reward<'a, T: Scalar>(
    spec: &LossSpec<T>,
    b: &HashCode,
    b_star: &HashCode,
    peers: impl Iterator<Item = (&'a HashCode, bool)>,
) -> (T, usize) {
    let mut total = T::zero();
    let mut count = 0;
    for (bj, s) in peers {
        count += 1;
        let d = distance_unchecked(b, bj);
        let d_star = d.min(distance_unchecked(b_star, bj));
        if d_star == d {
            continue;
        }
        let lt = |x: u32| loss_unchecked(spec, T::from_u32(x).unwrap(), s, T::one());
        total += lt(d) - lt(d_star);
    }
    (total, count)
}

/// Reward for acting on region code `b_star` of an item whose whole code is `b`.
///
/// Keeping returns the summed loss reduction over `peers`; an empty peer list
/// yields 0 with a warning.
pub fn reward<T: Scalar>(
    a: Action,
    b: &HashCode,
    b_star: &HashCode,
    peers: &[(HashCode, bool)],
    spec: &LossSpec<T>,
) -> Result<T> {
    if a == Action::Discard {
        return Ok(T::zero());
    }
    check_len(spec.q, b.len())?;
    check_len(spec.q, b_star.len())?;
    for (p, _) in peers {
        check_len(spec.q, p.len())?;
    }
    if peers.is_empty() {
        log::warn!("keep reward evaluated with no peers");
        return Ok(T::zero());
    }
    Ok(keep_reward(spec, b, b_star, peers.iter().map(|(c, s)| (c, *s))).0)
}

#[derive(Clone, Debug)]
pub struct AgentTraining<T> {
    pub policy: PolicyNetwork<T>,
    /// Mean reward of the sampled actions at each iteration.
    pub mean_reward: Vec<T>,
    /// Fraction of Keep actions at each iteration.
    pub keep_rate: Vec<T>,
}

/// Whole and region codes of every item under a fixed base model.
pub struct CodeTable {
    pub whole: Vec<HashCode>,
    pub regions: Vec<Vec<HashCode>>,
}

impl CodeTable {
    pub fn build<T: Scalar>(data: &Dataset<T>, base: &BaseHashModel<T>) -> Result<Self> {
        let whole = base.codes(data.features.view())?;
        let regions = data
            .regions
            .iter()
            .map(|r| {
                if r.nrows() == 0 {
                    Ok(Vec::new())
                } else {
                    base.codes(r.view())
                }
            })
            .collect::<Result<_>>()?;
        Ok(CodeTable { whole, regions })
    }
}

/// Policy-gradient training of a fresh policy against a fixed base model.
///
/// `cfg.epochs` is the number of iterations; `cfg.seed` seeds both the
/// network initialization and the sampling stream. `cfg.reg_weight` is unused.
pub fn train_agent<T: Scalar>(
    data: &Dataset<T>,
    base: &BaseHashModel<T>,
    cfg: &TrainConfig,
    rcfg: &RewardConfig<T>,
    opts: &AgentOptions,
) -> Result<AgentTraining<T>> {
    cfg.validate()?;
    rcfg.validate()?;
    check_len(base.dim(), data.dim())?;
    check_len(base.q(), rcfg.spec.q)?;
    let n = data.len();
    if n < 2 {
        return Err(Error::Empty("agent training set"));
    }
    if let Some(i) = data.regions.iter().position(|r| r.nrows() == 0) {
        return Err(Error::arg(format!("item {i} has no region features")));
    }
    let codes = CodeTable::build(data, base)?;
    let d = data.dim();
    let q = base.q();
    let mut net = PolicyNetwork::<T>::new(2 * d + 2 * q, opts.hidden, cfg.seed)?;
    net.training = true;
    let mut velocity = PolicyGrad::zeros_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa6e7_5eed);
    let bsz = cfg.batch_size.min(n);
    let lr = T::lit(cfg.learning_rate);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    let bsz_t = T::from_usize(bsz).unwrap();
    let mut baseline = T::zero();
    let mut mean_reward = Vec::with_capacity(cfg.epochs);
    let mut keep_rate = Vec::with_capacity(cfg.epochs);

    for it in 0..cfg.epochs {
        let batch = sample(&mut rng, n, bsz).into_vec();
        let regions: Vec<usize> = batch
            .iter()
            .map(|&i| rng.gen_range(0..data.regions[i].nrows()))
            .collect();
        let mut x = Array2::<T>::zeros((bsz, net.input_width()));
        for (row, (&i, &r)) in batch.iter().zip(&regions).enumerate() {
            let h = build_state(
                data.features.row(i),
                data.region(i, r),
                &codes.whole[i],
                &codes.regions[i][r],
            )?;
            x.row_mut(row).assign(&h.values);
        }
        let cache = net.forward_cache(x.view(), true)?;
        let actions: Vec<Action> = (0..bsz)
            .map(|row| sample_from((cache.probs[[row, 0]], cache.probs[[row, 1]]), &mut rng).0)
            .collect();

        let rewards = batch_rewards(&codes, &data.labels, &batch, &regions, &actions, rcfg);
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::Numeric(format!("non-finite reward {r} at iteration {it}")));
        }
        let mean_r = rewards.iter().copied().sum::<T>() / bsz_t;
        let coeffs: Vec<T> = rewards
            .iter()
            .map(|&r| {
                if opts.baseline {
                    (r - baseline) / bsz_t
                } else {
                    r / bsz_t
                }
            })
            .collect();
        if opts.baseline {
            baseline = if it == 0 {
                mean_r
            } else {
                T::lit(0.9) * baseline + T::lit(0.1) * mean_r
            };
        }

        let grad = net.backward(&cache, &actions, &coeffs);
        net.update_running_stats(&cache);
        for l in 0..net.layers.len() {
            let layer = &mut net.layers[l];
            let vw = &mut velocity.w[l];
            ndarray::Zip::from(&mut *vw)
                .and(&grad.w[l])
                .and(&layer.w)
                .for_each(|v, &g, &w| *v = mu * *v - g + wd * w);
            layer.w.scaled_add(-lr, vw);
            let vb = &mut velocity.b[l];
            ndarray::Zip::from(&mut *vb)
                .and(&grad.b[l])
                .and(&layer.b)
                .for_each(|v, &g, &b| *v = mu * *v - g + wd * b);
            layer.b.scaled_add(-lr, vb);
        }
        if net.layers.iter().any(|l| l.w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("policy weights diverged at iteration {it}")));
        }

        let keeps = actions.iter().filter(|a| **a == Action::Keep).count();
        let kr = T::from_usize(keeps).unwrap() / bsz_t;
        log::debug!("agent iteration {it}: mean reward {mean_r}, keep rate {kr}");
        mean_reward.push(mean_r);
        keep_rate.push(kr);
    }
    net.training = false;
    Ok(AgentTraining {
        policy: net,
        mean_reward,
        keep_rate,
    })
}

fn batch_rewards<T: Scalar>(
    codes: &CodeTable,
    labels: &SimilarityLabels,
    batch: &[usize],
    regions: &[usize],
    actions: &[Action],
    rcfg: &RewardConfig<T>,
) -> Vec<T> {
    let spec = &rcfg.spec;
    batch
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            if actions[pos] == Action::Discard {
                return T::zero();
            }
            let b = &codes.whole[i];
            let bs = &codes.regions[i][regions[pos]];
            let (r, count) = match rcfg.pair_scope {
                PairScope::Sampled => keep_reward(
                    spec,
                    b,
                    bs,
                    batch
                        .iter()
                        .filter(|&&j| j != i)
                        .take(rcfg.sample_size)
                        .map(|&j| (&codes.whole[j], labels.similar(i, j))),
                ),
                PairScope::Full => keep_reward(
                    spec,
                    b,
                    bs,
                    (0..codes.whole.len())
                        .filter(|&j| j != i)
                        .map(|j| (&codes.whole[j], labels.similar(i, j))),
                ),
            };
            if count == 0 {
                log::warn!("item {i}: keep reward evaluated with no peers");
            }
            r
        })
        .collect()
}

/// Keep-probability for region `r` of item `i` under a trained policy.
pub fn keep_probability<T: Scalar>(
    net: &PolicyNetwork<T>,
    f_whole: ArrayView1<'_, T>,
    f_region: ArrayView1<'_, T>,
    b: &HashCode,
    b_region: &HashCode,
) -> Result<T> {
    let h = build_state(f_whole, f_region, b, b_region)?;
    Ok(policy_forward(net, &h)?.1)
}
