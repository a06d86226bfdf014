//! Pairwise hashing losses on Hamming (or relaxed Hamming) distances.
//!
//! | kind    | `L(d, s)`                                                        | relaxation | regularizer                          |
//! |---------|------------------------------------------------------------------|------------|--------------------------------------|
//! | KSH     | `((Q - 2d)/Q - (2s - 1))^2`                                      | smoothing  | none                                 |
//! | HashNet | `w (ln(1 + e^{a(Q-2d)}) - s a (Q - 2d))`                         | smoothing  | none                                 |
//! | ADSH    | `((Q - 2d) - Q(2s - 1))^2`                                       | continuous | `‖b - u‖²`                           |
//! | DCH     | `w (s ln(d/γ) + ln(1 + γ/d))`                                    | continuous | `ln(1 + Q/(2γ) (1 - cos(b, u)))`     |
//! | MMHH    | `w (s ln(1 + max(0, d - H)) + (1 - s) ln(1 + 1/max(H, d)))`      | continuous | `‖b - u‖²`                           |
//!
//! The DCH row has no `(1 - s)` factor on its second term; it is evaluated as
//! written above. DCH distances are floored at `epsilon` before division.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::hamming::HashCode;
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Ksh,
    HashNet,
    Adsh,
    Dch,
    Mmhh,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Ksh,
        LossKind::HashNet,
        LossKind::Adsh,
        LossKind::Dch,
        LossKind::Mmhh,
    ];

    /// The relaxation each method trains with.
    pub fn relaxation(self) -> Relaxation {
        match self {
            LossKind::Ksh | LossKind::HashNet => Relaxation::Smoothing,
            LossKind::Adsh | LossKind::Dch | LossKind::Mmhh => Relaxation::Continuous,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            LossKind::Ksh => 0,
            LossKind::HashNet => 1,
            LossKind::Adsh => 2,
            LossKind::Dch => 3,
            LossKind::Mmhh => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown loss tag {tag}")))
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Ksh => "ksh",
            LossKind::HashNet => "hashnet",
            LossKind::Adsh => "adsh",
            LossKind::Dch => "dch",
            LossKind::Mmhh => "mmhh",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    Uniform,
    /// `w = |pairs| / |similar pairs|` for similar pairs and
    /// `|pairs| / |dissimilar pairs|` for dissimilar ones.
    ClassBalanced,
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::ClassBalanced => "class_balanced",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "class_balanced" => Ok(WeightScheme::ClassBalanced),
            other => Err(Error::Config(format!("unknown weight scheme {other:?}"))),
        }
    }
}

/// How real-valued outputs stand in for binary codes during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relaxation {
    /// `u = tanh(z)`, strictly inside `(-1, 1)`.
    Smoothing,
    /// `u = z`, unconstrained.
    Continuous,
}

impl Relaxation {
    pub fn squash<T: Scalar>(self, z: T) -> T {
        match self {
            Relaxation::Smoothing => z.tanh(),
            Relaxation::Continuous => z,
        }
    }

    /// `du/dz` given the squashed value `u`.
    pub fn squash_grad<T: Scalar>(self, u: T) -> T {
        match self {
            Relaxation::Smoothing => T::one() - u * u,
            Relaxation::Continuous => T::one(),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Relaxation::Smoothing => 0,
            Relaxation::Continuous => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Relaxation::Smoothing),
            1 => Ok(Relaxation::Continuous),
            t => Err(Error::Format(format!("unknown relaxation tag {t}"))),
        }
    }
}

impl FromStr for Relaxation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoothing" => Ok(Relaxation::Smoothing),
            "continuous" => Ok(Relaxation::Continuous),
            other => Err(Error::Config(format!("unknown relaxation {other:?}"))),
        }
    }
}

impl fmt::Display for Relaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relaxation::Smoothing => "smoothing",
            Relaxation::Continuous => "continuous",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec<T> {
    pub kind: LossKind,
    pub q: usize,
    /// HashNet scale.
    pub alpha: T,
    /// DCH scale.
    pub gamma: T,
    /// MMHH margin.
    pub margin_h: T,
    pub weight_scheme: WeightScheme,
    /// Floor for distances that appear in a denominator or logarithm.
    pub epsilon: T,
}

impl<T: Scalar> LossSpec<T> {
    pub fn new(kind: LossKind, q: usize) -> Self {
        LossSpec {
            kind,
            q,
            alpha: T::lit(0.5),
            gamma: T::lit(2.0),
            margin_h: T::lit(2.0),
            weight_scheme: WeightScheme::Uniform,
            epsilon: T::lit(1e-6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        HashCode::zeros(self.q).map_err(|e| Error::Config(e.to_string()))?;
        for (name, v) in [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("margin_h", self.margin_h),
            ("epsilon", self.epsilon),
        ] {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn q_t(&self) -> T {
        T::from_usize(self.q).expect("code length fits")
    }

    /// Clamps a relaxed distance into the domain the loss accepts.
    pub fn clamp_distance(&self, d: T) -> T {
        d.max(self.epsilon).min(self.q_t())
    }
}

fn bit<T: Scalar>(s: bool) -> T {
    if s {
        T::one()
    } else {
        T::zero()
    }
}

/// `L(d, s)` scaled by `w`. Requires `0 <= d <= Q` and `w > 0`.
pub fn loss_value<T: Scalar>(spec: &LossSpec<T>, d: T, s: bool, w: T) -> Result<T> {
    if !(d >= T::zero() && d <= spec.q_t()) {
        return Err(Error::arg(format!("distance {d} outside [0, {}]", spec.q)));
    }
    if !(w > T::zero() && w.is_finite()) {
        return Err(Error::arg(format!("pair weight must be positive, got {w}")));
    }
    Ok(loss_unchecked(spec, d, s, w))
}

pub(crate) fn loss_unchecked<T: Scalar>(spec: &LossSpec<T>, d: T, s: bool, w: T) -> T {
    let q = spec.q_t();
    let two = T::lit(2.0);
    let sv: T = bit(s);
    match spec.kind {
        LossKind::Ksh => {
            let r = (q - two * d) / q - (two * sv - T::one());
            r * r
        }
        LossKind::HashNet => {
            let x = spec.alpha * (q - two * d);
            w * (softplus(x) - sv * x)
        }
        LossKind::Adsh => {
            let r = (q - two * d) - q * (two * sv - T::one());
            r * r
        }
        LossKind::Dch => {
            let d = d.max(spec.epsilon);
            let g = spec.gamma;
            w * (sv * (d / g).ln() + (g / d).ln_1p())
        }
        LossKind::Mmhh => {
            let h = spec.margin_h;
            let sim = (d - h).max(T::zero()).ln_1p();
            let dis = (T::one() / h.max(d)).ln_1p();
            w * (sv * sim + (T::one() - sv) * dis)
        }
    }
}

/// `dL/dd` at `d`, matching [`loss_value`] (including the DCH floor).
pub fn loss_derivative<T: Scalar>(spec: &LossSpec<T>, d: T, s: bool, w: T) -> T {
    let q = spec.q_t();
    let two = T::lit(2.0);
    let sv: T = bit(s);
    match spec.kind {
        LossKind::Ksh => {
            let r = (q - two * d) / q - (two * sv - T::one());
            two * r * (-two / q)
        }
        LossKind::HashNet => {
            let x = spec.alpha * (q - two * d);
            w * (sigmoid(x) - sv) * (-two * spec.alpha)
        }
        LossKind::Adsh => {
            let r = (q - two * d) - q * (two * sv - T::one());
            two * r * (-two)
        }
        LossKind::Dch => {
            if d < spec.epsilon {
                return T::zero();
            }
            let g = spec.gamma;
            w * (sv / d + T::one() / (d + g) - T::one() / d)
        }
        LossKind::Mmhh => {
            let h = spec.margin_h;
            if d <= h {
                T::zero()
            } else {
                w * (sv / (T::one() + d - h) - (T::one() - sv) / (d * (d + T::one())))
            }
        }
    }
}

/// Multi-hot label rows; two items are similar when they share a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityLabels {
    n: usize,
    c: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl SimilarityLabels {
    pub fn new(n: usize, c: usize) -> Self {
        let words_per_row = c.div_ceil(64).max(1);
        SimilarityLabels {
            n,
            c,
            words_per_row,
            words: vec![0; n * words_per_row],
        }
    }

    pub fn from_rows<R: AsRef<[usize]>>(c: usize, rows: &[R]) -> Result<Self> {
        let mut labels = Self::new(rows.len(), c);
        for (i, row) in rows.iter().enumerate() {
            for &l in row.as_ref() {
                labels.set(i, l)?;
            }
        }
        Ok(labels)
    }

    pub fn set(&mut self, item: usize, label: usize) -> Result<()> {
        if item >= self.n || label >= self.c {
            return Err(Error::arg(format!(
                "label ({item}, {label}) outside {}x{}",
                self.n, self.c
            )));
        }
        self.words[item * self.words_per_row + label / 64] |= 1 << (label % 64);
        Ok(())
    }

    pub fn has(&self, item: usize, label: usize) -> bool {
        self.words[item * self.words_per_row + label / 64] >> (label % 64) & 1 == 1
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_labels(&self) -> usize {
        self.c
    }

    pub fn labels_of(&self, item: usize) -> Vec<usize> {
        (0..self.c).filter(|&l| self.has(item, l)).collect()
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// `s(i, j)`. Items with no labels are similar only to themselves.
    pub fn similar(&self, i: usize, j: usize) -> bool {
        i == j || self.row(i).iter().zip(self.row(j)).any(|(a, b)| a & b != 0)
    }

    /// Rows restricted to `items`, in that order.
    pub fn subset(&self, items: &[usize]) -> Self {
        let mut out = Self::new(items.len(), self.c);
        for (dst, &src) in items.iter().enumerate() {
            out.words[dst * self.words_per_row..(dst + 1) * self.words_per_row].copy_from_slice(self.row(src));
        }
        out
    }
}

/// Weights `w_ij` for a fixed pair set.
#[derive(Clone, Copy, Debug)]
pub struct PairWeights<T> {
    pub similar: T,
    pub dissimilar: T,
}

impl<T: Scalar> PairWeights<T> {
    pub fn for_pairs(scheme: WeightScheme, n_similar: usize, n_dissimilar: usize) -> Self {
        match scheme {
            WeightScheme::Uniform => PairWeights {
                similar: T::one(),
                dissimilar: T::one(),
            },
            WeightScheme::ClassBalanced => {
                let total = T::from_usize(n_similar + n_dissimilar).unwrap();
                let ratio = |n: usize| {
                    if n == 0 {
                        T::one()
                    } else {
                        total / T::from_usize(n).unwrap()
                    }
                };
                PairWeights {
                    similar: ratio(n_similar),
                    dissimilar: ratio(n_dissimilar),
                }
            }
        }
    }

    pub fn get(&self, s: bool) -> T {
        if s {
            self.similar
        } else {
            self.dissimilar
        }
    }
}

/// `sum over pairs of w_ij L(d_ij, s_ij)`, accumulated in pair order.
pub fn pairwise_objective<T, F>(
    spec: &LossSpec<T>,
    distance: F,
    labels: &SimilarityLabels,
    pairs: &[(usize, usize)],
) -> Result<T>
where
    T: Scalar,
    F: Fn(usize, usize) -> T,
{
    if pairs.is_empty() {
        return Err(Error::Empty("pair set"));
    }
    let mut n_sim = 0;
    for &(i, j) in pairs {
        if i >= labels.n() || j >= labels.n() {
            return Err(Error::arg(format!("pair ({i}, {j}) out of range")));
        }
        n_sim += labels.similar(i, j) as usize;
    }
    let weights = PairWeights::for_pairs(spec.weight_scheme, n_sim, pairs.len() - n_sim);
    let mut total = T::zero();
    for &(i, j) in pairs {
        let s = labels.similar(i, j);
        total += loss_value(spec, distance(i, j), s, weights.get(s))?;
    }
    Ok(total)
}

/// `(Q - u_i . u_j) / 2` on relaxed codes. Not clamped; see
/// [`LossSpec::clamp_distance`].
pub fn surrogate_distance<T: Scalar>(u_i: &[T], u_j: &[T]) -> Result<T> {
    check_len(u_i.len(), u_j.len())?;
    let dot: T = u_i.iter().zip(u_j).map(|(a, b)| *a * *b).sum();
    Ok((T::from_usize(u_i.len()).unwrap() - dot) / T::lit(2.0))
}

/// Quantization penalty between a binary code and its relaxed output.
pub fn regularizer<T: Scalar>(spec: &LossSpec<T>, b: &HashCode, u: &[T]) -> Result<T> {
    check_len(b.len(), u.len())?;
    let bv: Vec<T> = b.to_pm1();
    match spec.kind {
        LossKind::Ksh | LossKind::HashNet => Ok(T::zero()),
        LossKind::Adsh | LossKind::Mmhh => Ok(bv.iter().zip(u).map(|(x, y)| (*x - *y) * (*x - *y)).sum()),
        LossKind::Dch => {
            let norm_u = u.iter().map(|x| *x * *x).sum::<T>().sqrt();
            if norm_u == T::zero() {
                return Err(Error::Numeric("cosine regularizer needs a nonzero u".into()));
            }
            let cos = cosine(&bv, u, norm_u);
            Ok((spec.q_t() / (T::lit(2.0) * spec.gamma) * (T::one() - cos)).ln_1p())
        }
    }
}

fn cosine<T: Scalar>(b: &[T], u: &[T], norm_u: T) -> T {
    let dot: T = b.iter().zip(u).map(|(x, y)| *x * *y).sum();
    let norm_b = T::from_usize(b.len()).unwrap().sqrt();
    dot / (norm_b * norm_u)
}

/// Gradient of [`regularizer`] with respect to `u`, holding `b` fixed.
pub fn regularizer_grad<T: Scalar>(spec: &LossSpec<T>, b: &HashCode, u: &[T]) -> Result<Vec<T>> {
    check_len(b.len(), u.len())?;
    let bv: Vec<T> = b.to_pm1();
    match spec.kind {
        LossKind::Ksh | LossKind::HashNet => Ok(vec![T::zero(); u.len()]),
        LossKind::Adsh | LossKind::Mmhh => Ok(bv.iter().zip(u).map(|(x, y)| T::lit(2.0) * (*y - *x)).collect()),
        LossKind::Dch => {
            let norm_u2 = u.iter().map(|x| *x * *x).sum::<T>();
            let norm_u = norm_u2.sqrt();
            if norm_u == T::zero() {
                return Err(Error::Numeric("cosine regularizer needs a nonzero u".into()));
            }
            let norm_b = T::from_usize(b.len()).unwrap().sqrt();
            let dot: T = bv.iter().zip(u).map(|(x, y)| *x * *y).sum();
            let cos = dot / (norm_b * norm_u);
            let scale = spec.q_t() / (T::lit(2.0) * spec.gamma);
            let outer = -scale / (T::one() + scale * (T::one() - cos));
            Ok(bv
                .iter()
                .zip(u)
                .map(|(x, y)| {
                    let dcos = *x / (norm_b * norm_u) - dot * *y / (norm_b * norm_u * norm_u2);
                    outer * dcos
                })
                .collect())
        }
    }
}
