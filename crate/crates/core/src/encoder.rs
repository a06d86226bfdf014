//! Multi-code encoding of database items and the average number of kept codes.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::agent::{build_state, PolicyNetwork};
use crate::basemodel::BaseHashModel;
use crate::dataset::Dataset;
use crate::error::{check_len, Error, Result};
use crate::hamming::HashCode;
use crate::index::ItemId;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncoderConfig {
    /// Crop ratio the regions were cut with; recorded, not used.
    pub sigma: f64,
    /// Keep threshold on the policy's keep-probability.
    pub xi: f64,
    pub max_regions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            sigma: 0.5,
            xi: 0.5,
            max_regions: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) || !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!(
                "sigma and xi must lie in [0, 1], got {} and {}",
                self.sigma, self.xi
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCodeEntry<T> {
    pub item: ItemId,
    /// Kept codes, distinct, whole-item code first.
    pub codes: Vec<HashCode>,
    /// Whole-item code followed by every region code, before thresholding.
    pub candidates: Vec<HashCode>,
    /// Keep-probability of each candidate; the whole-item code is pinned at 1.
    pub probs: Vec<T>,
}

impl<T: Scalar> MultiCodeEntry<T> {
    pub fn t(&self) -> usize {
        self.codes.len()
    }

    /// Distinct candidate codes whose probability reaches `xi`.
    pub fn kept_at(&self, xi: T) -> Vec<HashCode> {
        let mut out: Vec<HashCode> = Vec::with_capacity(self.candidates.len());
        for (c, p) in self.candidates.iter().zip(&self.probs) {
            if *p >= xi && !out.contains(c) {
                out.push(*c);
            }
        }
        out
    }

    /// The whole-item code alone.
    pub fn single(item: ItemId, code: HashCode) -> Self {
        MultiCodeEntry {
            item,
            codes: vec![code],
            candidates: vec![code],
            probs: vec![T::one()],
        }
    }
}

pub fn encode_item<T: Scalar>(
    base: &BaseHashModel<T>,
    policy: &PolicyNetwork<T>,
    item: ItemId,
    f_whole: ArrayView1<'_, T>,
    f_regions: ArrayView2<'_, T>,
    cfg: &EncoderConfig,
) -> Result<MultiCodeEntry<T>> {
    if f_regions.nrows() > cfg.max_regions {
        return Err(Error::arg(format!(
            "item {item} has {} regions, at most {} allowed",
            f_regions.nrows(),
            cfg.max_regions
        )));
    }
    let (_, whole) = base.encode(f_whole)?;
    let mut candidates = vec![whole];
    let mut probs = vec![T::one()];
    if f_regions.nrows() > 0 {
        check_len(f_whole.len(), f_regions.ncols())?;
        let region_codes = base.codes(f_regions)?;
        let mut x = Array2::<T>::zeros((f_regions.nrows(), policy.input_width()));
        for (r, code) in region_codes.iter().enumerate() {
            let h = build_state(f_whole, f_regions.row(r), &whole, code)?;
            check_len(policy.input_width(), h.values.len())?;
            x.row_mut(r).assign(&h.values);
        }
        let p = policy.forward_cache(x.view(), false)?.probs;
        candidates.extend(region_codes);
        probs.extend(p.column(1).iter().copied());
    }
    let mut entry = MultiCodeEntry {
        item,
        codes: Vec::new(),
        candidates,
        probs,
    };
    entry.codes = entry.kept_at(T::lit(cfg.xi));
    Ok(entry)
}

/// Encodes every item of `data` in order; item `i` gets id `first_id + i`.
pub fn encode_corpus<T: Scalar>(
    base: &BaseHashModel<T>,
    policy: &PolicyNetwork<T>,
    data: &Dataset<T>,
    cfg: &EncoderConfig,
    first_id: ItemId,
) -> Result<Vec<MultiCodeEntry<T>>> {
    cfg.validate()?;
    (0..data.len())
        .map(|i| {
            encode_item(
                base,
                policy,
                first_id + i as ItemId,
                data.features.row(i),
                data.regions[i].view(),
                cfg,
            )
        })
        .collect()
}

/// Whole-item codes only, for the single-code baseline.
pub fn encode_single<T: Scalar>(
    base: &BaseHashModel<T>,
    data: &Dataset<T>,
    first_id: ItemId,
) -> Result<Vec<MultiCodeEntry<T>>> {
    Ok(base
        .codes(data.features.view())?
        .into_iter()
        .enumerate()
        .map(|(i, c)| MultiCodeEntry::single(first_id + i as ItemId, c))
        .collect())
}

/// Mean number of distinct codes per item whose keep-probability is at
/// least `xi`, the whole-item code always counting.
pub fn anhc<T: Scalar>(entries: &[MultiCodeEntry<T>], xi: T) -> Result<T> {
    if entries.is_empty() {
        return Err(Error::Empty("encoded entries"));
    }
    let total: usize = entries.iter().map(|e| e.kept_at(xi).len()).sum();
    Ok(T::from_usize(total).unwrap() / T::from_usize(entries.len()).unwrap())
}
