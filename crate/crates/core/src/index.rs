//! Multi-code bucket index and radius-expansion bucket search.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{check_len, Error, Result};
use crate::hamming::{asymmetric_unchecked, binomial, enumerate_at_radius, HashCode};

pub type ItemId = u64;

/// Hash table from code to the items stored under it.
///
/// An item may own several codes and then sits in several buckets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketIndex {
    q: usize,
    buckets: HashMap<HashCode, Vec<ItemId>>,
    entries: BTreeMap<ItemId, Vec<HashCode>>,
}

/// Outcome of one bucket search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchResult {
    /// Items in discovery order.
    pub items: Vec<ItemId>,
    pub final_radius: usize,
    /// Every enumerated key that was looked up, empty or not.
    pub buckets_probed: u64,
    pub buckets_nonempty: u64,
}

#[derive(Clone, Copy, Debug)]
struct Checkpoint {
    found: usize,
    probed: u64,
    nonempty: u64,
    radius: usize,
}

/// Full discovery record of a search run up to some `k_max`; answers every
/// `k <= k_max` exactly as a separate [`BucketIndex::bucket_search`] would.
#[derive(Clone, Debug)]
pub struct SearchTrace {
    items: Vec<ItemId>,
    checkpoints: Vec<Checkpoint>,
    end: Checkpoint,
}

impl SearchTrace {
    pub fn cut(&self, k: usize) -> SearchResult {
        let stop = self
            .checkpoints
            .iter()
            .find(|c| c.found >= k)
            .copied()
            .unwrap_or(self.end);
        SearchResult {
            items: self.items[..k.min(stop.found)].to_vec(),
            final_radius: stop.radius,
            buckets_probed: stop.probed,
            buckets_nonempty: stop.nonempty,
        }
    }
}

impl BucketIndex {
    /// Builds an index over `(id, codes)` pairs. Repeated codes within one
    /// item collapse; every code must have length `q`.
    pub fn build<I, C>(q: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ItemId, C)>,
        C: IntoIterator<Item = HashCode>,
    {
        HashCode::zeros(q)?;
        let mut index = BucketIndex {
            q,
            buckets: HashMap::new(),
            entries: BTreeMap::new(),
        };
        for (id, codes) in entries {
            if index.entries.contains_key(&id) {
                return Err(Error::DuplicateItem(id));
            }
            let mut own: Vec<HashCode> = Vec::new();
            for c in codes {
                check_len(q, c.len())?;
                if !own.contains(&c) {
                    own.push(c);
                }
            }
            if own.is_empty() {
                return Err(Error::arg(format!("item {id} has no codes")));
            }
            for c in &own {
                index.buckets.entry(*c).or_default().push(id);
            }
            index.entries.insert(id, own);
        }
        for list in index.buckets.values_mut() {
            list.sort_unstable();
        }
        Ok(index)
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, code: &HashCode) -> &[ItemId] {
        self.buckets.get(code).map_or(&[], Vec::as_slice)
    }

    pub fn codes(&self, id: ItemId) -> Option<&[HashCode]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Entries in ascending id order.
    pub fn entries(&self) -> impl Iterator<Item = (ItemId, &[HashCode])> + '_ {
        self.entries.iter().map(|(id, c)| (*id, c.as_slice()))
    }

    fn check_query(&self, query: &HashCode, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::arg("k must be positive"));
        }
        check_len(self.q, query.len())
    }

    /// Probes buckets at radius 0, 1, 2, ... around `query` until at least
    /// `k` distinct items are found, the radius budget `r_max` is spent, or
    /// every item has been seen. The bucket in progress is always finished
    /// before the result is cut to `k` items.
    pub fn bucket_search(&self, query: &HashCode, k: usize, r_max: usize) -> Result<SearchResult> {
        Ok(self.search_trace(query, k, r_max)?.cut(k))
    }

    pub fn search_trace(&self, query: &HashCode, k_max: usize, r_max: usize) -> Result<SearchTrace> {
        self.check_query(query, k_max)?;
        if r_max > self.q {
            return Err(Error::arg(format!("r_max {r_max} exceeds code length {}", self.q)));
        }
        let mut seen: HashSet<ItemId> = HashSet::new();
        let mut items = Vec::new();
        let mut checkpoints = Vec::new();
        let mut probed = 0u64;
        let mut nonempty = 0u64;
        let n = self.entries.len();

        for r in 0..=r_max {
            for key in enumerate_at_radius(query, r)? {
                probed += 1;
                let Some(list) = self.buckets.get(&key) else {
                    continue;
                };
                nonempty += 1;
                for &id in list {
                    if seen.insert(id) {
                        items.push(id);
                    }
                }
                let here = Checkpoint {
                    found: items.len(),
                    probed,
                    nonempty,
                    radius: r,
                };
                checkpoints.push(here);
                if items.len() >= k_max || items.len() == n {
                    return Ok(SearchTrace {
                        items,
                        checkpoints,
                        end: here,
                    });
                }
            }
            if n == 0 {
                break;
            }
        }
        let end = Checkpoint {
            found: items.len(),
            probed,
            nonempty,
            radius: if n == 0 { 0 } else { r_max },
        };
        Ok(SearchTrace {
            items,
            checkpoints,
            end,
        })
    }

    /// Linear-scan ranking by asymmetric distance, ties broken by ascending id.
    pub fn exact_topk(&self, query: &HashCode, k: usize) -> Result<Vec<(ItemId, u32)>> {
        self.check_query(query, k)?;
        let mut ranked = self.ranking(query);
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Every item with its asymmetric distance, sorted by `(distance, id)`.
    pub fn ranking(&self, query: &HashCode) -> Vec<(ItemId, u32)> {
        let mut ranked: Vec<(ItemId, u32)> = self
            .entries
            .iter()
            .map(|(id, codes)| (*id, asymmetric_unchecked(codes, query)))
            .collect();
        ranked.sort_unstable_by_key(|&(id, d)| (d, id));
        ranked
    }
}

/// Buckets enumerated when every radius up to `r` is fully probed:
/// `sum_{i <= r} C(q_len, i)`.
pub fn visited_bucket_count(q_len: usize, r: usize) -> Result<u128> {
    if r > q_len {
        return Err(Error::arg(format!("radius {r} exceeds code length {q_len}")));
    }
    Ok((0..=r).map(|i| binomial(q_len, i)).fold(0u128, u128::saturating_add))
}
