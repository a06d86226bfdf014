//! Retrieval metrics: radius-0 recall/precision, mAP and F1-bucket curves.
//!
//! Metrics are plain `f64` whatever scalar type produced the codes.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamming::{enumerate_at_radius, HashCode};
use crate::index::{BucketIndex, ItemId};
use crate::loss::SimilarityLabels;

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: ItemId,
    pub code: HashCode,
    /// Relevant database items, ascending.
    pub gt: Vec<ItemId>,
}

impl Query {
    fn is_relevant(&self, id: ItemId) -> bool {
        self.gt.binary_search(&id).is_ok()
    }
}

/// Queries for rows `query_rows` against database rows `db_rows`; database
/// row `r` has item id `r` and is relevant when it shares a label.
pub fn build_queries(
    labels: &SimilarityLabels,
    codes: &[HashCode],
    query_rows: &[usize],
    db_rows: &[usize],
) -> Vec<Query> {
    query_rows
        .iter()
        .zip(codes)
        .map(|(&q, &code)| {
            let mut gt: Vec<ItemId> = db_rows
                .iter()
                .filter(|&&d| d != q && labels.similar(q, d))
                .map(|&d| d as ItemId)
                .collect();
            gt.sort_unstable();
            Query {
                id: q as ItemId,
                code,
                gt,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct H0Stats {
    /// Mean over queries with nonempty ground truth.
    pub recall: Option<f64>,
    /// Mean over queries whose radius-0 bucket is nonempty.
    pub precision: Option<f64>,
    pub recall_queries: usize,
    pub precision_queries: usize,
}

/// Items whose codes lie within Hamming radius `r` of `code`.
pub fn retrieved_within(index: &BucketIndex, code: &HashCode, r: usize) -> Result<HashSet<ItemId>> {
    let mut out = HashSet::new();
    for radius in 0..=r {
        for key in enumerate_at_radius(code, radius)? {
            out.extend(index.bucket(&key).iter().copied());
        }
    }
    Ok(out)
}

pub fn recall_precision_within(index: &BucketIndex, queries: &[Query], r: usize) -> Result<H0Stats> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let (mut rsum, mut rn, mut psum, mut pn) = (0.0, 0usize, 0.0, 0usize);
    for q in queries {
        let got = retrieved_within(index, &q.code, r)?;
        let hits = got.iter().filter(|id| q.is_relevant(**id)).count() as f64;
        if !q.gt.is_empty() {
            rsum += hits / q.gt.len() as f64;
            rn += 1;
        }
        if !got.is_empty() {
            psum += hits / got.len() as f64;
            pn += 1;
        }
    }
    Ok(H0Stats {
        recall: (rn > 0).then(|| rsum / rn as f64),
        precision: (pn > 0).then(|| psum / pn as f64),
        recall_queries: rn,
        precision_queries: pn,
    })
}

pub fn recall_precision_h0(index: &BucketIndex, queries: &[Query]) -> Result<H0Stats> {
    recall_precision_within(index, queries, 0)
}

/// Average precision of one ranked list against `q`'s ground truth.
pub fn average_precision(ranked: &[ItemId], q: &Query) -> Option<f64> {
    if q.gt.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, id) in ranked.iter().enumerate() {
        if q.is_relevant(*id) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / q.gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapStats {
    pub map: Option<f64>,
    pub evaluated: usize,
    /// Queries without relevant items.
    pub skipped: usize,
}

/// mAP over full rankings by asymmetric distance, ties by ascending id.
pub fn mean_average_precision(index: &BucketIndex, queries: &[Query]) -> Result<MapStats> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let aps: Vec<Option<f64>> = queries.iter().map(|q| query_ap(index, q)).collect();
    Ok(summarize_ap(&aps))
}

fn query_ap(index: &BucketIndex, q: &Query) -> Option<f64> {
    if q.gt.is_empty() {
        return None;
    }
    let ranked: Vec<ItemId> = index.ranking(&q.code).into_iter().map(|(id, _)| id).collect();
    average_precision(&ranked, q)
}

fn summarize_ap(aps: &[Option<f64>]) -> MapStats {
    let done: Vec<f64> = aps.iter().flatten().copied().collect();
    MapStats {
        map: (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64),
        evaluated: done.len(),
        skipped: aps.len() - done.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: usize,
    pub avg_buckets_probed: f64,
    pub f1: f64,
}

fn f1(hits: usize, retrieved: usize, relevant: usize) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / retrieved as f64;
    let r = hits as f64 / relevant as f64;
    2.0 * p * r / (p + r)
}

/// F1 and buckets probed per requested `k`, averaged over queries with
/// nonempty ground truth. `k` beyond the database size is clamped.
pub fn f1_bucket_curve(index: &BucketIndex, queries: &[Query], ks: &[usize], r_max: usize) -> Result<Vec<CurvePoint>> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("ks must be positive and strictly ascending"));
    }
    let used: Vec<&Query> = queries.iter().filter(|q| !q.gt.is_empty()).collect();
    if used.is_empty() {
        return Err(Error::Empty("queries with relevant items"));
    }
    let n = index.len().max(1);
    let k_max = ks[ks.len() - 1].min(n);
    let mut f1_sum = vec![0.0; ks.len()];
    let mut probe_sum = vec![0.0; ks.len()];
    for q in &used {
        let trace = index.search_trace(&q.code, k_max, r_max)?;
        for (slot, &k) in ks.iter().enumerate() {
            let res = trace.cut(k.min(n));
            let hits = res.items.iter().filter(|id| q.is_relevant(**id)).count();
            f1_sum[slot] += f1(hits, res.items.len(), q.gt.len());
            probe_sum[slot] += res.buckets_probed as f64;
        }
    }
    let m = used.len() as f64;
    Ok(ks
        .iter()
        .enumerate()
        .map(|(slot, &k)| CurvePoint {
            k,
            avg_buckets_probed: probe_sum[slot] / m,
            f1: f1_sum[slot] / m,
        })
        .collect())
}

/// Fewest buckets at which the piecewise-linear curve (points in ascending
/// `k`) first reaches `level`.
pub fn buckets_to_reach(curve: &[CurvePoint], level: f64) -> Option<f64> {
    let first = curve.first()?;
    if first.f1 >= level {
        return Some(first.avg_buckets_probed);
    }
    curve.windows(2).find_map(|w| {
        let (a, b) = (w[0], w[1]);
        (a.f1 < level && b.f1 >= level).then(|| {
            let t = (level - a.f1) / (b.f1 - a.f1);
            a.avg_buckets_probed + t * (b.avg_buckets_probed - a.avg_buckets_probed)
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchedF1 {
    pub f1: f64,
    pub buckets: f64,
    pub baseline_buckets: f64,
}

/// Bucket costs of both curves at `levels` evenly spaced F1 values up to the
/// highest F1 both curves reach.
pub fn matched_f1(curve: &[CurvePoint], baseline: &[CurvePoint], levels: usize) -> Vec<MatchedF1> {
    let top = |c: &[CurvePoint]| c.iter().map(|p| p.f1).fold(0.0, f64::max);
    let hi = top(curve).min(top(baseline));
    (1..=levels)
        .filter_map(|i| {
            let f1 = hi * i as f64 / levels as f64;
            Some(MatchedF1 {
                f1,
                buckets: buckets_to_reach(curve, f1)?,
                baseline_buckets: buckets_to_reach(baseline, f1)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryDetail {
    pub id: ItemId,
    pub n_relevant: usize,
    pub retrieved_h0: usize,
    pub hits_h0: usize,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub n_items: usize,
    pub recall_h0: Option<f64>,
    pub precision_h0: Option<f64>,
    pub recall_coverage: usize,
    pub precision_coverage: usize,
    pub map: Option<f64>,
    pub map_skipped: usize,
    pub f1_bucket: Vec<CurvePoint>,
    pub anhc: Option<f64>,
    pub queries: Vec<QueryDetail>,
}

pub fn evaluate(
    index: &BucketIndex,
    queries: &[Query],
    ks: &[usize],
    r_max: usize,
    anhc: Option<f64>,
) -> Result<EvalReport> {
    let h0 = recall_precision_h0(index, queries)?;
    let curve = f1_bucket_curve(index, queries, ks, r_max)?;
    let mut details = Vec::with_capacity(queries.len());
    let mut aps = Vec::with_capacity(queries.len());
    for q in queries {
        let got = index.bucket(&q.code);
        let ap = query_ap(index, q);
        aps.push(ap);
        details.push(QueryDetail {
            id: q.id,
            n_relevant: q.gt.len(),
            retrieved_h0: got.len(),
            hits_h0: got.iter().filter(|id| q.is_relevant(**id)).count(),
            ap,
        });
    }
    let map = summarize_ap(&aps);
    Ok(EvalReport {
        n_queries: queries.len(),
        n_items: index.len(),
        recall_h0: h0.recall,
        precision_h0: h0.precision,
        recall_coverage: h0.recall_queries,
        precision_coverage: h0.precision_queries,
        map: map.map,
        map_skipped: map.skipped,
        f1_bucket: curve,
        anhc,
        queries: details,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    /// `k  avg_buckets_probed  f1` with a header row.
    pub fn write_curve_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "k\tavg_buckets_probed\tf1")?;
        for p in &self.f1_bucket {
            writeln!(f, "{}\t{}\t{}", p.k, p.avg_buckets_probed, p.f1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamming::hamming_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(s: &str) -> HashCode {
        s.parse().unwrap()
    }

    fn q(id: ItemId, code: &str, gt: &[ItemId]) -> Query {
        Query {
            id,
            code: c(code),
            gt: gt.to_vec(),
        }
    }

    #[test]
    fn exact_bucket_recall() {
        let idx = BucketIndex::build(3, vec![(1, vec![c("010")]), (2, vec![c("010")]), (3, vec![c("111")])]).unwrap();
        let s = recall_precision_h0(&idx, &[q(100, "010", &[1, 2])]).unwrap();
        assert_eq!(s.recall, Some(1.0));
        assert_eq!(s.precision, Some(1.0));

        let s = recall_precision_h0(&idx, &[q(100, "000", &[1, 2]), q(101, "001", &[3])]).unwrap();
        assert_eq!(s.recall, Some(0.0));
        assert_eq!(s.precision, None);
        assert_eq!((s.recall_queries, s.precision_queries), (2, 0));
        assert!(recall_precision_h0(&idx, &[]).is_err());
    }

    #[test]
    fn four_item_hand_count() {
        // items: 0 {000}, 1 {000, 110}, 2 {110}, 3 {011}
        let idx = BucketIndex::build(
            3,
            vec![
                (0, vec![c("000")]),
                (1, vec![c("000"), c("110")]),
                (2, vec![c("110")]),
                (3, vec![c("011")]),
            ],
        )
        .unwrap();
        let queries = [
            q(10, "000", &[1, 3]), // gets {0,1}: hits 1 -> R 1/2, P 1/2
            q(11, "110", &[1, 2]), // gets {1,2}: R 1, P 1
            q(12, "111", &[0]),    // gets {}: R 0, no P
            q(13, "011", &[]),     // gets {3}: no R, P 0
        ];
        let s = recall_precision_h0(&idx, &queries).unwrap();
        assert!((s.recall.unwrap() - (0.5 + 1.0 + 0.0) / 3.0).abs() < 1e-15);
        assert!((s.precision.unwrap() - (0.5 + 1.0 + 0.0) / 3.0).abs() < 1e-15);
        assert_eq!((s.recall_queries, s.precision_queries), (3, 3));
    }

    #[test]
    fn ap_examples() {
        let query = q(0, "0", &[5, 9]);
        assert!((average_precision(&[5, 7, 9], &query).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[5, 9, 7], &query), Some(1.0));
        assert_eq!(average_precision(&[1], &q(0, "0", &[])), None);

        let idx = BucketIndex::build(2, vec![(1, vec![c("00")]), (2, vec![c("00")]), (3, vec![c("11")])]).unwrap();
        let m = mean_average_precision(&idx, &[q(0, "00", &[1, 2]), q(1, "00", &[])]).unwrap();
        assert_eq!(m.map, Some(1.0));
        assert_eq!((m.evaluated, m.skipped), (1, 1));
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, qlen: usize) -> (BucketIndex, Vec<Query>) {
        let entries: Vec<(ItemId, Vec<HashCode>)> = (0..n as u64)
            .map(|id| {
                let m = rng.gen_range(1..=3);
                let codes = (0..m)
                    .map(|_| HashCode::from_u64(rng.gen_range(0..1u64 << qlen), qlen).unwrap())
                    .collect();
                (id, codes)
            })
            .collect();
        let idx = BucketIndex::build(qlen, entries).unwrap();
        let queries = (0..20)
            .map(|i| {
                let mut gt: Vec<ItemId> = (0..n as u64).filter(|_| rng.gen_bool(0.2)).collect();
                gt.sort_unstable();
                Query {
                    id: 10_000 + i,
                    code: HashCode::from_u64(rng.gen_range(0..1u64 << qlen), qlen).unwrap(),
                    gt,
                }
            })
            .collect();
        (idx, queries)
    }

    #[test]
    fn map_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = rng.gen_range(1..=500);
            let (idx, queries) = random_instance(&mut rng, n, 8);
            let got = mean_average_precision(&idx, &queries).unwrap();

            let mut total = 0.0;
            let mut count = 0;
            for query in &queries {
                if query.gt.is_empty() {
                    continue;
                }
                let mut rows: Vec<(u32, ItemId)> = idx
                    .entries()
                    .map(|(id, codes)| {
                        let d = codes
                            .iter()
                            .map(|x| hamming_distance(x, &query.code).unwrap())
                            .min()
                            .unwrap();
                        (d, id)
                    })
                    .collect();
                rows.sort();
                let mut hits = 0.0;
                let mut ap = 0.0;
                for (rank, (_, id)) in rows.iter().enumerate() {
                    if query.gt.contains(id) {
                        hits += 1.0;
                        ap += hits / (rank as f64 + 1.0);
                    }
                }
                total += ap / query.gt.len() as f64;
                count += 1;
            }
            let want = if count > 0 { Some(total / count as f64) } else { None };
            match (got.map, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                (a, b) => assert_eq!(a, b),
            }

            let mut shuffled = queries.clone();
            shuffled.reverse();
            let again = mean_average_precision(&idx, &shuffled).unwrap().map;
            match (got.map, again) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn radius_zero_matches_asymmetric_distance_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (idx, queries) = random_instance(&mut rng, 200, 6);
        for query in &queries {
            let from_bucket: HashSet<ItemId> = idx.bucket(&query.code).iter().copied().collect();
            let from_scan: HashSet<ItemId> = idx
                .ranking(&query.code)
                .into_iter()
                .filter(|(_, d)| *d == 0)
                .map(|(id, _)| id)
                .collect();
            assert_eq!(from_bucket, from_scan);
        }
    }

    #[test]
    fn recall_grows_with_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let (idx, queries) = random_instance(&mut rng, 100, 8);
            let r: Vec<f64> = (0..=2)
                .map(|r| {
                    recall_precision_within(&idx, &queries, r)
                        .unwrap()
                        .recall
                        .unwrap_or(0.0)
                })
                .collect();
            assert!(r[0] <= r[1] && r[1] <= r[2]);
        }
    }

    #[test]
    fn extra_codes_never_lower_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (idx, queries) = random_instance(&mut rng, 150, 6);
            let stripped = BucketIndex::build(6, idx.entries().map(|(id, codes)| (id, vec![codes[0]]))).unwrap();
            let full = recall_precision_h0(&idx, &queries).unwrap().recall.unwrap();
            let single = recall_precision_h0(&stripped, &queries).unwrap().recall.unwrap();
            assert!(full >= single);
        }
    }

    #[test]
    fn full_radius_curve_endpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (idx, queries) = random_instance(&mut rng, 60, 6);
        let n = idx.len();
        let curve = f1_bucket_curve(&idx, &queries, &[1, 5, 20, n, n + 40], 6).unwrap();
        let used: Vec<&Query> = queries.iter().filter(|q| !q.gt.is_empty()).collect();
        let want = used
            .iter()
            .map(|q| {
                let p = q.gt.len() as f64 / n as f64;
                2.0 * p / (1.0 + p)
            })
            .sum::<f64>()
            / used.len() as f64;
        assert!((curve[3].f1 - want).abs() < 1e-12);
        assert_eq!(curve[3].f1, curve[4].f1);
        assert!(curve
            .windows(2)
            .all(|w| w[0].avg_buckets_probed <= w[1].avg_buckets_probed));
        assert!(f1_bucket_curve(&idx, &queries, &[3, 3], 6).is_err());
        assert!(f1_bucket_curve(&idx, &queries, &[0, 3], 6).is_err());
    }

    #[test]
    fn single_bucket_toy_curve() {
        // Everything lives in bucket 00; query 00 finds all three at once.
        let idx = BucketIndex::build(2, vec![(1, vec![c("00")]), (2, vec![c("00")]), (3, vec![c("00")])]).unwrap();
        let curve = f1_bucket_curve(&idx, &[q(0, "00", &[2])], &[1, 2, 3], 2).unwrap();
        // k=1 -> {1}: F1 0; k=2 -> {1,2}: P 1/2, R 1 -> 2/3; k=3 -> P 1/3 -> 1/2
        assert_eq!(curve[0].f1, 0.0);
        assert!((curve[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((curve[2].f1 - 0.5).abs() < 1e-15);
        assert!(curve.iter().all(|p| p.avg_buckets_probed == 1.0));

        // Query 11 must walk radius 0 (1 probe), radius 1 (2), radius 2 (1).
        let curve = f1_bucket_curve(&idx, &[q(0, "11", &[2])], &[1], 2).unwrap();
        assert_eq!(curve[0].avg_buckets_probed, 4.0);
    }

    #[test]
    fn reach_interpolates() {
        let pts = |v: &[(f64, f64)]| -> Vec<CurvePoint> {
            v.iter()
                .enumerate()
                .map(|(k, &(b, f))| CurvePoint {
                    k: k + 1,
                    avg_buckets_probed: b,
                    f1: f,
                })
                .collect()
        };
        let a = pts(&[(1.0, 0.1), (3.0, 0.5), (10.0, 0.6)]);
        assert_eq!(buckets_to_reach(&a, 0.05), Some(1.0));
        assert!((buckets_to_reach(&a, 0.3).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(buckets_to_reach(&a, 0.7), None);
        let b = pts(&[(2.0, 0.1), (6.0, 0.4)]);
        let m = matched_f1(&a, &b, 4);
        assert_eq!(m.len(), 4);
        assert!((m[3].f1 - 0.4).abs() < 1e-12);
        assert!(m.iter().all(|x| x.buckets <= x.baseline_buckets));
    }

    #[test]
    fn report_files() {
        let idx = BucketIndex::build(2, vec![(1, vec![c("00")]), (2, vec![c("01")])]).unwrap();
        let report = evaluate(&idx, &[q(0, "00", &[1])], &[1, 2], 2, Some(1.5)).unwrap();
        assert_eq!(report.recall_h0, Some(1.0));
        let dir = tempfile::tempdir().unwrap();
        report.write_json(&dir.path().join("r.json")).unwrap();
        report.write_curve_tsv(&dir.path().join("c.tsv")).unwrap();
        let tsv = fs::read_to_string(dir.path().join("c.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 3);
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(v["anhc"], 1.5);
    }
}
