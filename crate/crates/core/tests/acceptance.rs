//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use mch_core::agent::{policy_forward, reinforce_gradient, Action, PolicyNetwork, StateVector};
use mch_core::basemodel::{batch_objective, BaseHashModel};
use mch_core::datagen::{composite_items, figure1_scenario};
use mch_core::dataset::Dataset;
use mch_core::encoder::{anhc, encode_corpus, MultiCodeEntry};
use mch_core::eval::{matched_f1, recall_precision_h0, Query};
use mch_core::hamming::{asymmetric_distance, binomial};
use mch_core::io;
use mch_core::loss::{loss_value, LossKind, LossSpec, SimilarityLabels};
use mch_core::pipeline::{self, PipelineConfig, Split};

use mch_core::{BucketIndex, HashCode, ItemId};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn random_code(rng: &mut ChaCha8Rng, q: usize) -> HashCode {
    HashCode::from_u64(rng.gen::<u64>() & ((1u64 << q) - 1), q).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 120;
    for inst in 0..instances {
        let q = if inst % 2 == 0 { 8 } else { 16 };
        let n = rng.gen_range(1..=2000usize);
        let codes: Vec<Vec<HashCode>> = (0..n)
            .map(|_| (0..rng.gen_range(1..=3)).map(|_| random_code(&mut rng, q)).collect())
            .collect();
        let index = BucketIndex::build(q, codes.iter().enumerate().map(|(i, c)| (i as ItemId, c.clone())))
            .map_err(|e| e.to_string())?;
        let query = random_code(&mut rng, q);
        let k = rng.gen_range(1..=n);
        let res = index.bucket_search(&query, k, q).map_err(|e| e.to_string())?;
        let dist = |id: ItemId| asymmetric_distance(&codes[id as usize], &query).unwrap();
        if res.items.len() != k {
            return Err(format!("instance {inst}: {} items for k={k}", res.items.len()));
        }
        let got: HashSet<ItemId> = res.items.iter().copied().collect();
        let worst_in = res.items.iter().map(|&i| dist(i)).max().unwrap();
        let best_out = (0..n as ItemId).filter(|i| !got.contains(i)).map(dist).min();
        if best_out.is_some_and(|b| worst_in > b) {
            return Err(format!("instance {inst}: kept {worst_in} > excluded {best_out:?}"));
        }
        let exact = index.exact_topk(&query, k).map_err(|e| e.to_string())?;
        let kth = exact.last().unwrap().1;
        let mut a: Vec<u32> = res.items.iter().map(|&i| dist(i)).collect();
        let mut b: Vec<u32> = exact.iter().map(|e| e.1).collect();
        a.sort_unstable();
        b.sort_unstable();
        let strict_a: HashSet<ItemId> = res.items.iter().copied().filter(|&i| dist(i) < kth).collect();
        let strict_b: HashSet<ItemId> = exact.iter().filter(|e| e.1 < kth).map(|e| e.0).collect();
        if a != b || strict_a != strict_b {
            return Err(format!("instance {inst}: differs from exact top-k beyond ties"));
        }
    }
    let t = start.elapsed();
    check(
        t < Duration::from_secs(60),
        format!("{instances} instances in {:.2}s", t.as_secs_f64()),
        format!("too slow: {:.1}s", t.as_secs_f64()),
    )
}

fn figure1_reproduction() -> Outcome {
    let start = Instant::now();
    let f = figure1_scenario();
    let single = f.best_single_code_radius();
    let multi = f.multi_code_distances();
    let cost = f.bucket_cost(2);
    let t = start.elapsed();
    check(
        single == 2 && multi == (0, 0) && cost == 7 && t < Duration::from_secs(1),
        format!("single-code radius {single}, multi-code distances {multi:?}, cost through r=2 {cost}/8"),
        format!("single {single}, multi {multi:?}, cost {cost}, {t:?}"),
    )
}

/// Loss formulas written out directly, no shared code with the library.
fn transcribed(kind: LossKind, q: f64, d: f64, s: f64, w: f64, alpha: f64, gamma: f64, h: f64) -> f64 {
    match kind {
        LossKind::Ksh => ((q - 2.0 * d) / q - (2.0 * s - 1.0)).powi(2),
        LossKind::HashNet => w * ((1.0 + (alpha * (q - 2.0 * d)).exp()).ln() - s * alpha * (q - 2.0 * d)),
        LossKind::Adsh => ((q - 2.0 * d) - q * (2.0 * s - 1.0)).powi(2),
        LossKind::Dch => w * (s * (d / gamma).ln() + (1.0 + gamma / d).ln()),
        LossKind::Mmhh => w * (s * (1.0 + (d - h).max(0.0)).ln() + (1.0 - s) * (1.0 + 1.0 / h.max(d)).ln()),
    }
}

const KINDS: [LossKind; 5] = [
    LossKind::Ksh,
    LossKind::HashNet,
    LossKind::Adsh,
    LossKind::Dch,
    LossKind::Mmhh,
];

fn loss_closed_forms() -> Outcome {
    let tol = 1e-9;
    let spec = |kind| LossSpec::<f64>::new(kind, 16);
    let ln2 = 2f64.ln();
    let hand = [
        (LossKind::Ksh, 0.0, true, 0.0),
        (LossKind::Adsh, 16.0, true, 1024.0),
        (LossKind::Dch, 2.0, true, ln2),
        (LossKind::HashNet, 8.0, true, ln2),
        (LossKind::HashNet, 8.0, false, ln2),
        (LossKind::Mmhh, 0.0, true, 0.0),
        (LossKind::Mmhh, 2.0, true, 0.0),
    ];
    for (kind, d, s, want) in hand {
        let got = loss_value(&spec(kind), d, s, 1.0).map_err(|e| e.to_string())?;
        if (got - want).abs() > tol {
            return Err(format!("{kind} d={d} s={s}: {got} != {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grid = 0;
    for kind in KINDS {
        let mut sp = spec(kind);
        sp.alpha = 0.2;
        sp.gamma = 3.0;
        sp.margin_h = 4.0;
        for _ in 0..10 {
            let d = rng.gen_range(0.5..16.0);
            let s = rng.gen_bool(0.5);
            let w = rng.gen_range(0.5..2.0);
            let got = loss_value(&sp, d, s, w).map_err(|e| e.to_string())?;
            let want = transcribed(kind, 16.0, d, s as u8 as f64, w, 0.2, 3.0, 4.0);
            if (got - want).abs() > tol * want.abs().max(1.0) {
                return Err(format!("{kind} d={d} s={s} w={w}: {got} != {want}"));
            }
            grid += 1;
        }
        for s in [true, false] {
            let lo = if s { 0.0 } else { sp.epsilon };
            let vals: Vec<f64> = (0..=1600)
                .map(|i| lo + (16.0 - lo) * i as f64 / 1600.0)
                .map(|d| loss_value(&sp, d, s, 1.0).unwrap())
                .collect();
            let ok = vals
                .windows(2)
                .all(|p| if s { p[1] >= p[0] - 1e-12 } else { p[1] <= p[0] + 1e-12 });
            if !ok {
                return Err(format!("{kind} not monotone for s={s}"));
            }
        }
    }
    Ok(format!(
        "{} hand values, {grid} grid points, monotone for all five kinds",
        hand.len()
    ))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    num.sqrt() / den.sqrt().max(1e-300)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps = 1e-6;
    let mut worst_base: f64 = 0.0;
    for inst in 0..25 {
        let kind = KINDS[inst % 5];
        let (d, q, b) = (rng.gen_range(3..8), [4, 6, 8][inst % 3], rng.gen_range(3..8));
        let mut spec = LossSpec::<f64>::new(kind, q);
        spec.alpha = 0.3;
        let mut model = BaseHashModel::gaussian(d, spec, 0.5, inst as u64).unwrap();
        let x = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        let rows: Vec<Vec<usize>> = (0..b).map(|_| vec![rng.gen_range(0..3)]).collect();
        let labels = SimilarityLabels::from_rows(3, &rows).unwrap();
        let (_, g) = batch_objective(&model, x.view(), &labels, 0.1).map_err(|e| e.to_string())?;
        let mut num = Vec::new();
        for idx in 0..d * q {
            let (r, c) = (idx / q, idx % q);
            let w0 = model.w[[r, c]];
            model.w[[r, c]] = w0 + eps;
            let up = batch_objective(&model, x.view(), &labels, 0.1).unwrap().0;
            model.w[[r, c]] = w0 - eps;
            let dn = batch_objective(&model, x.view(), &labels, 0.1).unwrap().0;
            model.w[[r, c]] = w0;
            num.push((up - dn) / (2.0 * eps));
        }
        worst_base = worst_base.max(rel_err(&g.iter().copied().collect::<Vec<_>>(), &num));
    }

    let mut worst_pg: f64 = 0.0;
    for inst in 0..25u64 {
        let width = rng.gen_range(3..9);
        let mut net = PolicyNetwork::<f64>::new(width, [7, 6, 5, 4], inst).unwrap();
        net.training = false;
        for st in &mut net.stats {
            st.mean.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            st.var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        }
        let h = StateVector {
            values: Array1::from_shape_fn(width, |_| rng.gen_range(-2.0..2.0)),
        };
        let r = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let j = |net: &PolicyNetwork<f64>| {
            let (p0, p1) = policy_forward(net, &h).unwrap();
            p0 * r[0] + p1 * r[1]
        };
        let (p0, p1) = policy_forward(&net, &h).unwrap();
        let batch = vec![
            (h.clone(), Action::Discard, 2.0 * p0 * r[0]),
            (h.clone(), Action::Keep, 2.0 * p1 * r[1]),
        ];
        let an = reinforce_gradient(&net, &batch).map_err(|e| e.to_string())?.flatten();
        let num: Vec<f64> = (0..an.len())
            .map(|k| {
                let mut up = net.clone();
                *up.param_mut(k) += eps;
                let mut dn = net.clone();
                *dn.param_mut(k) -= eps;
                (j(&up) - j(&dn)) / (2.0 * eps)
            })
            .collect();
        worst_pg = worst_pg.max(rel_err(&an, &num));
    }
    let t = start.elapsed();
    check(
        worst_base <= 1e-4 && worst_pg <= 1e-4 && t < Duration::from_secs(60),
        format!("25+25 instances, worst relative error base {worst_base:.2e}, policy {worst_pg:.2e}"),
        format!("base {worst_base:.2e}, policy {worst_pg:.2e}, {t:?}"),
    )
}

fn bucket_count_law() -> Outcome {
    let mut cases = 0;
    for q in 1..=16usize {
        let origin = HashCode::zeros(q).unwrap();
        for r in 0..=4.min(q) {
            let expected: u128 = (0..=r).map(|i| binomial(q, i)).sum();
            // a lone item just outside radius r, or at the far corner when r = q
            let far = (r + 1).min(q);
            let mut item = origin;
            (0..far).for_each(|b| item.flip(b));
            let index = BucketIndex::build(q, [(0, [item])]).unwrap();
            let res = index.bucket_search(&origin, 1, r).map_err(|e| e.to_string())?;
            let full = far == r;
            if (res.buckets_probed as u128) != expected || res.items.is_empty() != !full {
                return Err(format!(
                    "q={q} r={r}: probed {} expected {expected}",
                    res.buckets_probed
                ));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (Q, r) cases exact"))
}

fn run_pipeline(dir: &Path) -> mch_core::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    cfg.dir = dir.to_path_buf();
    cfg.seed = 7;
    pipeline::gen_data(&cfg)?;
    pipeline::train_base_stage::<f64>(&cfg)?;
    pipeline::train_agent_stage::<f64>(&cfg)?;
    pipeline::encode_stage::<f64>(&cfg)?;
    pipeline::eval_stage::<f64>(&cfg)?;
    Ok(cfg)
}

struct Run {
    cfg: PipelineConfig,
    _dir: tempfile::TempDir,
    elapsed: Duration,
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn end_to_end(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let e = |e: mch_core::Error| e.to_string();
    let data = pipeline::load_data::<f64>(cfg).map_err(e)?;
    let base = io::load_model::<f64>(&cfg.path(pipeline::MODEL_FILE)).map_err(e)?;
    let index = io::load_index(&cfg.path(pipeline::INDEX_FILE)).map_err(e)?;
    let single = io::load_index(&cfg.path(pipeline::BASELINE_INDEX_FILE)).map_err(e)?;
    let qs = pipeline::queries(cfg, &data, &base).map_err(e)?;
    let composite: HashSet<ItemId> = composite_items(&data.labels).into_iter().map(|i| i as ItemId).collect();
    let comp_q: Vec<Query> = qs.iter().filter(|q| composite.contains(&q.id)).cloned().collect();
    let touch_q: Vec<Query> = qs
        .iter()
        .filter(|q| q.gt.iter().any(|g| composite.contains(g)))
        .cloned()
        .collect();

    let rp = |idx: &BucketIndex, q: &[Query]| recall_precision_h0(idx, q).unwrap();
    let (m_all, s_all) = (rp(&index, &qs), rp(&single, &qs));
    let (m_comp, s_comp) = (rp(&index, &comp_q), rp(&single, &comp_q));
    let (m_touch, s_touch) = (rp(&index, &touch_q), rp(&single, &touch_q));
    println!(
        "    composite queries ({}): R@H=0 multi {} single {}",
        comp_q.len(),
        fmt(m_comp.recall),
        fmt(s_comp.recall)
    );
    println!(
        "    queries with composite ground truth ({}): R@H=0 multi {} single {}",
        touch_q.len(),
        fmt(m_touch.recall),
        fmt(s_touch.recall)
    );
    println!(
        "    all queries ({}): R@H=0 multi {} single {}; P@H=0 multi {} single {}",
        qs.len(),
        fmt(m_all.recall),
        fmt(s_all.recall),
        fmt(m_all.precision),
        fmt(s_all.precision)
    );

    let read = |name| -> Result<serde_json::Value, String> {
        let text = std::fs::read_to_string(cfg.path(name)).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    let curve = |v: &serde_json::Value| -> Vec<mch_core::eval::CurvePoint> {
        v["f1_bucket"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| mch_core::eval::CurvePoint {
                k: p["k"].as_u64().unwrap() as usize,
                avg_buckets_probed: p["avg_buckets_probed"].as_f64().unwrap(),
                f1: p["f1"].as_f64().unwrap(),
            })
            .collect()
    };
    let (rep, brep) = (read(pipeline::REPORT_FILE)?, read(pipeline::BASELINE_REPORT_FILE)?);
    let matched = matched_f1(&curve(&rep), &curve(&brep), 20);
    for m in matched.iter().step_by(4) {
        println!(
            "    F1 {:.3}: buckets multi {:.1} single {:.1}",
            m.f1, m.buckets, m.baseline_buckets
        );
    }

    let (rm, rs) = (m_comp.recall.unwrap_or(0.0), s_comp.recall.unwrap_or(0.0));
    let recall_ok = rm > rs && rm >= 1.1 * rs;
    let p_drop = s_all.precision.unwrap_or(0.0) - m_all.precision.unwrap_or(0.0);
    let prec_ok = p_drop <= 0.02;
    let buckets_ok = !matched.is_empty() && matched.iter().all(|m| m.buckets <= m.baseline_buckets + 1e-9);
    let time_ok = run.elapsed <= Duration::from_secs(600);
    let summary = format!(
        "composite R@H=0 {rm:.4} vs {rs:.4} ({:+.0}%), P@H=0 drop {p_drop:+.4}, {} matched F1 levels, {:.1}s",
        if rs > 0.0 {
            100.0 * (rm / rs - 1.0)
        } else {
            f64::INFINITY
        },
        matched.len(),
        run.elapsed.as_secs_f64()
    );
    check(
        recall_ok && prec_ok && buckets_ok && time_ok,
        summary.clone(),
        format!("{summary} [recall {recall_ok} precision {prec_ok} buckets {buckets_ok} time {time_ok}]"),
    )
}

fn anhc_properties(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let e = |e: mch_core::Error| e.to_string();
    let data = pipeline::load_data::<f64>(cfg).map_err(e)?;
    let base = io::load_model::<f64>(&cfg.path(pipeline::MODEL_FILE)).map_err(e)?;
    let policy = io::load_policy::<f64>(&cfg.path(pipeline::POLICY_FILE)).map_err(e)?;
    let split = Split::new(data.len(), cfg.n_query, cfg.n_train).map_err(e)?;
    let db = data.subset(&split.database);
    let entries = encode_corpus(&base, &policy, &db, &cfg.encoder, 0).map_err(e)?;
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let values: Vec<f64> = grid.iter().map(|&xi| anhc(&entries, xi).unwrap()).collect();
    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let bounded = values.iter().all(|&v| (1.0..=6.0).contains(&v));

    // sigma = 1: every crop is the full frame, so every region equals the whole item
    let regions = (0..db.len())
        .map(|i| {
            let row = db.features.row(i);
            Array2::from_shape_fn((5, db.dim()), |(_, c)| row[c])
        })
        .collect();
    let full = Dataset::new(
        db.features.clone(),
        regions,
        vec![vec![[0.0, 0.0, 1.0, 1.0]; 5]; db.len()],
        db.labels.clone(),
    )
    .map_err(e)?;
    let mut enc = cfg.encoder.clone();
    enc.sigma = 1.0;
    let degenerate: Vec<MultiCodeEntry<f64>> = encode_corpus(&base, &policy, &full, &enc, 0).map_err(e)?;
    let deg = anhc(&degenerate, 0.0).map_err(e)?;
    let deg_default = anhc(&degenerate, enc.xi).map_err(e)?;
    let summary = format!(
        "ANHC {:.3} (xi=0) .. {:.3} (xi=0.5) .. {:.3} (xi=1), sigma=1 gives {deg:.2}",
        values[0], values[10], values[20]
    );
    check(
        monotone && bounded && deg == 1.0 && deg_default == 1.0,
        summary.clone(),
        format!("{summary} [monotone {monotone} bounded {bounded}]"),
    )
}

fn determinism(first: &Run) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = run_pipeline(dir.path()).map_err(|e| e.to_string())?;
    let files = [
        pipeline::MODEL_FILE,
        pipeline::POLICY_FILE,
        pipeline::INDEX_FILE,
        pipeline::BASELINE_INDEX_FILE,
        pipeline::REPORT_FILE,
        pipeline::CURVE_FILE,
        pipeline::BASELINE_REPORT_FILE,
        pipeline::BASELINE_CURVE_FILE,
    ];
    for f in files {
        let a = std::fs::read(first.cfg.path(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(cfg.path(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} files byte-identical", files.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, out: Outcome| match out {
        Ok(msg) => println!("PASS [{n}] {name}: {msg}"),
        Err(msg) => {
            failed += 1;
            println!("FAIL [{n}] {name}: {msg}");
        }
    };
    report(1, "oracle equivalence", guarded(oracle_equivalence));
    report(2, "figure-1 reproduction", guarded(figure1_reproduction));
    report(3, "loss closed forms", guarded(loss_closed_forms));
    report(4, "gradient checks", guarded(gradient_checks));
    report(5, "bucket-count law", guarded(bucket_count_law));

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let run = run_pipeline(dir.path()).map(|cfg| Run {
        cfg,
        _dir: dir,
        elapsed: start.elapsed(),
    });
    match &run {
        Ok(run) => {
            report(6, "end-to-end directional result", guarded(|| end_to_end(run)));
            report(7, "ANHC properties", guarded(|| anhc_properties(run)));
            report(8, "determinism", guarded(|| determinism(run)));
        }
        Err(err) => {
            for (n, name) in [
                (6, "end-to-end directional result"),
                (7, "ANHC properties"),
                (8, "determinism"),
            ] {
                report(n, name, Err(format!("pipeline failed: {err}")));
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
