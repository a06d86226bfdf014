use std::path::Path;

use mch_core::datagen::{figure1_dataset, generate, Figure1Config, SynthConfig};
use mch_core::dataset::Dataset;
use mch_core::io;
use mch_core::pipeline::{self, PipelineConfig};

/// Files laid out byte by byte the way an external feature extractor writes them.
fn write_external(dir: &Path) {
    let (n, d) = (3u64, 2u32);
    let whole = [[1.0f32, -1.0], [0.5, 0.25], [-2.0, 3.0]];
    let half = 0.5f32;
    // four corners and the middle, each of side 0.5
    let crops = [
        [0.0, 0.0, half, half],
        [half, 0.0, half, half],
        [0.0, half, half, half],
        [half, half, half, half],
        [0.25, 0.25, half, half],
    ];

    let mut f = b"MCHF".to_vec();
    f.extend(1u32.to_le_bytes());
    f.extend(n.to_le_bytes());
    f.extend(d.to_le_bytes());
    whole.iter().flatten().for_each(|v| f.extend(v.to_le_bytes()));

    let mut r = b"MCHR".to_vec();
    r.extend(1u32.to_le_bytes());
    r.extend(n.to_le_bytes());
    r.extend(d.to_le_bytes());
    for (i, w) in whole.iter().enumerate() {
        r.extend(5u16.to_le_bytes());
        for k in 0..5 {
            for v in w {
                r.extend((v * (k + i) as f32).to_le_bytes());
            }
        }
        crops.iter().flatten().for_each(|v: &f32| r.extend(v.to_le_bytes()));
    }

    let mut l = b"MCHL".to_vec();
    l.extend(1u32.to_le_bytes());
    l.extend(n.to_le_bytes());
    l.extend(10u32.to_le_bytes());
    // item 0: label 0; item 1: labels 1 and 9; item 2: labels 0 and 9
    l.extend([0b0000_0001, 0, 0b0000_0010, 0b0000_0010, 0b0000_0001, 0b0000_0010]);

    std::fs::write(dir.join(pipeline::FEATURES_FILE), f).unwrap();
    std::fs::write(dir.join(pipeline::REGIONS_FILE), r).unwrap();
    std::fs::write(dir.join(pipeline::LABELS_FILE), l).unwrap();
}

#[test]
fn externally_written_files_load() {
    let tmp = tempfile::tempdir().unwrap();
    write_external(tmp.path());
    let mut cfg = PipelineConfig::default();
    cfg.dir = tmp.path().to_path_buf();
    let data = pipeline::load_data::<f64>(&cfg).unwrap();
    assert_eq!((data.len(), data.dim()), (3, 2));
    assert_eq!(data.features[[2, 1]], 3.0);
    assert!(data.regions.iter().all(|r| r.nrows() == 5));
    assert_eq!(data.regions[1][[3, 0]], 0.5 * 4.0);
    assert_eq!(data.rects[0][4], [0.25, 0.25, 0.5, 0.5]);
    assert_eq!(data.labels.labels_of(1), [1, 9]);
    assert!(data.labels.similar(0, 2) && data.labels.similar(1, 2) && !data.labels.similar(0, 1));

    // and save back to the identical bytes
    let out = tempfile::tempdir().unwrap();
    let p = |name| out.path().join(name);
    io::save_dataset(&data, &p("f"), &p("r"), &p("l")).unwrap();
    for (a, b) in [
        (pipeline::FEATURES_FILE, "f"),
        (pipeline::REGIONS_FILE, "r"),
        (pipeline::LABELS_FILE, "l"),
    ] {
        assert_eq!(
            std::fs::read(tmp.path().join(a)).unwrap(),
            std::fs::read(p(b)).unwrap(),
            "{a}"
        );
    }
}

fn round_trip<T: mch_core::Scalar>(data: &Dataset<T>) {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name| tmp.path().join(name);
    io::save_dataset(data, &p("f"), &p("r"), &p("l")).unwrap();
    let back: Dataset<T> = io::load_dataset(&p("f"), &p("r"), &p("l")).unwrap();
    // stored as f32, so f32 data comes back exactly and f64 data to f32 precision
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.rects, data.rects);
    for (x, y) in back.features.iter().zip(&data.features) {
        assert!((x.to_f64().unwrap() - y.to_f64().unwrap()).abs() <= 1e-6 * y.to_f64().unwrap().abs().max(1.0));
    }
    assert_eq!(back.regions.len(), data.regions.len());
}

#[test]
fn generated_corpora_round_trip() {
    let cfg = SynthConfig {
        n: 200,
        d: 16,
        seed: 5,
        ..SynthConfig::default()
    };
    round_trip(&generate::<f32>(&cfg).unwrap());
    round_trip(&generate::<f64>(&cfg).unwrap());
    round_trip(&figure1_dataset::<f64>(&Figure1Config::default()).unwrap());
}

#[test]
fn pipeline_artifacts_round_trip_and_repeat() {
    let run = |dir: &Path| {
        let mut cfg = PipelineConfig::default();
        cfg.dir = dir.to_path_buf();
        for (k, v) in [
            ("n", "400"),
            ("d", "16"),
            ("q", "8"),
            ("n_query", "40"),
            ("agent_iterations", "5"),
            ("agent_batch", "32"),
            ("hidden", "16,8,8,4"),
            ("base_epochs", "3"),
        ] {
            cfg.set(k, v).unwrap();
        }
        pipeline::gen_data(&cfg).unwrap();
        let model = pipeline::train_base_stage::<f32>(&cfg).unwrap();
        let policy = pipeline::train_agent_stage::<f32>(&cfg).unwrap();
        pipeline::encode_stage::<f32>(&cfg).unwrap();
        pipeline::eval_stage::<f32>(&cfg).unwrap();
        assert_eq!(io::load_model::<f32>(&cfg.path(pipeline::MODEL_FILE)).unwrap(), model);
        assert_eq!(
            io::load_policy::<f32>(&cfg.path(pipeline::POLICY_FILE)).unwrap(),
            policy
        );
        let index = io::load_index(&cfg.path(pipeline::INDEX_FILE)).unwrap();
        assert_eq!(index.len(), 360);
        assert_eq!(
            io::index_to_bytes(&index),
            std::fs::read(cfg.path(pipeline::INDEX_FILE)).unwrap()
        );
        cfg
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (run(a.path()), run(b.path()));
    for f in [
        pipeline::MODEL_FILE,
        pipeline::POLICY_FILE,
        pipeline::INDEX_FILE,
        pipeline::REPORT_FILE,
    ] {
        assert_eq!(
            std::fs::read(ca.path(f)).unwrap(),
            std::fs::read(cb.path(f)).unwrap(),
            "{f}"
        );
    }
}
