//! File-to-file pipeline stages driven by one key=value configuration.
//!
//! Items `0..n_query` of the corpus are queries, the rest form the database,
//! and the first `n_train` database items (all when 0) train the base model
//! and the agent. Item ids in indexes are corpus row numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::agent::{train_agent, AgentOptions, PairScope, RewardConfig, HIDDEN_LAYERS};
use crate::basemodel::{train_base_from, BaseHashModel, TrainConfig};
use crate::datagen::{figure1_dataset, generate, Figure1Config, SynthConfig};
use crate::dataset::Dataset;
use crate::encoder::{anhc, encode_corpus, encode_single, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{build_queries, evaluate, EvalReport, Query};
use crate::hamming::HashCode;
use crate::index::{BucketIndex, ItemId, SearchResult};
use crate::io;
use crate::loss::{LossKind, LossSpec, WeightScheme};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Figure1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseInit {
    Gaussian,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dir: PathBuf,
    pub dataset: DataSource,
    pub synth: SynthConfig,
    pub figure1: Figure1Config,
    pub n_query: usize,
    pub n_train: usize,
    pub loss: LossSpec<f64>,
    pub base_init: BaseInit,
    pub base: TrainConfig,
    pub agent: TrainConfig,
    pub agent_opts: AgentOptions,
    pub pair_scope: PairScope,
    /// Peers per item under sampled scope; 0 means the batch size.
    pub sample_size: usize,
    pub encoder: EncoderConfig,
    pub r_max: Option<usize>,
    pub ks: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let agent = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        PipelineConfig {
            dir: PathBuf::from("."),
            dataset: DataSource::Synthetic,
            synth: SynthConfig::default(),
            figure1: Figure1Config::default(),
            n_query: 500,
            n_train: 0,
            loss: LossSpec::new(LossKind::Dch, 16),
            base_init: BaseInit::Gaussian,
            base: TrainConfig::default(),
            agent,
            agent_opts: AgentOptions::default(),
            pair_scope: PairScope::Sampled,
            sample_size: 0,
            encoder: EncoderConfig::default(),
            r_max: None,
            ks: None,
            seed: 0,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dir" => self.dir = PathBuf::from(v),
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DataSource::Synthetic,
                    "figure1" => DataSource::Figure1,
                    _ => return Err(Error::Config(format!("dataset: unknown source {v:?}"))),
                }
            }
            "n" => self.synth.n = parse(key, v)?,
            "c" => self.synth.c = parse(key, v)?,
            "d" => self.synth.d = parse(key, v)?,
            "composite_fraction" => self.synth.composite_fraction = parse(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "regions_per_item" => self.synth.regions_per_item = parse(key, v)?,
            "figure1_dogs" => self.figure1.n_dog = parse(key, v)?,
            "figure1_cats" => self.figure1.n_cat = parse(key, v)?,
            "figure1_composites" => self.figure1.n_composite = parse(key, v)?,
            "figure1_noise" => self.figure1.noise = parse(key, v)?,
            "n_query" => self.n_query = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "loss" => {
                let kind: LossKind = parse(key, v)?;
                self.loss.kind = kind;
            }
            "q" => self.loss.q = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "margin_h" => self.loss.margin_h = parse(key, v)?,
            "epsilon" => self.loss.epsilon = parse(key, v)?,
            "weight_scheme" => self.loss.weight_scheme = parse::<WeightScheme>(key, v)?,
            "base_init" => {
                self.base_init = match v {
                    "gaussian" => BaseInit::Gaussian,
                    "identity" => BaseInit::Identity,
                    _ => return Err(Error::Config(format!("base_init: unknown {v:?}"))),
                }
            }
            "base_lr" => self.base.learning_rate = parse(key, v)?,
            "base_momentum" => self.base.momentum = parse(key, v)?,
            "base_weight_decay" => self.base.weight_decay = parse(key, v)?,
            "base_epochs" => self.base.epochs = parse(key, v)?,
            "base_batch" => self.base.batch_size = parse(key, v)?,
            "reg_weight" => self.base.reg_weight = parse(key, v)?,
            "agent_lr" => self.agent.learning_rate = parse(key, v)?,
            "agent_momentum" => self.agent.momentum = parse(key, v)?,
            "agent_weight_decay" => self.agent.weight_decay = parse(key, v)?,
            "agent_iterations" => self.agent.epochs = parse(key, v)?,
            "agent_batch" => self.agent.batch_size = parse(key, v)?,
            "hidden" => {
                let h = parse_list(key, v)?;
                self.agent_opts.hidden = h
                    .try_into()
                    .map_err(|_| Error::Config(format!("hidden: expected {HIDDEN_LAYERS} comma-separated widths")))?;
            }
            "baseline" => self.agent_opts.baseline = parse_bool(key, v)?,
            "pair_scope" => self.pair_scope = parse(key, v)?,
            "sample_size" => self.sample_size = parse(key, v)?,
            "sigma" => self.encoder.sigma = parse(key, v)?,
            "xi" => self.encoder.xi = parse(key, v)?,
            "max_regions" => self.encoder.max_regions = parse(key, v)?,
            "r_max" => self.r_max = if v == "auto" { None } else { Some(parse(key, v)?) },
            "ks" => self.ks = if v == "auto" { None } else { Some(parse_list(key, v)?) },
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", no + 1)));
            };
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every setting, one `key = value` per line, in a stable order.
    pub fn resolved(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("dir", self.dir.display().to_string());
        m.insert(
            "dataset",
            match self.dataset {
                DataSource::Synthetic => "synthetic",
                DataSource::Figure1 => "figure1",
            }
            .into(),
        );
        m.insert("n", self.synth.n.to_string());
        m.insert("c", self.synth.c.to_string());
        m.insert("d", self.synth.d.to_string());
        m.insert("composite_fraction", self.synth.composite_fraction.to_string());
        m.insert("noise_sigma", self.synth.noise_sigma.to_string());
        m.insert("regions_per_item", self.synth.regions_per_item.to_string());
        m.insert("figure1_dogs", self.figure1.n_dog.to_string());
        m.insert("figure1_cats", self.figure1.n_cat.to_string());
        m.insert("figure1_composites", self.figure1.n_composite.to_string());
        m.insert("figure1_noise", self.figure1.noise.to_string());
        m.insert("n_query", self.n_query.to_string());
        m.insert("n_train", self.n_train.to_string());
        m.insert("loss", self.loss.kind.to_string());
        m.insert("q", self.loss.q.to_string());
        m.insert("alpha", self.loss.alpha.to_string());
        m.insert("gamma", self.loss.gamma.to_string());
        m.insert("margin_h", self.loss.margin_h.to_string());
        m.insert("epsilon", self.loss.epsilon.to_string());
        m.insert("weight_scheme", self.loss.weight_scheme.to_string());
        m.insert(
            "base_init",
            match self.base_init {
                BaseInit::Gaussian => "gaussian",
                BaseInit::Identity => "identity",
            }
            .into(),
        );
        m.insert("base_lr", self.base.learning_rate.to_string());
        m.insert("base_momentum", self.base.momentum.to_string());
        m.insert("base_weight_decay", self.base.weight_decay.to_string());
        m.insert("base_epochs", self.base.epochs.to_string());
        m.insert("base_batch", self.base.batch_size.to_string());
        m.insert("reg_weight", self.base.reg_weight.to_string());
        m.insert("agent_lr", self.agent.learning_rate.to_string());
        m.insert("agent_momentum", self.agent.momentum.to_string());
        m.insert("agent_weight_decay", self.agent.weight_decay.to_string());
        m.insert("agent_iterations", self.agent.epochs.to_string());
        m.insert("agent_batch", self.agent.batch_size.to_string());
        m.insert("hidden", join(&self.agent_opts.hidden));
        m.insert("baseline", self.agent_opts.baseline.to_string());
        m.insert("pair_scope", self.pair_scope.to_string());
        m.insert("sample_size", self.sample_size.to_string());
        m.insert("sigma", self.encoder.sigma.to_string());
        m.insert("xi", self.encoder.xi.to_string());
        m.insert("max_regions", self.encoder.max_regions.to_string());
        m.insert("r_max", self.r_max.map_or("auto".into(), |r| r.to_string()));
        m.insert("ks", self.ks.as_deref().map_or("auto".into(), join));
        m.insert("seed", self.seed.to_string());
        let mut out = String::new();
        for (k, v) in m {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn log_resolved(&self) {
        for line in self.resolved().lines() {
            log::info!("config: {line}");
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.base.validate()?;
        self.agent.validate()?;
        self.encoder.validate()?;
        if let Some(r) = self.r_max {
            if r > self.loss.q {
                return Err(Error::Config(format!("r_max {r} exceeds q {}", self.loss.q)));
            }
        }
        if let Some(ks) = &self.ks {
            if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("ks must be positive and strictly ascending".into()));
            }
        }
        if self.agent_opts.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn base_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn agent_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

pub const FEATURES_FILE: &str = "features.mchf";
pub const REGIONS_FILE: &str = "regions.mchr";
pub const LABELS_FILE: &str = "labels.mchl";
pub const MODEL_FILE: &str = "model.mchb";
pub const POLICY_FILE: &str = "policy.mchp";
pub const INDEX_FILE: &str = "index.mchi";
pub const BASELINE_INDEX_FILE: &str = "baseline_index.mchi";
pub const REPORT_FILE: &str = "report.json";
pub const CURVE_FILE: &str = "curve.tsv";
pub const BASELINE_REPORT_FILE: &str = "baseline_report.json";
pub const BASELINE_CURVE_FILE: &str = "baseline_curve.tsv";

/// Corpus split into query rows, database rows and training rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub queries: Vec<usize>,
    pub database: Vec<usize>,
    pub train: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, n_query: usize, n_train: usize) -> Result<Self> {
        if n_query >= n {
            return Err(Error::Config(format!(
                "n_query {n_query} leaves no database out of {n} items"
            )));
        }
        let database: Vec<usize> = (n_query..n).collect();
        let take = if n_train == 0 { database.len() } else { n_train };
        if take > database.len() {
            return Err(Error::Config(format!(
                "n_train {take} exceeds database size {}",
                database.len()
            )));
        }
        Ok(Split {
            queries: (0..n_query).collect(),
            train: database[..take].to_vec(),
            database,
        })
    }
}

pub fn load_data<T: Scalar>(cfg: &PipelineConfig) -> Result<Dataset<T>> {
    io::load_dataset(
        &cfg.path(FEATURES_FILE),
        &cfg.path(REGIONS_FILE),
        &cfg.path(LABELS_FILE),
    )
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let data: Dataset<f64> = match cfg.dataset {
        DataSource::Synthetic => generate(&SynthConfig {
            seed: cfg.seed,
            ..cfg.synth.clone()
        })?,
        DataSource::Figure1 => figure1_dataset(&Figure1Config {
            seed: cfg.seed,
            ..cfg.figure1.clone()
        })?,
    };
    std::fs::create_dir_all(&cfg.dir)?;
    io::save_dataset(
        &data,
        &cfg.path(FEATURES_FILE),
        &cfg.path(REGIONS_FILE),
        &cfg.path(LABELS_FILE),
    )?;
    log::info!("wrote {} items of dimension {}", data.len(), data.dim());
    Ok(())
}

fn spec<T: Scalar>(cfg: &PipelineConfig) -> LossSpec<T> {
    let l = &cfg.loss;
    LossSpec {
        kind: l.kind,
        q: l.q,
        alpha: T::lit(l.alpha),
        gamma: T::lit(l.gamma),
        margin_h: T::lit(l.margin_h),
        weight_scheme: l.weight_scheme,
        epsilon: T::lit(l.epsilon),
    }
}

pub fn train_base_stage<T: Scalar>(cfg: &PipelineConfig) -> Result<BaseHashModel<T>> {
    cfg.validate()?;
    let data = load_data::<T>(cfg)?;
    let split = Split::new(data.len(), cfg.n_query, cfg.n_train)?;
    let train = data.subset(&split.train);
    let spec = spec::<T>(cfg);
    let init = match cfg.base_init {
        BaseInit::Gaussian => BaseHashModel::gaussian(data.dim(), spec, 1.0, cfg.base_seed())?,
        BaseInit::Identity => {
            if data.dim() != spec.q {
                return Err(Error::Config(format!(
                    "identity init needs d == q, got d={} q={}",
                    data.dim(),
                    spec.q
                )));
            }
            BaseHashModel::identity(spec)?
        }
    };
    let tcfg = TrainConfig {
        seed: cfg.base_seed(),
        ..cfg.base.clone()
    };
    let out = train_base_from(init, train.features.view(), &train.labels, &tcfg)?;
    if let Some(last) = out.epoch_objective.last() {
        log::info!("base model trained, final epoch objective {last}");
    }
    io::save_model(&out.model, &cfg.path(MODEL_FILE))?;
    Ok(out.model)
}

pub fn train_agent_stage<T: Scalar>(cfg: &PipelineConfig) -> Result<crate::agent::PolicyNetwork<T>> {
    cfg.validate()?;
    let data = load_data::<T>(cfg)?;
    let base = io::load_model::<T>(&cfg.path(MODEL_FILE))?;
    let split = Split::new(data.len(), cfg.n_query, cfg.n_train)?;
    let train = data.subset(&split.train);
    let tcfg = TrainConfig {
        seed: cfg.agent_seed(),
        ..cfg.agent.clone()
    };
    let sample_size = if cfg.sample_size == 0 {
        tcfg.batch_size
    } else {
        cfg.sample_size
    };
    let rcfg = RewardConfig {
        pair_scope: cfg.pair_scope,
        sample_size,
        spec: base.spec,
    };
    let out = train_agent(&train, &base, &tcfg, &rcfg, &cfg.agent_opts)?;
    if let (Some(r), Some(k)) = (out.mean_reward.last(), out.keep_rate.last()) {
        log::info!("agent trained, last mean reward {r}, keep rate {k}");
    }
    io::save_policy(&out.policy, &cfg.path(POLICY_FILE))?;
    Ok(out.policy)
}

/// Writes the multi-code index and the single-code baseline index over the
/// database; returns the ANHC at the configured threshold.
pub fn encode_stage<T: Scalar>(cfg: &PipelineConfig) -> Result<f64> {
    cfg.validate()?;
    let data = load_data::<T>(cfg)?;
    let base = io::load_model::<T>(&cfg.path(MODEL_FILE))?;
    let policy = io::load_policy::<T>(&cfg.path(POLICY_FILE))?;
    let split = Split::new(data.len(), cfg.n_query, cfg.n_train)?;
    let db = data.subset(&split.database);
    let first = cfg.n_query as ItemId;
    let entries = encode_corpus(&base, &policy, &db, &cfg.encoder, first)?;
    let value = anhc(&entries, T::lit(cfg.encoder.xi))?.to_f64_lossy();
    for xi in [0.0, 0.25, 0.5, 0.75, 1.0] {
        log::info!("ANHC at xi={xi}: {}", anhc(&entries, T::lit(xi))?);
    }
    let q = base.q();
    let index = BucketIndex::build(q, entries.iter().map(|e| (e.item, e.codes.clone())))?;
    let single = encode_single(&base, &db, first)?;
    let baseline = BucketIndex::build(q, single.iter().map(|e| (e.item, e.codes.clone())))?;
    io::save_index(&index, &cfg.path(INDEX_FILE))?;
    io::save_index(&baseline, &cfg.path(BASELINE_INDEX_FILE))?;
    log::info!(
        "indexed {} items in {} buckets (baseline {})",
        index.len(),
        index.n_buckets(),
        baseline.n_buckets()
    );
    Ok(value)
}

/// `1, 2, 5, 10, 20, 50, ...` below `n`, then `n`.
pub fn default_ks(n: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    let mut scale = 1usize;
    'outer: loop {
        for m in [1, 2, 5] {
            let k = m * scale;
            if k >= n {
                break 'outer;
            }
            ks.push(k);
        }
        scale *= 10;
    }
    ks.push(n.max(1));
    ks
}

/// Whole-item codes of the query rows paired with their ground truth.
pub fn queries<T: Scalar>(cfg: &PipelineConfig, data: &Dataset<T>, base: &BaseHashModel<T>) -> Result<Vec<Query>> {
    let split = Split::new(data.len(), cfg.n_query, cfg.n_train)?;
    let qdata = data.subset(&split.queries);
    let codes = base.codes(qdata.features.view())?;
    Ok(build_queries(&data.labels, &codes, &split.queries, &split.database))
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub baseline: EvalReport,
}

pub fn eval_stage<T: Scalar>(cfg: &PipelineConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let data = load_data::<T>(cfg)?;
    let base = io::load_model::<T>(&cfg.path(MODEL_FILE))?;
    let index = io::load_index(&cfg.path(INDEX_FILE))?;
    let baseline = io::load_index(&cfg.path(BASELINE_INDEX_FILE))?;
    let qs = queries(cfg, &data, &base)?;
    let ks = cfg.ks.clone().unwrap_or_else(|| default_ks(index.len()));
    let r_max = cfg.r_max.unwrap_or(base.q());
    let codes_per_item =
        |idx: &BucketIndex| idx.entries().map(|(_, c)| c.len()).sum::<usize>() as f64 / idx.len().max(1) as f64;
    let report = evaluate(&index, &qs, &ks, r_max, Some(codes_per_item(&index)))?;
    let base_report = evaluate(&baseline, &qs, &ks, r_max, Some(codes_per_item(&baseline)))?;
    report.write_json(&cfg.path(REPORT_FILE))?;
    report.write_curve_tsv(&cfg.path(CURVE_FILE))?;
    base_report.write_json(&cfg.path(BASELINE_REPORT_FILE))?;
    base_report.write_curve_tsv(&cfg.path(BASELINE_CURVE_FILE))?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    log::info!(
        "multi-code: R@H=0 {} P@H=0 {} mAP {}",
        show(report.recall_h0),
        show(report.precision_h0),
        show(report.map)
    );
    log::info!(
        "single-code: R@H=0 {} P@H=0 {} mAP {}",
        show(base_report.recall_h0),
        show(base_report.precision_h0),
        show(base_report.map)
    );
    Ok(EvalOutcome {
        report,
        baseline: base_report,
    })
}

/// Search target: a literal code or a corpus row encoded with the base model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SearchQuery {
    Code(String),
    Item(usize),
}

pub fn search_stage<T: Scalar>(
    cfg: &PipelineConfig,
    query: &SearchQuery,
    k: usize,
    baseline: bool,
) -> Result<(HashCode, SearchResult, Vec<u32>)> {
    let index = io::load_index(&cfg.path(if baseline { BASELINE_INDEX_FILE } else { INDEX_FILE }))?;
    let code = match query {
        SearchQuery::Code(s) => {
            let c: HashCode = s.parse()?;
            if c.len() != index.q() {
                return Err(Error::LengthMismatch {
                    expected: index.q(),
                    found: c.len(),
                });
            }
            c
        }
        SearchQuery::Item(row) => {
            let data = load_data::<T>(cfg)?;
            let base = io::load_model::<T>(&cfg.path(MODEL_FILE))?;
            if *row >= data.len() {
                return Err(Error::arg(format!("item {row} out of range for {} items", data.len())));
            }
            base.encode(data.features.row(*row))?.1
        }
    };
    let r_max = cfg.r_max.unwrap_or(index.q()).min(index.q());
    let res = index.bucket_search(&code, k, r_max)?;
    let dists = res
        .items
        .iter()
        .map(|id| {
            let codes = index.codes(*id).expect("search returns indexed items");
            crate::hamming::asymmetric_distance(codes, &code)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((code, res, dists))
}
