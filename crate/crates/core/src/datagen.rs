//! Synthetic corpora with composite items, and the three-bit dog/cat scenario.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{Dataset, Rect};
use crate::error::{Error, Result};
use crate::hamming::{asymmetric_distance, hamming_distance, HashCode};
use crate::index::visited_bucket_count;
use crate::loss::SimilarityLabels;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub composite_fraction: f64,
    pub noise_sigma: f64,
    pub regions_per_item: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 5000,
            c: 8,
            d: 64,
            composite_fraction: 0.2,
            noise_sigma: 0.3,
            regions_per_item: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 || self.n < self.c {
            return Err(Error::Config(format!(
                "need n >= c >= 2, got n={} c={}",
                self.n, self.c
            )));
        }
        if self.d < self.c {
            return Err(Error::Config(format!(
                "feature dim {} cannot hold {} orthogonal prototypes",
                self.d, self.c
            )));
        }
        if !(0.0..=1.0).contains(&self.composite_fraction) {
            return Err(Error::Config("composite_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.regions_per_item > u16::MAX as usize {
            return Err(Error::Config("too many regions per item".into()));
        }
        Ok(())
    }
}

/// `c` orthonormal directions scaled to norm `sqrt(d)`, one per row.
fn prototypes(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Array2<f64> {
    let mut p = Array2::<f64>::zeros((c, d));
    for i in 0..c {
        let mut v = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut *rng));
        for j in 0..i {
            let u = p.row(j);
            let dot = v.dot(&u);
            v.scaled_add(-dot, &u);
        }
        let norm = v.dot(&v).sqrt();
        p.row_mut(i).assign(&(v / norm));
    }
    p * (d as f64).sqrt()
}

/// Composite items are the mean of two category prototypes and carry both
/// labels; their regions alternate between the two prototypes. Every other
/// item and all of its regions sit at one prototype. Independent Gaussian
/// noise is added to every feature vector.
pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<Dataset<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = prototypes(&mut rng, cfg.c, cfg.d);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n_comp = (cfg.composite_fraction * cfg.n as f64).round() as usize;
    let mut composite = vec![false; cfg.n];
    for i in sample(&mut rng, cfg.n, n_comp) {
        composite[i] = true;
    }

    let m = cfg.regions_per_item;
    let mut features = Array2::<T>::zeros((cfg.n, cfg.d));
    let mut regions = Vec::with_capacity(cfg.n);
    let mut labels = SimilarityLabels::new(cfg.n, cfg.c);
    let noisy =
        |rng: &mut ChaCha8Rng, center: &Array1<f64>| -> Array1<T> { center.mapv(|x| T::lit(x + noise.sample(rng))) };
    for i in 0..cfg.n {
        let a = rng.gen_range(0..cfg.c);
        let parts: Vec<usize> = if composite[i] {
            let mut b = rng.gen_range(0..cfg.c - 1);
            if b >= a {
                b += 1;
            }
            vec![a, b]
        } else {
            vec![a]
        };
        for &l in &parts {
            labels.set(i, l)?;
        }
        let whole = parts.iter().fold(Array1::zeros(cfg.d), |acc, &l| acc + protos.row(l)) / parts.len() as f64;
        features.row_mut(i).assign(&noisy(&mut rng, &whole));
        let mut r = Array2::<T>::zeros((m, cfg.d));
        for k in 0..m {
            let center = protos.row(parts[k % parts.len()]).to_owned();
            r.row_mut(k).assign(&noisy(&mut rng, &center));
        }
        regions.push(r);
    }
    let rects = vec![vec![[0.0f32; 4]; m]; cfg.n];
    Dataset::new(features, regions, rects, labels)
}

/// Items carrying two or more labels.
pub fn composite_items(labels: &SimilarityLabels) -> Vec<usize> {
    (0..labels.n()).filter(|&i| labels.labels_of(i).len() >= 2).collect()
}

/// The three-bit example: a dog query, a cat query and one database item
/// that is both.
#[derive(Clone, Debug, PartialEq)]
pub struct Figure1 {
    pub query_dog: HashCode,
    pub query_cat: HashCode,
    /// The two region codes of the dog-and-cat item.
    pub multi_code: [HashCode; 2],
}

pub fn figure1_scenario() -> Figure1 {
    Figure1 {
        query_dog: "010".parse().expect("valid code"),
        query_cat: "101".parse().expect("valid code"),
        multi_code: ["010".parse().expect("valid code"), "101".parse().expect("valid code")],
    }
}

impl Figure1 {
    /// Smallest radius that lets one single code reach both queries,
    /// searched over every 3-bit code.
    pub fn best_single_code_radius(&self) -> u32 {
        (0..8u64)
            .map(|v| {
                let c = HashCode::from_u64(v, 3).expect("3-bit code");
                let a = hamming_distance(&c, &self.query_dog).expect("same length");
                let b = hamming_distance(&c, &self.query_cat).expect("same length");
                a.max(b)
            })
            .min()
            .expect("nonempty")
    }

    /// Asymmetric distances from the two-code item to (dog, cat).
    pub fn multi_code_distances(&self) -> (u32, u32) {
        let d = |q: &HashCode| asymmetric_distance(&self.multi_code, q).expect("nonempty codes");
        (d(&self.query_dog), d(&self.query_cat))
    }

    /// Buckets probed when every radius up to `r` is exhausted.
    pub fn bucket_cost(&self, r: usize) -> u128 {
        visited_bucket_count(3, r).expect("radius within code length")
    }
}

pub const FIGURE1_DOG: [f64; 3] = [-1.0, 1.0, -1.0];
pub const FIGURE1_CAT: [f64; 3] = [1.0, -1.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Figure1Config {
    pub n_dog: usize,
    pub n_cat: usize,
    pub n_composite: usize,
    /// Per-coordinate noise; keep well below 1 so signs never flip.
    pub noise: f64,
    pub seed: u64,
}

impl Default for Figure1Config {
    fn default() -> Self {
        Figure1Config {
            n_dog: 20,
            n_cat: 20,
            n_composite: 10,
            noise: 0.1,
            seed: 1,
        }
    }
}

/// Three-dimensional features realizing the scenario under an identity
/// hash layer: dogs encode to `010`, cats to `101`.
///
/// Item 0 is a dog query, item 1 a cat query, item 2 the first dog-and-cat
/// item; the remaining items follow in a seeded order. A dog-and-cat item
/// has a weak whole feature encoding to `111` and regions alternating dog,
/// cat. A plain item has four regions like itself and one background region
/// that looks like the other animal.
pub fn figure1_dataset<T: Scalar>(cfg: &Figure1Config) -> Result<Dataset<T>> {
    if cfg.n_dog == 0 || cfg.n_cat == 0 || cfg.n_composite == 0 {
        return Err(Error::Config(
            "figure-1 data needs at least one dog, cat and composite".into(),
        ));
    }
    if !(0.0..0.5).contains(&cfg.noise) {
        return Err(Error::Config("figure-1 noise must lie in [0, 0.5)".into()));
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        Dog,
        Cat,
        Both,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rest: Vec<Kind> = std::iter::repeat(Kind::Dog)
        .take(cfg.n_dog - 1)
        .chain(std::iter::repeat(Kind::Cat).take(cfg.n_cat - 1))
        .chain(std::iter::repeat(Kind::Both).take(cfg.n_composite - 1))
        .collect();
    rand::seq::SliceRandom::shuffle(rest.as_mut_slice(), &mut rng);
    let kinds: Vec<Kind> = [Kind::Dog, Kind::Cat, Kind::Both].into_iter().chain(rest).collect();

    let n = kinds.len();
    let dog = Array1::from(FIGURE1_DOG.to_vec());
    let cat = Array1::from(FIGURE1_CAT.to_vec());
    let both = Array1::from(vec![0.3, 0.3, 0.3]);
    let jitter = |rng: &mut ChaCha8Rng, v: &Array1<f64>, scale: f64| -> Array1<T> {
        v.mapv(|x| T::lit(x * scale + rng.gen_range(-cfg.noise..=cfg.noise) * scale))
    };
    let mut features = Array2::<T>::zeros((n, 3));
    let mut regions = Vec::with_capacity(n);
    let mut labels = SimilarityLabels::new(n, 2);
    for (i, kind) in kinds.iter().enumerate() {
        let (whole, region_src): (&Array1<f64>, [&Array1<f64>; 5]) = match kind {
            Kind::Dog => (&dog, [&dog, &dog, &dog, &dog, &cat]),
            Kind::Cat => (&cat, [&cat, &cat, &cat, &cat, &dog]),
            Kind::Both => (&both, [&dog, &cat, &dog, &cat, &dog]),
        };
        if *kind != Kind::Cat {
            labels.set(i, 0)?;
        }
        if *kind != Kind::Dog {
            labels.set(i, 1)?;
        }
        features.row_mut(i).assign(&jitter(&mut rng, whole, 1.0));
        let mut r = Array2::<T>::zeros((5, 3));
        for (k, src) in region_src.iter().enumerate() {
            r.row_mut(k).assign(&jitter(&mut rng, src, 0.8));
        }
        regions.push(r);
    }
    Dataset::new(features, regions, vec![vec![[0.0f32; 4] as Rect; 5]; n], labels)
}
