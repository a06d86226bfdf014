//! Binary file formats.
//!
//! Every file starts with a 4-byte magic and a `u32` version; all integers
//! and floats are little-endian.
//!
//! | magic  | body |
//! |--------|------|
//! | `MCHF` | `N: u64, D: u32`, `N x D` f32 row-major |
//! | `MCHR` | `N: u64, D: u32`, per item `m: u16`, `m x D` f32, `m x 4` f32 rectangles |
//! | `MCHL` | `N: u64, C: u32`, `N` rows of `ceil(C/8)` bytes, label `l` at bit `l % 8` of byte `l / 8` |
//! | `MCHB` | `D: u32, Q: u32`, relaxation `u8`, loss kind `u8`, alpha, gamma, margin_h, epsilon as f64, weight scheme `u8`, `D x Q` f64 |
//! | `MCHP` | layer count `u32`, `count + 1` widths `u32`, per layer weights (`in x out`) then biases, then per hidden layer running mean then variance, all f64 |
//! | `MCHI` | `Q: u16, items: u64`, per item `id: u64`, `count: u16`, codes of `ceil(Q/8)` bytes |

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::agent::{Dense, PolicyNetwork, RunningStats};
use crate::basemodel::BaseHashModel;
use crate::dataset::{Dataset, Rect};
use crate::error::{Error, Result};
use crate::hamming::HashCode;
use crate::index::{BucketIndex, ItemId};
use crate::loss::{LossKind, LossSpec, Relaxation, SimilarityLabels, WeightScheme};
use crate::scalar::Scalar;

pub const VERSION: u32 = 1;
pub const FEATURES_MAGIC: &[u8; 4] = b"MCHF";
pub const REGIONS_MAGIC: &[u8; 4] = b"MCHR";
pub const LABELS_MAGIC: &[u8; 4] = b"MCHL";
pub const MODEL_MAGIC: &[u8; 4] = b"MCHB";
pub const POLICY_MAGIC: &[u8; 4] = b"MCHP";
pub const INDEX_MAGIC: &[u8; 4] = b"MCHI";

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Reader { buf, pos: 4, what };
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }

    /// Count that must fit in the remaining bytes at `unit` bytes each.
    fn count(&mut self, v: u64, unit: usize) -> Result<usize> {
        let left = (self.buf.len() - self.pos) as u64;
        if unit > 0 && v > left / unit as u64 {
            return Err(Error::Format(format!("{}: count {v} exceeds file size", self.what)));
        }
        Ok(v as usize)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes through a sibling temporary file so a failed run leaves no
/// partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_f32<T: Scalar>(v: T) -> f32 {
    v.to_f64_lossy() as f32
}

pub fn features_to_bytes<T: Scalar>(features: &Array2<T>) -> Result<Vec<u8>> {
    let mut w = Writer::new(FEATURES_MAGIC);
    w.u64(features.nrows() as u64);
    w.u32(u32::try_from(features.ncols()).map_err(|_| Error::dim("feature dim too large"))?);
    features.iter().for_each(|&v| w.f32(to_f32(v)));
    Ok(w.0)
}

pub fn features_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Array2<T>> {
    let mut r = Reader::open(buf, FEATURES_MAGIC, "features")?;
    let n = r.u64()?;
    let d = r.u32()? as usize;
    let n = r.count(n, 4 * d)?;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(T::lit(r.f32()? as f64));
    }
    r.finish()?;
    Ok(Array2::from_shape_vec((n, d), data).expect("shape matches"))
}

pub fn regions_to_bytes<T: Scalar>(dim: usize, regions: &[Array2<T>], rects: &[Vec<Rect>]) -> Result<Vec<u8>> {
    let mut w = Writer::new(REGIONS_MAGIC);
    w.u64(regions.len() as u64);
    w.u32(u32::try_from(dim).map_err(|_| Error::dim("feature dim too large"))?);
    for (r, rc) in regions.iter().zip(rects) {
        let m = u16::try_from(r.nrows()).map_err(|_| Error::dim("too many regions for one item"))?;
        if r.nrows() > 0 && r.ncols() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                found: r.ncols(),
            });
        }
        w.u16(m);
        r.iter().for_each(|&v| w.f32(to_f32(v)));
        for rect in rc {
            rect.iter().for_each(|&v| w.f32(v));
        }
    }
    Ok(w.0)
}

pub fn regions_from_bytes<T: Scalar>(buf: &[u8]) -> Result<(usize, Vec<Array2<T>>, Vec<Vec<Rect>>)> {
    let mut r = Reader::open(buf, REGIONS_MAGIC, "regions")?;
    let n = r.u64()?;
    let d = r.u32()? as usize;
    let n = r.count(n, 2)?;
    let mut regions = Vec::with_capacity(n);
    let mut rects = Vec::with_capacity(n);
    for _ in 0..n {
        let m = r.u16()? as usize;
        r.count(m as u64, 4 * (d + 4))?;
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m * d {
            data.push(T::lit(r.f32()? as f64));
        }
        regions.push(Array2::from_shape_vec((m, d), data).expect("shape matches"));
        let mut rc = Vec::with_capacity(m);
        for _ in 0..m {
            rc.push([r.f32()?, r.f32()?, r.f32()?, r.f32()?]);
        }
        rects.push(rc);
    }
    r.finish()?;
    Ok((d, regions, rects))
}

pub fn labels_to_bytes(labels: &SimilarityLabels) -> Vec<u8> {
    let mut w = Writer::new(LABELS_MAGIC);
    let c = labels.n_labels();
    w.u64(labels.n() as u64);
    w.u32(c as u32);
    for i in 0..labels.n() {
        let mut row = vec![0u8; c.div_ceil(8)];
        for l in labels.labels_of(i) {
            row[l / 8] |= 1 << (l % 8);
        }
        w.0.extend_from_slice(&row);
    }
    w.0
}

pub fn labels_from_bytes(buf: &[u8]) -> Result<SimilarityLabels> {
    let mut r = Reader::open(buf, LABELS_MAGIC, "labels")?;
    let n = r.u64()?;
    let c = r.u32()? as usize;
    let stride = c.div_ceil(8);
    let n = r.count(n, stride)?;
    let mut labels = SimilarityLabels::new(n, c);
    for i in 0..n {
        let row = r.take(stride)?;
        for (byte, &v) in row.iter().enumerate() {
            for bit in 0..8 {
                if v >> bit & 1 == 1 {
                    let l = byte * 8 + bit;
                    if l >= c {
                        return Err(Error::Format(format!("labels: item {i} sets label {l} >= {c}")));
                    }
                    labels.set(i, l)?;
                }
            }
        }
    }
    r.finish()?;
    Ok(labels)
}

pub fn model_to_bytes<T: Scalar>(model: &BaseHashModel<T>) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    let s = &model.spec;
    w.u32(model.dim() as u32);
    w.u32(model.q() as u32);
    w.u8(model.relaxation.tag());
    w.u8(s.kind.tag());
    for v in [s.alpha, s.gamma, s.margin_h, s.epsilon] {
        w.f64(v.to_f64_lossy());
    }
    w.u8(match s.weight_scheme {
        WeightScheme::Uniform => 0,
        WeightScheme::ClassBalanced => 1,
    });
    model.w.iter().for_each(|&v| w.f64(v.to_f64_lossy()));
    w.0
}

pub fn model_from_bytes<T: Scalar>(buf: &[u8]) -> Result<BaseHashModel<T>> {
    let mut r = Reader::open(buf, MODEL_MAGIC, "model")?;
    let d = r.u32()? as usize;
    let q = r.u32()? as usize;
    let fmt = |e: Error| Error::Format(format!("model: {e}"));
    let relaxation = Relaxation::from_tag(r.u8()?).map_err(fmt)?;
    let kind = LossKind::from_tag(r.u8()?).map_err(fmt)?;
    let mut spec = LossSpec::<T>::new(kind, q);
    spec.alpha = T::lit(r.f64()?);
    spec.gamma = T::lit(r.f64()?);
    spec.margin_h = T::lit(r.f64()?);
    spec.epsilon = T::lit(r.f64()?);
    spec.weight_scheme = match r.u8()? {
        0 => WeightScheme::Uniform,
        1 => WeightScheme::ClassBalanced,
        t => return Err(Error::Format(format!("model: unknown weight scheme tag {t}"))),
    };
    let len = r.count((d as u64).saturating_mul(q as u64), 8)?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(T::lit(r.f64()?));
    }
    r.finish()?;
    let w = Array2::from_shape_vec((d, q), data).expect("shape matches");
    BaseHashModel::new(w, relaxation, spec).map_err(fmt)
}

pub fn policy_to_bytes<T: Scalar>(net: &PolicyNetwork<T>) -> Vec<u8> {
    let mut w = Writer::new(POLICY_MAGIC);
    let dims = net.dims();
    w.u32(net.layers.len() as u32);
    dims.iter().for_each(|&d| w.u32(d as u32));
    for l in &net.layers {
        l.w.iter().chain(l.b.iter()).for_each(|&v| w.f64(v.to_f64_lossy()));
    }
    for s in &net.stats {
        s.mean.iter().chain(s.var.iter()).for_each(|&v| w.f64(v.to_f64_lossy()));
    }
    w.0
}

pub fn policy_from_bytes<T: Scalar>(buf: &[u8]) -> Result<PolicyNetwork<T>> {
    let mut r = Reader::open(buf, POLICY_MAGIC, "policy")?;
    let count = r.u32()? as usize;
    let count = r.count(count as u64, 4)?;
    let mut dims = Vec::with_capacity(count + 1);
    for _ in 0..=count {
        dims.push(r.u32()? as usize);
    }
    let vec_of = |r: &mut Reader<'_>, n: usize| -> Result<Vec<T>> {
        let n = r.count(n as u64, 8)?;
        (0..n).map(|_| Ok(T::lit(r.f64()?))).collect()
    };
    let mut layers = Vec::with_capacity(count);
    for win in dims.windows(2) {
        let (i, o) = (win[0], win[1]);
        let w = vec_of(&mut r, i.saturating_mul(o))?;
        let b = vec_of(&mut r, o)?;
        layers.push(Dense {
            w: Array2::from_shape_vec((i, o), w).expect("shape matches"),
            b: Array1::from(b),
        });
    }
    let mut stats = Vec::new();
    for &h in dims.iter().skip(1).take(count.saturating_sub(1)) {
        stats.push(RunningStats {
            mean: Array1::from(vec_of(&mut r, h)?),
            var: Array1::from(vec_of(&mut r, h)?),
        });
    }
    r.finish()?;
    PolicyNetwork::from_parts(layers, stats).map_err(|e| Error::Format(format!("policy: {e}")))
}

pub fn index_to_bytes(index: &BucketIndex) -> Vec<u8> {
    let mut w = Writer::new(INDEX_MAGIC);
    w.u16(index.q() as u16);
    w.u64(index.len() as u64);
    for (id, codes) in index.entries() {
        w.u64(id);
        w.u16(codes.len() as u16);
        codes.iter().for_each(|c| w.0.extend_from_slice(&c.to_bytes()));
    }
    w.0
}

pub fn index_from_bytes(buf: &[u8]) -> Result<BucketIndex> {
    let mut r = Reader::open(buf, INDEX_MAGIC, "index")?;
    let q = r.u16()? as usize;
    let stride = HashCode::byte_len(q);
    let n = r.u64()?;
    let n = r.count(n, 10)?;
    let fmt = |e: Error| Error::Format(format!("index: {e}"));
    let mut entries: Vec<(ItemId, Vec<HashCode>)> = Vec::with_capacity(n);
    for _ in 0..n {
        let id = r.u64()?;
        let m = r.u16()? as usize;
        let codes = (0..m)
            .map(|_| HashCode::from_bytes(r.take(stride)?, q).map_err(fmt))
            .collect::<Result<Vec<_>>>()?;
        entries.push((id, codes));
    }
    r.finish()?;
    BucketIndex::build(q, entries).map_err(fmt)
}

pub fn save_dataset<T: Scalar>(data: &Dataset<T>, features: &Path, regions: &Path, labels: &Path) -> Result<()> {
    let f = features_to_bytes(&data.features)?;
    let r = regions_to_bytes(data.dim(), &data.regions, &data.rects)?;
    let l = labels_to_bytes(&data.labels);
    write_atomic(features, &f)?;
    write_atomic(regions, &r)?;
    write_atomic(labels, &l)
}

pub fn load_dataset<T: Scalar>(features: &Path, regions: &Path, labels: &Path) -> Result<Dataset<T>> {
    let f = features_from_bytes::<T>(&fs::read(features)?)?;
    let (d, r, rects) = regions_from_bytes::<T>(&fs::read(regions)?)?;
    let l = labels_from_bytes(&fs::read(labels)?)?;
    if d != f.ncols() {
        return Err(Error::LengthMismatch {
            expected: f.ncols(),
            found: d,
        });
    }
    Dataset::new(f, r, rects, l)
}

pub fn save_model<T: Scalar>(model: &BaseHashModel<T>, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<BaseHashModel<T>> {
    model_from_bytes(&fs::read(path)?)
}

pub fn save_policy<T: Scalar>(net: &PolicyNetwork<T>, path: &Path) -> Result<()> {
    write_atomic(path, &policy_to_bytes(net))
}

pub fn load_policy<T: Scalar>(path: &Path) -> Result<PolicyNetwork<T>> {
    policy_from_bytes(&fs::read(path)?)
}

pub fn save_index(index: &BucketIndex, path: &Path) -> Result<()> {
    write_atomic(path, &index_to_bytes(index))
}

pub fn load_index(path: &Path) -> Result<BucketIndex> {
    index_from_bytes(&fs::read(path)?)
}
