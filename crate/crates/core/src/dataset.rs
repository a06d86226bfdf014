//! Items with a whole feature, a set of region features and multi-hot labels.

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{check_len, Error, Result};
use crate::loss::SimilarityLabels;
use crate::scalar::Scalar;

/// Crop rectangle `[x, y, w, h]` in normalized image units; zeros when synthetic.
pub type Rect = [f32; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `N x D` whole-item features.
    pub features: Array2<T>,
    /// Per item, an `m_i x D` block of region features.
    pub regions: Vec<Array2<T>>,
    /// Per item, the `m_i` rectangles the regions were cut from.
    pub rects: Vec<Vec<Rect>>,
    pub labels: SimilarityLabels,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        features: Array2<T>,
        regions: Vec<Array2<T>>,
        rects: Vec<Vec<Rect>>,
        labels: SimilarityLabels,
    ) -> Result<Self> {
        let n = features.nrows();
        let d = features.ncols();
        check_len(n, regions.len())?;
        check_len(n, rects.len())?;
        check_len(n, labels.n())?;
        for (r, rc) in regions.iter().zip(&rects) {
            if r.nrows() > 0 {
                check_len(d, r.ncols())?;
            }
            check_len(r.nrows(), rc.len())?;
        }
        if features.iter().any(|v| !v.is_finite()) || regions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            regions,
            rects,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn region(&self, item: usize, r: usize) -> ArrayView1<'_, T> {
        self.regions[item].row(r)
    }

    /// Items `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset<T> {
        Dataset {
            features: self.features.select(Axis(0), idx),
            regions: idx.iter().map(|&i| self.regions[i].clone()).collect(),
            rects: idx.iter().map(|&i| self.rects[i].clone()).collect(),
            labels: self.labels.subset(idx),
        }
    }
}
