//! Dense row-major tensors and flattened parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor data", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor (first dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Trailing extent; for a 1-D tensor this is its length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Gathers the given rows into a new 2-D tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One named segment of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat trainable parameters of one network plus the layer layout needed to
/// slice them back into tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    /// Concatenates named tensors into one flat vector.
    pub fn flatten(parts: Vec<(String, Tensor)>) -> Self {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(parts.len());
        for (name, t) in parts {
            layout.push(Segment {
                name,
                offset: values.len(),
                shape: t.shape().to_vec(),
            });
            values.extend_from_slice(t.data());
        }
        Self { values, layout }
    }

    /// Rebuilds a parameter vector from raw values and an existing layout.
    pub fn from_layout(layout: Vec<Segment>, values: Vec<f64>) -> Result<Self> {
        let mut expected_offset = 0;
        for seg in &layout {
            if seg.offset != expected_offset {
                return Err(Error::Contract(format!(
                    "segment {} starts at {} but previous segment ends at {}",
                    seg.name, seg.offset, expected_offset
                )));
            }
            expected_offset += seg.len();
        }
        if expected_offset != values.len() {
            return Err(Error::dim("parameter values", expected_offset, values.len()));
        }
        Ok(Self { values, layout })
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .iter()
            .map(|seg| {
                let t = Tensor {
                    shape: seg.shape.clone(),
                    data: self.values[seg.range()].to_vec(),
                };
                (seg.name.clone(), t)
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    /// Replaces the values, keeping the layout.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::dim("parameter values", self.values.len(), values.len()));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn from_layout_rejects_gaps() {
        let layout = vec![
            Segment { name: "a".into(), offset: 0, shape: vec![2] },
            Segment { name: "b".into(), offset: 3, shape: vec![1] },
        ];
        assert!(ParamVector::from_layout(layout, vec![0.0; 4]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..5), seed in any::<u64>()) {
            let mut k = seed;
            let parts: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| { k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5 }).collect();
                (format!("p{i}"), Tensor::new(s.clone(), data).unwrap())
            }).collect();
            let pv = ParamVector::flatten(parts.clone());
            let total: usize = pv.layout().iter().map(Segment::len).sum();
            prop_assert_eq!(total, pv.len());
            prop_assert_eq!(pv.unflatten(), parts);
            let rebuilt = ParamVector::from_layout(pv.layout().to_vec(), pv.values().to_vec()).unwrap();
            prop_assert_eq!(rebuilt, pv);
        }
    }
}
