use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C × width` table with one optional row per class; absent rows mark classes
/// a client does not own (or, after aggregation, that no client owns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMatrix {
    width: usize,
    rows: Vec<Option<Vec<f32>>>,
}

impl ClassMatrix {
    pub fn empty(classes: usize, width: usize) -> Self {
        ClassMatrix { width, rows: vec![None; classes] }
    }

    pub fn from_rows(width: usize, rows: Vec<Option<Vec<f32>>>) -> Result<Self> {
        if rows.iter().flatten().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument(format!("class matrix rows must have width {width}")));
        }
        Ok(ClassMatrix { width, rows })
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, class: usize) -> Option<&[f32]> {
        self.rows.get(class).and_then(|r| r.as_deref())
    }

    pub fn set_row(&mut self, class: usize, row: Vec<f32>) -> Result<()> {
        if row.len() != self.width || class >= self.rows.len() {
            return Err(Error::InvalidArgument(format!("row for class {class} of width {}", row.len())));
        }
        self.rows[class] = Some(row);
        Ok(())
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.row(class).is_some()
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&c| self.rows[c].is_some()).collect()
    }

    /// Present rows of the given classes stacked into a tensor.
    pub fn gather(&self, classes: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(classes.len() * self.width);
        for &c in classes {
            data.extend_from_slice(self.row(c).ok_or(Error::AbsentClass(c))?);
        }
        Tensor::new(vec![classes.len(), self.width], data)
    }

    /// Bytes on the wire: the full `C × width` float32 matrix.
    pub fn wire_bytes(&self) -> usize {
        4 * self.rows.len() * self.width
    }
}
