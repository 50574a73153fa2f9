//! 2-D integer class-id grids: parsing labels, segmentation labels, and
//! predictions.

use crate::error::{Error, Result};

/// A height x width grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("label buffer length {}", data.len()),
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents rejected at construction
    }

    pub fn ids(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.data[y * self.width + x] = id;
    }

    /// Error if any id falls outside `[0, classes)`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        for &id in &self.data {
            if (id as usize) >= classes {
                return Err(Error::LabelOutOfRange {
                    id: id as usize,
                    classes,
                });
            }
        }
        Ok(())
    }

    /// Pixel count per class.
    pub fn class_counts(&self, classes: usize) -> Result<Vec<u64>> {
        self.check_classes(classes)?;
        let mut counts = vec![0u64; classes];
        for &id in &self.data {
            counts[id as usize] += 1;
        }
        Ok(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_ids() {
        let m = LabelMap::new(1, 3, vec![0, 1, 4]).unwrap();
        assert!(m.check_classes(5).is_ok());
        assert!(matches!(
            m.check_classes(4),
            Err(Error::LabelOutOfRange { id: 4, classes: 4 })
        ));
    }

    #[test]
    fn counts_every_pixel() {
        let m = LabelMap::new(2, 2, vec![1, 1, 0, 2]).unwrap();
        assert_eq!(m.class_counts(3).unwrap(), vec![1, 2, 1]);
    }
}
