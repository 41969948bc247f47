use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

/// An `height x width` raster of `channels`-dimensional patch embeddings
/// standing in for one image. Patches are stored in raster (row-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PatchGrid {
    /// `data` holds `height * width` patches of `channels` values each, back to back.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Structural(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Structural(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Structural(format!(
                "non-finite patch value at flat index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
        .expect("zero grid is valid for positive dimensions")
    }

    pub fn from_patches(height: usize, width: usize, patches: &[Vec<f64>]) -> Result<Self> {
        let channels = patches.first().map(Vec::len).unwrap_or(0);
        if patches.iter().any(|p| p.len() != channels) {
            return Err(Error::Structural("ragged patch embeddings".into()));
        }
        if patches.len() != height * width {
            return Err(Error::Structural(format!(
                "expected {} patches, got {}",
                height * width,
                patches.len()
            )));
        }
        Self::new(height, width, channels, patches.concat())
    }

    /// Rows are patches in raster order.
    pub fn from_matrix(height: usize, width: usize, m: ArrayView2<f64>) -> Result<Self> {
        if m.nrows() != height * width {
            return Err(Error::Structural(format!(
                "matrix has {} rows for a {height}x{width} grid",
                m.nrows()
            )));
        }
        Self::new(height, width, m.ncols(), m.iter().copied().collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of patches, `height * width`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn patch(&self, raster: usize) -> &[f64] {
        let c = self.channels;
        &self.data[raster * c..(raster + 1) * c]
    }

    pub fn patch_at(&self, row: usize, col: usize) -> &[f64] {
        self.patch(self.raster_index(row, col))
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn raster_index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    pub fn row_col(&self, raster: usize) -> (usize, usize) {
        (raster / self.width, raster % self.width)
    }

    /// `len x channels` matrix, one patch per row.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), self.channels), self.data.clone())
            .expect("shape matches by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_length_and_non_finite() {
        assert!(PatchGrid::new(2, 2, 3, vec![0.0; 11]).is_err());
        let mut d = vec![0.0; 12];
        d[5] = f64::NAN;
        assert!(PatchGrid::new(2, 2, 3, d).is_err());
        d = vec![0.0; 12];
        d[0] = f64::INFINITY;
        assert!(PatchGrid::new(2, 2, 3, d).is_err());
        assert!(PatchGrid::new(0, 2, 3, vec![]).is_err());
    }

    #[test]
    fn patch_accessors() {
        let g = PatchGrid::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(g.patch(4), &[8.0, 9.0]);
        assert_eq!(g.patch_at(1, 1), &[8.0, 9.0]);
        assert_eq!(g.patches().count(), 6);
        let m = g.to_matrix();
        assert_eq!(PatchGrid::from_matrix(2, 3, m.view()).unwrap(), g);
    }

    proptest! {
        #[test]
        fn raster_round_trip(h in 1usize..9, w in 1usize..9) {
            let g = PatchGrid::zeros(h, w, 1);
            for i in 0..h * w {
                let (r, c) = g.row_col(i);
                prop_assert!(r < h && c < w);
                prop_assert_eq!(g.raster_index(r, c), i);
            }
        }
    }
}
