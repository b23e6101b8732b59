//! Normalized pixel-coordinate system and coordinate channels.
//!
//! Pixel index `k` on a canvas of resolution `R` maps to `-1 + 2k/(R-1)`, so
//! the upper-left pixel sits at `(-1, -1)` and the lower-right at `(1, 1)`.
//! Patches keep the coordinates of the full canvas they were cut from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel row and column coordinates of a rectangular region.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid<T> {
    pub height: usize,
    pub width: usize,
    pub rows: Tensor<T>,
    pub cols: Tensor<T>,
}

/// Location and extent of a square patch inside an `R x R` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub source_resolution: usize,
}

impl PatchSpec {
    pub fn new(top: usize, left: usize, size: usize, source_resolution: usize) -> Result<Self> {
        let spec = PatchSpec {
            top,
            left,
            size,
            source_resolution,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0
            || self.top + self.size > self.source_resolution
            || self.left + self.size > self.source_resolution
        {
            return Err(Error::OutOfRange(format!("{self:?}")));
        }
        Ok(())
    }

    /// Number of distinct positions a patch of `size` has in an `R x R` image.
    pub fn position_count(size: usize, resolution: usize) -> usize {
        if size == 0 || size > resolution {
            0
        } else {
            (resolution - size + 1).pow(2)
        }
    }
}

/// Normalized coordinate of pixel `k` for normalization resolution `r`.
#[inline]
pub fn normalized_coord(k: usize, r: usize) -> f64 {
    -1.0 + 2.0 * k as f64 / (r - 1) as f64
}

fn grid_region<T: Scalar>(r: usize, top: usize, left: usize, h: usize, w: usize) -> CoordGrid<T> {
    let mut rows = Vec::with_capacity(h * w);
    let mut cols = Vec::with_capacity(h * w);
    for i in top..top + h {
        let ri = T::of(normalized_coord(i, r));
        for j in left..left + w {
            rows.push(ri);
            cols.push(T::of(normalized_coord(j, r)));
        }
    }
    CoordGrid {
        height: h,
        width: w,
        rows: Tensor::from_vec(&[h, w], rows).expect("grid size"),
        cols: Tensor::from_vec(&[h, w], cols).expect("grid size"),
    }
}

pub fn full_grid<T: Scalar>(resolution: usize) -> Result<CoordGrid<T>> {
    if resolution < 2 {
        return Err(Error::InvalidResolution {
            resolution,
            reason: "coordinate grids need at least 2 pixels per side".into(),
        });
    }
    Ok(grid_region(resolution, 0, 0, resolution, resolution))
}

pub fn patch_grid<T: Scalar>(spec: &PatchSpec) -> Result<CoordGrid<T>> {
    spec.validate()?;
    if spec.source_resolution < 2 {
        return Err(Error::InvalidResolution {
            resolution: spec.source_resolution,
            reason: "coordinate grids need at least 2 pixels per side".into(),
        });
    }
    Ok(grid_region(
        spec.source_resolution,
        spec.top,
        spec.left,
        spec.size,
        spec.size,
    ))
}

/// Full grid over an enlarged canvas plus the offset at which the base image is centered.
pub fn extended_grid<T: Scalar>(base: usize, extended: usize) -> Result<(CoordGrid<T>, usize)> {
    if extended < base {
        return Err(Error::Alignment(format!(
            "extended resolution {extended} is smaller than base {base}"
        )));
    }
    if !(extended - base).is_multiple_of(2) {
        return Err(Error::Alignment(format!(
            "difference {extended} - {base} is odd; the reference cannot be centered"
        )));
    }
    Ok((full_grid(extended)?, (extended - base) / 2))
}

/// Appends the row and column channels of `grid` to a `[C, h, w]` image.
pub fn attach_coords<T: Scalar>(image: &Tensor<T>, grid: &CoordGrid<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::shape(&[c, grid.height, grid.width], image.shape()));
    }
    let mut data = Vec::with_capacity((c + 2) * h * w);
    data.extend_from_slice(image.data());
    data.extend_from_slice(grid.rows.data());
    data.extend_from_slice(grid.cols.data());
    Tensor::from_vec(&[c + 2, h, w], data)
}

/// Batched form of [`attach_coords`] with one grid per sample.
pub fn attach_coords_batch<T: Scalar>(images: &Tensor<T>, grids: &[&CoordGrid<T>]) -> Result<Tensor<T>> {
    let (b, c, h, w) = images.dims4()?;
    if grids.len() != b {
        return Err(Error::shape(&[b], &[grids.len()]));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * (c + 2) * hw);
    for (n, grid) in grids.iter().enumerate() {
        if (grid.height, grid.width) != (h, w) {
            return Err(Error::shape(&[h, w], &[grid.height, grid.width]));
        }
        data.extend_from_slice(&images.data()[n * c * hw..(n + 1) * c * hw]);
        data.extend_from_slice(grid.rows.data());
        data.extend_from_slice(grid.cols.data());
    }
    Tensor::from_vec(&[b, c + 2, h, w], data)
}
