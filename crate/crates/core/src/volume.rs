//! Dense 3D scalar volumes and the uniform grid they live on.
//!
//! Axis 0 is `x`, axis 1 is `y`, axis 2 is `z`; storage is row-major with
//! `z` fastest, so the linear index of `(i, j, k)` is `(i * ny + j) * nz + k`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Isotropic grid spacing used for the high-resolution ground truth, in mm.
pub const DEFAULT_SPACING_MM: f64 = 0.594;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The two remaining axes in right-handed cyclic order.
    pub fn others(self) -> (Axis, Axis) {
        match self {
            Axis::X => (Axis::Y, Axis::Z),
            Axis::Y => (Axis::Z, Axis::X),
            Axis::Z => (Axis::X, Axis::Y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    /// Voxel size per axis in mm.
    pub spacing: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let grid = Grid3 { dims, spacing };
        grid.validate()?;
        Ok(grid)
    }

    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3])
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.dims.iter().all(|&d| d >= 4), || {
            format!("grid dims must all be >= 4, got {:?}", self.dims)
        })?;
        ensure(
            self.spacing.iter().all(|&h| h.is_finite() && h > 0.0),
            || format!("grid spacing must be positive, got {:?}", self.spacing),
        )
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical coordinate (mm) of voxel centre `idx` along `axis`, measured
    /// from the grid centre.
    pub fn centered_coord(&self, axis: usize, idx: usize) -> f64 {
        (idx as f64 - (self.dims[axis] as f64 - 1.0) / 2.0) * self.spacing[axis]
    }

    /// Grid with half the voxels per axis and twice the spacing.
    pub fn halved(&self) -> Result<Self> {
        ensure(self.dims.iter().all(|d| d % 2 == 0), || {
            format!("cannot halve odd grid dims {:?}", self.dims)
        })?;
        Ok(Grid3 {
            dims: self.dims.map(|d| d / 2),
            spacing: self.spacing.map(|h| h * 2.0),
        })
    }

    pub fn doubled(&self) -> Self {
        Grid3 {
            dims: self.dims.map(|d| d * 2),
            spacing: self.spacing.map(|h| h / 2.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Volume {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Validation(format!(
                "volume of dims {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    #[inline]
    pub fn at(&self, idx: [usize; 3]) -> T {
        self.get(idx[0], idx[1], idx[2])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn zip_map<U: Copy, V: Copy>(
        &self,
        other: &Volume<U>,
        mut f: impl FnMut(T, U) -> V,
    ) -> Result<Volume<V>> {
        check_same_dims(self.dims, other.dims)?;
        Ok(Volume {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Copy out the block `[origin, origin + size)`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume<T>> {
        for a in 0..3 {
            ensure(origin[a] + size[a] <= self.dims[a], || {
                format!(
                    "crop {origin:?}+{size:?} exceeds volume dims {:?}",
                    self.dims
                )
            })?;
        }
        Ok(Volume::from_fn(size, |i, j, k| {
            self.get(origin[0] + i, origin[1] + j, origin[2] + k)
        }))
    }
}

impl Volume<f64> {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_f32(&self) -> Volume<f32> {
        self.map(|v| v as f32)
    }
}

impl Volume<f32> {
    pub fn to_f64(&self) -> Volume<f64> {
        self.map(|v| v as f64)
    }
}

pub(crate) fn check_same_dims(a: [usize; 3], b: [usize; 3]) -> Result<()> {
    ensure(a == b, || format!("shape mismatch: {a:?} vs {b:?}"))
}
