use num_traits::Zero;

use crate::error::{ensure, Result};
use crate::volume::Volume;

/// One sample's feature map, channels-last: `data[((i * h + j) * w + k) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature<T> {
    dims: [usize; 3],
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Zero> Feature<T> {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Feature {
            dims,
            channels,
            data: vec![T::zero(); dims.iter().product::<usize>() * channels],
        }
    }

    pub fn from_vec(dims: [usize; 3], channels: usize, data: Vec<T>) -> Result<Self> {
        ensure(data.len() == dims.iter().product::<usize>() * channels, || {
            format!("feature {dims:?}x{channels} needs {} values, got {}", dims.iter().product::<usize>() * channels, data.len())
        })?;
        Ok(Feature { dims, channels, data })
    }

    /// Interleave equally shaped volumes into channels.
    pub fn from_volumes(vols: &[&Volume<T>]) -> Result<Self> {
        ensure(!vols.is_empty(), || "no channels".into())?;
        let dims = vols[0].dims();
        ensure(vols.iter().all(|v| v.dims() == dims), || "channel volumes differ in shape".into())?;
        let c = vols.len();
        let mut data = Vec::with_capacity(vols[0].len() * c);
        for n in 0..vols[0].len() {
            for v in vols {
                data.push(v.as_slice()[n]);
            }
        }
        Ok(Feature { dims, channels: c, data })
    }

    pub fn channel(&self, c: usize) -> Volume<T> {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Volume::from_vec(self.dims, data).expect("dims")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize, c: usize) -> T {
        self.data[((i * self.dims[1] + j) * self.dims[2] + k) * self.channels + c]
    }

    /// Stack the channels of `a` and then `b`.
    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        ensure(a.dims == b.dims, || "concatenated features differ in shape".into())?;
        let c = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.voxels() * c);
        for (x, y) in a.data.chunks_exact(a.channels).zip(b.data.chunks_exact(b.channels)) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        Ok(Feature { dims: a.dims, channels: c, data })
    }

    /// Inverse of [`Feature::concat`].
    pub fn split(&self, first: usize) -> (Self, Self) {
        let rest = self.channels - first;
        let mut a = Vec::with_capacity(self.voxels() * first);
        let mut b = Vec::with_capacity(self.voxels() * rest);
        for v in self.data.chunks_exact(self.channels) {
            a.extend_from_slice(&v[..first]);
            b.extend_from_slice(&v[first..]);
        }
        (
            Feature { dims: self.dims, channels: first, data: a },
            Feature { dims: self.dims, channels: rest, data: b },
        )
    }

    /// Edge-replicating pad of one voxel per side (the symmetric pad for a
    /// width-3 kernel: `[1, 2, 3]` becomes `[1, 1, 2, 3, 3]`).
    pub fn pad_edge(&self) -> Self {
        let [d, h, w] = self.dims;
        let c = self.channels;
        let pd = [d + 2, h + 2, w + 2];
        let mut data = Vec::with_capacity(pd.iter().product::<usize>() * c);
        for pi in 0..pd[0] {
            let i = pi.saturating_sub(1).min(d - 1);
            for pj in 0..pd[1] {
                let j = pj.saturating_sub(1).min(h - 1);
                let row = &self.data[(i * h + j) * w * c..][..w * c];
                data.extend_from_slice(&row[..c]);
                data.extend_from_slice(row);
                data.extend_from_slice(&row[(w - 1) * c..]);
            }
        }
        Feature { dims: pd, channels: c, data }
    }

    /// Zero pad of `n` voxels per side.
    pub fn pad_zero(&self, n: usize) -> Self {
        let [d, h, w] = self.dims;
        let c = self.channels;
        let pd = [d + 2 * n, h + 2 * n, w + 2 * n];
        let mut out = Feature::zeros(pd, c);
        for i in 0..d {
            for j in 0..h {
                let src = &self.data[(i * h + j) * w * c..][..w * c];
                let dst = (((i + n) * pd[1] + j + n) * pd[2] + n) * c;
                out.data[dst..dst + w * c].copy_from_slice(src);
            }
        }
        out
    }
}

impl<T: Copy + Zero + std::ops::AddAssign> Feature<T> {
    /// Adjoint of [`Feature::pad_edge`]: sum gradients of the padded map back
    /// onto the voxels they were copied from.
    pub fn fold_edge(&self) -> Self {
        let [pd, ph, pw] = self.dims;
        let (d, h, w) = (pd - 2, ph - 2, pw - 2);
        let c = self.channels;
        let mut out = Feature::zeros([d, h, w], c);
        for pi in 0..pd {
            let i = pi.saturating_sub(1).min(d - 1);
            for pj in 0..ph {
                let j = pj.saturating_sub(1).min(h - 1);
                for pk in 0..pw {
                    let k = pk.saturating_sub(1).min(w - 1);
                    let src = &self.data[((pi * ph + pj) * pw + pk) * c..][..c];
                    let dst = &mut out.data[((i * h + j) * w + k) * c..][..c];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += *s;
                    }
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// A batch in `(batch, channels, depth, height, width)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Copy + Zero> Tensor5<T> {
    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        ensure(shape.iter().all(|&s| s >= 1), || format!("tensor dims must be >= 1, got {shape:?}"))?;
        ensure(data.len() == shape.iter().product::<usize>(), || {
            format!("tensor {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())
        })?;
        Ok(Tensor5 { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, n: usize, c: usize, i: usize, j: usize, k: usize) -> T {
        let [_, cs, d, h, w] = self.shape;
        self.data[(((n * cs + c) * d + i) * h + j) * w + k]
    }

    pub fn from_features(features: &[Feature<T>]) -> Result<Self> {
        ensure(!features.is_empty(), || "empty batch".into())?;
        let (dims, c) = (features[0].dims, features[0].channels);
        ensure(features.iter().all(|f| f.dims == dims && f.channels == c), || {
            "batch samples differ in shape".into()
        })?;
        let vox = features[0].voxels();
        let mut data = Vec::with_capacity(features.len() * c * vox);
        for f in features {
            for ch in 0..c {
                data.extend(f.data.iter().skip(ch).step_by(c).copied());
            }
        }
        Ok(Tensor5 {
            shape: [features.len(), c, dims[0], dims[1], dims[2]],
            data,
        })
    }

    pub fn to_features(&self) -> Vec<Feature<T>> {
        let [n, c, d, h, w] = self.shape;
        let vox = d * h * w;
        (0..n)
            .map(|s| {
                let block = &self.data[s * c * vox..][..c * vox];
                let mut data = Vec::with_capacity(c * vox);
                for v in 0..vox {
                    for ch in 0..c {
                        data.push(block[ch * vox + v]);
                    }
                }
                Feature {
                    dims: [d, h, w],
                    channels: c,
                    data,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3], c: usize) -> Feature<f64> {
        let n = dims.iter().product::<usize>() * c;
        Feature::from_vec(dims, c, (0..n).map(|x| x as f64).collect()).unwrap()
    }

    #[test]
    fn edge_pad_replicates_borders() {
        let f = Feature::from_vec([1, 1, 3], 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = f.pad_edge();
        assert_eq!(p.dims(), [3, 3, 5]);
        for i in 0..3 {
            for j in 0..3 {
                let row: Vec<f64> = (0..5).map(|k| p.get(i, j, k, 0)).collect();
                assert_eq!(row, vec![1.0, 1.0, 2.0, 3.0, 3.0]);
            }
        }
    }

    #[test]
    fn fold_is_adjoint_of_pad() {
        // <pad(x), y> == <x, fold(y)>
        let x = ramp([3, 4, 2], 2);
        let p = x.pad_edge();
        let y = Feature::from_vec(p.dims(), 2, (0..p.data().len()).map(|n| ((n * 7) % 11) as f64).collect()).unwrap();
        let lhs: f64 = p.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(y.fold_edge().data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn concat_split_and_tensor_round_trip() {
        let a = ramp([2, 2, 2], 3);
        let b = ramp([2, 2, 2], 2);
        let c = Feature::concat(&a, &b).unwrap();
        assert_eq!(c.get(1, 0, 1, 4), b.get(1, 0, 1, 1));
        let (x, y) = c.split(3);
        assert_eq!((x, y), (a.clone(), b));
        let t = Tensor5::from_features(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(t.shape(), [2, 3, 2, 2, 2]);
        assert_eq!(t.get(1, 2, 1, 0, 1), a.get(1, 0, 1, 2));
        assert_eq!(t.to_features(), vec![a.clone(), a]);
    }

    #[test]
    fn zero_pad_places_interior() {
        let a = ramp([2, 3, 2], 1);
        let p = a.pad_zero(2);
        assert_eq!(p.dims(), [6, 7, 6]);
        assert_eq!(p.get(3, 4, 2, 0), a.get(1, 2, 0, 0));
        assert_eq!(p.data().iter().sum::<f64>(), a.data().iter().sum::<f64>());
    }
}
