//! The super-resolution network: two input paths (velocity and anatomy),
//! a fusion convolution, residual blocks in LR space, trilinear x2, residual
//! blocks in HR space, and one prediction branch per velocity component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::feature::{Feature, Tensor5};
use super::layers::{
    conv3d_backward, conv3d_symmetric, leaky_relu_backward, leaky_relu_inplace, relu_backward, relu_inplace,
    tanh_backward, tanh_inplace, upsample_trilinear2x, upsample_trilinear2x_backward, Conv,
};
use super::real::Real;
use crate::error::{ensure, Error, Result};
use crate::volume::Volume;

/// Smallest accepted input cube side.
pub const MIN_INPUT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub base_filters: usize,
    pub lr_resblocks: usize,
    pub hr_resblocks: usize,
    pub leaky_slope: f64,
    pub kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_filters: 64,
            lr_resblocks: 8,
            hr_resblocks: 4,
            leaky_slope: 0.2,
            kernel: 3,
        }
    }
}

impl NetConfig {
    pub fn with_filters(filters: usize) -> Self {
        NetConfig {
            base_filters: filters,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.base_filters >= 1, || "base_filters must be >= 1".into())?;
        ensure(self.kernel == 3, || format!("only 3x3x3 kernels are supported, got {}", self.kernel))?;
        ensure(self.leaky_slope.is_finite() && self.leaky_slope > 0.0 && self.leaky_slope < 1.0, || {
            format!("leaky_slope {} must lie in (0, 1)", self.leaky_slope)
        })
    }

    /// Names and `(cin, cout)` of every convolution in declaration order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let f = self.base_filters;
        let mut out = vec![
            ("vel_in".to_string(), 3, f),
            ("anat_in".to_string(), 3, f),
            ("fuse".to_string(), 2 * f, f),
        ];
        for (stage, n) in [("lr", self.lr_resblocks), ("hr", self.hr_resblocks)] {
            for b in 0..n {
                out.push((format!("{stage}{b}.conv1"), f, f));
                out.push((format!("{stage}{b}.conv2"), f, f));
            }
        }
        for c in ["x", "y", "z"] {
            out.push((format!("branch_{c}.conv"), f, f));
            out.push((format!("branch_{c}.out"), f, 1));
        }
        out
    }
}

/// `mag = |m|`, `speed = |v|`, `pcmra = mag * speed`, voxel by voxel.
pub fn compute_anatomy_channels<T: Real>(mags: [&Volume<T>; 3], vels: [&Volume<T>; 3]) -> Result<[Volume<T>; 3]> {
    let dims = mags[0].dims();
    ensure(mags.iter().chain(&vels).all(|v| v.dims() == dims), || {
        "magnitude and velocity volumes differ in shape".into()
    })?;
    let norm = |v: [&Volume<T>; 3]| {
        Volume::from_fn(dims, |i, j, k| {
            let (a, b, c) = (v[0].get(i, j, k), v[1].get(i, j, k), v[2].get(i, j, k));
            (a * a + b * b + c * c).sqrt()
        })
    };
    let mag = norm(mags);
    let speed = norm(vels);
    let pcmra = mag.zip_map(&speed, |m, s| m * s)?;
    Ok([mag, speed, pcmra])
}

/// All convolution parameters of the network, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    pub config: NetConfig,
    pub convs: Vec<(String, Conv<T>)>,
}

/// Activations kept by a recorded forward pass.
pub struct Tape<T> {
    vel: Feature<T>,
    anat: Feature<T>,
    a_vel: Feature<T>,
    a_anat: Feature<T>,
    h0: Feature<T>,
    /// Per residual block: its input and its inner activation.
    lr: Vec<(Feature<T>, Feature<T>)>,
    lr_out: Feature<T>,
    hr: Vec<(Feature<T>, Feature<T>)>,
    hr_out: Feature<T>,
    /// Per branch: hidden activation and the tanh output.
    branches: Vec<(Feature<T>, Feature<T>)>,
}

const VEL_IN: usize = 0;
const ANAT_IN: usize = 1;
const FUSE: usize = 2;

impl<T: Real> ModelParameters<T> {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = config
            .layout()
            .into_iter()
            .map(|(name, ci, co)| (name, Conv::init(ci, co, &mut rng)))
            .collect();
        Ok(ModelParameters { config, convs })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let convs = config
            .layout()
            .into_iter()
            .map(|(name, ci, co)| (name, Conv::zeros(ci, co)))
            .collect();
        Ok(ModelParameters { config, convs })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParameters {
            config: self.config,
            convs: self
                .convs
                .iter()
                .map(|(n, c)| (n.clone(), Conv::zeros(c.cin, c.cout)))
                .collect(),
        }
    }

    pub fn conv(&self, name: &str) -> Option<&Conv<T>> {
        self.convs.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn conv_mut(&mut self, name: &str) -> Option<&mut Conv<T>> {
        self.convs.iter_mut().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    fn lr_block(&self, b: usize) -> (&Conv<T>, &Conv<T>) {
        let i = 3 + 2 * b;
        (&self.convs[i].1, &self.convs[i + 1].1)
    }

    fn hr_block(&self, b: usize) -> (&Conv<T>, &Conv<T>) {
        let i = 3 + 2 * self.config.lr_resblocks + 2 * b;
        (&self.convs[i].1, &self.convs[i + 1].1)
    }

    fn branch_index(&self, c: usize) -> usize {
        3 + 2 * (self.config.lr_resblocks + self.config.hr_resblocks) + 2 * c
    }

    fn branch(&self, c: usize) -> (&Conv<T>, &Conv<T>) {
        let i = self.branch_index(c);
        (&self.convs[i].1, &self.convs[i + 1].1)
    }

    /// Named flat tensors (`<conv>.weight`, `<conv>.bias`) with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::with_capacity(2 * self.convs.len());
        for (name, c) in &self.convs {
            out.push((format!("{name}.weight"), vec![3, 3, 3, c.cin, c.cout], c.weight.as_slice()));
            out.push((format!("{name}.bias"), vec![c.cout], c.bias.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.convs.len());
        for (_, c) in self.convs.iter_mut() {
            out.push(c.weight.as_mut_slice());
            out.push(c.bias.as_mut_slice());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|(_, c)| c.weight.len() + c.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.to_f64().expect("finite"))).collect();
        ModelParameters {
            config: self.config,
            convs: self
                .convs
                .iter()
                .map(|(n, c)| {
                    (
                        n.clone(),
                        Conv {
                            cin: c.cin,
                            cout: c.cout,
                            weight: cv(&c.weight),
                            bias: cv(&c.bias),
                        },
                    )
                })
                .collect(),
        }
    }

    /// `self += other * scale`, used to sum per-sample gradients.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += *y * scale;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += *y * scale;
            }
        }
    }

    fn check_inputs(&self, vel: &Feature<T>, anat: &Feature<T>) -> Result<()> {
        let d = vel.dims();
        ensure(vel.channels() == 3 && anat.channels() == 3, || {
            "velocity and anatomy inputs need 3 channels each".into()
        })?;
        ensure(anat.dims() == d, || "velocity and anatomy inputs differ in shape".into())?;
        ensure(d[0] == d[1] && d[1] == d[2], || format!("input must be a cube, got {d:?}"))?;
        ensure(d[0] >= MIN_INPUT, || format!("input side {} is below the minimum {MIN_INPUT}", d[0]))
    }

    fn resblock(&self, (c1, c2): (&Conv<T>, &Conv<T>), h: &Feature<T>) -> Result<(Feature<T>, Feature<T>)> {
        let mut t = conv3d_symmetric(c1, h)?;
        leaky_relu_inplace(&mut t, T::of(self.config.leaky_slope));
        let mut out = conv3d_symmetric(c2, &t)?;
        out.add_assign(h);
        Ok((t, out))
    }

    fn run(&self, vel: &Feature<T>, anat: &Feature<T>, record: bool) -> Result<(Feature<T>, Option<Tape<T>>)> {
        self.check_inputs(vel, anat)?;
        let mut a_vel = conv3d_symmetric(&self.convs[VEL_IN].1, vel)?;
        relu_inplace(&mut a_vel);
        let mut a_anat = conv3d_symmetric(&self.convs[ANAT_IN].1, anat)?;
        relu_inplace(&mut a_anat);
        let mut h = conv3d_symmetric(&self.convs[FUSE].1, &Feature::concat(&a_vel, &a_anat)?)?;
        relu_inplace(&mut h);
        let h0 = if record { Some(h.clone()) } else { None };

        let mut lr = Vec::new();
        for b in 0..self.config.lr_resblocks {
            let (t, out) = self.resblock(self.lr_block(b), &h)?;
            if record {
                lr.push((h, t));
            }
            h = out;
        }
        let lr_out = if record { Some(h.clone()) } else { None };
        h = upsample_trilinear2x(&h);
        let mut hr = Vec::new();
        for b in 0..self.config.hr_resblocks {
            let (t, out) = self.resblock(self.hr_block(b), &h)?;
            if record {
                hr.push((h, t));
            }
            h = out;
        }

        let mut branches = Vec::new();
        let mut outs = Vec::with_capacity(3);
        for c in 0..3 {
            let (c1, c2) = self.branch(c);
            let mut b1 = conv3d_symmetric(c1, &h)?;
            relu_inplace(&mut b1);
            let mut y = conv3d_symmetric(c2, &b1)?;
            tanh_inplace(&mut y);
            outs.push(y.clone());
            if record {
                branches.push((b1, y));
            }
        }
        let out = Feature::from_volumes(&[&outs[0].channel(0), &outs[1].channel(0), &outs[2].channel(0)])?;
        let tape = record.then(|| Tape {
            vel: vel.clone(),
            anat: anat.clone(),
            a_vel,
            a_anat,
            h0: h0.unwrap(),
            lr,
            lr_out: lr_out.unwrap(),
            hr,
            hr_out: h,
            branches,
        });
        Ok((out, tape))
    }

    /// Super-resolve one sample: `n^3` inputs with 3 channels each to a
    /// `(2n)^3` output with 3 channels in `(-1, 1)`.
    pub fn forward_sample(&self, vel: &Feature<T>, anat: &Feature<T>) -> Result<Feature<T>> {
        Ok(self.run(vel, anat, false)?.0)
    }

    /// Forward pass that keeps what [`ModelParameters::backward`] needs.
    pub fn forward_recorded(&self, vel: &Feature<T>, anat: &Feature<T>) -> Result<(Feature<T>, Tape<T>)> {
        let (out, tape) = self.run(vel, anat, true)?;
        Ok((out, tape.expect("recorded")))
    }

    /// Batched forward, samples in parallel.
    pub fn forward(&self, vel: &Tensor5<T>, anat: &Tensor5<T>) -> Result<Tensor5<T>> {
        ensure(vel.shape() == anat.shape(), || "velocity and anatomy batches differ in shape".into())?;
        let (v, a) = (vel.to_features(), anat.to_features());
        let outs: Vec<Feature<T>> = v
            .par_iter()
            .zip(a.par_iter())
            .map(|(v, a)| self.forward_sample(v, a))
            .collect::<Result<_>>()?;
        Tensor5::from_features(&outs)
    }

    fn resblock_backward(
        &self,
        convs: (usize, usize),
        (h, t): &(Feature<T>, Feature<T>),
        g_out: Feature<T>,
        grads: &mut ModelParameters<T>,
    ) -> Result<Feature<T>> {
        let slope = T::of(self.config.leaky_slope);
        let mut g_t = conv3d_backward(&self.convs[convs.1].1, t, &g_out, &mut grads.convs[convs.1].1, true)?
            .expect("input grad");
        leaky_relu_backward(t, &mut g_t, slope);
        let mut g_h = conv3d_backward(&self.convs[convs.0].1, h, &g_t, &mut grads.convs[convs.0].1, true)?
            .expect("input grad");
        g_h.add_assign(&g_out);
        Ok(g_h)
    }

    /// Accumulate into `grads` the gradient of a scalar loss whose gradient
    /// with respect to the network output is `grad_out`.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Feature<T>, grads: &mut ModelParameters<T>) -> Result<()> {
        ensure(grad_out.channels() == 3 && grad_out.dims() == tape.hr_out.dims(), || {
            "output gradient does not match the network output".into()
        })?;
        if !grad_out.data().iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient reached the network output".into()));
        }
        let mut g_h = Feature::zeros(tape.hr_out.dims(), self.config.base_filters);
        for c in 0..3 {
            let (b1, y) = &tape.branches[c];
            let i = self.branch_index(c);
            let mut g_y = Feature::from_volumes(&[&grad_out.channel(c)])?;
            tanh_backward(y, &mut g_y);
            let mut g_b1 = conv3d_backward(&self.convs[i + 1].1, b1, &g_y, &mut grads.convs[i + 1].1, true)?
                .expect("input grad");
            relu_backward(b1, &mut g_b1);
            let g = conv3d_backward(&self.convs[i].1, &tape.hr_out, &g_b1, &mut grads.convs[i].1, true)?
                .expect("input grad");
            g_h.add_assign(&g);
        }
        let hr_base = 3 + 2 * self.config.lr_resblocks;
        for b in (0..self.config.hr_resblocks).rev() {
            let i = hr_base + 2 * b;
            g_h = self.resblock_backward((i, i + 1), &tape.hr[b], g_h, grads)?;
        }
        g_h = upsample_trilinear2x_backward(&g_h);
        debug_assert_eq!(g_h.dims(), tape.lr_out.dims());
        for b in (0..self.config.lr_resblocks).rev() {
            let i = 3 + 2 * b;
            g_h = self.resblock_backward((i, i + 1), &tape.lr[b], g_h, grads)?;
        }
        relu_backward(&tape.h0, &mut g_h);
        let cat = Feature::concat(&tape.a_vel, &tape.a_anat)?;
        let g_cat = conv3d_backward(&self.convs[FUSE].1, &cat, &g_h, &mut grads.convs[FUSE].1, true)?
            .expect("input grad");
        let (mut g_vel, mut g_anat) = g_cat.split(self.config.base_filters);
        relu_backward(&tape.a_vel, &mut g_vel);
        relu_backward(&tape.a_anat, &mut g_anat);
        conv3d_backward(&self.convs[VEL_IN].1, &tape.vel, &g_vel, &mut grads.convs[VEL_IN].1, false)?;
        conv3d_backward(&self.convs[ANAT_IN].1, &tape.anat, &g_anat, &mut grads.convs[ANAT_IN].1, false)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> NetConfig {
        NetConfig {
            base_filters: 4,
            lr_resblocks: 2,
            hr_resblocks: 1,
            ..Default::default()
        }
    }

    fn inputs<T: Real>(n: usize, seed: u64) -> (Feature<T>, Feature<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..n * n * n * 3).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        let a = (0..n * n * n * 3).map(|_| T::of(rng.random_range(0.0..1.0))).collect();
        (
            Feature::from_vec([n; 3], 3, v).unwrap(),
            Feature::from_vec([n; 3], 3, a).unwrap(),
        )
    }

    #[test]
    fn anatomy_examples() {
        let v = |x: f64| Volume::filled([2, 2, 2], x);
        let [mag, speed, pcmra] =
            compute_anatomy_channels([&v(3.0), &v(4.0), &v(0.0)], [&v(0.0), &v(0.0), &v(0.0)]).unwrap();
        assert_eq!(mag.get(0, 0, 0), 5.0);
        assert_eq!(speed.get(1, 1, 1), 0.0);
        assert_eq!(pcmra.get(0, 1, 0), 0.0);
        let [_, _, p] = compute_anatomy_channels([&v(2.0), &v(0.0), &v(0.0)], [&v(0.0), &v(3.0), &v(0.0)]).unwrap();
        assert_eq!(p.get(0, 0, 0), 6.0);
        let bad = Volume::filled([2, 2, 3], 0.0);
        assert!(compute_anatomy_channels([&v(1.0), &v(1.0), &bad], [&v(0.0), &v(0.0), &v(0.0)]).is_err());
    }

    #[test]
    fn layout_matches_config() {
        let c = NetConfig::default();
        let l = c.layout();
        assert_eq!(l.len(), 3 + 2 * 8 + 2 * 4 + 6);
        assert_eq!(l[2], ("fuse".to_string(), 128, 64));
        assert_eq!(l.last().unwrap(), &("branch_z.out".to_string(), 64, 1));
    }

    #[test]
    fn shapes_double_and_outputs_are_bounded() {
        let p = ModelParameters::<f32>::init(tiny(), 1).unwrap();
        for n in [8, 12] {
            let (v, a) = inputs::<f32>(n, 2);
            let y = p.forward_sample(&v, &a).unwrap();
            assert_eq!((y.dims(), y.channels()), ([2 * n; 3], 3));
            assert!(y.data().iter().all(|x| x.abs() < 1.0));
        }
        let (v, _) = inputs::<f32>(8, 2);
        let (a, _) = inputs::<f32>(9, 2);
        assert!(p.forward_sample(&v, &a).is_err());
        let (v, a) = inputs::<f32>(6, 2);
        assert!(p.forward_sample(&v, &a).is_err());
    }

    #[test]
    fn zero_output_branches_give_zero() {
        let mut p = ModelParameters::<f64>::init(tiny(), 3).unwrap();
        for c in ["x", "y", "z"] {
            let conv = p.conv_mut(&format!("branch_{c}.out")).unwrap();
            conv.weight.iter_mut().for_each(|w| *w = 0.0);
            conv.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        let (v, a) = inputs::<f64>(8, 4);
        assert!(p.forward_sample(&v, &a).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_batched_forward_agrees() {
        let p = ModelParameters::<f32>::init(tiny(), 5).unwrap();
        let (v1, a1) = inputs::<f32>(8, 6);
        let (v2, a2) = inputs::<f32>(8, 7);
        let y1 = p.forward_sample(&v1, &a1).unwrap();
        assert_eq!(y1, p.forward_sample(&v1, &a1).unwrap());
        let vb = Tensor5::from_features(&[v1, v2.clone()]).unwrap();
        let ab = Tensor5::from_features(&[a1, a2.clone()]).unwrap();
        let yb = p.forward(&vb, &ab).unwrap().to_features();
        assert_eq!(yb[0], y1);
        assert_eq!(yb[1], p.forward_sample(&v2, &a2).unwrap());
    }

    #[test]
    fn f32_and_f64_forward_agree() {
        let p = ModelParameters::<f64>::init(NetConfig::with_filters(16), 9).unwrap();
        let (v, a) = inputs::<f64>(8, 10);
        let y64 = p.forward_sample(&v, &a).unwrap();
        let p32: ModelParameters<f32> = p.cast();
        let cast = |f: &Feature<f64>| Feature::from_vec(f.dims(), 3, f.data().iter().map(|&x| x as f32).collect()).unwrap();
        let y32 = p32.forward_sample(&cast(&v), &cast(&a)).unwrap();
        for (x, y) in y32.data().iter().zip(y64.data()) {
            assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    /// Gradient of `sum(out * r)` against central differences on a few
    /// entries of every tensor.
    #[test]
    fn backward_matches_finite_differences() {
        let p = ModelParameters::<f64>::init(tiny(), 11).unwrap();
        let (v, a) = inputs::<f64>(8, 12);
        let (y, tape) = p.forward_recorded(&v, &a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r = Feature::from_vec(y.dims(), 3, (0..y.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut grads = p.zeros_like();
        p.backward(&tape, &r, &mut grads).unwrap();
        let loss = |q: &ModelParameters<f64>| -> f64 {
            let y = q.forward_sample(&v, &a).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        for ci in 0..p.convs.len() {
            let n = p.convs[ci].1.weight.len();
            for idx in [0, n / 2, n - 1] {
                let h = 1e-6;
                let mut q = p.clone();
                q.convs[ci].1.weight[idx] += h;
                let up = loss(&q);
                q.convs[ci].1.weight[idx] -= 2.0 * h;
                let fd = (up - loss(&q)) / (2.0 * h);
                let an = grads.convs[ci].1.weight[idx];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-2), "{} [{idx}]: {fd} vs {an}", p.convs[ci].0);
            }
        }
    }
}
