use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Admissible VENCs in cm/s, ascending.
    pub venc_choices: Vec<f64>,
    pub intensity_range: [f64; 2],
    pub snr_range_db: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            venc_choices: vec![30.0, 60.0, 100.0, 150.0, 200.0, 250.0, 300.0],
            intensity_range: [60.0, 240.0],
            snr_range_db: [14.0, 17.0],
            seed: 0,
        }
    }
}

/// One frame's worth of encoding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub venc: [f64; 3],
    pub intensity: f64,
    pub snr_db: f64,
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.venc_choices.is_empty(), || "venc_choices is empty".into())?;
        ensure(
            self.venc_choices.windows(2).all(|w| w[0] < w[1])
                && self.venc_choices.iter().all(|v| *v > 0.0),
            || "venc_choices must be positive and strictly ascending".into(),
        )?;
        for (name, r) in [("intensity_range", self.intensity_range), ("snr_range_db", self.snr_range_db)] {
            ensure(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1], || {
                format!("{name} {r:?} is not a valid range")
            })?;
        }
        ensure(self.intensity_range[0] > 0.0, || "intensities must be positive".into())
    }

    /// Draw the encoding parameters for draw number `draw_index`. Each
    /// component's VENC is uniform over the choices strictly above that
    /// component's maximum absolute velocity.
    pub fn sample(&self, frame_max_speed: [f64; 3], draw_index: u64) -> Result<Augmentation> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        let mut venc = [0.0; 3];
        for (c, &vmax) in frame_max_speed.iter().enumerate() {
            let admissible: Vec<f64> = self
                .venc_choices
                .iter()
                .copied()
                .filter(|&v| v > vmax.abs())
                .collect();
            if admissible.is_empty() {
                return Err(Error::Unsatisfiable(format!(
                    "component {c} max |v| = {vmax:.2} cm/s is not below any VENC choice (max {})",
                    self.venc_choices.last().unwrap()
                )));
            }
            venc[c] = admissible[rng.random_range(0..admissible.len())];
        }
        let [i0, i1] = self.intensity_range;
        let [s0, s1] = self.snr_range_db;
        let intensity = if i1 > i0 { rng.random_range(i0..=i1) } else { i0 };
        let snr_db = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 };
        Ok(Augmentation {
            venc,
            intensity,
            snr_db,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn venc_above_component_max() {
        let p = AugmentationPolicy::default();
        let mut seen = std::collections::BTreeSet::new();
        for draw in 0..200 {
            let a = p.sample([95.0, 10.0, 299.0], draw).unwrap();
            assert!([100.0, 150.0, 200.0, 250.0, 300.0].contains(&a.venc[0]));
            assert!(a.venc[1] > 10.0);
            assert_eq!(a.venc[2], 300.0);
            assert!((60.0..=240.0).contains(&a.intensity));
            assert!((14.0..=17.0).contains(&a.snr_db));
            seen.insert(a.venc[0] as i64);
        }
        // Every admissible choice shows up.
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn unsatisfiable_above_300() {
        let p = AugmentationPolicy::default();
        assert!(matches!(p.sample([350.0, 0.0, 0.0], 0), Err(Error::Unsatisfiable(_))));
        // Strictly above: 300 itself is not admissible.
        assert!(p.sample([300.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn deterministic_per_draw_index() {
        let p = AugmentationPolicy { seed: 9, ..Default::default() };
        assert_eq!(p.sample([50.0; 3], 4).unwrap(), p.sample([50.0; 3], 4).unwrap());
        let draws: Vec<_> = (0..10).map(|i| p.sample([50.0; 3], i).unwrap()).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn rejects_unsorted_choices() {
        let p = AugmentationPolicy {
            venc_choices: vec![100.0, 60.0],
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
