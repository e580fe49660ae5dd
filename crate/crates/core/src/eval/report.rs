//! Metric reports: one JSON document per evaluation and a tab-separated
//! per-frame table.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::{
    bland_altman_components, divergence_stats, flow_rate, flow_rate_error, rel_speed_error, sample_mask, BlandAltman,
    DivergenceStats, FlowRateError, MetricConfig, PlaneSpec, DEFAULT_EPSILON,
};
use crate::error::{ensure, Error, Result};
use crate::flowfield::{FluidMask, VelocityField};
use crate::volume::Axis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub epsilon: f64,
    /// Analysis planes; when empty, three planes across the dominant flow
    /// axis at a quarter, half and three quarters of its length.
    pub planes: Vec<(Axis, usize)>,
    /// Masked voxels drawn for the Bland-Altman statistics.
    pub samples: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            epsilon: DEFAULT_EPSILON,
            planes: Vec::new(),
            samples: 50_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneFlow {
    pub axis: Axis,
    pub index: usize,
    pub truth_ml_s: f64,
    pub pred_ml_s: f64,
    /// `None` when the true flow is zero.
    pub error: Option<FlowRateError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rel_speed_error_mean: f64,
    pub flow_rates: Vec<PlaneFlow>,
    /// Divergence of the prediction over the mask.
    pub divergence: DivergenceStats,
    /// `vx`, `vy`, `vz`.
    pub bland_altman: [BlandAltman; 3],
}

/// Axis with the largest summed absolute velocity inside the mask.
pub fn dominant_axis(field: &VelocityField, mask: &FluidMask) -> Axis {
    let inside = mask.inside.as_slice();
    let total = |a: Axis| -> f64 {
        field
            .component(a)
            .as_slice()
            .iter()
            .zip(inside)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v.abs())
            .sum()
    };
    Axis::ALL
        .into_iter()
        .max_by(|&a, &b| total(a).total_cmp(&total(b)))
        .expect("three axes")
}

fn default_planes(truth: &VelocityField, mask: &FluidMask) -> Vec<(Axis, usize)> {
    let axis = dominant_axis(truth, mask);
    let n = truth.grid.dims[axis.index()];
    [n / 4, n / 2, 3 * n / 4].into_iter().map(|i| (axis, i)).collect()
}

pub fn metric_report(pred: &VelocityField, truth: &VelocityField, mask: &FluidMask, opts: &ReportOptions) -> Result<MetricReport> {
    let cfg = MetricConfig {
        epsilon: opts.epsilon,
        mask: mask.clone(),
    };
    let rel = rel_speed_error(pred, truth, &cfg)?;
    let planes = if opts.planes.is_empty() {
        default_planes(truth, mask)
    } else {
        opts.planes.clone()
    };
    let mut flow_rates = Vec::new();
    for (axis, index) in planes {
        let plane = PlaneSpec::from_mask(mask, axis, index)?;
        // Planes that miss the vessel carry no flow to compare.
        if !plane.region.iter().any(|&r| r) {
            continue;
        }
        let (t, p) = (flow_rate(truth, &plane)?, flow_rate(pred, &plane)?);
        let error = flow_rate_error(t, p).ok();
        flow_rates.push(PlaneFlow {
            axis,
            index,
            truth_ml_s: t,
            pred_ml_s: p,
            error,
        });
    }
    let voxels = sample_mask(mask, opts.samples, opts.seed);
    ensure(voxels.len() >= 2, || "mask has fewer than 2 voxels".into())?;
    Ok(MetricReport {
        rel_speed_error_mean: rel,
        flow_rates,
        divergence: divergence_stats(pred, mask)?,
        bland_altman: bland_altman_components(pred, truth, &voxels)?,
    })
}

/// Reports for every method on one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub methods: BTreeMap<String, MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub frames: Vec<FrameReport>,
    /// Mean over frames of each method's relative speed error.
    pub mean_rel_speed_error: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn new(frames: Vec<FrameReport>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for f in &frames {
            for (m, r) in &f.methods {
                let e = sums.entry(m.clone()).or_default();
                e.0 += r.rel_speed_error_mean;
                e.1 += 1;
            }
        }
        let mean_rel_speed_error = sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect();
        EvaluationReport {
            frames,
            mean_rel_speed_error,
        }
    }

    /// Header plus one line per frame and method:
    /// `frame method rel_speed_error div_mean_abs mean_flow_error_percent`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<per-frame summary>", e);
        writeln!(w, "frame\tmethod\trel_speed_error\tdiv_mean_abs\tmean_flow_error_percent").map_err(io)?;
        for f in &self.frames {
            for (m, r) in &f.methods {
                let pct: Vec<f64> = r.flow_rates.iter().filter_map(|p| p.error.map(|e| e.percent)).collect();
                let mean_pct = if pct.is_empty() {
                    f64::NAN
                } else {
                    pct.iter().sum::<f64>() / pct.len() as f64
                };
                writeln!(
                    w,
                    "{}\t{}\t{:.6}\t{:.6}\t{:.3}",
                    f.frame, m, r.rel_speed_error_mean, r.divergence.mean_abs, mean_pct
                )
                .map_err(io)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{generate_field, FlowSpec};
    use crate::volume::Grid3;

    #[test]
    fn identical_fields_give_zero_errors() {
        let grid = Grid3::isotropic([16, 20, 20], 0.8).unwrap();
        let (f, mask) = generate_field(&FlowSpec::poiseuille(Axis::Y, 6.0, 90.0), &grid).unwrap();
        let r = metric_report(&f, &f, &mask, &ReportOptions::default()).unwrap();
        assert_eq!(r.rel_speed_error_mean, 0.0);
        assert_eq!(r.flow_rates.len(), 3);
        assert!(r.flow_rates.iter().all(|p| p.axis == Axis::Y && p.error.unwrap().absolute == 0.0 && p.truth_ml_s > 0.0));
        assert!(r.bland_altman.iter().all(|b| b.bias == 0.0 && b.sd == 0.0));

        let report = EvaluationReport::new(vec![FrameReport {
            frame: 0,
            methods: [("net".to_string(), r)].into(),
        }]);
        assert_eq!(report.mean_rel_speed_error["net"], 0.0);
        let mut tsv = Vec::new();
        report.write_tsv(&mut tsv).unwrap();
        let text = String::from_utf8(tsv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("0\tnet\t0.000000"));
        let json = serde_json::to_string(&report).unwrap();
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.frames.len(), 1);
    }
}
