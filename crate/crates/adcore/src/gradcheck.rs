// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks for tape gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::AdError;

/// Relative error `|a - n| / max(|a|, |n|, floor)`. Below `floor` the error is
/// effectively absolute, which keeps near-zero derivatives from blowing up.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Worst relative error restricted to entries of one input.
    pub fn max_rel_error_for(&self, input: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.input == input)
            .fold(0.0, |m, e| m.max(e.rel_error))
    }

    /// Worst relative error over a column block `[start, end)` of one input
    /// with `cols` columns.
    pub fn max_rel_error_in_cols(
        &self,
        input: usize,
        cols: usize,
        start: usize,
        end: usize,
    ) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.input == input && (start..end).contains(&(e.index % cols)))
            .fold(0.0, |m, e| m.max(e.rel_error))
    }
}

fn evaluate<F>(build: &F, inputs: &[Tensor]) -> Result<f64, AdError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AdError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.value(out).item().ok_or(AdError::NonScalarOutput {
        shape: g.value(out).shape(),
    })
}

/// Compares the tape gradient of `build` with respect to every entry of every
/// input against a central difference. `build` receives one leaf per input
/// and must return a scalar.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    config: GradCheckConfig,
) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AdError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[input].shape());
        for index in 0..inputs[input].len() {
            let original = inputs[input].data()[index];
            probe[input].data_mut()[index] = original + config.step;
            let up = evaluate(&build, &probe)?;
            probe[input].data_mut()[index] = original - config.step;
            let down = evaluate(&build, &probe)?;
            probe[input].data_mut()[index] = original;

            let numeric = (up - down) / (2.0 * config.step);
            let a = analytic.data()[index];
            let rel_error = relative_error(a, numeric, config.floor);
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.entries.push(GradCheckEntry {
                input,
                index,
                analytic: a,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}
