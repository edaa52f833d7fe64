//! Long-run moments of MAKLA and UKLA against the exact stationary law of a
//! Gaussian target.
//!
//! MAKLA leaves the target invariant, so its moments must match within
//! Monte Carlo error. UKLA is biased. Its bias at small h is far below the
//! noise of a plain long run, so UKLA is driven by the same noise as a MAKLA
//! chain and its second moments are estimated by
//! 1 + mean(x_U²·a − x_M²·a), using the exact MAKLA moment as a control
//! variate. Both estimators are reported.

use serde::{Deserialize, Serialize};

use super::stationary_draw;
use crate::error::{KlaError, Result};
use crate::integrator::{makla_step_in_place, ukla_step_in_place, KernelParams, Workspace};
use crate::model::TargetModel;
use crate::rng::{fill_standard_normal, stream, uniform, Purpose};
use crate::stats::BatchMeans;

const N_BATCHES: u64 = 100;

/// One moment of one coordinate against its exact value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    /// For example `x2[3]` for a_3·x_3² or `v1[0]` for v_0.
    pub name: String,
    pub exact: f64,
    pub estimate: f64,
    /// Batch-means standard error.
    pub stderr: f64,
    pub z_score: f64,
    pub within_3_stderr: bool,
}

impl MomentSummary {
    fn new(name: String, exact: f64, bm: &BatchMeans) -> Self {
        let (estimate, stderr) = (bm.mean(), bm.stderr());
        let z_score = if stderr > 0.0 {
            (estimate - exact) / stderr
        } else {
            f64::INFINITY
        };
        Self {
            name,
            exact,
            estimate,
            stderr,
            z_score,
            within_3_stderr: z_score.abs() <= 3.0,
        }
    }
}

/// Results at one step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub h: f64,
    pub makla_rejection_rate: f64,
    /// Means of x_i, v_i and second moments a_i·x_i², v_i² of MAKLA.
    pub makla_moments: Vec<MomentSummary>,
    /// Every second moment (the covariance diagonal and the velocity
    /// variances) lies within 3 stderr of 1.
    pub makla_passed: bool,
    /// Plain averages of a_i·x_i² and v_i² over the UKLA run, pooled over
    /// coordinates.
    pub ukla_x_var_plain: f64,
    pub ukla_v_var_plain: f64,
    /// Control-variate estimates of the same quantities and their stderr.
    pub ukla_x_var: f64,
    pub ukla_x_var_stderr: f64,
    pub ukla_v_var: f64,
    pub ukla_v_var_stderr: f64,
    /// |ukla_x_var − 1| + |ukla_v_var − 1|
    pub ukla_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub model: String,
    pub gamma: f64,
    pub n_steps: u64,
    pub burn_in: u64,
    pub rows: Vec<BiasRow>,
    pub makla_passed: bool,
    /// UKLA deviation strictly increases with h.
    pub ukla_increasing: bool,
    pub passed: bool,
}

/// Runs MAKLA and UKLA side by side at each h of `h_grid` for `burn_in +
/// n_steps` steps from an exact stationary draw.
pub fn stationarity_and_bias(
    model: &TargetModel,
    gamma: f64,
    h_grid: &[f64],
    n_steps: u64,
    burn_in: u64,
    seed: u64,
) -> Result<StationarityReport> {
    let prec = model.gaussian_precisions().ok_or_else(|| {
        KlaError::InvalidParameter(format!(
            "stationarity checks need a Gaussian model, got {}",
            model.name()
        ))
    })?;
    if n_steps < 2 * N_BATCHES {
        return Err(KlaError::InvalidParameter(format!(
            "n_steps must be at least {}",
            2 * N_BATCHES
        )));
    }
    let mut sorted = h_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rows = sorted
        .iter()
        .enumerate()
        .map(|(i, &h)| bias_row(model, &prec, gamma, h, n_steps, burn_in, seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let makla_passed = rows.iter().all(|r| r.makla_passed);
    let ukla_increasing = rows
        .windows(2)
        .all(|w| w[1].ukla_deviation > w[0].ukla_deviation);
    Ok(StationarityReport {
        model: model.name().to_string(),
        gamma,
        n_steps,
        burn_in,
        rows,
        makla_passed,
        ukla_increasing,
        passed: makla_passed && ukla_increasing,
    })
}

#[allow(clippy::too_many_arguments)]
fn bias_row(
    model: &TargetModel,
    prec: &[f64],
    gamma: f64,
    h: f64,
    n_steps: u64,
    burn_in: u64,
    seed: u64,
    index: u64,
) -> Result<BiasRow> {
    let d = model.dim();
    let params = KernelParams::new(h, gamma)?;
    let mut rng = stream(seed, Purpose::Chain, index);
    let z0 = stationary_draw(prec, &mut rng);
    let (mut xm, mut vm) = (z0.x.clone(), z0.v.clone());
    let (mut xu, mut vu) = (z0.x, z0.v);
    let mut ws = Workspace::new(d);
    let mut grad = vec![0.0; d];
    let (mut xi1, mut xi2) = (vec![0.0; d], vec![0.0; d]);
    let batch = n_steps / N_BATCHES;
    let counted = batch * N_BATCHES;

    // Per coordinate: x, v, a·x², v². Pooled: plain and control-variate UKLA.
    let mut first_x: Vec<BatchMeans> = (0..d).map(|_| BatchMeans::new(batch)).collect();
    let mut first_v = first_x.clone();
    let mut second_x = first_x.clone();
    let mut second_v = first_x.clone();
    let mut ukla_x_plain = BatchMeans::new(batch);
    let mut ukla_v_plain = BatchMeans::new(batch);
    let mut ukla_x_cv = BatchMeans::new(batch);
    let mut ukla_v_cv = BatchMeans::new(batch);
    let mut rejections = 0u64;

    for step in 0..burn_in + counted {
        fill_standard_normal(&mut rng, &mut xi1);
        fill_standard_normal(&mut rng, &mut xi2);
        let u = uniform(&mut rng);
        let info = makla_step_in_place(model, &params, &mut xm, &mut vm, &xi1, &xi2, u, &mut ws)?;
        ukla_step_in_place(model, &params, &mut xu, &mut vu, &xi1, &xi2, &mut grad);
        if step < burn_in {
            continue;
        }
        rejections += u64::from(!info.accepted);
        let (mut pxm, mut pvm, mut pxu, mut pvu) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..d {
            let (sx, sv) = (prec[i] * xm[i] * xm[i], vm[i] * vm[i]);
            first_x[i].push(xm[i] * prec[i].sqrt());
            first_v[i].push(vm[i]);
            second_x[i].push(sx);
            second_v[i].push(sv);
            pxm += sx;
            pvm += sv;
            pxu += prec[i] * xu[i] * xu[i];
            pvu += vu[i] * vu[i];
        }
        let df = d as f64;
        ukla_x_plain.push(pxu / df);
        ukla_v_plain.push(pvu / df);
        ukla_x_cv.push(1.0 + (pxu - pxm) / df);
        ukla_v_cv.push(1.0 + (pvu - pvm) / df);
    }
    if !xu.iter().chain(&vu).all(|c| c.is_finite()) {
        return Err(KlaError::Diverged { delta_h: f64::NAN });
    }

    let mut makla_moments = Vec::with_capacity(4 * d);
    for i in 0..d {
        makla_moments.push(MomentSummary::new(format!("x1[{i}]"), 0.0, &first_x[i]));
        makla_moments.push(MomentSummary::new(format!("v1[{i}]"), 0.0, &first_v[i]));
        makla_moments.push(MomentSummary::new(format!("x2[{i}]"), 1.0, &second_x[i]));
        makla_moments.push(MomentSummary::new(format!("v2[{i}]"), 1.0, &second_v[i]));
    }
    let makla_passed = makla_moments
        .iter()
        .filter(|m| m.name.starts_with("x2") || m.name.starts_with("v2"))
        .all(|m| m.within_3_stderr);
    let (ukla_x_var, ukla_v_var) = (ukla_x_cv.mean(), ukla_v_cv.mean());
    Ok(BiasRow {
        h,
        makla_rejection_rate: rejections as f64 / counted as f64,
        makla_moments,
        makla_passed,
        ukla_x_var_plain: ukla_x_plain.mean(),
        ukla_v_var_plain: ukla_v_plain.mean(),
        ukla_x_var,
        ukla_x_var_stderr: ukla_x_cv.stderr(),
        ukla_v_var,
        ukla_v_var_stderr: ukla_v_cv.stderr(),
        ukla_deviation: (ukla_x_var - 1.0).abs() + (ukla_v_var - 1.0).abs(),
    })
}
