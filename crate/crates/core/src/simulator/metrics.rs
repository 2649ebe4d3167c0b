//! Empirical gain statistics and their comparison against the certified
//! probability bound.
//!
//! For a cohort of rollouts the empirical distribution of the truncated gain
//! is F(gamma) = #{Gamma_T <= gamma} / n, to be compared against the inner
//! bound max(0, 1 - (rho gamma1^2 + (1 - rho) gamma2^2) / gamma^2). A rollout
//! that diverged before T has an unbounded gain and counts against every
//! finite gamma. The binomial standard error sqrt(F (1 - F) / n) calibrates
//! how much sampling slack a bound test may grant.

use std::io::Write;
use std::path::Path;

use crate::synthesis::GainProfile;

use super::rollout::{RolloutRecord, RolloutStatus, StepTrace};
use super::SimulatorError;

/// Empirical CDF of Gamma_T over the cohort at each grid point.
///
/// Records whose gain at T is undefined because the disturbance carried no
/// energy are rejected; at least one record must reach step T.
pub fn gamma_cdf(
    records: &[RolloutRecord],
    t: usize,
    grid: &[f64],
) -> Result<Vec<f64>, SimulatorError> {
    if records.is_empty() {
        return Err(SimulatorError::EmptyCohort);
    }
    let mut gains = Vec::with_capacity(records.len());
    let mut reached = 0usize;
    for r in records {
        match r.status() {
            RolloutStatus::Diverged { .. } => gains.push(f64::INFINITY),
            RolloutStatus::Completed => {
                if r.len() < t {
                    return Err(SimulatorError::Shape(format!(
                        "record with seed {} stops at step {}, need {t}",
                        r.seed(),
                        r.len()
                    )));
                }
                reached += 1;
                let gamma = r.gamma(t).ok_or_else(|| {
                    SimulatorError::Shape(format!(
                        "record with seed {} has zero disturbance energy at step {t}",
                        r.seed()
                    ))
                })?;
                gains.push(gamma);
            }
        }
    }
    if reached == 0 {
        return Err(SimulatorError::EmptyCohort);
    }
    let n = gains.len() as f64;
    Ok(grid
        .iter()
        .map(|&g| gains.iter().filter(|&&v| v <= g).count() as f64 / n)
        .collect())
}

/// Certified lower bound max(0, 1 - (rho g1^2 + (1-rho) g2^2) / gamma^2) on
/// the probability that Gamma_T <= gamma.
pub fn bound_curve(profile: &GainProfile, grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&g| (1.0 - profile.effective_bound(g)).max(0.0)).collect()
}

/// Binomial standard error of an empirical CDF value over n samples.
pub fn cdf_standard_error(value: f64, n: usize) -> f64 {
    ((value * (1.0 - value)).max(0.0) / n.max(1) as f64).sqrt()
}

/// Outcome of comparing one empirical CDF against the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub pass: bool,
    /// Most negative value of cdf - bound over the grid.
    pub worst_gap: f64,
    /// Grid points where the CDF falls below the bound, as
    /// (gamma, cdf, bound).
    pub violations: Vec<(f64, f64, f64)>,
}

/// Pointwise comparison cdf >= bound - slack on the grid.
pub fn check_bound(grid: &[f64], cdf: &[f64], bound: &[f64], slack: f64) -> BoundCheck {
    assert_eq!(grid.len(), cdf.len(), "grid and CDF lengths differ");
    assert_eq!(grid.len(), bound.len(), "grid and bound lengths differ");
    let mut worst_gap = f64::INFINITY;
    let mut violations = Vec::new();
    for ((&g, &c), &b) in grid.iter().zip(cdf).zip(bound) {
        let gap = c - b;
        worst_gap = worst_gap.min(gap);
        if gap < -slack {
            violations.push((g, c, b));
        }
    }
    if grid.is_empty() {
        worst_gap = 0.0;
    }
    BoundCheck { pass: violations.is_empty(), worst_gap, violations }
}

/// Strict comparison plus the sampling-aware verdict: a finite cohort may
/// graze the bound, so the tolerant rule forgives at most one grid point
/// lying within 1.5 standard errors below it.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerVerdict {
    pub strict: BoundCheck,
    pub tolerant_pass: bool,
}

/// Inner-probability test of one cohort CDF of size `n` against the bound.
pub fn inner_test(grid: &[f64], cdf: &[f64], bound: &[f64], n: usize) -> InnerVerdict {
    let strict = check_bound(grid, cdf, bound, 0.0);
    let mut grazes = 0usize;
    let mut tolerant_pass = true;
    for (&c, &b) in cdf.iter().zip(bound) {
        if c < b {
            let se = cdf_standard_error(c, n);
            if b - c <= 1.5 * se {
                grazes += 1;
            } else {
                tolerant_pass = false;
            }
        }
    }
    InnerVerdict { tolerant_pass: tolerant_pass && grazes <= 1, strict }
}

/// Each campaign's CDF checked strictly (no slack) against the bound; needs
/// at least two campaigns to speak about distribution robustness.
pub fn outer_test(
    campaign_cdfs: &[Vec<f64>],
    profile: &GainProfile,
    grid: &[f64],
) -> Result<Vec<BoundCheck>, SimulatorError> {
    if campaign_cdfs.len() < 2 {
        return Err(SimulatorError::Shape(format!(
            "outer test needs at least two campaigns, got {}",
            campaign_cdfs.len()
        )));
    }
    let bound = bound_curve(profile, grid);
    Ok(campaign_cdfs
        .iter()
        .map(|cdf| check_bound(grid, cdf, &bound, 0.0))
        .collect())
}

/// File stem embedding the design mode, seed, and horizon.
pub fn artifact_stem(kind: &str, mode: &str, seed: u64, horizon: usize) -> String {
    format!("{kind}_{mode}_seed{seed}_T{horizon}")
}

/// Writes a gamma grid, empirical CDF, and bound as three columns, preceded
/// by `comments` as `#` header lines.
pub fn export_cdf(
    path: &Path,
    grid: &[f64],
    cdf: &[f64],
    bound: &[f64],
    comments: &[String],
) -> Result<(), SimulatorError> {
    assert_eq!(grid.len(), cdf.len(), "grid and CDF lengths differ");
    assert_eq!(grid.len(), bound.len(), "grid and bound lengths differ");
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "gamma cdf bound")?;
    for ((&g, &c), &b) in grid.iter().zip(cdf).zip(bound) {
        writeln!(out, "{g:.12e} {c:.12e} {b:.12e}")?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes one record's step-indexed signals and energies as columns. Detailed
/// records include the signal channels; summary records only the energies and
/// gain sequence.
pub fn export_record(
    path: &Path,
    record: &RolloutRecord,
    comments: &[String],
) -> Result<(), SimulatorError> {
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "# status {:?} seed {} horizon {}", record.status(), record.seed(), record.horizon())?;
    let detailed = !record.steps().is_empty();
    let mut header = String::from("step cum_y cum_d gamma");
    if detailed {
        header.push_str(" w_true w_measured d_mean u_bar u_applied g_prior g_post p_trace");
    }
    writeln!(out, "{header}")?;
    for i in 0..record.len() {
        let gamma = record
            .gamma(i + 1)
            .map_or_else(|| "nan".to_string(), |g| format!("{g:.12e}"));
        let mut line = format!(
            "{} {:.12e} {:.12e} {gamma}",
            i + 1,
            record.cum_y()[i],
            record.cum_d()[i]
        );
        if detailed {
            let s: &StepTrace = &record.steps()[i];
            for v in [&s.w_true, &s.w_measured, &s.d_mean, &s.u_bar, &s.u_applied, &s.g_prior, &s.g_post]
            {
                line.push(' ');
                let cells: Vec<String> = v.iter().map(|x| format!("{x:.12e}")).collect();
                line.push_str(&cells.join(","));
            }
            line.push_str(&format!(" {:.12e}", s.p_post_trace));
        }
        writeln!(out, "{line}")?;
    }
    std::fs::write(path, out)?;
    Ok(())
}
