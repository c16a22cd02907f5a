//! Spherical tracking scores and their aggregation over episodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::Spherical;

/// Score gate on the range error used by the elevation and azimuth scores, m.
const RANGE_GATE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no runs to aggregate")]
    NoRuns,
    #[error("run {0} has no samples")]
    EmptyRun(usize),
}

/// Per-step distance, elevation, azimuth and total scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreSample {
    pub p_rho: f64,
    pub p_theta: f64,
    pub p_phi: f64,
    pub p_c: f64,
}

impl ScoreSample {
    pub const ZERO: ScoreSample = ScoreSample {
        p_rho: 0.0,
        p_theta: 0.0,
        p_phi: 0.0,
        p_c: 0.0,
    };

    fn from_parts(p_rho: f64, p_theta: f64, p_phi: f64) -> Self {
        Self {
            p_rho,
            p_theta,
            p_phi,
            p_c: (p_rho + p_theta + p_phi) / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub d_r: f64,
    pub fov: f64,
}

pub fn score_sample(s: &Spherical, cfg: &ScoreConfig) -> ScoreSample {
    let half = 0.5 * cfg.fov;
    let range_err = (s.rho - cfg.d_r).abs();
    let theta_in = s.theta.abs() < half;
    let phi_in = s.phi.abs() < half;
    let range_in = range_err < RANGE_GATE;

    let p_rho = if theta_in && phi_in {
        (1.0 - 2.0 * range_err).max(0.0)
    } else {
        0.0
    };
    let p_theta = if phi_in && range_in {
        (1.0 - s.theta.abs() / half).max(0.0)
    } else {
        0.0
    };
    let p_phi = if theta_in && range_in {
        (1.0 - s.phi.abs() / half).max(0.0)
    } else {
        0.0
    };
    ScoreSample::from_parts(p_rho, p_theta, p_phi)
}

/// Aggregated scores of one benchmark cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub p_rho: f64,
    pub p_theta: f64,
    pub p_phi: f64,
    pub p_c: f64,
    pub runs: usize,
    pub steps: usize,
}

/// Mean over the steps of each run, then mean across runs.
pub fn aggregate<R: AsRef<[ScoreSample]>>(runs: &[R]) -> Result<ScoreTable, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::NoRuns);
    }
    let mut acc = [0.0; 4];
    let mut steps = 0;
    for (i, run) in runs.iter().enumerate() {
        let run = run.as_ref();
        if run.is_empty() {
            return Err(MetricsError::EmptyRun(i));
        }
        let mut local = [0.0; 4];
        for s in run {
            local[0] += s.p_rho;
            local[1] += s.p_theta;
            local[2] += s.p_phi;
            local[3] += s.p_c;
        }
        let n = run.len() as f64;
        for (a, l) in acc.iter_mut().zip(local) {
            *a += l / n;
        }
        steps += run.len();
    }
    let n = runs.len() as f64;
    Ok(ScoreTable {
        p_rho: acc[0] / n,
        p_theta: acc[1] / n,
        p_phi: acc[2] / n,
        p_c: acc[3] / n,
        runs: runs.len(),
        steps,
    })
}

/// CSV with one row per labeled table; floats use shortest round-trip form.
pub fn tables_to_csv(rows: &[(String, ScoreTable)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "p_theta", "p_phi", "p_rho", "p_c", "runs", "steps"])
        .expect("in-memory write");
    for (label, t) in rows {
        w.write_record([
            label.clone(),
            t.p_theta.to_string(),
            t.p_phi.to_string(),
            t.p_rho.to_string(),
            t.p_c.to_string(),
            t.runs.to_string(),
            t.steps.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

/// Aligned markdown table, scenarios × {P_θ, P_φ, P_ρ, P_c}, four decimals.
pub fn tables_to_markdown(rows: &[(String, ScoreTable)]) -> String {
    let header = ["Scenario", "P_θ", "P_φ", "P_ρ", "P_c"].map(String::from);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, t)| {
            vec![
                label.clone(),
                format!("{:.4}", t.p_theta),
                format!("{:.4}", t.p_phi),
                format!("{:.4}", t.p_rho),
                format!("{:.4}", t.p_c),
            ]
        })
        .collect();
    markdown_table(&header, &body)
}

/// Renders a markdown table with columns padded to equal width. Short rows
/// are padded with empty cells.
pub fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let n = header.len();
    let cell = |r: &[String], i: usize| r.get(i).map(String::as_str).unwrap_or("").to_string();
    let width = |i: usize| {
        rows.iter()
            .map(|r| cell(r, i).chars().count())
            .chain([header[i].chars().count(), 3])
            .max()
            .unwrap_or(3)
    };
    let widths: Vec<usize> = (0..n).map(width).collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = (0..n)
            .map(|i| {
                let c = cell(cells, i);
                format!("{c}{}", " ".repeat(widths[i] - c.chars().count()))
            })
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("| {} |\n", rule.join(" | ")));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}
