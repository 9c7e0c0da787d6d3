//! Change of gradient flow caused by individual DST mask updates.

use serde::{Deserialize, Serialize};
use sparselab::data::Dataset;

use super::gradflow::pruning_runs;
use super::par_map;
use super::protocol::{parse_variants, MaskSource, Protocol};
use crate::output::{gnuplot_lines, ArtifactDir};
use crate::stats::{mean, sign_test};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstDeltaParams {
    pub protocol: Protocol,
    pub variants: Vec<String>,
    /// Pairs `[a, b]` tested for `delta(a) > delta(b)`.
    pub comparisons: Vec<[String; 2]>,
}

impl Default for DstDeltaParams {
    fn default() -> Self {
        let mut protocol = Protocol::default();
        protocol.train.record_update_deltas = true;
        let s = String::from;
        Self {
            protocol,
            variants: vec![s("rigl+"), s("set+"), s("rigl-inverted+")],
            comparisons: vec![[s("rigl+"), s("set+")], [s("rigl+"), s("rigl-inverted+")]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub variant: String,
    pub seed: u64,
    pub update: usize,
    pub step: u64,
    pub first_half: bool,
    pub alpha: f64,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    pub grown: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub mean_delta_a: f64,
    pub mean_delta_b: f64,
    pub wins: usize,
    pub pairs: usize,
    pub p_value: f64,
}

pub struct DstDeltaResult {
    pub rows: Vec<DeltaRow>,
    pub comparisons: Vec<Comparison>,
    /// Mask updates per run within the first half of training.
    pub first_half_updates: usize,
}

impl DstDeltaResult {
    fn first_half(&self, variant: &str) -> Vec<&DeltaRow> {
        self.rows.iter().filter(|r| r.variant == variant && r.first_half).collect()
    }

    pub fn mean_delta(&self, variant: &str) -> f64 {
        mean(&self.first_half(variant).iter().map(|r| r.delta).collect::<Vec<_>>())
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }

    pub fn write(&self, dir: &mut ArtifactDir) -> Result<(), CliError> {
        dir.csv(
            "deltas.csv",
            &[
                "variant", "seed", "update", "step", "first_half", "alpha", "before", "after", "delta", "grown",
                "shortfall",
            ],
            &self.rows,
        )?;
        dir.csv(
            "delta_summary.csv",
            &["a", "b", "mean_delta_a", "mean_delta_b", "wins", "pairs", "p_value"],
            &self.comparisons,
        )?;
        dir.text(
            "deltas.gp",
            &gnuplot_lines("deltas.csv", "gradient flow change at mask updates", 4, 9, Some(1), false),
        )
    }
}

pub fn run(p: &DstDeltaParams, data: &Dataset) -> Result<DstDeltaResult, CliError> {
    let mut pr = p.protocol.clone();
    pr.train.record_update_deltas = true;
    pr.validate()?;
    let variants = parse_variants(&p.variants)?;
    if let Some(v) = variants.iter().find(|v| v.dst_method().is_none()) {
        return Err(CliError::Config(format!("'{}' does not update masks", v.name)));
    }
    for [a, b] in &p.comparisons {
        if !p.variants.contains(a) || !p.variants.contains(b) {
            return Err(CliError::Config(format!("comparison {a} vs {b} names an unknown variant")));
        }
    }
    let half = pr.total_steps(data) / 2;
    let pruned = pruning_runs(&pr, data, &variants, &[])?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..pr.seeds.len()).map(move |s| (v, s)))
        .collect();
    let per_run = par_map(jobs, |(v, s)| {
        let seed = pr.seeds[s];
        let masks = match pr.masks {
            MaskSource::Pruning => pruned[s].as_ref().map(|r| r.net.masks()),
            MaskSource::Random => None,
        };
        let run = pr.sparse_run(data, &variants[v], masks.as_deref(), seed)?;
        Ok(run
            .updates
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let f = u.flow.expect("update deltas are recorded");
                DeltaRow {
                    variant: variants[v].name.clone(),
                    seed,
                    update: k,
                    step: u.report.step,
                    first_half: u.report.step < half,
                    alpha: u.report.alpha,
                    before: f.before,
                    after: f.after,
                    delta: f.delta,
                    grown: u.report.n_grown(),
                    shortfall: u.report.shortfall(),
                }
            })
            .collect::<Vec<_>>())
    })?;
    let rows: Vec<DeltaRow> = per_run.into_iter().flatten().collect();
    let mut out = DstDeltaResult {
        first_half_updates: rows
            .iter()
            .filter(|r| r.variant == variants[0].name && r.seed == pr.seeds[0] && r.first_half)
            .count(),
        rows,
        comparisons: Vec::new(),
    };
    for [a, b] in &p.comparisons {
        // Updates are paired by seed and position in the schedule.
        let ra = out.first_half(a);
        let rb = out.first_half(b);
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        for r in &ra {
            if let Some(o) = rb.iter().find(|o| o.seed == r.seed && o.update == r.update) {
                xa.push(r.delta);
                xb.push(o.delta);
            }
        }
        let (wins, pairs, p_value) = sign_test(&xa, &xb);
        let c = Comparison {
            a: a.clone(),
            b: b.clone(),
            mean_delta_a: mean(&xa),
            mean_delta_b: mean(&xb),
            wins,
            pairs,
            p_value,
        };
        out.comparisons.push(c);
    }
    Ok(out)
}
