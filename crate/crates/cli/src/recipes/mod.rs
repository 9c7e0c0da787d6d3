//! Reproduction recipes. Each one has a parameter struct with serde
//! defaults (overridable from TOML or `key=value`), a function computing
//! typed results, and a writer producing CSVs, gnuplot scripts and a
//! manifest. Independent seeds and variants run on the rayon pool;
//! results are collected in job order so outputs do not depend on
//! scheduling.

use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::layered;
use crate::output::{ArtifactDir, Manifest};
use crate::CliError;

pub mod dst_delta;
pub mod gradflow;
pub mod hessian;
pub mod lottery;
pub mod protocol;
pub mod signal;
pub mod table1;

pub const RECIPES: [&str; 6] = [
    "fig1c-signal",
    "fig3-gradflow",
    "fig4-dst-delta",
    "table1-init",
    "lottery-suite",
    "hessian-suite",
];

/// Ordered parallel map that stops at the first error (in job order).
pub(crate) fn par_map<T, R, F>(jobs: Vec<T>, f: F) -> Result<Vec<R>, CliError>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R, CliError> + Sync + Send,
{
    jobs.into_par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

pub struct RecipeOutput {
    pub files: Vec<String>,
    pub manifest: Manifest,
}

/// Parameters of the recipe built from defaults, an optional TOML
/// document and overrides.
pub fn params<T: Serialize + DeserializeOwned + Default>(file: Option<&str>, overrides: &[String]) -> Result<T, CliError> {
    layered(&T::default(), file, overrides)
}

/// Runs recipe `name` and writes its artifacts into `out`.
pub fn run_experiment(name: &str, file: Option<&str>, overrides: &[String], out: &Path) -> Result<RecipeOutput, CliError> {
    if !RECIPES.contains(&name) {
        return Err(CliError::Config(format!(
            "unknown recipe '{name}'; available: {}",
            RECIPES.join(", ")
        )));
    }
    let mut dir = ArtifactDir::create(out)?;
    let manifest = match name {
        "fig1c-signal" => {
            let p: signal::SignalParams = params(file, overrides)?;
            let r = signal::run(&p)?;
            r.write(&mut dir)?;
            dir.manifest("recipe", name, &p, &p.seeds, "gaussian-probe")?
        }
        "fig3-gradflow" => {
            let p: gradflow::GradFlowParams = params(file, overrides)?;
            let data = p.protocol.data.load()?;
            let r = gradflow::run(&p, &data)?;
            r.write(&mut dir)?;
            dir.manifest("recipe", name, &p, &p.protocol.seeds, &p.protocol.data.describe())?
        }
        "fig4-dst-delta" => {
            let p: dst_delta::DstDeltaParams = params(file, overrides)?;
            let data = p.protocol.data.load()?;
            let r = dst_delta::run(&p, &data)?;
            r.write(&mut dir)?;
            dir.manifest("recipe", name, &p, &p.protocol.seeds, &p.protocol.data.describe())?
        }
        "table1-init" => {
            let p: table1::Table1Params = params(file, overrides)?;
            let data = p.protocol.data.load()?;
            let r = table1::run(&p, &data)?;
            r.write(&mut dir)?;
            dir.manifest("recipe", name, &p, &p.protocol.seeds, &p.protocol.data.describe())?
        }
        "lottery-suite" => {
            let p: lottery::LotteryParams = params(file, overrides)?;
            let data = p.protocol.data.load()?;
            let r = lottery::run(&p, &data)?;
            r.write(&mut dir)?;
            dir.manifest("recipe", name, &p, &p.protocol.seeds, &p.protocol.data.describe())?
        }
        "hessian-suite" => {
            let p: hessian::HessianParams = params(file, overrides)?;
            let data = p.data.load()?;
            let r = hessian::run(&p, &data)?;
            r.write(&mut dir)?;
            dir.manifest("recipe", name, &p, &p.seeds, &p.data.describe())?
        }
        _ => unreachable!(),
    };
    Ok(RecipeOutput {
        files: dir.files().to_vec(),
        manifest,
    })
}
