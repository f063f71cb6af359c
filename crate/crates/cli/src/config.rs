use std::fs;

use hepeval_core::losses::LossConfig;
use hepeval_core::metrics::EvalConfig;
use hepeval_core::Connectivity;
use serde::{Deserialize, Serialize};

use crate::args::GlobalArgs;
use crate::failure::{CmdResult, Failure};

/// The single configuration file: loss settings, metric options and the
/// worker count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub jobs: Option<usize>,
}

impl Config {
    /// Read `--config` if given, apply flag overrides and validate.
    pub fn resolve(global: &GlobalArgs) -> CmdResult<Config> {
        let mut config = match &global.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Failure::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    Failure::Usage(format!("invalid config {}: {e}", path.display()))
                })?
            }
            None => Config::default(),
        };
        if let Some(c) = &global.connectivity {
            let n: u8 = c.parse().expect("restricted by clap");
            config.eval.connectivity =
                Connectivity::try_from(n).map_err(|e| Failure::Usage(e.to_string()))?;
        }
        if let Some(n) = global.skeleton_iters {
            config.loss.skeleton_iterations = n;
            config.eval.skeleton_iterations = n;
        }
        if global.jobs.is_some() {
            config.jobs = global.jobs;
        }
        if config.jobs == Some(0) {
            return Err(Failure::Usage("jobs must be at least 1".into()));
        }
        config.loss.validate()?;
        config.eval.validate()?;
        Ok(config)
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        })
    }
}
