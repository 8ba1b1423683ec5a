//! A completion run written to an output directory: the final cloud, the
//! per-iteration trace and the effective configuration.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_cloud, write_cloud, CloudFormat};
use crate::optimize::{complete, Completion, Instance};

pub const FINAL_CLOUD: &str = "final.ply";
pub const TRACE: &str = "trace.txt";
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub completion: Completion,
    /// The synthetic ground truth when no input cloud was given.
    pub instance: Option<Instance>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Completes `input` (or the configured synthetic shape) and writes exactly
/// [`FINAL_CLOUD`], [`TRACE`] and [`CONFIG_ECHO`] into `out_dir`. On
/// divergence the partial trace is still written.
pub fn run_complete(config: &RunConfig, input: Option<&Path>, out_dir: &Path) -> Result<RunOutput> {
    let (partial, instance) = match input {
        Some(path) => (read_cloud(path)?, None),
        None => {
            let inst = config.instance()?;
            (inst.partial.clone(), Some(inst))
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join(CONFIG_ECHO), &config.to_text())?;
    let completion = match complete(&partial, &config.completion) {
        Ok(c) => c,
        Err(Error::Diverged { iteration, trace }) => {
            write(&out_dir.join(TRACE), &trace.to_lines())?;
            return Err(Error::Diverged { iteration, trace });
        }
        Err(e) => return Err(e),
    };
    write(&out_dir.join(TRACE), &completion.trace.to_lines())?;
    write_cloud(&completion.candidate, out_dir.join(FINAL_CLOUD), CloudFormat::Ply)?;
    Ok(RunOutput { completion, instance })
}
