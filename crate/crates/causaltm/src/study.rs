//! Replication studies run on a rayon pool.

use causaltm_core::simulate::{
    plan_study, run_replicate, summarize, DgpConfig, ReplicateOutcome, ReplicationReport, SimulateError, StudyOptions,
};
use rayon::prelude::*;

/// Environment variable holding the worker count.
pub const THREADS_VAR: &str = "CAUSALTM_THREADS";

/// Worker count from `CAUSALTM_THREADS`, or rayon's default when unset or
/// not a positive integer.
pub fn thread_count() -> Option<usize> {
    std::env::var(THREADS_VAR).ok()?.trim().parse::<usize>().ok().filter(|&n| n > 0)
}

/// Same report as [`causaltm_core::simulate::run_study`]: each replicate has
/// its own random stream and outcomes are summarized in replicate order.
pub fn run_parallel(
    config: &DgpConfig,
    options: &StudyOptions,
    threads: Option<usize>,
) -> Result<ReplicationReport, SimulateError> {
    let plan = plan_study(config, options)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| SimulateError::Config(e.to_string()))?;
    let outcomes: Vec<ReplicateOutcome> =
        pool.install(|| (0..options.replicates).into_par_iter().map(|r| run_replicate(&plan, r)).collect());
    Ok(summarize(&plan, &outcomes))
}
