pub mod harness;
pub mod oracle;
pub mod relaxation;
pub mod stats;

pub use harness::{
    run_from, run_two_timescale, FnSink, Flow, NullSink, RecordFlags, RunOutcome, RunSettings, TraceRecord,
    TraceSink, VoltageMode,
};
pub use oracle::{dual_lipschitz_bound, oracle_solve, OracleOptions, OracleSolution};
pub use relaxation::{exact_relaxation_check, RelaxationReport};
pub use stats::{ConvergenceDetector, RunningStats, ScalarStats};
