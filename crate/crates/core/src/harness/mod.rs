//! Crash-consistency and durability testing.

pub mod campaign;
pub mod durability;
pub mod minimize;
pub mod scheduler;
pub mod workload;

pub use campaign::{
    check_consistency, count_load_stores, crash_sites, expected_load_stores, plan_for,
    profile_load, run_campaign, run_campaign_with, run_state, write_artifact, Calibration,
    CampaignConfig, CampaignReport, ConsistencyReport, CrashMode, Expectation, Expected,
    FailureRecord, LoadProfile, PolicyKind, StateOutcome, StateSpec, WrongValue,
};
pub use durability::{
    check_durability, run_durability, DurabilityChecker, DurabilityReport, DurabilityRun,
};
pub use minimize::{minimize, Minimized};
pub use scheduler::{CrashPlan, CrashPoint, Scheduler, SwitchRates};
pub use workload::{KeyPattern, KeySource, Op};
