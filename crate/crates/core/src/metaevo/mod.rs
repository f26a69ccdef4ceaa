//! Population-based meta-evolution of worlds: scoring, archive upkeep and
//! exploit/explore, plus the random-search and fixed baselines.

mod population;
mod run;
mod space;

pub use population::{
    exploit_explore, perturb_weights, ranking, replacement_set, ExploitConfig, Replacement,
};
pub use run::{
    meta_rng, run_fixed, run_pbt, run_random_search, world_rng, ArchiveRanking, IterationReport,
    MetaConfig, Run, RunArtifacts, RunError, RunMode, WorldRecord,
};
pub use space::{
    composite_score, mutate_value, replacement_count, round_half_up, HyperKind, HyperName,
    HyperSpace, HyperSpec,
};
