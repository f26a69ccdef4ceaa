use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::population::{exploit_explore, ExploitConfig, Replacement};
use super::space::{composite_score, HyperSpace};
use crate::analysis::{analyze_frames, Symbolization};
use crate::descriptor::{behavior_descriptor, BehaviorDescriptor};
use crate::diversity::{diversity_scores, sample_indices, BuiltinEmbedder, EmbedError, Embedder};
use crate::novelty::{Archive, ArchiveConfig};
use crate::runio::render_frame;
use crate::substrate::{HyperParams, SubstrateError, Trajectory, World, WorldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    #[default]
    Pbt,
    RandomSearch,
    Fixed,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Pbt => "pbt",
            RunMode::RandomSearch => "random-search",
            RunMode::Fixed => "fixed",
        }
    }
}

/// What orders descriptors for archive insertion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchiveRanking {
    #[default]
    Composite,
    Novelty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub mode: RunMode,
    pub population: usize,
    pub iterations: u64,
    /// Training segments per world per meta-iteration.
    pub world_segments: usize,
    /// Exploit/explore every this many meta-iterations.
    pub exploit_interval: u64,
    pub exploit: ExploitConfig,
    /// Descriptors added to the archive per meta-iteration.
    pub archive_top_m: usize,
    pub k_nn: usize,
    pub archive: ArchiveConfig,
    pub archive_ranking: ArchiveRanking,
    pub extended_space: bool,
    /// Embedding one frame in `diversity_stride` of a default-length
    /// trajectory.
    pub diversity_stride: usize,
    pub symbolization: Symbolization,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Pbt,
            population: 30,
            iterations: 500,
            world_segments: 12,
            exploit_interval: 5,
            exploit: ExploitConfig::default(),
            archive_top_m: 2,
            k_nn: 8,
            archive: ArchiveConfig::default(),
            archive_ranking: ArchiveRanking::Composite,
            extended_space: false,
            diversity_stride: 4,
            symbolization: Symbolization::PackedWinner,
        }
    }
}

impl MetaConfig {
    pub fn space(&self) -> HyperSpace {
        HyperSpace::new(self.extended_space)
    }

    /// Frames embedded per world: a default-length trajectory
    /// (`world_segments` times the default steps per update) over the stride.
    pub fn diversity_samples(&self) -> usize {
        let tau = HyperParams::default().steps_per_update as usize;
        (self.world_segments * tau)
            .div_ceil(self.diversity_stride.max(1))
            .max(1)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.population == 0 {
            return bad("population must be at least 1");
        }
        if self.world_segments < 2 {
            return bad("world_segments must be at least 2 so descriptors can see change");
        }
        if self.exploit_interval == 0 {
            return bad("exploit_interval must be at least 1");
        }
        let e = &self.exploit;
        if !(e.rho > 0.0 && e.rho <= 0.5) {
            return bad("rho must lie in (0, 0.5]");
        }
        for (name, p) in [("p_cross", e.p_cross), ("p_pert", e.p_pert)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(RunError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(e.sigma_w >= 0.0 && e.sigma_w.is_finite()) {
            return bad("sigma_w must be finite and non-negative");
        }
        if self.archive_top_m == 0 {
            return bad("archive_top_m must be at least 1");
        }
        if self.k_nn == 0 {
            return bad("k_nn must be at least 1");
        }
        if self.archive.max_len == 0 {
            return bad("archive max_len must be at least 1");
        }
        if self.diversity_stride == 0 {
            return bad("diversity_stride must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
}

/// One world's outcome for one meta-iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldRecord {
    pub t: u64,
    pub world: usize,
    pub novelty: f64,
    pub diversity: f64,
    /// `None` stands for an unhealthy world's minus infinity.
    pub score: Option<f64>,
    pub healthy: bool,
    pub hparams: HyperParams,
    pub frames: usize,
    pub steps: u64,
    pub persistence: f64,
    pub entropy_mean: f64,
    pub complexity_mean: f64,
}

impl WorldRecord {
    pub fn score_value(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug)]
pub struct IterationReport {
    pub t: u64,
    pub records: Vec<WorldRecord>,
    pub replacements: Vec<Replacement>,
    pub archive_len: usize,
    /// Rollouts of this iteration, before any replacement.
    pub trajectories: Vec<Trajectory>,
    pub descriptors: Vec<Option<BehaviorDescriptor>>,
}

/// Population, archive and meta random stream of a run.
pub struct Run {
    world: WorldConfig,
    meta: MetaConfig,
    worlds: Vec<World>,
    archive: Archive,
    rng: ChaCha8Rng,
    t: u64,
    embedder: Box<dyn Embedder>,
}

/// Stream 0 drives the meta loop; world `i` starts on stream `i + 1`.
pub fn meta_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn world_rng(seed: u64, world: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(world as u64 + 1);
    r
}

impl Run {
    pub fn new(
        world: WorldConfig,
        meta: MetaConfig,
        seed: u64,
        embedder: Box<dyn Embedder>,
    ) -> Result<Self, RunError> {
        meta.validate()?;
        let mut rng = meta_rng(seed);
        let space = meta.space();
        let mut worlds = Vec::with_capacity(meta.population);
        for i in 0..meta.population {
            let hp = match meta.mode {
                RunMode::Fixed => space.defaults(),
                RunMode::Pbt | RunMode::RandomSearch => space.sample(&mut rng),
            };
            worlds.push(World::init(world, hp, world_rng(seed, i))?);
        }
        Ok(Self {
            world,
            archive: Archive::new(meta.archive),
            meta,
            worlds,
            rng,
            t: 0,
            embedder,
        })
    }

    /// Reassemble a run from saved state; `t` is the last finished iteration.
    pub fn from_state(
        world: WorldConfig,
        meta: MetaConfig,
        worlds: Vec<World>,
        archive: Archive,
        rng: ChaCha8Rng,
        t: u64,
        embedder: Box<dyn Embedder>,
    ) -> Result<Self, RunError> {
        meta.validate()?;
        if worlds.len() != meta.population {
            return Err(RunError::Config(format!(
                "{} worlds for a population of {}",
                worlds.len(),
                meta.population
            )));
        }
        Ok(Self {
            world,
            meta,
            worlds,
            archive,
            rng,
            t,
            embedder,
        })
    }

    pub fn world_config(&self) -> &WorldConfig {
        &self.world
    }

    pub fn meta(&self) -> &MetaConfig {
        &self.meta
    }

    pub fn worlds(&self) -> &[World] {
        &self.worlds
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Meta-iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.meta.iterations
    }

    pub fn embedder_name(&self) -> &str {
        self.embedder.name()
    }

    /// Swap in another embedder, e.g. after the current one failed.
    pub fn set_embedder(&mut self, embedder: Box<dyn Embedder>) {
        self.embedder = embedder;
    }

    /// Roll out, score, update the archive and, on schedule, exploit/explore.
    pub fn step(&mut self) -> Result<IterationReport, RunError> {
        let t = self.t + 1;
        let started = Instant::now();
        let segments = self.meta.world_segments;
        let trajectories: Vec<Trajectory> = self
            .worlds
            .par_iter_mut()
            .map(|w| w.rollout(segments))
            .collect();
        let healthy: Vec<bool> = self
            .worlds
            .iter()
            .zip(&trajectories)
            .map(|(w, tr)| w.is_healthy() && tr.healthy && tr.len() >= 2)
            .collect();
        let descriptors: Vec<Option<BehaviorDescriptor>> = trajectories
            .par_iter()
            .zip(&healthy)
            .map(|(tr, &ok)| {
                if ok {
                    behavior_descriptor(&tr.frames).ok()
                } else {
                    None
                }
            })
            .collect();
        let healthy: Vec<bool> = healthy
            .iter()
            .zip(&descriptors)
            .map(|(&h, d)| h && d.is_some())
            .collect();

        let novelty: Vec<f64> = descriptors
            .iter()
            .map(|d| {
                d.as_ref()
                    .map_or(0.0, |d| self.archive.novelty(d, self.meta.k_nn))
            })
            .collect();
        let diversity = self.diversity(&trajectories, &healthy)?;
        let scores: Vec<f64> = (0..self.worlds.len())
            .map(|i| composite_score(novelty[i], diversity[i], healthy[i]))
            .collect();

        let reports: Vec<_> = trajectories
            .par_iter()
            .map(|tr| analyze_frames(&tr.frames, self.meta.symbolization))
            .collect();
        let records: Vec<WorldRecord> = (0..self.worlds.len())
            .map(|i| WorldRecord {
                t,
                world: i,
                novelty: novelty[i],
                diversity: diversity[i],
                score: scores[i].is_finite().then_some(scores[i]),
                healthy: healthy[i],
                hparams: *self.worlds[i].hparams(),
                frames: trajectories[i].len(),
                steps: self.worlds[i].steps(),
                persistence: reports[i].persistence,
                entropy_mean: reports[i].entropy_mean,
                complexity_mean: reports[i].complexity_mean,
            })
            .collect();

        for (w, &ok) in self.worlds.iter_mut().zip(&healthy) {
            if !ok {
                w.mark_unhealthy();
            }
        }

        if self.meta.mode == RunMode::Pbt {
            self.update_archive(t, &descriptors, &novelty, &scores);
        }
        let replacements = if self.meta.mode == RunMode::Pbt && t % self.meta.exploit_interval == 0
        {
            let space = self.meta.space();
            exploit_explore(
                &mut self.worlds,
                &scores,
                &space,
                &self.meta.exploit,
                &mut self.rng,
            )
        } else {
            Vec::new()
        };

        self.t = t;
        log::info!(
            "t={t} best F={:.4} archive={} replaced={} ({:.1}s)",
            scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            self.archive.len(),
            replacements.len(),
            started.elapsed().as_secs_f64()
        );
        Ok(IterationReport {
            t,
            records,
            replacements,
            archive_len: self.archive.len(),
            trajectories,
            descriptors,
        })
    }

    fn update_archive(
        &mut self,
        t: u64,
        descriptors: &[Option<BehaviorDescriptor>],
        novelty: &[f64],
        scores: &[f64],
    ) {
        let mut ds = Vec::new();
        let mut ranks = Vec::new();
        for (i, d) in descriptors.iter().enumerate() {
            if let Some(d) = d {
                ds.push(d.clone());
                ranks.push(match self.meta.archive_ranking {
                    ArchiveRanking::Composite => scores[i],
                    ArchiveRanking::Novelty => novelty[i],
                });
            }
        }
        self.archive.update(t, &ds, &ranks, self.meta.archive_top_m);
    }

    /// Diversity among healthy worlds; unhealthy ones score 0.
    fn diversity(
        &mut self,
        trajectories: &[Trajectory],
        healthy: &[bool],
    ) -> Result<Vec<f64>, RunError> {
        let live: Vec<usize> = (0..trajectories.len()).filter(|&i| healthy[i]).collect();
        let mut out = vec![0.0; trajectories.len()];
        if live.len() < 2 {
            return Ok(out);
        }
        let samples = self.meta.diversity_samples();
        let images: Vec<_> = live
            .par_iter()
            .flat_map_iter(|&i| {
                let frames = &trajectories[i].frames;
                sample_indices(frames.len(), samples)
                    .into_iter()
                    .map(move |s| render_frame(&frames[s]))
            })
            .collect();
        let flat = match self.embedder.embed(&images) {
            Ok(z) => z,
            Err(e) if self.embedder.name() != BuiltinEmbedder.name() => {
                log::warn!(
                    "embedder {} failed ({e}); switching to builtin features",
                    self.embedder.name()
                );
                self.embedder = Box::new(BuiltinEmbedder);
                self.embedder.embed(&images)?
            }
            Err(e) => return Err(e.into()),
        };
        let per_world: Vec<Vec<Vec<f32>>> =
            flat.chunks(samples).map(<[Vec<f32>]>::to_vec).collect();
        for (&i, d) in live.iter().zip(diversity_scores(&per_world)) {
            out[i] = d;
        }
        Ok(out)
    }
}

/// Whole-run results kept in memory.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    pub records: Vec<WorldRecord>,
    pub replacements: Vec<(u64, Replacement)>,
    pub archive_len: Vec<usize>,
}

impl RunArtifacts {
    pub fn push(&mut self, report: &IterationReport) {
        self.records.extend(report.records.iter().cloned());
        self.replacements
            .extend(report.replacements.iter().map(|r| (report.t, *r)));
        self.archive_len.push(report.archive_len);
    }

    /// Per-iteration F values, world order.
    pub fn score_series(&self) -> Vec<Vec<Option<f64>>> {
        let mut out: Vec<Vec<Option<f64>>> = Vec::new();
        for r in &self.records {
            let t = r.t as usize;
            if out.len() < t {
                out.resize(t, Vec::new());
            }
            out[t - 1].push(r.score);
        }
        out
    }
}

fn run_mode(
    mode: RunMode,
    world: WorldConfig,
    mut meta: MetaConfig,
    seed: u64,
    embedder: Box<dyn Embedder>,
) -> Result<RunArtifacts, RunError> {
    meta.mode = mode;
    let mut run = Run::new(world, meta, seed, embedder)?;
    let mut artifacts = RunArtifacts::default();
    while !run.is_done() {
        artifacts.push(&run.step()?);
    }
    Ok(artifacts)
}

pub fn run_pbt(
    world: WorldConfig,
    meta: MetaConfig,
    seed: u64,
    embedder: Box<dyn Embedder>,
) -> Result<RunArtifacts, RunError> {
    run_mode(RunMode::Pbt, world, meta, seed, embedder)
}

pub fn run_random_search(
    world: WorldConfig,
    meta: MetaConfig,
    seed: u64,
    embedder: Box<dyn Embedder>,
) -> Result<RunArtifacts, RunError> {
    run_mode(RunMode::RandomSearch, world, meta, seed, embedder)
}

pub fn run_fixed(
    world: WorldConfig,
    meta: MetaConfig,
    seed: u64,
    embedder: Box<dyn Embedder>,
) -> Result<RunArtifacts, RunError> {
    run_mode(RunMode::Fixed, world, meta, seed, embedder)
}
