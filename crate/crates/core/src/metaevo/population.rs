use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::space::{mutate_value, replacement_count, HyperSpace};
use crate::novelty::rank_cmp;
use crate::substrate::World;

/// Knobs of one exploit/explore round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploitConfig {
    pub rho: f64,
    pub p_cross: f64,
    pub p_pert: f64,
    pub sigma_w: f64,
}

impl Default for ExploitConfig {
    fn default() -> Self {
        Self {
            rho: 0.25,
            p_cross: 0.5,
            p_pert: 0.1,
            sigma_w: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub child: usize,
    pub parent: usize,
}

/// World indices best first; ties go to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_cmp(scores[b], scores[a]).then(a.cmp(&b)));
    order
}

/// Worlds to overwrite: the `round(rho * P)` lowest ranked plus every
/// unhealthy world, in ascending index order.
pub fn replacement_set(scores: &[f64], healthy: &[bool], rho: f64) -> Vec<usize> {
    let order = ranking(scores);
    let n = replacement_count(rho, scores.len()).min(scores.len());
    let mut out: Vec<usize> = order[order.len() - n..].to_vec();
    out.extend((0..scores.len()).filter(|&i| !healthy[i]));
    out.sort_unstable();
    out.dedup();
    out
}

/// Replace the weakest worlds by mutated copies of elite ones. Elite worlds
/// are never modified. Returns what was replaced by what, in child order.
pub fn exploit_explore(
    worlds: &mut [World],
    scores: &[f64],
    space: &HyperSpace,
    config: &ExploitConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Replacement> {
    assert_eq!(worlds.len(), scores.len(), "one score per world");
    let healthy: Vec<bool> = worlds.iter().map(World::is_healthy).collect();
    let children = replacement_set(scores, &healthy, config.rho);
    let n_elite = replacement_count(config.rho, worlds.len()).max(1);
    let elite: Vec<usize> = ranking(scores)
        .into_iter()
        .filter(|i| healthy[*i] && !children.contains(i))
        .take(n_elite)
        .collect();
    if children.is_empty() {
        log::info!("exploit/explore: nothing to replace");
        return Vec::new();
    }
    if elite.is_empty() {
        log::warn!("exploit/explore: no healthy elite world to copy from");
        return Vec::new();
    }

    let mut done = Vec::with_capacity(children.len());
    for &child in &children {
        let parent = elite[rng.gen_range(0..elite.len())];
        let before = *worlds[child].hparams();
        let mut copy = worlds[parent].clone();
        let mut hp = *copy.hparams();
        for spec in &space.specs {
            if !rng.gen_bool(config.p_cross) {
                spec.name.set(&mut hp, spec.name.get(&before));
            }
        }
        for spec in &space.specs {
            let v = mutate_value(spec.name.get(&hp), spec, rng, config.p_pert);
            spec.name.set(&mut hp, v);
        }
        copy.set_hparams(hp);
        let noise_seed: u64 = rng.gen();
        if config.sigma_w > 0.0 {
            perturb_weights(&mut copy, config.sigma_w, noise_seed);
        }
        worlds[child] = copy;
        done.push(Replacement { child, parent });
    }
    done
}

/// Add N(0, sigma^2) to every network parameter.
pub fn perturb_weights(world: &mut World, sigma: f64, seed: u64) {
    let normal = Normal::new(0.0f32, sigma as f32).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for net in world.nets_mut() {
        for t in net.tensors_mut() {
            for v in t.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
}
