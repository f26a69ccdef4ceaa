use std::time::Instant;

use petri_core::diversity::BuiltinEmbedder;
use petri_core::metaevo::{MetaConfig, Run};
use petri_core::substrate::WorldConfig;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(0);
    let meta = MetaConfig {
        population: 4,
        iterations: 20,
        world_segments: 4,
        ..MetaConfig::default()
    };
    let mut run = Run::new(
        WorldConfig::default(),
        meta,
        seed,
        Box::new(BuiltinEmbedder),
    )
    .unwrap();
    let start = Instant::now();
    while !run.is_done() {
        let t = Instant::now();
        let r = run.step().unwrap();
        let hp: Vec<String> = r
            .records
            .iter()
            .map(|w| format!("b{}tau{}", w.hparams.batch_size, w.hparams.steps_per_update))
            .collect();
        let unhealthy = r.records.iter().filter(|w| !w.healthy).count();
        println!(
            "t={} {:.1}s archive={} unhealthy={} {:?} F={:?}",
            r.t,
            t.elapsed().as_secs_f64(),
            r.archive_len,
            unhealthy,
            hp,
            r.records.iter().map(|w| w.score).collect::<Vec<_>>()
        );
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
}
