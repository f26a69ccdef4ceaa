use std::time::Instant;

use petri_core::substrate::{HyperParams, World, WorldConfig};

fn main() {
    let tau: u32 = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(4);
    let hp = HyperParams {
        steps_per_update: tau,
        ..HyperParams::default()
    };
    let mut w = World::seeded(WorldConfig::default(), hp, 1).unwrap();
    for _ in 0..6 {
        w.train_segment().unwrap();
    }
    let t = Instant::now();
    let mut raw = w.clone();
    for _ in 0..tau {
        raw.step().unwrap();
    }
    println!("raw {tau} steps: {:?}", t.elapsed());
    let t = Instant::now();
    let noise: Vec<_> = (0..tau).map(|_| w.clone().draw_noise()).collect();
    println!("noise: {:?}", t.elapsed());
    let t = Instant::now();
    w.segment_gradients(&noise).unwrap();
    println!("segment with grads: {:?}", t.elapsed());
}
