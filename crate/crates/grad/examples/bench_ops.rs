use std::sync::Arc;
use std::time::Instant;

use petri_grad::{GridDims, Tape, Tensor};

fn main() {
    let grid = GridDims::new(8, 32, 32);
    let m = grid.cells();
    let cells: Arc<[u32]> = (0..m as u32).collect::<Vec<_>>().into();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_fn([m, 16], |i| {
        ((i * 7919) % 1000) as f32 / 1000.0 - 0.5
    }));
    let w1 = tape.leaf(Tensor::from_fn([144, 64], |i| {
        ((i * 31) % 100) as f32 / 1000.0 - 0.05
    }));
    let b1 = tape.leaf(Tensor::zeros([64]));
    let w2 = tape.leaf(Tensor::from_fn([64, 16], |i| {
        ((i * 17) % 100) as f32 / 1000.0 - 0.05
    }));
    let t = Instant::now();
    let h = tape
        .neighbor_linear(grid, cells.clone(), x, w1, b1)
        .unwrap();
    println!("neighbor_linear {:?}", t.elapsed());
    let t = Instant::now();
    let a = tape.tanh(h).unwrap();
    println!("tanh {:?}", t.elapsed());
    let t = Instant::now();
    let o = tape.matmul(a, w2).unwrap();
    println!("matmul {:?}", t.elapsed());
    let t = Instant::now();
    let s = tape.scatter_rows(o, cells, m).unwrap();
    println!("scatter {:?}", t.elapsed());
    let sa = tape.slice_cols(s, 0, 4).unwrap();
    let sd = tape.slice_cols(s, 4, 4).unwrap();
    let t = Instant::now();
    let c = tape.cosine(sa, sd, 1e-8).unwrap();
    println!("cosine {:?}", t.elapsed());
    let l = tape.sum(c).unwrap();
    let t = Instant::now();
    tape.backward(l).unwrap();
    println!("backward {:?}", t.elapsed());
}
