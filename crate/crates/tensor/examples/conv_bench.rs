use std::time::Instant;

use mctseg_tensor::{Tape, Tensor};

fn main() {
    for &(cin, cout, n, stride) in &[
        (16usize, 8usize, 32usize, 1usize),
        (1, 8, 32, 1),
        (8, 16, 32, 2),
        (128, 64, 4, 1),
    ] {
        let x = Tensor::<f32>::full(&[cin, n, n, n], 0.5);
        let w = Tensor::<f32>::full(&[cout, cin, 3, 3, 3], 0.01);
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let wv = tape.param(w);
        let y = tape.conv3d(xv, wv, None, stride, 1).unwrap();
        let t1 = Instant::now();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let t2 = Instant::now();
        println!(
            "cin {cin} cout {cout} n {n} s {stride}: fwd {:?} bwd {:?}",
            t1 - t0,
            t2 - t1
        );
    }
}
