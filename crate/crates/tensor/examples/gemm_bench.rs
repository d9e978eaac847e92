use mctseg_tensor::Scalar;
use std::time::Instant;
fn main() {
    let (m, k, n): (usize, usize, usize) = std::env::args()
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect::<Vec<_>>()
        .try_into()
        .map(|v: [usize; 3]| (v[0], v[1], v[2]))
        .unwrap();
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    f32::gemm(
        m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1,
    );
    println!("gemm {:?}", t.elapsed());
    let t = Instant::now();
    let v = vec![0.0f32; k * n];
    println!("alloc {:?} {}", t.elapsed(), v[5]);
}
