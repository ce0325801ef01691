use std::time::Instant;
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};
use vnp_core::tucker::TuckerRanks;

fn main() {
    let dims = Dims4::new(4, 16, 64, 64);
    let z = sample_gaussian::<f64>(dims, RngSeed(1)).unwrap();
    for mode in 1..=4 {
        let t = Instant::now();
        for _ in 0..5 {
            std::hint::black_box(vnp_core::tucker::mode_gram_public(&z, mode));
        }
        println!("gram mode {mode}: {:.4}s", t.elapsed().as_secs_f64() / 5.0);
    }
    let g3 = vnp_core::tucker::mode_gram_public(&z, 3);
    let t = Instant::now();
    for _ in 0..5 {
        std::hint::black_box(vnp_core::linalg::sym_eigen_desc(&g3).unwrap());
    }
    println!("eigen 64x64: {:.4}s", t.elapsed().as_secs_f64() / 5.0);
    let t = Instant::now();
    for _ in 0..5 {
        std::hint::black_box(vnp_core::tucker::hosvd(&z, TuckerRanks::new(4, 8, 32, 32)).unwrap());
    }
    println!("hosvd total: {:.4}s", t.elapsed().as_secs_f64() / 5.0);
}
