use std::time::Instant;
use vnp_core::linalg::sym_eigen_desc;
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};

fn bench<F: FnMut()>(label: &str, reps: usize, mut f: F) {
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        best = best.min(t.elapsed().as_secs_f64() / reps as f64);
    }
    println!("{label}: {:.3}ms", best * 1e3);
}

fn main() {
    type T = f32;
    let dims = Dims4::new(4, 16, 64, 64);
    let z = sample_gaussian::<T>(dims, RngSeed(1)).unwrap();
    for mode in 1..=4 {
        bench(&format!("gram mode {mode}"), 3, || {
            std::hint::black_box(vnp_core::tucker::mode_gram_public(&z, mode));
        });
    }
    let g3 = vnp_core::tucker::mode_gram_public(&z, 3);
    let g4 = vnp_core::tucker::mode_gram_public(&z, 4);
    bench("eigen 64 (mode3 gram)", 3, || {
        std::hint::black_box(sym_eigen_desc(&g3).unwrap());
    });
    bench("eigen 64 (mode4 gram)", 3, || {
        std::hint::black_box(sym_eigen_desc(&g4).unwrap());
    });
    // tanh vs exp cost on the FFN-hidden volume
    let v: Vec<T> = (0..262_144).map(|i| (i as T) * 1e-5 - 1.3).collect();
    bench("tanh 262k", 2, || {
        std::hint::black_box(v.iter().map(|x| x.tanh()).sum::<T>());
    });
    bench("exp 262k", 2, || {
        std::hint::black_box(v.iter().map(|x| x.exp()).sum::<T>());
    });
    // index map construction
    bench("latent-size usize map", 3, || {
        let mut idx = Vec::with_capacity(262_144);
        for i in 0..262_144usize {
            idx.push((i * 7919) % 262_144);
        }
        std::hint::black_box(idx);
    });
}
