//! Wall-clock breakdown of the forward pass vs the refinement loop.
use std::time::Instant;
use vnp_core::oracle::{refine_iterative, RefineConfig, SyntheticDenoiser};
use vnp_core::pndata::embed_prompt;
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};
use vnp_core::tucker::{hosvd, reconstruct, TuckerRanks};
use vnp_core::vnpnet::{gcrm_forward, tbnf_forward, vnpnet_forward, GcrmConfig, VnpnetConfig, VnpnetParams};

fn time<F: FnMut()>(label: &str, mut f: F) {
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    println!("{label}: {best:.4}s");
}

fn run<T: vnp_core::Scalar>(name: &str)
where
    rand_distr::StandardNormal: rand_distr::Distribution<T>,
{
    println!("--- {name} ---");
    let dims = Dims4::new(4, 16, 64, 64);
    let cfg = VnpnetConfig::new(dims, TuckerRanks::new(4, 8, 32, 32), GcrmConfig::tiny());
    let params = VnpnetParams::<T>::init(cfg, 91).unwrap();
    let prompt = embed_prompt::<T>("timing comparison", 64).unwrap();
    let z = sample_gaussian::<T>(dims, RngSeed(1)).unwrap();
    time("hosvd", || {
        std::hint::black_box(hosvd(&z, TuckerRanks::new(4, 8, 32, 32)).unwrap());
    });
    let f = hosvd(&z, TuckerRanks::new(4, 8, 32, 32)).unwrap();
    time("reconstruct", || {
        std::hint::black_box(reconstruct(&f).unwrap());
    });
    time("tbnf_forward", || {
        std::hint::black_box(tbnf_forward(&z, &prompt, &params, false, 0).unwrap());
    });
    time("gcrm_forward", || {
        std::hint::black_box(gcrm_forward(&z, &params, false, 0).unwrap());
    });
    time("vnpnet_forward", || {
        std::hint::black_box(vnpnet_forward(&z, &prompt, &params, false, 0).unwrap());
    });
    let denoiser = SyntheticDenoiser::<T>::new(0.8, 1.5);
    let rcfg = RefineConfig { iterations: 5, seed: 2, ..RefineConfig::default() };
    time("refine K=5", || {
        std::hint::black_box(refine_iterative(&z, &prompt, &rcfg, &denoiser).unwrap());
    });
}

fn main() {
    run::<f64>("f64");
    run::<f32>("f32");
}
