use std::time::Instant;
use vnp_core::pndata::embed_prompt;
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};
use vnp_core::tucker::TuckerRanks;
use vnp_core::vnpnet::{tbnf_forward, vnpnet_forward, gcrm_forward, GcrmConfig, VnpnetConfig, VnpnetParams};

fn main() {
    type T = f32;
    let dims = Dims4::new(4, 16, 64, 64);
    let cfg = VnpnetConfig::new(dims, TuckerRanks::new(4, 8, 32, 32), GcrmConfig::tiny());
    let params = VnpnetParams::<T>::init(cfg, 91).unwrap();
    let prompt = embed_prompt::<T>("timing comparison", 64).unwrap();
    let z = sample_gaussian::<T>(dims, RngSeed(1)).unwrap();
    for _ in 0..2 { std::hint::black_box(vnpnet_forward(&z, &prompt, &params, false, 0).unwrap()); }
    let reps = 7;
    let mut t_tbnf = f64::INFINITY; let mut t_gcrm = f64::INFINITY; let mut t_full = f64::INFINITY;
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(tbnf_forward(&z, &prompt, &params, false, 0).unwrap());
        t_tbnf = t_tbnf.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(gcrm_forward(&z, &params, false, 0).unwrap());
        t_gcrm = t_gcrm.min(t.elapsed().as_secs_f64());
        let t = Instant::now();
        std::hint::black_box(vnpnet_forward(&z, &prompt, &params, false, 0).unwrap());
        t_full = t_full.min(t.elapsed().as_secs_f64());
    }
    println!("tbnf {t_tbnf:.4} gcrm {t_gcrm:.4} full {t_full:.4} (sum {:.4})", t_tbnf + t_gcrm);
}
