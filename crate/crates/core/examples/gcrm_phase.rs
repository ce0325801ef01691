//! Phase timing of a replicated contextual-branch op sequence.
use std::sync::Arc;
use std::time::Instant;
use vnp_core::pndata::embed_prompt;
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};
use vnp_core::tucker::TuckerRanks;
use vnp_core::vnpnet::{gcrm_forward, GcrmConfig, VnpnetConfig, VnpnetParams};

fn main() {
    type T = f32;
    let dims = Dims4::new(4, 16, 64, 64);
    let cfg = VnpnetConfig::new(dims, TuckerRanks::new(4, 8, 32, 32), GcrmConfig::tiny());
    let params = VnpnetParams::<T>::init(cfg, 91).unwrap();
    let z = sample_gaussian::<T>(dims, RngSeed(1)).unwrap();
    let _p = embed_prompt::<T>("x", 64).unwrap();
    // Index map construction cost.
    let t = Instant::now();
    for _ in 0..5 {
        let mut idx = Vec::with_capacity(dims.count());
        let p = 4usize;
        let (gt, gh, gw) = (4usize, 16usize, 16usize);
        for it in 0..gt { for ih in 0..gh { for iw in 0..gw {
            for c in 0..4 { for pt in 0..p { for ph in 0..p { for pw in 0..p {
                let tt = it * p + pt; let hh = ih * p + ph; let ww = iw * p + pw;
                idx.push(((c * 16 + tt) * 64 + hh) * 64 + ww);
            }}}}
        }}}
        std::hint::black_box(&idx);
        let mut inv = vec![0usize; dims.count()];
        for (i, &s) in idx.iter().enumerate() { inv[s] = i; }
        std::hint::black_box(&inv);
    }
    println!("both maps build: {:.3}ms", t.elapsed().as_secs_f64() / 5.0 * 1e3);
    let mut idx2 = Vec::with_capacity(dims.count());
    {
        let p = 4usize;
        for it in 0..4 { for ih in 0..16 { for iw in 0..16 {
            for c in 0..4 { for pt in 0..p { for ph in 0..p { for pw in 0..p {
                let tt = it * p + pt; let hh = ih * p + ph; let ww = iw * p + pw;
                idx2.push(((c * 16 + tt) * 64 + hh) * 64 + ww);
            }}}}
        }}}
    }
    let idx2 = Arc::new(idx2);
    let t = Instant::now();
    for _ in 0..5 {
        let mut tape = vnp_core::tape::Tape::<T>::new(false, 0);
        let a = tape.constant(z.data().to_vec());
        std::hint::black_box(tape.gather_elems(a, idx2.clone()).unwrap());
    }
    println!("real patchify gather: {:.3}ms", t.elapsed().as_secs_f64() / 5.0 * 1e3);
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        std::hint::black_box(gcrm_forward(&z, &params, false, 0).unwrap());
        best = best.min(t.elapsed().as_secs_f64());
    }
    println!("gcrm_forward: {:.3}ms", best * 1e3);
}
