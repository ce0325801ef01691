use std::sync::Arc;
use std::time::Instant;
use vnp_core::tape::Tape;
use vnp_core::tensor::{sample_gaussian, Dims4, RngSeed};

fn bench<F: FnMut()>(label: &str, mut f: F) {
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    println!("{label}: {:.3}ms", best * 1e3);
}

fn main() {
    type T = f32;
    let n = 1024usize;
    let d = 32usize;
    let latent = 262_144usize;
    let rnd = |len: usize, seed: u64| -> Vec<T> {
        sample_gaussian::<T>(Dims4::new(1, 1, 1, len), RngSeed(seed)).unwrap().into_data()
    };
    let z = rnd(latent, 1);
    let patch_w = rnd(32 * 256, 2);
    let head_w = rnd(256 * 32, 3);
    let qkv_w = rnd(d * d, 4);
    let ffn1 = rnd(128 * d, 5);
    let ffn2 = rnd(d * 128, 6);
    let bias32 = rnd(d, 7);
    let idx: Arc<Vec<usize>> = Arc::new((0..latent).map(|i| (i * 7919) % latent).collect());
    let perm: Arc<Vec<usize>> = Arc::new((0..n).map(|i| (i * 31) % n).collect());
    let tok = rnd(n * d, 8);
    let hid = rnd(n * 128, 9);

    bench("gather_elems 262k", || {
        let mut t = Tape::new(false, 0);
        let a = t.constant(z.clone());
        std::hint::black_box(t.gather_elems(a, idx.clone()).unwrap());
    });
    bench("const leaf 262k (copy)", || {
        let mut t = Tape::new(false, 0);
        std::hint::black_box(t.constant(z.clone()));
    });
    bench("patch linear 1024x256->32", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(z.clone());
        let w = t.constant(patch_w.clone());
        let b = t.constant(bias32.clone());
        std::hint::black_box(t.linear(x, w, Some(b), n, 256, 32).unwrap());
    });
    bench("head linear 1024x32->256", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(tok.clone());
        let w = t.constant(head_w.clone());
        std::hint::black_box(t.linear(x, w, None, n, 32, 256).unwrap());
    });
    bench("qkv linear 1024x32->32 (x3)", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(tok.clone());
        let w = t.constant(qkv_w.clone());
        for _ in 0..3 {
            std::hint::black_box(t.linear(x, w, None, n, d, d).unwrap());
        }
    });
    bench("ffn w1 1024x32->128", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(tok.clone());
        let w = t.constant(ffn1.clone());
        std::hint::black_box(t.linear(x, w, None, n, d, 128).unwrap());
    });
    bench("ffn w2 1024x128->32", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(hid.clone());
        let w = t.constant(ffn2.clone());
        std::hint::black_box(t.linear(x, w, None, n, 128, d).unwrap());
    });
    bench("gelu 1024x128", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(hid.clone());
        std::hint::black_box(t.gelu(x).unwrap());
    });
    bench("layer_norm 1024x32", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(tok.clone());
        let g = t.constant(vec![1.0; d]);
        let b = t.constant(vec![0.0; d]);
        std::hint::black_box(t.layer_norm(x, g, b, d).unwrap());
    });
    bench("gather_rows 1024x32", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(tok.clone());
        std::hint::black_box(t.gather_rows(x, perm.clone(), d).unwrap());
    });
    bench("mhsa 512 groups of 8, 2 heads", || {
        let mut t = Tape::new(false, 0);
        let q = t.constant(tok.clone());
        let k = t.constant(tok.clone());
        let v = t.constant(tok.clone());
        let groups = Arc::new(vec![8usize; 128]);
        std::hint::black_box(t.mhsa(q, k, v, 2, 16, groups).unwrap());
    });
    bench("dwconv 4x16x16 grid dim32", || {
        let mut t = Tape::new(false, 0);
        let x = t.constant(tok.clone());
        let w = t.constant(rnd(d * 27, 10));
        let b = t.constant(bias32.clone());
        std::hint::black_box(t.dw_conv3d(x, w, b, (4, 16, 16), d).unwrap());
    });
}
