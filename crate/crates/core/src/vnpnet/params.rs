//! Learnable parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{stage_grids, FilterVariant, VnpnetConfig};

/// One named parameter blob. The payload is reference-counted so forward
/// passes can leaf it onto a tape without copying; mutation goes through
/// [`Param::data_mut`], which is in-place whenever no tape holds the blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param { shape, data: Arc::new(vec![T::zero(); n]) }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    pub fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered name -> blob map; ordering makes serialization and gradient
/// reduction deterministic.
pub type ParamSet<T> = BTreeMap<String, Param<T>>;

/// All learnable parameters plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct VnpnetParams<T> {
    pub cfg: VnpnetConfig,
    pub set: ParamSet<T>,
}

impl<T: Scalar> VnpnetParams<T> {
    /// Seeded initialization: Glorot-style uniform weights
    /// (+-sqrt(3/fan_in)), zero biases, unit norm gains, small-uniform
    /// positional codes, beta = 0.1.
    pub fn init(cfg: VnpnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();

        // Glorot-style uniform bounds, +-sqrt(3 / fan_in).
        fn uniform<T: Scalar>(
            rng: &mut ChaCha8Rng,
            set: &mut ParamSet<T>,
            name: &str,
            rows: usize,
            cols: usize,
        ) {
            let s = (3.0 / cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::of(rng.gen_range(-s..s)))
                .collect();
            set.insert(name.to_string(), Param::new(vec![rows, cols], data));
        }

        let dims = cfg.dims;
        let ranks = cfg.ranks.as_array();
        match cfg.variant {
            FilterVariant::Tucker => {
                for (m, r) in ["c", "t", "h", "w"].iter().zip(ranks) {
                    uniform(&mut rng, &mut set, &format!("gate.{m}.w1"), 16, r);
                    set.insert(format!("gate.{m}.b1"), Param::zeros(vec![16]));
                    uniform(&mut rng, &mut set, &format!("gate.{m}.w2"), r, 16);
                    set.insert(format!("gate.{m}.b2"), Param::zeros(vec![r]));
                }
                for (m, r) in ["c", "t", "h", "w"].iter().zip(ranks) {
                    uniform(&mut rng, &mut set, &format!("mask.phi.{m}.w"), 16, r);
                    set.insert(format!("mask.phi.{m}.b"), Param::zeros(vec![16]));
                }
                let fuse_in = 4 * 16 + cfg.embed_dim;
                let core = cfg.ranks.product();
                uniform(&mut rng, &mut set, "mask.fuse.w1", 128, fuse_in);
                set.insert("mask.fuse.b1".into(), Param::zeros(vec![128]));
                uniform(&mut rng, &mut set, "mask.fuse.w2", core, 128);
                set.insert("mask.fuse.b2".into(), Param::zeros(vec![core]));
            }
            FilterVariant::Svd => {
                let r = cfg.ranks.t;
                uniform(&mut rng, &mut set, "svdgate.w1", 16, r);
                set.insert("svdgate.b1".into(), Param::zeros(vec![16]));
                uniform(&mut rng, &mut set, "svdgate.w2", r, 16);
                set.insert("svdgate.b2".into(), Param::zeros(vec![r]));
            }
            FilterVariant::Mlp => {
                let d = dims.c * dims.h * dims.w;
                uniform(&mut rng, &mut set, "mlp.w1", cfg.mlp_hidden, d);
                set.insert("mlp.b1".into(), Param::zeros(vec![cfg.mlp_hidden]));
                uniform(&mut rng, &mut set, "mlp.w2", d, cfg.mlp_hidden);
                set.insert("mlp.b2".into(), Param::zeros(vec![d]));
            }
        }

        uniform(&mut rng, &mut set, "text.w", dims.c, cfg.embed_dim);
        set.insert("beta".into(), Param::new(vec![1], vec![T::of(0.1)]));

        // Contextual branch.
        let patch_feat = dims.c * cfg.gcrm.patch.pow(3);
        let dim1 = cfg.gcrm.stages[0].dim;
        uniform(&mut rng, &mut set, "gcrm.patch.w", dim1, patch_feat);
        set.insert("gcrm.patch.b".into(), Param::zeros(vec![dim1]));
        let n1 = cfg.token_count();
        let pos: Vec<T> = (0..n1 * dim1)
            .map(|_| T::of(rng.gen_range(-0.02..0.02)))
            .collect();
        set.insert("gcrm.pos".into(), Param::new(vec![n1, dim1], pos));

        for (s, stage) in cfg.gcrm.stages.iter().enumerate() {
            let d = stage.dim;
            for b in 0..stage.depth {
                let p = format!("gcrm.s{s}.b{b}");
                uniform(&mut rng, &mut set, &format!("{p}.dpe.w"), d, 27);
                set.insert(format!("{p}.dpe.b"), Param::zeros(vec![d]));
                set.insert(format!("{p}.norm1.g"), Param::new(vec![d], vec![T::one(); d]));
                set.insert(format!("{p}.norm1.b"), Param::zeros(vec![d]));
                for proj in ["wq", "wk", "wv", "wo"] {
                    uniform(&mut rng, &mut set, &format!("{p}.attn.{proj}"), d, d);
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    set.insert(format!("{p}.attn.{bias}"), Param::zeros(vec![d]));
                }
                set.insert(format!("{p}.norm2.g"), Param::new(vec![d], vec![T::one(); d]));
                set.insert(format!("{p}.norm2.b"), Param::zeros(vec![d]));
                uniform(&mut rng, &mut set, &format!("{p}.ffn.w1"), 4 * d, d);
                set.insert(format!("{p}.ffn.b1"), Param::zeros(vec![4 * d]));
                uniform(&mut rng, &mut set, &format!("{p}.ffn.w2"), d, 4 * d);
                set.insert(format!("{p}.ffn.b2"), Param::zeros(vec![d]));
            }
        }

        // Stage transitions: gather 2x2x2 (clamped) neighborhoods, lift dim.
        let grids = stage_grids(&cfg);
        for s in 0..cfg.gcrm.stages.len() - 1 {
            let k = merge_arity(grids[s]);
            let din = k * cfg.gcrm.stages[s].dim;
            let dout = cfg.gcrm.stages[s + 1].dim;
            uniform(&mut rng, &mut set, &format!("gcrm.down{s}.w"), dout, din);
            set.insert(format!("gcrm.down{s}.b"), Param::zeros(vec![dout]));
        }
        if cfg.gcrm.stages.len() > 1 {
            let dim_last = cfg.gcrm.stages.last().unwrap().dim;
            uniform(&mut rng, &mut set, "gcrm.up.w", dim1, dim_last);
            set.insert("gcrm.up.b".into(), Param::zeros(vec![dim1]));
        }
        uniform(&mut rng, &mut set, "gcrm.head.w", patch_feat, dim1);
        set.insert("gcrm.head.b".into(), Param::zeros(vec![patch_feat]));

        Ok(VnpnetParams { cfg, set })
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.set
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.set.values().map(|p| p.len()).sum()
    }

    /// Set every parameter to zero (test utility for structural identities).
    pub fn zero_all(&mut self) {
        for p in self.set.values_mut() {
            for v in p.data_mut().iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// Zero only parameters whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.set.iter_mut() {
            if name.starts_with(prefix) {
                for v in p.data_mut().iter_mut() {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn beta(&self) -> T {
        self.set
            .get("beta")
            .map(|p| p.data()[0])
            .unwrap_or_else(T::zero)
    }
}

/// Number of source tokens merged per output token when downsampling from
/// `grid` (2 per axis of length >= 2, else 1).
pub(crate) fn merge_arity(grid: (usize, usize, usize)) -> usize {
    let f = |g: usize| if g >= 2 { 2 } else { 1 };
    f(grid.0) * f(grid.1) * f(grid.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims4;
    use crate::tucker::TuckerRanks;
    use crate::vnpnet::GcrmConfig;

    fn tiny_cfg() -> VnpnetConfig {
        VnpnetConfig::new(
            Dims4::new(4, 8, 16, 16),
            TuckerRanks::new(2, 4, 8, 8),
            GcrmConfig::tiny(),
        )
    }

    #[test]
    fn init_deterministic() {
        let a = VnpnetParams::<f64>::init(tiny_cfg(), 3).unwrap();
        let b = VnpnetParams::<f64>::init(tiny_cfg(), 3).unwrap();
        assert_eq!(a.set, b.set);
        let c = VnpnetParams::<f64>::init(tiny_cfg(), 4).unwrap();
        assert_ne!(a.set, c.set);
    }

    #[test]
    fn beta_initialized_to_tenth() {
        let p = VnpnetParams::<f64>::init(tiny_cfg(), 0).unwrap();
        assert_eq!(p.beta(), 0.1);
        assert!(p.parameter_count() > 0);
    }

    #[test]
    fn variants_have_their_own_filters() {
        let mut cfg = tiny_cfg();
        cfg.variant = FilterVariant::Svd;
        let svd = VnpnetParams::<f64>::init(cfg.clone(), 0).unwrap();
        assert!(svd.set.contains_key("svdgate.w1"));
        assert!(!svd.set.contains_key("gate.c.w1"));
        assert!(!svd.set.contains_key("mlp.w1"));

        cfg.variant = FilterVariant::Mlp;
        let mlp = VnpnetParams::<f64>::init(cfg, 0).unwrap();
        assert!(mlp.set.contains_key("mlp.w1"));
        assert_eq!(mlp.get("mlp.w1").unwrap().shape, vec![128, 4 * 16 * 16]);
    }
}
