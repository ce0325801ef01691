//! The noise prediction network: a structured filter branch (Tucker-based
//! by default, with SVD and MLP ablation variants) plus a token-based
//! global contextual residual branch, composed as
//! `out = filter(z) + beta * residual(z + e_text)`.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use forward::{
    apply_factor_scaling, core_mask, factor_gates, gcrm_forward, tbnf_forward, text_embed,
    vnpnet_forward, vnpnet_forward_tape, ForwardNodes,
};
pub use params::{Param, ParamSet, VnpnetParams};

use crate::error::{Error, Result};
use crate::tensor::Dims4;
use crate::tucker::TuckerRanks;

/// Which structured-filter branch to run. All variants share the same
/// forward shape contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVariant {
    Tucker,
    Svd,
    Mlp,
}

impl FilterVariant {
    pub fn name(&self) -> &'static str {
        match self {
            FilterVariant::Tucker => "tucker",
            FilterVariant::Svd => "svd",
            FilterVariant::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tucker" => Ok(FilterVariant::Tucker),
            "svd" => Ok(FilterVariant::Svd),
            "mlp" => Ok(FilterVariant::Mlp),
            other => Err(Error::invalid(format!("unknown filter variant '{other}'"))),
        }
    }
}

/// One residual stage of the contextual branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrmStage {
    pub depth: usize,
    pub dim: usize,
    /// Attention window (t, h, w) in tokens; ignored when `global_attn`.
    pub window: (usize, usize, usize),
    pub global_attn: bool,
}

/// Contextual residual branch configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GcrmConfig {
    /// Cubic patch edge; T, H, W must be divisible by it.
    pub patch: usize,
    pub stages: Vec<GcrmStage>,
    pub head_dim: usize,
    /// Stochastic-depth rate applied per residual branch in train mode.
    pub drop_path: f64,
}

impl GcrmConfig {
    /// Full-scale preset: depths [5, 8, 20, 7], dims [64, 128, 320, 512],
    /// head dim 64, drop path 0.30, local 5x5x5 windows in the first two
    /// stages and global attention afterwards.
    pub fn paper() -> Self {
        GcrmConfig {
            patch: 4,
            stages: vec![
                GcrmStage { depth: 5, dim: 64, window: (5, 5, 5), global_attn: false },
                GcrmStage { depth: 8, dim: 128, window: (5, 5, 5), global_attn: false },
                GcrmStage { depth: 20, dim: 320, window: (8, 8, 4), global_attn: true },
                GcrmStage { depth: 7, dim: 512, window: (8, 8, 4), global_attn: true },
            ],
            head_dim: 64,
            drop_path: 0.30,
        }
    }

    /// Desk-scale preset: one stage, depth 2, dim 32, 2x2x2 windows.
    pub fn tiny() -> Self {
        GcrmConfig {
            patch: 4,
            stages: vec![GcrmStage { depth: 2, dim: 32, window: (2, 2, 2), global_attn: false }],
            head_dim: 16,
            drop_path: 0.0,
        }
    }
}

/// Complete network configuration; fixed at parameter-initialization time
/// and serialized with the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct VnpnetConfig {
    pub dims: Dims4,
    /// Prompt embedding dimension D_p.
    pub embed_dim: usize,
    pub ranks: TuckerRanks,
    pub variant: FilterVariant,
    pub gcrm: GcrmConfig,
    /// Dropout rate on gate / mask hidden features.
    pub p_drop: f64,
    /// Rescale softmax gates by R_i (compensates the 1/R_i energy shrink).
    pub gate_rescale: bool,
    /// Force the core mask to all-ones.
    pub core_mask_bypass: bool,
    /// Hidden width of the MLP ablation variant.
    pub mlp_hidden: usize,
}

impl VnpnetConfig {
    pub fn new(dims: Dims4, ranks: TuckerRanks, gcrm: GcrmConfig) -> Self {
        VnpnetConfig {
            dims,
            embed_dim: 64,
            ranks,
            variant: FilterVariant::Tucker,
            gcrm,
            p_drop: 0.1,
            gate_rescale: false,
            core_mask_bypass: false,
            mlp_hidden: 128,
        }
    }

    /// Token grid of the first stage.
    pub fn token_grid(&self) -> (usize, usize, usize) {
        let p = self.gcrm.patch;
        (self.dims.t / p, self.dims.h / p, self.dims.w / p)
    }

    /// Token count of the first stage: T*H*W / P^3.
    pub fn token_count(&self) -> usize {
        let (gt, gh, gw) = self.token_grid();
        gt * gh * gw
    }

    pub fn validate(&self) -> Result<()> {
        self.ranks.validate_for(self.dims)?;
        let p = self.gcrm.patch;
        if p == 0 {
            return Err(Error::invalid("patch size must be positive"));
        }
        for (axis, len) in [("T", self.dims.t), ("H", self.dims.h), ("W", self.dims.w)] {
            if len % p != 0 {
                return Err(Error::invalid(format!(
                    "axis {axis} of length {len} is not divisible by patch {p}"
                )));
            }
        }
        if self.gcrm.stages.is_empty() {
            return Err(Error::invalid("contextual branch needs at least one stage"));
        }
        for (s, stage) in self.gcrm.stages.iter().enumerate() {
            if stage.dim % self.gcrm.head_dim != 0 {
                return Err(Error::invalid(format!(
                    "stage {s} dim {} not divisible by head dim {}",
                    stage.dim, self.gcrm.head_dim
                )));
            }
            if stage.depth == 0 {
                return Err(Error::invalid(format!("stage {s} has zero depth")));
            }
            if !stage.global_attn
                && (stage.window.0 == 0 || stage.window.1 == 0 || stage.window.2 == 0)
            {
                return Err(Error::invalid(format!("stage {s} has a zero window axis")));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::invalid("p_drop must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.gcrm.drop_path) {
            return Err(Error::invalid("drop_path must lie in [0, 1)"));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::invalid("mlp_hidden must be positive"));
        }
        Ok(())
    }
}

/// Successive token grids over the stages: halve each axis (min 1) between
/// stages.
pub(crate) fn stage_grids(cfg: &VnpnetConfig) -> Vec<(usize, usize, usize)> {
    let mut grids = vec![cfg.token_grid()];
    for _ in 1..cfg.gcrm.stages.len() {
        let (t, h, w) = *grids.last().unwrap();
        let half = |g: usize| if g >= 2 { g.div_ceil(2) } else { 1 };
        grids.push((half(t), half(h), half(w)));
    }
    grids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_formula() {
        // (4,8,16,16) with patch 4: N = 8*16*16 / 64 = 32.
        let cfg = VnpnetConfig::new(
            Dims4::new(4, 8, 16, 16),
            TuckerRanks::new(2, 4, 8, 8),
            GcrmConfig::tiny(),
        );
        assert_eq!(cfg.token_count(), 32);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn divisibility_error_names_axis() {
        let cfg = VnpnetConfig::new(
            Dims4::new(4, 6, 16, 16),
            TuckerRanks::new(2, 4, 8, 8),
            GcrmConfig::tiny(),
        );
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains('T'), "error should name the axis: {err}");
    }

    #[test]
    fn paper_preset_shape() {
        let cfg = GcrmConfig::paper();
        assert_eq!(
            cfg.stages.iter().map(|s| s.depth).collect::<Vec<_>>(),
            vec![5, 8, 20, 7]
        );
        assert_eq!(
            cfg.stages.iter().map(|s| s.dim).collect::<Vec<_>>(),
            vec![64, 128, 320, 512]
        );
        assert_eq!(cfg.head_dim, 64);
        assert!((cfg.drop_path - 0.30).abs() < 1e-12);
    }

    #[test]
    fn grids_halve_with_floor_one() {
        let mut cfg = VnpnetConfig::new(
            Dims4::new(4, 16, 64, 64),
            TuckerRanks::default(),
            GcrmConfig::paper(),
        );
        cfg.embed_dim = 64;
        let grids = stage_grids(&cfg);
        assert_eq!(grids, vec![(4, 16, 16), (2, 8, 8), (1, 4, 4), (1, 2, 2)]);
    }
}
