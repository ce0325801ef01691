//! Tape-based forward pass shared by training and inference.
//!
//! The whole network is recorded on a [`Tape`] even in eval mode, so the
//! training path and the public forward compute identical arithmetic. The
//! structured-filter branch reweights a per-sample decomposition of the
//! input (treated as constant: no gradient flows through the factorization
//! itself), and the contextual branch runs token blocks over the
//! text-fused latent.
//!
//! The Tucker filter is computed in scaled-core form: scaling factor
//! columns by gates and reconstructing equals scaling the core by the outer
//! product of the gates and reconstructing with the raw orthonormal factors
//! (multilinearity), which keeps the gradient path on the tape primitives.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;
use crate::pndata::PromptEmbedding;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{unfold, Dims4, LatentTensor, Matrix};
use crate::tucker::{hosvd, TuckerFactorization};

use super::{stage_grids, FilterVariant, VnpnetParams};

/// Branch handles of one recorded forward pass.
pub struct ForwardNodes {
    /// Structured filter output (latent-shaped).
    pub tbnf: ValueId,
    /// Contextual residual output (latent-shaped, before beta).
    pub residual: ValueId,
    /// The scalar beta leaf.
    pub beta: ValueId,
    /// `tbnf + beta * residual`.
    pub output: ValueId,
}

fn leaf<T: Scalar>(tape: &mut Tape<T>, params: &VnpnetParams<T>, name: &str) -> Result<ValueId> {
    Ok(tape.param_shared(name, params.get(name)?.data_arc()))
}

/// Two-layer perceptron with tanh, hidden dropout, and a softmax head.
fn gate_head<T: Scalar>(
    tape: &mut Tape<T>,
    params: &VnpnetParams<T>,
    prefix: &str,
    features: &[T],
    rank: usize,
) -> Result<ValueId> {
    let feat = tape.constant(features.to_vec());
    let w1 = leaf(tape, params, &format!("{prefix}.w1"))?;
    let b1 = leaf(tape, params, &format!("{prefix}.b1"))?;
    let hidden = tape.linear(feat, w1, Some(b1), 1, rank, 16)?;
    let hidden = tape.tanh(hidden)?;
    let hidden = tape.dropout(hidden, params.cfg.p_drop)?;
    let w2 = leaf(tape, params, &format!("{prefix}.w2"))?;
    let b2 = leaf(tape, params, &format!("{prefix}.b2"))?;
    let logits = tape.linear(hidden, w2, Some(b2), 1, 16, rank)?;
    let mut gates = tape.softmax(logits, rank)?;
    if params.cfg.gate_rescale {
        gates = tape.scale(gates, T::of_usize(rank))?;
    }
    Ok(gates)
}

/// Column norms of each factor, the gate and mask input statistics.
fn factor_norms<T: Scalar>(f: &TuckerFactorization<T>) -> [Vec<T>; 4] {
    [
        f.factors[0].column_norms(),
        f.factors[1].column_norms(),
        f.factors[2].column_norms(),
        f.factors[3].column_norms(),
    ]
}

const MODE_LETTERS: [&str; 4] = ["c", "t", "h", "w"];

/// Softmax gate vectors for all four modes.
fn build_gates<T: Scalar>(
    tape: &mut Tape<T>,
    params: &VnpnetParams<T>,
    norms: &[Vec<T>; 4],
) -> Result<[ValueId; 4]> {
    let ranks = params.cfg.ranks.as_array();
    let mut out = Vec::with_capacity(4);
    for m in 0..4 {
        out.push(gate_head(
            tape,
            params,
            &format!("gate.{}", MODE_LETTERS[m]),
            &norms[m],
            ranks[m],
        )?);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Core mask: per-mode linear features, prompt fusion, sigmoid squash.
fn build_core_mask<T: Scalar>(
    tape: &mut Tape<T>,
    params: &VnpnetParams<T>,
    norms: &[Vec<T>; 4],
    p_embed: &PromptEmbedding<T>,
) -> Result<ValueId> {
    let ranks = params.cfg.ranks.as_array();
    let mut parts = Vec::with_capacity(5);
    for m in 0..4 {
        let feat = tape.constant(norms[m].clone());
        let w = leaf(tape, params, &format!("mask.phi.{}.w", MODE_LETTERS[m]))?;
        let b = leaf(tape, params, &format!("mask.phi.{}.b", MODE_LETTERS[m]))?;
        parts.push(tape.linear(feat, w, Some(b), 1, ranks[m], 16)?);
    }
    parts.push(tape.constant(p_embed.values.clone()));
    let cat = tape.concat(&parts)?;
    let fuse_in = 4 * 16 + params.cfg.embed_dim;
    let w1 = leaf(tape, params, "mask.fuse.w1")?;
    let b1 = leaf(tape, params, "mask.fuse.b1")?;
    let hidden = tape.linear(cat, w1, Some(b1), 1, fuse_in, 128)?;
    let hidden = tape.tanh(hidden)?;
    let hidden = tape.dropout(hidden, params.cfg.p_drop)?;
    let core = params.cfg.ranks.product();
    let w2 = leaf(tape, params, "mask.fuse.w2")?;
    let b2 = leaf(tape, params, "mask.fuse.b2")?;
    let logits = tape.linear(hidden, w2, Some(b2), 1, 128, core)?;
    tape.sigmoid(logits)
}

fn build_tbnf_tucker<T: Scalar>(
    tape: &mut Tape<T>,
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
) -> Result<ValueId> {
    let cfg = &params.cfg;
    let f = hosvd(z, cfg.ranks)?;
    let norms = factor_norms(&f);
    let gates = build_gates(tape, params, &norms)?;
    let core_dims = cfg.ranks.core_dims();
    let mut core = tape.constant(f.core.data().to_vec());
    for (m, g) in gates.iter().enumerate() {
        core = tape.scale_mode(core, *g, m + 1, core_dims)?;
    }
    let gamma = if cfg.core_mask_bypass {
        tape.constant(vec![T::one(); cfg.ranks.product()])
    } else {
        build_core_mask(tape, params, &norms, p_embed)?
    };
    let mut out = tape.mul(core, gamma)?;
    let mut dims = core_dims;
    for (m, factor) in f.factors.iter().enumerate() {
        out = tape.mode_product_const(out, Arc::new(factor.clone()), m + 1, dims)?;
        dims = dims.with_dim(m + 1, factor.rows());
    }
    Ok(out)
}

/// Top singular triplets of the mode-2 (time) unfolding via its Gram
/// matrix. Zero singular values yield zero right vectors; their gated
/// contribution is zero either way.
fn time_svd<T: Scalar>(
    z: &LatentTensor<T>,
    rank: usize,
) -> Result<(Vec<T>, Matrix<T>, Matrix<T>)> {
    let a = unfold(z, 2)?;
    let t = a.rows();
    let cols = a.cols();
    let mut gram = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i..t {
            let dot = a
                .row(i)
                .iter()
                .zip(a.row(j))
                .fold(T::zero(), |acc, (&p, &q)| acc + p * q);
            gram.set(i, j, dot);
            gram.set(j, i, dot);
        }
    }
    let (vals, vecs) = sym_eigen_desc(&gram)?;
    let mut sigma = Vec::with_capacity(rank);
    let mut u = Matrix::zeros(t, rank);
    let mut v = Matrix::zeros(cols, rank);
    let tiny = T::epsilon() * a.frobenius_norm().max(T::min_positive_value());
    for j in 0..rank {
        let s = vals[j].max(T::zero()).sqrt();
        sigma.push(s);
        for r in 0..t {
            u.set(r, j, vecs.get(r, j));
        }
        if s > tiny {
            for c in 0..cols {
                let mut acc = T::zero();
                for r in 0..t {
                    acc += a.get(r, c) * vecs.get(r, j);
                }
                v.set(c, j, acc / s);
            }
        }
    }
    Ok((sigma, u, v))
}

/// Fold index map: latent flat position -> position in the mode-2
/// unfolding laid out as `T x (C*H*W)`.
fn mode2_fold_indices(dims: Dims4) -> Vec<usize> {
    let chw = dims.c * dims.h * dims.w;
    let mut idx = Vec::with_capacity(dims.count());
    for c in 0..dims.c {
        for t in 0..dims.t {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    idx.push(t * chw + (c * dims.h + h) * dims.w + w);
                }
            }
        }
    }
    idx
}

/// Unfold index map: mode-2 matrix position -> latent flat position.
fn mode2_unfold_indices(dims: Dims4) -> Vec<usize> {
    let mut idx = vec![0usize; dims.count()];
    let chw = dims.c * dims.h * dims.w;
    let mut flat = 0usize;
    for c in 0..dims.c {
        for t in 0..dims.t {
            for h in 0..dims.h {
                for w in 0..dims.w {
                    idx[t * chw + (c * dims.h + h) * dims.w + w] = flat;
                    flat += 1;
                }
            }
        }
    }
    idx
}

fn build_tbnf_svd<T: Scalar>(
    tape: &mut Tape<T>,
    z: &LatentTensor<T>,
    params: &VnpnetParams<T>,
) -> Result<ValueId> {
    let cfg = &params.cfg;
    let rank = cfg.ranks.t;
    let (sigma, u, v) = time_svd(z, rank)?;
    // Gate features: singular values normalized by the largest.
    let smax = sigma
        .iter()
        .fold(T::min_positive_value(), |m, &s| m.max(s));
    let feats: Vec<T> = sigma.iter().map(|&s| s / smax).collect();
    let gates = gate_head(tape, params, "svdgate", &feats, rank)?;
    let sig = tape.constant(sigma);
    let coeffs = tape.mul(gates, sig)?;
    let matrix = tape.rank1_mix(coeffs, Arc::new(u), Arc::new(v))?;
    tape.gather_elems(matrix, Arc::new(mode2_fold_indices(z.dims())))
}

fn build_tbnf_mlp<T: Scalar>(
    tape: &mut Tape<T>,
    z: &LatentTensor<T>,
    params: &VnpnetParams<T>,
) -> Result<ValueId> {
    let cfg = &params.cfg;
    let dims = z.dims();
    let d = dims.c * dims.h * dims.w;
    let hid = cfg.mlp_hidden;
    let zc = tape.constant(z.data().to_vec());
    let frames = tape.gather_elems(zc, Arc::new(mode2_unfold_indices(dims)))?;
    let w1 = leaf(tape, params, "mlp.w1")?;
    let b1 = leaf(tape, params, "mlp.b1")?;
    let hidden = tape.linear(frames, w1, Some(b1), dims.t, d, hid)?;
    let hidden = tape.tanh(hidden)?;
    let hidden = tape.dropout(hidden, cfg.p_drop)?;
    let w2 = leaf(tape, params, "mlp.w2")?;
    let b2 = leaf(tape, params, "mlp.b2")?;
    let out = tape.linear(hidden, w2, Some(b2), dims.t, hid, d)?;
    tape.gather_elems(out, Arc::new(mode2_fold_indices(dims)))
}

fn build_tbnf<T: Scalar>(
    tape: &mut Tape<T>,
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
) -> Result<ValueId> {
    match params.cfg.variant {
        FilterVariant::Tucker => build_tbnf_tucker(tape, z, p_embed, params),
        FilterVariant::Svd => build_tbnf_svd(tape, z, params),
        FilterVariant::Mlp => build_tbnf_mlp(tape, z, params),
    }
}

/// Token index maps for the patch embedding: latent -> `N x C*P^3` rows.
fn build_patchify_indices(dims: Dims4, p: usize) -> Vec<usize> {
    let (gt, gh, gw) = (dims.t / p, dims.h / p, dims.w / p);
    let mut idx = Vec::with_capacity(dims.count());
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                for c in 0..dims.c {
                    for pt in 0..p {
                        for ph in 0..p {
                            for pw in 0..p {
                                let t = it * p + pt;
                                let h = ih * p + ph;
                                let w = iw * p + pw;
                                idx.push(((c * dims.t + t) * dims.h + h) * dims.w + w);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Patch maps depend only on (dims, patch); building them costs a few
/// milliseconds at full latent size, so they are memoized process-wide.
fn patch_maps(dims: Dims4, p: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    type Key = ([usize; 4], usize);
    type Maps = (Arc<Vec<usize>>, Arc<Vec<usize>>);
    static CACHE: OnceLock<Mutex<HashMap<Key, Maps>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (dims.as_array(), p);
    if let Some(found) = cache.lock().unwrap().get(&key) {
        return found.clone();
    }
    let fwd = build_patchify_indices(dims, p);
    // Inverse permutation: latent flat position -> token-matrix position.
    let mut inv = vec![0usize; fwd.len()];
    for (token_pos, &latent_pos) in fwd.iter().enumerate() {
        inv[latent_pos] = token_pos;
    }
    let maps = (Arc::new(fwd), Arc::new(inv));
    cache.lock().unwrap().insert(key, maps.clone());
    maps
}

/// Partition a token grid into consecutive windows (ragged at the edges).
/// Returns (permutation, inverse permutation, per-window sizes).
fn window_permutation(
    grid: (usize, usize, usize),
    window: (usize, usize, usize),
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (gt, gh, gw) = grid;
    let (wt, wh, ww) = (window.0.min(gt), window.1.min(gh), window.2.min(gw));
    let mut perm = Vec::with_capacity(gt * gh * gw);
    let mut groups = Vec::new();
    let mut t0 = 0;
    while t0 < gt {
        let t1 = (t0 + wt).min(gt);
        let mut h0 = 0;
        while h0 < gh {
            let h1 = (h0 + wh).min(gh);
            let mut w0 = 0;
            while w0 < gw {
                let w1 = (w0 + ww).min(gw);
                let start = perm.len();
                for t in t0..t1 {
                    for h in h0..h1 {
                        for w in w0..w1 {
                            perm.push((t * gh + h) * gw + w);
                        }
                    }
                }
                groups.push(perm.len() - start);
                w0 = w1;
            }
            h0 = h1;
        }
        t0 = t1;
    }
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    (perm, inv, groups)
}

/// Token merge map for a 2x downsampling step (clamped at odd edges).
/// Returns (source row indices, new grid, tokens merged per output).
fn downsample_indices(grid: (usize, usize, usize)) -> (Vec<usize>, (usize, usize, usize), usize) {
    let (gt, gh, gw) = grid;
    let half = |g: usize| if g >= 2 { g.div_ceil(2) } else { 1 };
    let factor = |g: usize| if g >= 2 { 2 } else { 1 };
    let (nt, nh, nw) = (half(gt), half(gh), half(gw));
    let (ft, fh, fw) = (factor(gt), factor(gh), factor(gw));
    let mut idx = Vec::with_capacity(nt * nh * nw * ft * fh * fw);
    for i in 0..nt {
        for j in 0..nh {
            for k in 0..nw {
                for dt in 0..ft {
                    for dh in 0..fh {
                        for dw in 0..fw {
                            let t = (i * ft + dt).min(gt - 1);
                            let h = (j * fh + dh).min(gh - 1);
                            let w = (k * fw + dw).min(gw - 1);
                            idx.push((t * gh + h) * gw + w);
                        }
                    }
                }
            }
        }
    }
    (idx, (nt, nh, nw), ft * fh * fw)
}

/// Nearest-neighbor upsample map from `from` grid onto `to` grid.
fn upsample_indices(from: (usize, usize, usize), to: (usize, usize, usize)) -> Vec<usize> {
    let mut idx = Vec::with_capacity(to.0 * to.1 * to.2);
    for t in 0..to.0 {
        for h in 0..to.1 {
            for w in 0..to.2 {
                let st = t * from.0 / to.0;
                let sh = h * from.1 / to.1;
                let sw = w * from.2 / to.2;
                idx.push((st * from.1 + sh) * from.2 + sw);
            }
        }
    }
    idx
}

/// The contextual residual branch over an (already text-fused) latent node.
fn build_gcrm<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValueId,
    params: &VnpnetParams<T>,
) -> Result<ValueId> {
    let cfg = &params.cfg;
    let dims = cfg.dims;
    let p = cfg.gcrm.patch;
    let grids = stage_grids(cfg);
    let patch_feat = dims.c * p * p * p;
    let n1 = cfg.token_count();
    let dim1 = cfg.gcrm.stages[0].dim;
    let rate = cfg.gcrm.drop_path;

    let (patchify, unpatchify) = patch_maps(dims, p);
    let gathered = tape.gather_elems(x, patchify)?;
    let wp = leaf(tape, params, "gcrm.patch.w")?;
    let bp = leaf(tape, params, "gcrm.patch.b")?;
    let mut tok = tape.linear(gathered, wp, Some(bp), n1, patch_feat, dim1)?;
    let pos = leaf(tape, params, "gcrm.pos")?;
    tok = tape.add(tok, pos)?;

    let mut grid = grids[0];
    for (s, stage) in cfg.gcrm.stages.iter().enumerate() {
        let d = stage.dim;
        let heads = d / cfg.gcrm.head_dim;
        let n = grid.0 * grid.1 * grid.2;
        let (perm, inv, groups) = if stage.global_attn {
            (None, None, Arc::new(vec![n]))
        } else {
            let (perm, inv, groups) = window_permutation(grid, stage.window);
            (Some(Arc::new(perm)), Some(Arc::new(inv)), Arc::new(groups))
        };
        for b in 0..stage.depth {
            let pfx = format!("gcrm.s{s}.b{b}");
            // Dynamic positional encoding: depthwise conv residual.
            let dw = leaf(tape, params, &format!("{pfx}.dpe.w"))?;
            let db = leaf(tape, params, &format!("{pfx}.dpe.b"))?;
            let conv = tape.dw_conv3d(tok, dw, db, grid, d)?;
            let conv = tape.drop_path(conv, rate)?;
            tok = tape.add(tok, conv)?;

            // Windowed / global multi-head self-attention, pre-norm.
            let g1 = leaf(tape, params, &format!("{pfx}.norm1.g"))?;
            let b1 = leaf(tape, params, &format!("{pfx}.norm1.b"))?;
            let normed = tape.layer_norm(tok, g1, b1, d)?;
            let attn_in = match &perm {
                Some(perm) => tape.gather_rows(normed, perm.clone(), d)?,
                None => normed,
            };
            let wq = leaf(tape, params, &format!("{pfx}.attn.wq"))?;
            let bq = leaf(tape, params, &format!("{pfx}.attn.bq"))?;
            let wk = leaf(tape, params, &format!("{pfx}.attn.wk"))?;
            let bk = leaf(tape, params, &format!("{pfx}.attn.bk"))?;
            let wv = leaf(tape, params, &format!("{pfx}.attn.wv"))?;
            let bv = leaf(tape, params, &format!("{pfx}.attn.bv"))?;
            let q = tape.linear(attn_in, wq, Some(bq), n, d, d)?;
            let k = tape.linear(attn_in, wk, Some(bk), n, d, d)?;
            let v = tape.linear(attn_in, wv, Some(bv), n, d, d)?;
            let att = tape.mhsa(q, k, v, heads, cfg.gcrm.head_dim, groups.clone())?;
            let wo = leaf(tape, params, &format!("{pfx}.attn.wo"))?;
            let bo = leaf(tape, params, &format!("{pfx}.attn.bo"))?;
            let att = tape.linear(att, wo, Some(bo), n, d, d)?;
            let att = match &inv {
                Some(inv) => tape.gather_rows(att, inv.clone(), d)?,
                None => att,
            };
            let att = tape.drop_path(att, rate)?;
            tok = tape.add(tok, att)?;

            // Feed-forward with expansion 4, pre-norm.
            let g2 = leaf(tape, params, &format!("{pfx}.norm2.g"))?;
            let b2 = leaf(tape, params, &format!("{pfx}.norm2.b"))?;
            let normed = tape.layer_norm(tok, g2, b2, d)?;
            let w1 = leaf(tape, params, &format!("{pfx}.ffn.w1"))?;
            let fb1 = leaf(tape, params, &format!("{pfx}.ffn.b1"))?;
            let hidden = tape.linear(normed, w1, Some(fb1), n, d, 4 * d)?;
            let hidden = tape.gelu(hidden)?;
            let w2 = leaf(tape, params, &format!("{pfx}.ffn.w2"))?;
            let fb2 = leaf(tape, params, &format!("{pfx}.ffn.b2"))?;
            let ffn = tape.linear(hidden, w2, Some(fb2), n, 4 * d, d)?;
            let ffn = tape.drop_path(ffn, rate)?;
            tok = tape.add(tok, ffn)?;
        }
        if s + 1 < cfg.gcrm.stages.len() {
            let (idx, new_grid, arity) = downsample_indices(grid);
            let n_new = new_grid.0 * new_grid.1 * new_grid.2;
            let merged = tape.gather_rows(tok, Arc::new(idx), d)?;
            let wd = leaf(tape, params, &format!("gcrm.down{s}.w"))?;
            let bd = leaf(tape, params, &format!("gcrm.down{s}.b"))?;
            tok = tape.linear(merged, wd, Some(bd), n_new, arity * d, cfg.gcrm.stages[s + 1].dim)?;
            grid = new_grid;
        }
    }

    if cfg.gcrm.stages.len() > 1 {
        let dim_last = cfg.gcrm.stages.last().unwrap().dim;
        let up = tape.gather_rows(tok, Arc::new(upsample_indices(grid, grids[0])), dim_last)?;
        let wu = leaf(tape, params, "gcrm.up.w")?;
        let bu = leaf(tape, params, "gcrm.up.b")?;
        tok = tape.linear(up, wu, Some(bu), n1, dim_last, dim1)?;
    }
    let wh = leaf(tape, params, "gcrm.head.w")?;
    let bh = leaf(tape, params, "gcrm.head.b")?;
    let feat = tape.linear(tok, wh, Some(bh), n1, dim1, patch_feat)?;
    tape.gather_elems(feat, unpatchify)
}

fn validate_inputs<T: Scalar>(
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
) -> Result<()> {
    if z.dims() != params.cfg.dims {
        return Err(Error::shape(params.cfg.dims.to_string(), z.dims().to_string()));
    }
    if p_embed.values.len() != params.cfg.embed_dim {
        return Err(Error::shape(
            format!("embedding of {}", params.cfg.embed_dim),
            format!("{}", p_embed.values.len()),
        ));
    }
    Ok(())
}

/// Both branches recorded on the tape: the filter branch first, then the
/// text fusion, then the contextual branch, so stochastic masks draw in a
/// fixed order.
fn build_branches<T: Scalar>(
    tape: &mut Tape<T>,
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
) -> Result<(ValueId, ValueId)> {
    validate_inputs(z, p_embed, params)?;
    let tbnf = build_tbnf(tape, z, p_embed, params)?;

    let dims = params.cfg.dims;
    let pvec = tape.constant(p_embed.values.clone());
    let wt = leaf(tape, params, "text.w")?;
    let evec = tape.linear(pvec, wt, None, 1, params.cfg.embed_dim, dims.c)?;
    let e_text = tape.broadcast_channel(evec, dims)?;
    let zc = tape.constant(z.data().to_vec());
    let fused = tape.add(zc, e_text)?;

    let residual = build_gcrm(tape, fused, params)?;
    Ok((tbnf, residual))
}

/// Record the full forward pass on `tape`, including the composed output
/// node used as the training loss input.
pub fn vnpnet_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
) -> Result<ForwardNodes> {
    let (tbnf, residual) = build_branches(tape, z, p_embed, params)?;
    let beta = leaf(tape, params, "beta")?;
    let scaled = tape.scale_by_scalar(residual, beta)?;
    let output = tape.add(tbnf, scaled)?;
    Ok(ForwardNodes { tbnf, residual, beta, output })
}

/// One forward pass. The composition preserves the filter branch bit-exactly
/// wherever `beta * residual` is exactly zero (beta = 0 or a dead residual),
/// so the structural identities hold at the bit level.
pub fn vnpnet_forward<T: Scalar>(
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
    train: bool,
    seed: u64,
) -> Result<LatentTensor<T>> {
    let mut tape = Tape::new(train, seed);
    let (tbnf_node, residual_node) = build_branches(&mut tape, z, p_embed, params)?;
    let tbnf = tape.value(tbnf_node)?;
    let residual = tape.value(residual_node)?;
    let beta = params.beta();
    let data: Vec<T> = tbnf
        .iter()
        .zip(residual)
        .map(|(&t, &r)| {
            let d = beta * r;
            if d == T::zero() {
                t
            } else {
                t + d
            }
        })
        .collect();
    let out = LatentTensor::from_vec(params.cfg.dims, data)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { context: "network forward output".into() });
    }
    Ok(out)
}

/// Structured filter branch only.
pub fn tbnf_forward<T: Scalar>(
    z: &LatentTensor<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
    train: bool,
    seed: u64,
) -> Result<LatentTensor<T>> {
    validate_inputs(z, p_embed, params)?;
    let mut tape = Tape::new(train, seed);
    let node = build_tbnf(&mut tape, z, p_embed, params)?;
    LatentTensor::from_vec(params.cfg.dims, tape.value(node)?.to_vec())
}

/// Contextual residual branch over an already text-fused input.
pub fn gcrm_forward<T: Scalar>(
    x: &LatentTensor<T>,
    params: &VnpnetParams<T>,
    train: bool,
    seed: u64,
) -> Result<LatentTensor<T>> {
    if x.dims() != params.cfg.dims {
        return Err(Error::shape(params.cfg.dims.to_string(), x.dims().to_string()));
    }
    let mut tape = Tape::new(train, seed);
    let xc = tape.constant(x.data().to_vec());
    let node = build_gcrm(&mut tape, xc, params)?;
    LatentTensor::from_vec(params.cfg.dims, tape.value(node)?.to_vec())
}

/// Softmax gate vectors over the factor column norms, one per mode.
pub fn factor_gates<T: Scalar>(
    f: &TuckerFactorization<T>,
    params: &VnpnetParams<T>,
    train: bool,
    seed: u64,
) -> Result<[Vec<T>; 4]> {
    let mut tape = Tape::new(train, seed);
    let norms = factor_norms(f);
    let nodes = build_gates(&mut tape, params, &norms)?;
    let mut out: Vec<Vec<T>> = Vec::with_capacity(4);
    for n in nodes {
        out.push(tape.value(n)?.to_vec());
    }
    Ok(out.try_into().expect("four modes"))
}

/// Scale each factor's columns by the matching gate weights; the core is
/// untouched.
pub fn apply_factor_scaling<T: Scalar>(
    f: &TuckerFactorization<T>,
    weights: &[Vec<T>; 4],
) -> Result<TuckerFactorization<T>> {
    let mut out = f.clone();
    for (m, w) in weights.iter().enumerate() {
        let factor = &mut out.factors[m];
        if w.len() != factor.cols() {
            return Err(Error::shape(
                format!("{} gate weights for mode {}", factor.cols(), m + 1),
                format!("{}", w.len()),
            ));
        }
        for r in 0..factor.rows() {
            for (c, &wc) in w.iter().enumerate() {
                let v = factor.get(r, c) * wc;
                factor.set(r, c, v);
            }
        }
    }
    Ok(out)
}

/// Core attenuation mask conditioned on factor statistics and the prompt.
pub fn core_mask<T: Scalar>(
    f: &TuckerFactorization<T>,
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
    train: bool,
    seed: u64,
) -> Result<LatentTensor<T>> {
    if p_embed.values.len() != params.cfg.embed_dim {
        return Err(Error::shape(
            format!("embedding of {}", params.cfg.embed_dim),
            format!("{}", p_embed.values.len()),
        ));
    }
    let mut tape = Tape::new(train, seed);
    let norms = factor_norms(f);
    let node = build_core_mask(&mut tape, params, &norms, p_embed)?;
    LatentTensor::from_vec(params.cfg.ranks.core_dims(), tape.value(node)?.to_vec())
}

/// Project the prompt embedding to a per-channel vector and broadcast it
/// over (T, H, W).
pub fn text_embed<T: Scalar>(
    p_embed: &PromptEmbedding<T>,
    params: &VnpnetParams<T>,
) -> Result<LatentTensor<T>> {
    let cfg = &params.cfg;
    if p_embed.values.len() != cfg.embed_dim {
        return Err(Error::shape(
            format!("embedding of {}", cfg.embed_dim),
            format!("{}", p_embed.values.len()),
        ));
    }
    let w = params.get("text.w")?;
    let dims = cfg.dims;
    let mut channel = vec![T::zero(); dims.c];
    for (c, ch) in channel.iter_mut().enumerate() {
        let row = &w.data()[c * cfg.embed_dim..(c + 1) * cfg.embed_dim];
        *ch = row
            .iter()
            .zip(&p_embed.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
    let vol = dims.t * dims.h * dims.w;
    let mut data = Vec::with_capacity(dims.count());
    for c in 0..dims.c {
        data.extend(std::iter::repeat(channel[c]).take(vol));
    }
    LatentTensor::from_vec(dims, data)
}
