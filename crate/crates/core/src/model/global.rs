use super::local::check_input;
use super::state::{ArchSpec, Init, SpecList};
use super::{param, ModelState};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::imaging::Image;

/// Each patch is average-pooled to `EMBED_CELLS x EMBED_CELLS` before the
/// linear embedding, so one set of weights serves every patch size.
const EMBED_CELLS: usize = 4;

/// One token per classification patch, rows in row-major grid order.
pub struct GlobalTokens {
    /// `[grid_h * grid_w, token_dim]`
    pub tokens: Var,
    pub grid: (usize, usize),
}

pub(crate) fn param_specs(arch: &ArchSpec, specs: &mut SpecList) {
    let d = arch.token_dim;
    specs.linear("global.embed", 3 * EMBED_CELLS * EMBED_CELLS, d);
    specs.push(
        "global.pos",
        &[arch.pos_grid * arch.pos_grid, d],
        Init::Uniform(0.02),
    );
    for i in 0..arch.depth {
        let p = format!("global.block{i}");
        specs.layer_norm(&format!("{p}.ln1"), d);
        specs.linear(&format!("{p}.q"), d, d);
        specs.linear(&format!("{p}.k"), d, d);
        specs.linear(&format!("{p}.v"), d, d);
        specs.linear(&format!("{p}.o"), d, d);
        specs.layer_norm(&format!("{p}.ln2"), d);
        specs.linear(&format!("{p}.fc1"), d, d * arch.mlp_ratio);
        specs.linear(&format!("{p}.fc2"), d * arch.mlp_ratio, d);
    }
    specs.layer_norm("global.ln", d);
}

fn linear(g: &mut Graph, state: &ModelState, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, state, &format!("{prefix}.w"))?;
    let b = param(g, state, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w);
    Ok(g.add_bias(y, b))
}

fn layer_norm(g: &mut Graph, state: &ModelState, prefix: &str, x: Var) -> Result<Var> {
    let gamma = param(g, state, &format!("{prefix}.g"))?;
    let beta = param(g, state, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta))
}

/// Learned positional embedding, bilinearly resampled when the token grid
/// differs from the stored grid.
fn positions(g: &mut Graph, state: &ModelState, grid: (usize, usize)) -> Result<Var> {
    let pos = param(g, state, "global.pos")?;
    let pg = state.arch.pos_grid;
    if grid == (pg, pg) {
        return Ok(pos);
    }
    let d = state.arch.token_dim;
    let t = g.transpose(pos);
    let sq = g.reshape(t, &[d, pg, pg]);
    let r = g.resize(sq, grid.0, grid.1);
    let flat = g.reshape(r, &[d, grid.0 * grid.1]);
    Ok(g.transpose(flat))
}

fn attention(g: &mut Graph, state: &ModelState, p: &str, x: Var) -> Result<Var> {
    let heads = state.arch.heads;
    let d = state.arch.token_dim;
    let dh = d / heads;
    let q = linear(g, state, &format!("{p}.q"), x)?;
    let k = linear(g, state, &format!("{p}.k"), x)?;
    let v = linear(g, state, &format!("{p}.v"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let att = g.softmax_rows(scores);
        outs.push(g.matmul(att, vh));
    }
    let cat = g.concat_cols(&outs);
    linear(g, state, &format!("{p}.o"), cat)
}

/// Pre-norm transformer over patch tokens; every output token attends to
/// every input patch.
pub fn forward_global_encoder(
    g: &mut Graph,
    x: &Image,
    state: &ModelState,
) -> Result<GlobalTokens> {
    let patch = check_input(x, &state.arch)?;
    let grid = (x.height() / patch, x.width() / patch);
    let img = g.input(x.to_tensor());
    let pooled = g.avg_pool(img, patch / EMBED_CELLS);
    let patches = g.patchify(pooled, EMBED_CELLS);
    let mut h = linear(g, state, "global.embed", patches)?;
    let pos = positions(g, state, grid)?;
    h = g.add(h, pos);
    for i in 0..state.arch.depth {
        let p = format!("global.block{i}");
        let n1 = layer_norm(g, state, &format!("{p}.ln1"), h)?;
        let a = attention(g, state, &p, n1)?;
        h = g.add(h, a);
        let n2 = layer_norm(g, state, &format!("{p}.ln2"), h)?;
        let f1 = linear(g, state, &format!("{p}.fc1"), n2)?;
        let f1 = g.gelu(f1);
        let f2 = linear(g, state, &format!("{p}.fc2"), f1)?;
        h = g.add(h, f2);
    }
    let tokens = layer_norm(g, state, "global.ln", h)?;
    Ok(GlobalTokens { tokens, grid })
}
