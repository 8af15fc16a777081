use super::state::{ArchSpec, SpecList};
use super::{conv_act, ModelState};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Local-encoder outputs at strides 1, 2, 4 and 8.
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> Var {
        *self.levels.last().expect("pyramid has four levels")
    }
}

pub(crate) fn param_specs(arch: &ArchSpec, specs: &mut SpecList) {
    let mut cin = 3;
    for (i, (out, mid)) in arch.level_widths().into_iter().enumerate() {
        rsu_specs(specs, &format!("local.enc{i}"), cin, mid, out);
        cin = out;
    }
}

fn rsu_specs(specs: &mut SpecList, p: &str, cin: usize, mid: usize, out: usize) {
    specs.conv(&format!("{p}.in"), cin, out, 3, true);
    specs.conv(&format!("{p}.e1"), out, mid, 3, true);
    specs.conv(&format!("{p}.e2"), mid, mid, 3, true);
    specs.conv(&format!("{p}.bottom"), mid, mid, 3, true);
    specs.conv(&format!("{p}.d2"), 2 * mid, mid, 3, true);
    specs.conv(&format!("{p}.d1"), 2 * mid, out, 3, true);
}

/// Residual U-block with a two-level inner U: the block output is the input
/// projection plus the U-path refinement of it.
fn rsu(g: &mut Graph, state: &ModelState, p: &str, x: Var) -> Result<Var> {
    let hx = conv_act(g, state, &format!("{p}.in"), x)?;
    let e1 = conv_act(g, state, &format!("{p}.e1"), hx)?;
    let pooled = g.avg_pool(e1, 2);
    let e2 = conv_act(g, state, &format!("{p}.e2"), pooled)?;
    let bottom = conv_act(g, state, &format!("{p}.bottom"), e2)?;
    let cat2 = g.concat_rows(&[bottom, e2]);
    let d2 = conv_act(g, state, &format!("{p}.d2"), cat2)?;
    let s = g.shape(e1).to_vec();
    let up = g.resize(d2, s[1], s[2]);
    let cat1 = g.concat_rows(&[up, e1]);
    let d1 = conv_act(g, state, &format!("{p}.d1"), cat1)?;
    Ok(g.add(d1, hx))
}

pub(crate) fn check_input(x: &Image, arch: &ArchSpec) -> Result<usize> {
    if !x.height().is_multiple_of(16) || !x.width().is_multiple_of(16) {
        return Err(Error::Config(format!(
            "input {}x{} must have sides divisible by 16",
            x.height(),
            x.width()
        )));
    }
    arch.patch_for(x.height(), x.width())
}

/// Four-level U-shaped CNN of residual U-blocks; each level halves the resolution.
pub fn forward_local_encoder(
    g: &mut Graph,
    x: &Image,
    state: &ModelState,
) -> Result<FeaturePyramid> {
    check_input(x, &state.arch)?;
    let mut h = g.input(x.to_tensor());
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        if i > 0 {
            h = g.avg_pool(h, 2);
        }
        h = rsu(g, state, &format!("local.enc{i}"), h)?;
        levels.push(h);
    }
    Ok(FeaturePyramid { levels })
}
