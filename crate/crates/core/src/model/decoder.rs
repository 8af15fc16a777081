use super::local::FeaturePyramid;
use super::state::{ArchSpec, SpecList};
use super::{conv, conv_act, ClassLogitsMap, ModelState, SALIENCY_EPS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Name of the `[K, cls_width, 1, 1]` per-patch classification projection.
/// Its class rows weight the CAM.
pub const CLASS_HEAD_WEIGHT: &str = "cls.head.w";

pub(crate) fn param_specs(arch: &ArchSpec, specs: &mut SpecList) {
    let b = arch.base_width;
    let [l0, l1, l2, _] = arch.level_widths();
    specs.conv("sal.dec3", arch.fused_width(), 2 * b, 3, true);
    specs.conv("sal.dec2", 2 * b + l2.0, b, 3, true);
    specs.conv("sal.dec1", b + l1.0, b / 2, 3, true);
    specs.conv("sal.dec0", b / 2 + l0.0, b / 2, 3, true);
    specs.conv("sal.out", b / 2, 1, 3, false);
    specs.conv("cls.hidden", arch.fused_width(), arch.cls_width, 3, true);
    specs.conv("cls.head", arch.cls_width, arch.classes, 1, false);
}

/// U-shaped decoder: upsample, concatenate the matching skip level, convolve;
/// a final 3x3 projection to one channel goes through a clamped sigmoid.
pub fn decode_saliency(
    g: &mut Graph,
    fused: Var,
    pyramid: &FeaturePyramid,
    state: &ModelState,
) -> Result<Var> {
    if pyramid.levels.len() != 4 {
        return Err(Error::Shape(
            "saliency decoder needs a four-level pyramid".into(),
        ));
    }
    let mut h = conv_act(g, state, "sal.dec3", fused)?;
    for (level, name) in [(2, "sal.dec2"), (1, "sal.dec1"), (0, "sal.dec0")] {
        let skip = pyramid.levels[level];
        let s = g.shape(skip).to_vec();
        let up = g.resize(h, s[1], s[2]);
        let cat = g.concat_rows(&[up, skip]);
        h = conv_act(g, state, name, cat)?;
    }
    let logit = conv(g, state, "sal.out", h, 3)?;
    Ok(g.sigmoid_clamped(logit, SALIENCY_EPS))
}

/// Outputs of the classification decoder.
pub struct ClassHead {
    /// `[grid_h * grid_w, K]` raw per-patch logits.
    pub logits: Var,
    /// `[cls_width, H/8, W/8]` feature maps feeding the 1x1 projection.
    pub features: Var,
    pub grid: (usize, usize),
}

impl ClassHead {
    pub fn logits_map(&self, g: &Graph) -> ClassLogitsMap {
        let t = g.value(self.logits);
        ClassLogitsMap {
            grid_h: self.grid.0,
            grid_w: self.grid.1,
            classes: t.shape()[1],
            logits: t.data().to_vec(),
        }
    }
}

/// Per-location 1x1 class projection of the hidden features, averaged over
/// each `patch x patch` input region. No squashing.
pub fn decode_classes(
    g: &mut Graph,
    fused: Var,
    state: &ModelState,
    patch: usize,
) -> Result<ClassHead> {
    let features = conv_act(g, state, "cls.hidden", fused)?;
    let dense = conv(g, state, "cls.head", features, 1)?;
    let s = g.shape(dense).to_vec();
    let cells = patch / 8;
    if cells == 0 || !s[1].is_multiple_of(cells) || !s[2].is_multiple_of(cells) {
        return Err(Error::Config(format!(
            "patch {patch} does not tile the {}x{} feature grid",
            s[1], s[2]
        )));
    }
    let pooled = g.avg_pool(dense, cells);
    let grid = (s[1] / cells, s[2] / cells);
    let k = s[0];
    let flat = g.reshape(pooled, &[k, grid.0 * grid.1]);
    let logits = g.transpose(flat);
    Ok(ClassHead {
        logits,
        features,
        grid,
    })
}
