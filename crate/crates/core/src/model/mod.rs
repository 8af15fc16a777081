//! The base network: a local U-shaped CNN encoder and a global transformer
//! encoder whose features are concatenated and fed to a saliency decoder and
//! a patch-classification decoder.

mod decoder;
mod global;
mod local;
mod state;

use crate::autograd::{resize_bilinear, Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Image, SaliencyMap};
use crate::tensor::Tensor;

pub use decoder::{decode_classes, decode_saliency, ClassHead, CLASS_HEAD_WEIGHT};
pub use global::{forward_global_encoder, GlobalTokens};
pub use local::{forward_local_encoder, FeaturePyramid};
pub use state::{ArchSpec, ModelState};

/// Saliency values are clamped into `[SALIENCY_EPS, 1 - SALIENCY_EPS]`.
pub const SALIENCY_EPS: f64 = 1e-6;

/// Patch-wise class logits on a `grid_h x grid_w` grid, `classes` per cell,
/// cells in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogitsMap {
    grid_h: usize,
    grid_w: usize,
    classes: usize,
    logits: Vec<f64>,
}

impl ClassLogitsMap {
    pub fn new(grid_h: usize, grid_w: usize, classes: usize, logits: Vec<f64>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || classes == 0 {
            return Err(Error::Shape("class logits map must be non-empty".into()));
        }
        if logits.len() != grid_h * grid_w * classes {
            return Err(Error::Shape(format!(
                "{}x{}x{} logits map needs {} values, got {}",
                grid_h,
                grid_w,
                classes,
                grid_h * grid_w * classes,
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class logits".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            classes,
            logits,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.logits.chunks(self.classes)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

/// Everything a forward pass leaves on the tape.
pub struct Forward {
    pub pyramid: FeaturePyramid,
    pub tokens: GlobalTokens,
    pub fused: Var,
    /// `[1,H,W]` saliency in `[eps, 1-eps]`.
    pub saliency: Var,
    pub class_head: ClassHead,
}

impl Forward {
    pub fn saliency_map(&self, g: &Graph) -> SaliencyMap {
        let t = g.value(self.saliency);
        let s = t.shape();
        SaliencyMap::new_unchecked(s[1], s[2], t.data().to_vec())
    }

    pub fn class_logits(&self, g: &Graph) -> ClassLogitsMap {
        self.class_head.logits_map(g)
    }
}

/// Channel-concatenates the deepest local features with the token grid,
/// bilinearly resampled to the local resolution.
pub fn fuse_features(g: &mut Graph, local: &FeaturePyramid, tokens: &GlobalTokens) -> Result<Var> {
    let deep = local.deepest();
    let ds = g.shape(deep).to_vec();
    let ts = g.shape(tokens.tokens).to_vec();
    let (gh, gw) = tokens.grid;
    if ts[0] != gh * gw {
        return Err(Error::Config(format!(
            "token count {} does not match grid {}x{}",
            ts[0], gh, gw
        )));
    }
    if !ds[1].is_multiple_of(gh) || !ds[2].is_multiple_of(gw) {
        return Err(Error::Config(format!(
            "token grid {}x{} cannot be aligned to local features {}x{}",
            gh, gw, ds[1], ds[2]
        )));
    }
    let d = ts[1];
    let t = g.transpose(tokens.tokens);
    let grid = g.reshape(t, &[d, gh, gw]);
    let aligned = g.resize(grid, ds[1], ds[2]);
    Ok(g.concat_rows(&[deep, aligned]))
}

/// Full base-network pass producing the saliency map and class logits.
pub fn forward(g: &mut Graph, x: &Image, state: &ModelState) -> Result<Forward> {
    let pyramid = forward_local_encoder(g, x, state)?;
    let tokens = forward_global_encoder(g, x, state)?;
    let fused = fuse_features(g, &pyramid, &tokens)?;
    let saliency = decode_saliency(g, fused, &pyramid, state)?;
    let patch = state.arch.patch_for(x.height(), x.width())?;
    let class_head = decode_classes(g, fused, state, patch)?;
    Ok(Forward {
        pyramid,
        tokens,
        fused,
        saliency,
        class_head,
    })
}

/// Forward pass on a fresh tape, returning plain values.
pub fn predict(x: &Image, state: &ModelState) -> Result<(SaliencyMap, ClassLogitsMap)> {
    let mut g = Graph::new();
    let f = forward(&mut g, x, state)?;
    Ok((f.saliency_map(&g), f.class_logits(&g)))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Size an `h x w` image is resampled to before the network sees it: each
/// side rounded to the nearest multiple of both the patch and 16, and at
/// least two such steps.
pub fn working_size(arch: &ArchSpec, h: usize, w: usize) -> (usize, usize) {
    let step = arch.patch / gcd(arch.patch, 16) * 16;
    let fit = |n: usize| ((n + step / 2) / step).max(2) * step;
    (fit(h), fit(w))
}

/// The network input for `x`: `x` itself at a working size, otherwise a
/// bicubic resample.
pub fn network_input(x: &Image, arch: &ArchSpec) -> Image {
    let (h, w) = working_size(arch, x.height(), x.width());
    resize_bicubic(x, h, w)
}

/// Saliency map for an image of any size: predicted at the working size and
/// bilinearly resampled back.
pub fn predict_saliency(x: &Image, state: &ModelState) -> Result<SaliencyMap> {
    let (s, _) = predict(&network_input(x, &state.arch), state)?;
    if s.height() == x.height() && s.width() == x.width() {
        return Ok(s);
    }
    let t = Tensor::new(&[1, s.height(), s.width()], s.into_values());
    let up = resize_bilinear(&t, x.height(), x.width());
    let v = up
        .into_data()
        .into_iter()
        .map(|v| v.clamp(SALIENCY_EPS, 1.0 - SALIENCY_EPS))
        .collect();
    SaliencyMap::new(x.height(), x.width(), v)
}

/// Looks up a parameter tensor and registers it on the tape.
pub(crate) fn param(g: &mut Graph, state: &ModelState, name: &str) -> Result<Var> {
    let t = state
        .params
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
    Ok(g.param(name, t))
}

/// `silu(conv3x3(x))` with parameters `{prefix}.w` / `{prefix}.b`.
pub(crate) fn conv_act(g: &mut Graph, state: &ModelState, prefix: &str, x: Var) -> Result<Var> {
    let y = conv(g, state, prefix, x, 3)?;
    Ok(g.silu(y))
}

pub(crate) fn conv(
    g: &mut Graph,
    state: &ModelState,
    prefix: &str,
    x: Var,
    k: usize,
) -> Result<Var> {
    let w = param(g, state, &format!("{prefix}.w"))?;
    let b = param(g, state, &format!("{prefix}.b"))?;
    let ws = g.shape(w);
    let cin = g.shape(x)[0];
    if ws[1] != cin {
        return Err(Error::Shape(format!(
            "{prefix}: expects {} input channels, got {}",
            ws[1], cin
        )));
    }
    Ok(g.conv2d(x, w, b, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_arch() -> ArchSpec {
        ArchSpec {
            base_width: 4,
            token_dim: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            patch: 8,
            classes: 5,
            pos_grid: 2,
            cls_width: 6,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_chw(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pyramid_strides_and_token_grid() {
        let state = ModelState::init(ArchSpec::desk(200), 1).unwrap();
        let x = random_image(64, 64, 2);
        let mut g = Graph::new();
        let pyr = forward_local_encoder(&mut g, &x, &state).unwrap();
        let sizes: Vec<_> = pyr.levels.iter().map(|&v| g.shape(v)[1]).collect();
        assert_eq!(sizes, [64, 32, 16, 8]);
        let tok = forward_global_encoder(&mut g, &x, &state).unwrap();
        assert_eq!(tok.grid, (2, 2));
        assert_eq!(g.shape(tok.tokens), [4, 64]);
        let fused = fuse_features(&mut g, &pyr, &tok).unwrap();
        assert_eq!(g.shape(fused), [32 + 64, 8, 8]);
    }

    #[test]
    fn forward_shapes_range_and_determinism() {
        let state = ModelState::init(ArchSpec::desk(200), 3).unwrap();
        let x = random_image(64, 64, 4);
        let (s1, c1) = predict(&x, &state).unwrap();
        let (s2, c2) = predict(&x, &state).unwrap();
        assert_eq!((s1.height(), s1.width()), (64, 64));
        assert_eq!(c1.grid(), (2, 2));
        assert_eq!(c1.classes(), 200);
        assert!(s1.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s1, s2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn zero_input_is_finite() {
        let state = ModelState::init(small_arch(), 5).unwrap();
        let x = Image::filled(16, 16, 0.0);
        let (s, c) = predict(&x, &state).unwrap();
        assert!(s.values().iter().all(|v| v.is_finite()));
        assert!(c.logits().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_touches_every_parameter() {
        let state = ModelState::init(small_arch(), 6).unwrap();
        let x = random_image(16, 16, 7);
        let mut g = Graph::new();
        forward(&mut g, &x, &state).unwrap();
        let used: Vec<_> = g.param_names().map(str::to_string).collect();
        let declared: Vec<_> = state.params.keys().cloned().collect();
        assert_eq!(used, declared);
    }

    #[test]
    fn zero_tokens_leave_local_channels() {
        let state = ModelState::init(small_arch(), 8).unwrap();
        let x = random_image(16, 16, 9);
        let mut g = Graph::new();
        let pyr = forward_local_encoder(&mut g, &x, &state).unwrap();
        let zeros = g.constant(Tensor::zeros(&[4, 8]));
        let tok = GlobalTokens {
            tokens: zeros,
            grid: (2, 2),
        };
        let fused = fuse_features(&mut g, &pyr, &tok).unwrap();
        let deep = g.value(pyr.deepest()).data().to_vec();
        let f = g.value(fused).data();
        assert_eq!(&f[..deep.len()], &deep[..]);
        assert!(f[deep.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let state = ModelState::init(small_arch(), 1).unwrap();
        let x = random_image(20, 16, 1);
        assert!(matches!(predict(&x, &state), Err(Error::Config(_))));
    }
}
