use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decoder, global, local};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture descriptor. Everything needed to rebuild parameter shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Channel width of the first local-encoder level.
    pub base_width: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Number of transformer blocks in the global encoder.
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Classification patch size in pixels.
    pub patch: usize,
    pub classes: usize,
    /// Side of the learned positional-embedding grid.
    pub pos_grid: usize,
    /// Hidden width of the classification decoder (the CAM feature maps).
    pub cls_width: usize,
}

impl ArchSpec {
    /// Reduced-scale network for 64x64 crops with 32x32 patches.
    pub fn desk(classes: usize) -> Self {
        Self {
            base_width: 16,
            token_dim: 64,
            heads: 4,
            depth: 2,
            mlp_ratio: 2,
            patch: 32,
            classes,
            pos_grid: 2,
            cls_width: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("architecture: {m}")));
        if self.base_width < 2 || !self.base_width.is_multiple_of(2) {
            return fail("base_width must be an even number >= 2");
        }
        if self.heads == 0 || self.token_dim == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return fail("token_dim must be a positive multiple of heads");
        }
        if self.patch < 8 || !self.patch.is_multiple_of(8) {
            return fail("patch must be a multiple of 8");
        }
        if self.classes == 0 || self.pos_grid == 0 || self.cls_width == 0 || self.mlp_ratio == 0 {
            return fail("classes, pos_grid, cls_width and mlp_ratio must be positive");
        }
        Ok(())
    }

    /// Classification patch size used for an `h x w` input: the configured
    /// patch, shrunk to half the shorter side (rounded down to a multiple of 8)
    /// so that every input has at least a 2x2 grid.
    pub fn patch_for(&self, h: usize, w: usize) -> Result<usize> {
        let half = (h.min(w) / 2) / 8 * 8;
        let p = self.patch.min(half);
        if p < 8 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "input {h}x{w} is incompatible with patch size {} (needs sides divisible by the patch and at least 16)",
                self.patch
            )));
        }
        Ok(p)
    }

    /// `(output, mid)` channel widths of the four local-encoder levels.
    pub(crate) fn level_widths(&self) -> [(usize, usize); 4] {
        let b = self.base_width;
        [(b, b / 2), (b, b / 2), (2 * b, b), (2 * b, b)]
    }

    pub(crate) fn fused_width(&self) -> usize {
        self.level_widths()[3].0 + self.token_dim
    }
}

pub(crate) enum Init {
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, for layers followed by SiLU.
    He(usize),
    /// `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, unit-variance preserving.
    Lecun(usize),
    Uniform(f64),
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Default)]
pub(crate) struct SpecList(pub Vec<ParamSpec>);

impl SpecList {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// 3x3 (or kxk) convolution weight and zero bias.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, act: bool) {
        let fan = cin * k * k;
        let init = if act { Init::He(fan) } else { Init::Lecun(fan) };
        self.push(format!("{prefix}.w"), &[cout, cin, k, k], init);
        self.push(format!("{prefix}.b"), &[cout], Init::Zeros);
    }

    /// `[in, out]` matrix and zero bias.
    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(format!("{prefix}.w"), &[din, dout], Init::Lecun(din));
        self.push(format!("{prefix}.b"), &[dout], Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), &[d], Init::Ones);
        self.push(format!("{prefix}.b"), &[d], Init::Zeros);
    }
}

pub(crate) fn param_specs(arch: &ArchSpec) -> Vec<ParamSpec> {
    let mut specs = SpecList::default();
    local::param_specs(arch, &mut specs);
    global::param_specs(arch, &mut specs);
    decoder::param_specs(arch, &mut specs);
    specs.0
}

/// Named parameters of one network (student or teacher) plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchSpec,
    pub params: BTreeMap<String, Tensor>,
}

impl ModelState {
    /// Fan-in scaled uniform initialization, deterministic in `seed`.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in param_specs(&arch) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::He(fan) => uniform(&mut rng, n, (6.0 / fan as f64).sqrt()),
                Init::Lecun(fan) => uniform(&mut rng, n, (3.0 / fan as f64).sqrt()),
                Init::Uniform(b) => uniform(&mut rng, n, b),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(spec.name, Tensor::new(&spec.shape, data));
        }
        Ok(Self { arch, params })
    }

    /// Builds a state from loaded tensors, checking names and shapes against the architecture.
    pub fn from_params(arch: ArchSpec, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let specs = param_specs(&arch);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                None => return Err(Error::Format(format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Format(format!(
                        "parameter {} is not finite",
                        spec.name
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { arch, params })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Errors unless `other` has identical parameter names and shapes.
    pub fn check_aligned(&self, other: &ModelState) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.params.iter().zip(&other.params) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Shape(format!(
                    "parameter {na} {:?} vs {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}
