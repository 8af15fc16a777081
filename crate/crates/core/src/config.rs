//! Training configuration and its `key = value` text grammar.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key mirrors a [`TrainConfig`] field.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ArchSpec;

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($(#[$vm:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($(#[$vm])* $variant),+ }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($text),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

keyword_enum! {
    /// Which distribution is the cross-entropy target in the image-level distillation loss.
    StTarget { Teacher => "teacher", Student => "student" }
}

keyword_enum! {
    /// Whether the teacher center is added to or subtracted from teacher logits.
    CenterSign { Add => "add", Subtract => "subtract" }
}

keyword_enum! {
    /// Where contrastive negatives are read from.
    RhoNegatives {
        /// Every negative index is evaluated on the teacher map.
        TeacherMap => "teacher",
        /// Student negatives on the student map, teacher negatives on the teacher map.
        OwnMap => "own",
    }
}

keyword_enum! {
    /// Stability constant inside the structure penalty `sqrt(s^2 + c)`.
    PsiConstant {
        /// `c = 1e-6`
        Decimal => "1e-6",
        /// `c = exp(-6)`
        Exp => "exp",
    }
}

keyword_enum! {
    TargetMode { Hard => "hard", Soft => "soft" }
}

keyword_enum! {
    /// Pseudo label composition.
    PseudoGtMode { Fused => "fused", CamOnly => "cam", EdgeOnly => "edge" }
}

keyword_enum! {
    /// Image reduction used for the gate term of the structure loss.
    GsImage { Gray => "gray", Channels => "channels" }
}

impl PsiConstant {
    pub fn value(self) -> f64 {
        match self {
            PsiConstant::Decimal => 1e-6,
            PsiConstant::Exp => (-6.0f64).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub classes: usize,
    pub m_rho: usize,
    pub tau: f64,
    pub beta1: f64,
    pub patch: usize,
    pub crop: usize,
    pub global_view: usize,
    pub local_view: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub skip_warmup: bool,
    pub ema_start: f64,
    pub ema_end: f64,
    pub cam_thr: f64,
    pub edge_thr: f64,
    pub pgt_thr: f64,
    /// Dilation radius at a 64-pixel side; scaled with the image side.
    pub dilate_radius: usize,
    pub st_target: StTarget,
    pub center_sign: CenterSign,
    pub rho_negatives: RhoNegatives,
    pub rho_include_positive: bool,
    pub psi: PsiConstant,
    pub pgt_target: TargetMode,
    pub pseudo_gt: PseudoGtMode,
    pub use_gs: bool,
    pub gs_image: GsImage,
    /// Directory of precomputed edge maps (`<stem>.png`); empty selects Sobel.
    pub edge_dir: String,
    pub global_scale_min: f64,
    pub global_scale_max: f64,
    pub local_scale_min: f64,
    pub local_scale_max: f64,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub solarize_prob: f64,
    pub base_width: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub cls_width: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Worker threads for per-sample work within a batch. Results are reduced
    /// in sample order, so the value does not change any output.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes: 200,
            m_rho: 10,
            tau: 0.1,
            beta1: 0.3,
            patch: 32,
            crop: 64,
            global_view: 64,
            local_view: 32,
            lr: 0.001,
            momentum: 0.0,
            grad_clip: 200.0,
            batch: 4,
            epochs: 150,
            warmup_epochs: 30,
            skip_warmup: false,
            ema_start: 0.996,
            ema_end: 1.0,
            cam_thr: 0.5,
            edge_thr: 0.2,
            pgt_thr: 0.5,
            dilate_radius: 3,
            st_target: StTarget::Teacher,
            center_sign: CenterSign::Add,
            rho_negatives: RhoNegatives::TeacherMap,
            rho_include_positive: false,
            psi: PsiConstant::Decimal,
            pgt_target: TargetMode::Hard,
            pseudo_gt: PseudoGtMode::Fused,
            use_gs: true,
            gs_image: GsImage::Gray,
            edge_dir: String::new(),
            global_scale_min: 0.5,
            global_scale_max: 1.0,
            local_scale_min: 0.2,
            local_scale_max: 0.5,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            blur_prob: 0.5,
            blur_sigma_max: 1.0,
            solarize_prob: 0.2,
            base_width: 16,
            token_dim: 64,
            heads: 4,
            depth: 2,
            cls_width: 32,
            seed: 0,
            checkpoint_every: 10,
            threads: 1,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident),+ $(,)?) => {
        /// Every accepted key, in canonical output order.
        pub const KEYS: &[&str] = &[$(stringify!($key)),+];

        impl TrainConfig {
            /// Assigns one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value(key, value)?;
                        Ok(())
                    })+
                    _ => Err(Error::UnknownKey(key.to_string())),
                }
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.to_string()),)+
                    _ => None,
                }
            }
        }
    };
}

config_keys!(
    classes,
    m_rho,
    tau,
    beta1,
    patch,
    crop,
    global_view,
    local_view,
    lr,
    momentum,
    grad_clip,
    batch,
    epochs,
    warmup_epochs,
    skip_warmup,
    ema_start,
    ema_end,
    cam_thr,
    edge_thr,
    pgt_thr,
    dilate_radius,
    st_target,
    center_sign,
    rho_negatives,
    rho_include_positive,
    psi,
    pgt_target,
    pseudo_gt,
    use_gs,
    gs_image,
    edge_dir,
    global_scale_min,
    global_scale_max,
    local_scale_min,
    local_scale_max,
    flip_prob,
    jitter_prob,
    brightness,
    contrast,
    saturation,
    blur_prob,
    blur_sigma_max,
    solarize_prob,
    base_width,
    token_dim,
    heads,
    depth,
    cls_width,
    seed,
    checkpoint_every,
    threads,
);

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    pub fn is_known_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("classes", self.classes),
            ("m_rho", self.m_rho),
            ("batch", self.batch),
            ("crop", self.crop),
            ("global_view", self.global_view),
            ("local_view", self.local_view),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, side) in [
            ("crop", self.crop),
            ("global_view", self.global_view),
            ("local_view", self.local_view),
        ] {
            if side % 16 != 0 {
                return fail(format!("{name} = {side} must be a multiple of 16"));
            }
        }
        if self.local_view * self.local_view >= self.global_view * self.global_view {
            return fail("local_view must be smaller than global_view".into());
        }
        if self.global_view > self.crop {
            return fail("global_view cannot exceed crop".into());
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip >= 0.0) {
            return fail("lr, momentum or grad_clip out of range".into());
        }
        if !(0.0 < self.ema_start && self.ema_start <= self.ema_end && self.ema_end <= 1.0) {
            return fail("need 0 < ema_start <= ema_end <= 1".into());
        }
        for (name, v) in [
            ("cam_thr", self.cam_thr),
            ("edge_thr", self.edge_thr),
            ("pgt_thr", self.pgt_thr),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0,1)"));
            }
        }
        if !(self.beta1 >= 0.0) {
            return fail("beta1 must be non-negative".into());
        }
        for (name, lo, hi) in [
            ("global_scale", self.global_scale_min, self.global_scale_max),
            ("local_scale", self.local_scale_min, self.local_scale_max),
        ] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return fail(format!("{name} range must satisfy 0 < min <= max <= 1"));
            }
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be a probability"));
            }
        }
        if !self.skip_warmup && self.warmup_epochs > self.epochs {
            return fail("warmup_epochs exceeds epochs".into());
        }
        self.arch().validate()?;
        let arch = self.arch();
        for side in [self.crop, self.global_view, self.local_view] {
            arch.patch_for(side, side)?;
        }
        Ok(())
    }

    /// Architecture for this config; the positional grid matches the crop grid.
    pub fn arch(&self) -> ArchSpec {
        let mut a = ArchSpec {
            base_width: self.base_width,
            token_dim: self.token_dim,
            heads: self.heads,
            depth: self.depth,
            mlp_ratio: 2,
            patch: self.patch,
            classes: self.classes,
            pos_grid: 1,
            cls_width: self.cls_width,
        };
        a.pos_grid = a
            .patch_for(self.crop, self.crop)
            .map(|p| self.crop / p)
            .unwrap_or(1);
        a
    }

    /// Dilation radius for an image of the given shorter side.
    pub fn dilate_radius_for(&self, side: usize) -> usize {
        ((self.dilate_radius * side) as f64 / 64.0).round() as usize
    }

    pub fn warmup_len(&self) -> usize {
        if self.skip_warmup {
            0
        } else {
            self.warmup_epochs
        }
    }
}
