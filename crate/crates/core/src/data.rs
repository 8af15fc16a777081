//! Image corpora on disk, training crops, and the synthetic shape corpus.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{Image, SaliencyMap};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    /// File stem shared by the image and its mask.
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Ordered list of images, optionally paired with ground-truth masks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every image. Masks are never touched.
    pub fn load_images(&self) -> Result<Vec<(String, Image)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.id.clone(), Image::load(&e.image)?)))
            .collect()
    }

    /// Decodes the ground-truth masks; errors if any entry has none.
    pub fn load_masks(&self) -> Result<Vec<(String, SaliencyMap)>> {
        self.entries
            .iter()
            .map(|e| {
                let p = e
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Dataset(format!("{}: no mask", e.id)))?;
                Ok((e.id.clone(), SaliencyMap::load_mask(p)?))
            })
            .collect()
    }
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn dimensions(p: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(p).map_err(|e| Error::Image {
        path: p.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads `dir/images/*` (or `dir/*` when there is no `images` folder) in
/// lexicographic order; with `with_masks`, pairs each image with
/// `dir/masks/<stem>.png`.
pub fn load_corpus(dir: &Path, with_masks: bool) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let image_dir = if dir.join("images").is_dir() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    let mask_dir = dir.join("masks");
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for path in list_images(&image_dir)? {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("{}: unusable file name", path.display())))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Dataset(format!("{id}: duplicate image stem")));
        }
        let mask = if with_masks {
            let m = mask_dir.join(format!("{id}.png"));
            if !m.is_file() {
                return Err(Error::Dataset(format!(
                    "{id}: missing mask {}",
                    m.display()
                )));
            }
            let (iw, ih) = dimensions(&path)?;
            let (mw, mh) = dimensions(&m)?;
            if (iw, ih) != (mw, mh) {
                return Err(Error::Dataset(format!(
                    "{id}: mask is {mw}x{mh} but image is {iw}x{ih}"
                )));
            }
            Some(m)
        } else {
            None
        };
        entries.push(CorpusEntry {
            id,
            image: path,
            mask,
        });
    }
    Ok(Corpus { entries })
}

/// Uniformly drawn top-left corner `(top, left)` of a square crop.
pub fn crop_corner(height: usize, width: usize, side: usize, seed: u64) -> Result<(usize, usize)> {
    if side == 0 || side > height || side > width {
        return Err(Error::Config(format!(
            "crop side {side} does not fit image {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=height - side);
    let left = rng.random_range(0..=width - side);
    Ok((top, left))
}

/// Square crop at [`crop_corner`].
pub fn random_crop(x: &Image, side: usize, seed: u64) -> Result<Image> {
    let (top, left) = crop_corner(x.height(), x.width(), side, seed)?;
    x.crop(top, left, side, side)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disc,
    Rectangle,
    Blob,
    /// Cycles disc, rectangle, blob.
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub side: usize,
    pub family: ShapeFamily,
    /// Brightness of the foreground colour; its hue is uniform and its
    /// saturation fixed.
    pub foreground: (f64, f64),
    /// Grey level of the background, lightly tinted per channel.
    pub background: (f64, f64),
    /// Amplitude of uniform per-pixel texture noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Eight 64x64 images of mixed shapes.
    pub fn desk(seed: u64) -> Self {
        Self {
            count: 8,
            side: 64,
            family: ShapeFamily::Mixed,
            foreground: (0.75, 1.0),
            background: (0.05, 0.3),
            noise: 0.08,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub masks: Vec<SaliencyMap>,
}

const FOREGROUND_SATURATION: f64 = 0.6;
const BACKGROUND_TINT: f64 = 0.02;

/// RGB of a colour with the given hue in `[0,1)`, saturation and value.
fn hue_color(hue: f64, saturation: f64, value: f64) -> [f64; 3] {
    let channel = |offset: f64| {
        let k = (hue * 6.0 + offset) % 6.0;
        let ramp = (k.min(4.0 - k)).clamp(0.0, 1.0);
        value * (1.0 - saturation * ramp)
    };
    [channel(5.0), channel(3.0), channel(1.0)]
}

/// One bright coloured shape per image on a dark grey, noisy, gently shaded
/// background.
/// Pixel values are multiples of `1/255`, so PNG storage is lossless.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.side < 16 {
        return Err(Error::Config("synthetic side must be at least 16".into()));
    }
    let (fl, fh) = spec.foreground;
    let (bl, bh) = spec.background;
    if !(0.0 <= bl && bl <= bh && bh <= 1.0 && 0.0 <= fl && fl <= fh && fh <= 1.0)
        || !(spec.noise >= 0.0)
    {
        return Err(Error::Config(
            "synthetic intensity ranges must lie in [0,1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.side;
    let sf = n as f64;
    let mut out = SyntheticCorpus {
        ids: Vec::new(),
        images: Vec::new(),
        masks: Vec::new(),
    };
    let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    for i in 0..spec.count {
        let family = match spec.family {
            ShapeFamily::Mixed => {
                [ShapeFamily::Disc, ShapeFamily::Rectangle, ShapeFamily::Blob][i % 3]
            }
            f => f,
        };
        let r = draw(&mut rng, 0.2, 0.3) * sf;
        let cy = draw(&mut rng, r + 2.0, sf - r - 2.0);
        let cx = draw(&mut rng, r + 2.0, sf - r - 2.0);
        let aspect = draw(&mut rng, 0.7, 1.3);
        let phase = draw(&mut rng, 0.0, std::f64::consts::TAU);
        let lobes = 3.0 + (rng.random_range(0..3) as f64);
        let inside = |y: f64, x: f64| -> bool {
            let (dy, dx) = (y - cy, x - cx);
            match family {
                ShapeFamily::Disc | ShapeFamily::Mixed => dy * dy + dx * dx <= r * r,
                ShapeFamily::Rectangle => {
                    dy.abs() <= r * aspect.min(1.0) && dx.abs() <= r / aspect.max(1.0)
                }
                ShapeFamily::Blob => {
                    let rho = (dy * dy + dx * dx).sqrt();
                    let theta = dy.atan2(dx);
                    rho <= r * (0.85 + 0.15 * (lobes * theta + phase).sin())
                }
            }
        };
        let value = draw(&mut rng, fl, fh);
        let hue = draw(&mut rng, 0.0, 1.0);
        let fg = hue_color(hue, FOREGROUND_SATURATION, value);
        let grey = draw(&mut rng, bl, bh);
        let bg: Vec<f64> = (0..3)
            .map(|_| grey + draw(&mut rng, -BACKGROUND_TINT, BACKGROUND_TINT))
            .collect();
        let tilt = draw(&mut rng, -1.0, 1.0);
        let mut data = vec![0.0; 3 * n * n];
        let mut mask = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let on = inside(y as f64 + 0.5, x as f64 + 0.5);
                mask[y * n + x] = if on { 1.0 } else { 0.0 };
                let shade = 0.05 * tilt * ((x as f64 + y as f64) / (2.0 * sf) - 0.5);
                for c in 0..3 {
                    let noise = if spec.noise > 0.0 {
                        rng.random_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    let base = if on { fg[c] } else { bg[c] + shade };
                    let v = (base + noise).clamp(0.0, 1.0);
                    data[c * n * n + y * n + x] = (v * 255.0).round() / 255.0;
                }
            }
        }
        out.ids.push(format!("synth_{i:03}"));
        out.images.push(Image::from_chw(n, n, data)?);
        out.masks.push(SaliencyMap::new(n, n, mask)?);
    }
    Ok(out)
}

impl SyntheticCorpus {
    /// Writes `images/<id>.png` and `masks/<id>.png` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Corpus> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        for d in [&images, &masks] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for ((id, img), mask) in self.ids.iter().zip(&self.images).zip(&self.masks) {
            img.save_png(&images.join(format!("{id}.png")))?;
            mask.save_png(&masks.join(format!("{id}.png")))?;
        }
        load_corpus(dir, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded_and_binary() {
        let spec = SyntheticSpec::desk(3);
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a.images.len(), 8);
        assert!(a.masks.iter().all(|m| m.is_binary()));
        assert!(a
            .masks
            .iter()
            .all(|m| m.values().iter().sum::<f64>() > 100.0));
        assert_eq!(a, make_synthetic(&spec).unwrap());
    }

    #[test]
    fn png_storage_is_lossless() {
        let a = make_synthetic(&SyntheticSpec {
            count: 2,
            ..SyntheticSpec::desk(1)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let corpus = a.write_to(dir.path()).unwrap();
        let imgs = corpus.load_images().unwrap();
        assert_eq!(imgs[0].1, a.images[0]);
        assert_eq!(corpus.load_masks().unwrap()[1].1, a.masks[1]);
    }

    #[test]
    fn crop_identity_and_bounds() {
        let x = make_synthetic(&SyntheticSpec {
            count: 1,
            ..SyntheticSpec::desk(0)
        })
        .unwrap()
        .images
        .remove(0);
        assert_eq!(random_crop(&x, 64, 9).unwrap(), x);
        assert_eq!(
            random_crop(&x, 32, 9).unwrap(),
            random_crop(&x, 32, 9).unwrap()
        );
        assert!(random_crop(&x, 65, 0).is_err());
    }
}
