//! RGB images and single-channel maps, plus their PNG/JPEG encodings.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luma weights used whenever an RGB image is reduced to grayscale.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An RGB image with values in `[0,1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from `[3,H,W]` channel-major data, validating the range.
    pub fn from_chw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image must be non-empty".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {}x{} needs {} values, got {}",
                height,
                width,
                3 * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::NonFinite(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Clamps into `[0,1]` instead of rejecting; non-finite values become 0.
    pub(crate) fn from_chw_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        for v in &mut data {
            *v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Interleaved 8-bit RGB, as produced by most decoders.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "rgb buffer for {}x{} needs {} bytes, got {}",
                height,
                width,
                3 * height * width,
                rgb.len()
            )));
        }
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f64 / 255.0;
            }
        }
        Self::from_chw(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::from_chw_clamped(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone())
    }

    pub fn gray(&self) -> SaliencyMap {
        let hw = self.height * self.width;
        let values = (0..hw)
            .map(|i| {
                LUMA[0] * self.data[i]
                    + LUMA[1] * self.data[hw + i]
                    + LUMA[2] * self.data[2 * hw + i]
            })
            .collect();
        SaliencyMap::new_unchecked(self.height, self.width, values)
    }

    /// Sub-image with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "crop {}x{} at ({},{}) exceeds image {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in top..top + height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + width]);
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Self::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let hw = self.height * self.width;
        let mut buf = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                buf[3 * i + c] = to_u8(self.data[c * hw + i]);
            }
        }
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// An `H x W` real map. Used for predictions, pseudo labels, CAMs, edges
/// and gates; binary maps hold exactly `0.0` or `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "map {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::NonFinite(format!("map value {bad} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub(crate) fn new_unchecked(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new_unchecked(height, width, vec![0.0; height * width])
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self::new_unchecked(height, width, vec![v; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_shape(&self, other: &SaliencyMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_shape(&self, other: &SaliencyMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Sub-map with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "crop {}x{} at ({},{}) exceeds map {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        for y in top..top + height {
            values.extend_from_slice(
                &self.values[y * self.width + left..y * self.width + left + width],
            );
        }
        Ok(Self::new_unchecked(height, width, values))
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1` where the value is at least `thr`, else `0`.
    pub fn threshold(&self, thr: f64) -> SaliencyMap {
        let values = self
            .values
            .iter()
            .map(|&v| if v >= thr { 1.0 } else { 0.0 })
            .collect();
        Self::new_unchecked(self.height, self.width, values)
    }

    /// Grayscale PNG, values scaled by 255 and rounded half-up.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.values.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// 8-bit grayscale file scaled by `1/255`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let l = img.to_luma8();
        let values = l.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self::new_unchecked(
            l.height() as usize,
            l.width() as usize,
            values,
        ))
    }

    /// Ground-truth mask file: `>= 128` is foreground.
    pub fn load_mask(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let l = img.to_luma8();
        let values = l
            .as_raw()
            .iter()
            .map(|&b| if b >= 128 { 1.0 } else { 0.0 })
            .collect();
        Ok(Self::new_unchecked(
            l.height() as usize,
            l.width() as usize,
            values,
        ))
    }
}

/// `round_half_up(255 * v)` for `v` clamped into `[0,1]`.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            let base = pos.floor();
            let t = pos - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as f64 - 1.0;
                let s = (base + off).clamp(0.0, (src - 1) as f64) as usize;
                idx[k] = s;
                w[k] = cubic_weight(off - t);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling with clamped borders; output clamped to `[0,1]`.
pub fn resize_bicubic(img: &Image, oh: usize, ow: usize) -> Image {
    let (h, w) = (img.height, img.width);
    if h == oh && w == ow {
        return img.clone();
    }
    let ty = cubic_taps(h, oh);
    let tx = cubic_taps(w, ow);
    let mut out = vec![0.0; 3 * oh * ow];
    let mut rows = vec![0.0; h * ow];
    for c in 0..3 {
        let src = img.channel(c);
        for y in 0..h {
            for (j, (idx, wt)) in tx.iter().enumerate() {
                rows[y * ow + j] = (0..4).map(|k| src[y * w + idx[k]] * wt[k]).sum();
            }
        }
        for (i, (idx, wt)) in ty.iter().enumerate() {
            for j in 0..ow {
                out[(c * oh + i) * ow + j] = (0..4).map(|k| rows[idx[k] * ow + j] * wt[k]).sum();
            }
        }
    }
    Image::from_chw_clamped(oh, ow, out)
}
