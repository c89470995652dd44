//! Stochastic view generation: flip, random resized crop, grayscale and
//! colour jitter, applied in that order.

use rand::Rng;

use crate::dataio::{hsv_to_rgb, FloatImage};
use crate::error::{Error, Result};
use crate::seed::stream;

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

const CROP_ATTEMPTS: usize = 10;

/// Upper bounds of the four jitter sub-transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterMax {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

/// Parameters of the augmentation distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f32,
    /// Crop area as a fraction of the image area.
    pub crop_scale: [f32; 2],
    /// Crop aspect ratio relative to the image's own aspect ratio.
    pub crop_aspect: [f32; 2],
    pub grayscale_prob: f32,
    pub jitter_prob: f32,
    pub jitter_max: JitterMax,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_scale: [0.08, 1.0],
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            grayscale_prob: 0.2,
            jitter_prob: 0.8,
            jitter_max: JitterMax {
                brightness: 0.8,
                contrast: 0.8,
                saturation: 0.8,
                hue: 0.2,
            },
        }
    }
}

impl AugmentPolicy {
    /// Every transform degenerates to the identity.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            grayscale_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    /// Horizontal flip plus a mild random crop; used for supervised training.
    pub fn flip_crop() -> Self {
        Self {
            crop_scale: [0.6, 1.0],
            grayscale_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("jitter_prob", self.jitter_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("crop_scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        let [alo, ahi] = self.crop_aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(Error::invalid(format!("crop_aspect [{alo}, {ahi}] must satisfy 0 < lo <= hi")));
        }
        let j = self.jitter_max;
        if [j.brightness, j.contrast, j.saturation].iter().any(|&m| m < 0.0) || !(0.0..=0.5).contains(&j.hue) {
            return Err(Error::invalid(format!("invalid jitter maxima {j:?}")));
        }
        Ok(())
    }
}

/// Crop window in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue_shift: f32,
}

/// Realised random choices of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewTrace {
    pub flipped: bool,
    pub crop: CropBox,
    /// Crop area over image area.
    pub area_fraction: f32,
    /// Crop aspect ratio over image aspect ratio.
    pub relative_aspect: f32,
    /// False when every sampling attempt failed and the centre fallback ran.
    pub sampled: bool,
    pub grayscale: bool,
    pub jitter: Option<JitterFactors>,
}

fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, policy: &AugmentPolicy, rng: &mut R) -> (CropBox, bool) {
    let (hf, wf) = (h as f32, w as f32);
    let area = hf * wf;
    let base_ratio = wf / hf;
    let [slo, shi] = policy.crop_scale;
    let [alo, ahi] = policy.crop_aspect;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, slo, shi);
        let ratio = uniform(rng, alo, ahi) * base_ratio;
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= wf && ch <= hf {
            let x = uniform(rng, 0.0, wf - cw);
            let y = uniform(rng, 0.0, hf - ch);
            return (CropBox { x, y, w: cw, h: ch }, true);
        }
    }
    // Largest centred window whose aspect lies inside the allowed range.
    let (min_r, max_r) = (alo * base_ratio, ahi * base_ratio);
    let (cw, ch) = if base_ratio < min_r {
        (wf, wf / min_r)
    } else if base_ratio > max_r {
        (hf * max_r, hf)
    } else {
        (wf, hf)
    };
    (
        CropBox {
            x: (wf - cw) / 2.0,
            y: (hf - ch) / 2.0,
            w: cw,
            h: ch,
        },
        false,
    )
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resample of a crop window back to the full image size, with
/// half-pixel centre alignment.
pub fn resized_crop(img: &FloatImage, crop: CropBox) -> FloatImage {
    let (h, w, c) = (img.height, img.width, img.channels);
    let sy = crop.h / h as f32;
    let sx = crop.w / w as f32;
    let mut out = vec![0.0f32; h * w * c];
    for oy in 0..h {
        let fy = (crop.y + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..w {
            let fx = (crop.x + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - tx) + img.at(y0, x1, ch) * tx;
                let bottom = img.at(y1, x0, ch) * (1.0 - tx) + img.at(y1, x1, ch) * tx;
                out[(oy * w + ox) * c + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    FloatImage {
        data: out,
        ..*img
    }
}

pub fn hflip(img: &FloatImage) -> FloatImage {
    let (w, c) = (img.width, img.channels);
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks(w * c) {
        for x in (0..w).rev() {
            data.extend_from_slice(&row[x * c..(x + 1) * c]);
        }
    }
    FloatImage { data, ..*img }
}

fn luma(px: &[f32]) -> f32 {
    px[0] * LUMA[0] + px[1] * LUMA[1] + px[2] * LUMA[2]
}

pub fn grayscale(img: &mut FloatImage) {
    if img.channels != 3 {
        return;
    }
    for px in img.data.chunks_mut(3) {
        let l = luma(px);
        px.fill(l);
    }
}

fn clamp01(img: &mut FloatImage) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

/// Brightness, contrast, saturation and hue, in that fixed order, clamping
/// to `[0, 1]` after each step.
pub fn apply_jitter(img: &mut FloatImage, f: &JitterFactors) {
    img.data.iter_mut().for_each(|v| *v *= f.brightness);
    clamp01(img);

    let c = img.channels;
    let mean = if c == 3 {
        img.data.chunks(3).map(luma).sum::<f32>() / (img.data.len() / 3) as f32
    } else {
        img.data.iter().sum::<f32>() / img.data.len() as f32
    };
    img.data
        .iter_mut()
        .for_each(|v| *v = f.contrast * *v + (1.0 - f.contrast) * mean);
    clamp01(img);

    if c != 3 {
        return;
    }
    for px in img.data.chunks_mut(3) {
        let l = luma(px);
        px.iter_mut().for_each(|v| *v = f.saturation * *v + (1.0 - f.saturation) * l);
    }
    clamp01(img);

    if f.hue_shift != 0.0 {
        for px in img.data.chunks_mut(3) {
            let [h, s, v] = rgb_to_hsv(px[0], px[1], px[2]);
            px.copy_from_slice(&hsv_to_rgb(h + f.hue_shift, s, v));
        }
        clamp01(img);
    }
}

fn sample_jitter<R: Rng + ?Sized>(max: &JitterMax, rng: &mut R) -> JitterFactors {
    let factor = |rng: &mut R, m: f32| uniform(rng, (1.0 - m).max(0.0), 1.0 + m);
    JitterFactors {
        brightness: factor(rng, max.brightness),
        contrast: factor(rng, max.contrast),
        saturation: factor(rng, max.saturation),
        hue_shift: uniform(rng, -max.hue, max.hue),
    }
}

/// Draws one augmented view and reports the random choices made.
pub fn sample_view_traced<R: Rng + ?Sized>(
    image: &FloatImage,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (FloatImage, ViewTrace) {
    let flipped = rng.gen::<f32>() < policy.flip_prob;
    let (crop, sampled) = sample_crop(image.height, image.width, policy, rng);
    let gray = rng.gen::<f32>() < policy.grayscale_prob;
    let jitter = (rng.gen::<f32>() < policy.jitter_prob).then(|| sample_jitter(&policy.jitter_max, rng));

    let mut out = if flipped { hflip(image) } else { image.clone() };
    let full = crop.w == image.width as f32 && crop.h == image.height as f32 && crop.x == 0.0 && crop.y == 0.0;
    if !full {
        out = resized_crop(&out, crop);
    }
    if gray {
        grayscale(&mut out);
    }
    if let Some(f) = &jitter {
        apply_jitter(&mut out, f);
    }
    let (hf, wf) = (image.height as f32, image.width as f32);
    let trace = ViewTrace {
        flipped,
        crop,
        area_fraction: crop.w * crop.h / (hf * wf),
        relative_aspect: (crop.w / crop.h) / (wf / hf),
        sampled,
        grayscale: gray,
        jitter,
    };
    (out, trace)
}

pub fn sample_view<R: Rng + ?Sized>(image: &FloatImage, policy: &AugmentPolicy, rng: &mut R) -> FloatImage {
    sample_view_traced(image, policy, rng).0
}

/// Draws `k` view batches of `batch`. View `(k, m)` uses its own stream
/// derived from one draw of `rng`, so results do not depend on the order in
/// which views are produced.
pub fn augment_batch<R: Rng + ?Sized>(
    batch: &[FloatImage],
    policy: &AugmentPolicy,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<FloatImage>>> {
    if k < 1 {
        return Err(Error::invalid("augment_batch needs k >= 1"));
    }
    policy.validate()?;
    let base: u64 = rng.gen();
    Ok((0..k)
        .map(|view| {
            batch
                .iter()
                .enumerate()
                .map(|(m, img)| sample_view(img, policy, &mut stream(&[base, view as u64, m as u64])))
                .collect()
        })
        .collect())
}
