//! Image datasets: CIFAR-10 binary and IDX readers, plus a seeded
//! synthetic-shapes generator for small benchmarks.
//!
//! Images are kept as raw `u8` in height × width × channel order. Conversion
//! to `[0, 1]` floats happens later, at the augmentation/backbone boundary,
//! so that decoding stays bit-exact.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::mix_seed;
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const CIFAR_SIDE: usize = 32;
const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;
/// Bytes per CIFAR-10 record: one label then three 32×32 colour planes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_PLANE;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Colour extension: four dimensions `(N, H, W, C)`.
pub const IDX_IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded images with optional labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    labels: Option<Vec<usize>>,
    class_names: Option<Vec<String>>,
}

impl ImageDataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
        labels: Option<Vec<usize>>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let stride = height * width * channels;
        if stride == 0 || pixels.len() % stride != 0 {
            return Err(Error::invalid(format!(
                "{} pixel bytes do not divide into {height}x{width}x{channels} images",
                pixels.len()
            )));
        }
        let n = pixels.len() / stride;
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} images", labels.len())));
            }
            if let Some(names) = &class_names {
                if let Some(&bad) = labels.iter().find(|&&l| l >= names.len()) {
                    return Err(Error::invalid(format!("label {bad} outside {} classes", names.len())));
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Raw HWC bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.image_len();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Number of classes: the name list when present, else `max(label) + 1`.
    pub fn num_classes(&self) -> Option<usize> {
        match (&self.class_names, &self.labels) {
            (Some(names), _) => Some(names.len()),
            (None, Some(labels)) => labels.iter().max().map(|m| m + 1),
            _ => None,
        }
    }

    /// New dataset holding the given images in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_names: self.class_names.clone(),
        }
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn float_image(&self, i: usize) -> FloatImage {
        FloatImage {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.image(i).iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    /// Image `i` as three-channel floats; single-channel images are replicated
    /// across R, G and B.
    pub fn rgb_float_image(&self, i: usize) -> FloatImage {
        let img = self.float_image(i);
        if img.channels != 1 {
            return img;
        }
        FloatImage {
            channels: 3,
            data: img.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ..img
        }
    }

    /// Every image as an `[N, 3, H, W]` tensor (see [`ImageDataset::rgb_float_image`]).
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        let images: Vec<FloatImage> = (0..self.len()).map(|i| self.rgb_float_image(i)).collect();
        to_nchw(&images)
    }

    /// Deterministic 80/20 train/test split: indices are permuted with `seed`
    /// and every fifth position of the permutation goes to the test side.
    pub fn split_train_test(&self, seed: u64) -> (Self, Self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % 5 == 4 {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (self.subset(&train), self.subset(&test))
    }
}

/// A single image in `[0, 1]` floats, height × width × channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Stacks equally sized images into an `[N, C, H, W]` tensor.
pub fn to_nchw(images: &[FloatImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::shape(
                "to_nchw",
                format!("{}x{}x{} among {h}x{w}x{c} images", img.height, img.width, img.channels),
            ));
        }
        for ch in 0..c {
            data.extend((0..h * w).map(|p| img.data[p * c + ch]));
        }
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Decodes CIFAR-10 binary records from memory.
pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageDataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            "CIFAR-10",
            "length",
            format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3 * CIFAR_PLANE);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format("CIFAR-10", "label", format!("record {r} has label {}", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        let planes = &rec[1..];
        for p in 0..CIFAR_PLANE {
            pixels.extend_from_slice(&[planes[p], planes[CIFAR_PLANE + p], planes[2 * CIFAR_PLANE + p]]);
        }
    }
    ImageDataset::new(
        CIFAR_SIDE,
        CIFAR_SIDE,
        3,
        pixels,
        Some(labels),
        Some(CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect()),
    )
}

/// Reads and concatenates CIFAR-10 binary batch files in order.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p)?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                "CIFAR-10",
                "length",
                format!("{}: {} bytes is not a multiple of {CIFAR_RECORD}", p.as_ref().display(), chunk.len()),
            ));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}

/// Encodes one 32×32×3 image and label as a CIFAR-10 record.
pub fn encode_cifar10_record(image: &[u8], label: usize) -> Result<Vec<u8>> {
    if image.len() != 3 * CIFAR_PLANE || label >= 10 {
        return Err(Error::invalid(format!(
            "CIFAR-10 record needs 3072 pixel bytes and a label below 10, got {} bytes and label {label}",
            image.len()
        )));
    }
    let mut rec = Vec::with_capacity(CIFAR_RECORD);
    rec.push(label as u8);
    for ch in 0..3 {
        rec.extend((0..CIFAR_PLANE).map(|p| image[p * 3 + ch]));
    }
    Ok(rec)
}

fn be_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX", field, format!("header truncated at byte {at}")))
}

/// Parses an IDX image file: `(n, height, width, channels, pixels)`.
///
/// Accepts the classic 3-dimensional greyscale layout (magic `0x803`) and a
/// 4-dimensional `(N, H, W, C)` colour layout (magic `0x804`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    let rank = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_IMAGES_RGB_MAGIC => 4,
        other => {
            return Err(Error::format(
                "IDX",
                "magic",
                format!("expected 0x00000803 or 0x00000804 for images, got {other:#010x}"),
            ))
        }
    };
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(be_u32(bytes, 4 + 4 * d, "dimensions")? as usize);
    }
    let channels = if rank == 4 { dims[3] } else { 1 };
    if dims.iter().any(|&d| d == 0) || channels == 0 {
        return Err(Error::format("IDX", "dimensions", format!("zero dimension in {dims:?}")));
    }
    let header = 4 + 4 * rank;
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::format(
            "IDX",
            "payload",
            format!("dimensions {dims:?} need {expected} bytes, found {}", payload.len()),
        ));
    }
    Ok((dims[0], dims[1], dims[2], channels, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "IDX",
            "magic",
            format!("expected 0x00000801 for labels, got {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "dimensions")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            "IDX",
            "payload",
            format!("{n} labels declared, found {} bytes", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<ImageDataset> {
    let (n, h, w, c, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if labels.len() != n {
        return Err(Error::format(
            "IDX",
            "count",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    ImageDataset::new(h, w, c, pixels, Some(labels), None)
}

/// Serialises a dataset as an IDX image file (greyscale or colour) and,
/// when it has labels, an IDX label file.
pub fn encode_idx(ds: &ImageDataset) -> Result<(Vec<u8>, Option<Vec<u8>>)> {
    let n = u32::try_from(ds.len()).map_err(|_| Error::invalid("too many images for IDX"))?;
    let mut img = Vec::with_capacity(20 + ds.pixels.len());
    if ds.channels == 1 {
        img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, ds.height as u32, ds.width as u32] {
            img.extend(d.to_be_bytes());
        }
    } else {
        img.extend(IDX_IMAGES_RGB_MAGIC.to_be_bytes());
        for d in [n, ds.height as u32, ds.width as u32, ds.channels as u32] {
            img.extend(d.to_be_bytes());
        }
    }
    img.extend_from_slice(&ds.pixels);
    let labels = match &ds.labels {
        Some(labels) => {
            if labels.iter().any(|&l| l > 255) {
                return Err(Error::invalid("IDX labels must fit in one byte"));
            }
            let mut out = Vec::with_capacity(8 + labels.len());
            out.extend(IDX_LABELS_MAGIC.to_be_bytes());
            out.extend(n.to_be_bytes());
            out.extend(labels.iter().map(|&l| l as u8));
            Some(out)
        }
        None => None,
    };
    Ok((img, labels))
}

/// Shape kinds drawn by [`synth_shapes`], in class-index order.
pub const SHAPE_KINDS: [&str; 8] = ["circle", "square", "triangle", "cross", "diamond", "ring", "tee", "bar"];

/// Width of the foreground hue range. Kept below the colour-jitter hue range so
/// hue alone cannot tell two images apart.
const HUE_BAND: f32 = 0.15;

fn inside(kind: usize, u: f32, v: f32) -> bool {
    match kind {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        // apex up, base down
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.9) / 1.7,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => u.abs() + v.abs() <= 1.0,
        5 => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        6 => ((v + 0.7).abs() <= 0.3 && u.abs() <= 1.0) || (u.abs() <= 0.3 && (-0.7..=1.0).contains(&v)),
        _ => u.abs() <= 1.0 && v.abs() <= 0.35,
    }
}

/// Converts HSV in `[0, 1]` to RGB.
pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Seeded synthetic dataset: one filled shape per RGB image, the class being
/// the shape kind. Image `i` has class `i % num_classes` and is drawn from its
/// own stream, so the result is a pure function of the arguments.
///
/// The shape is lit from above (lighter at its top edge, darker at its bottom)
/// on a flat background, so orientation can only be read off the object.
pub fn synth_shapes(n: usize, num_classes: usize, size: usize, seed: u64) -> Result<ImageDataset> {
    if !(2..=SHAPE_KINDS.len()).contains(&num_classes) {
        return Err(Error::invalid(format!(
            "synth_shapes supports 2..={} classes, got {num_classes}",
            SHAPE_KINDS.len()
        )));
    }
    if size < 16 {
        return Err(Error::invalid(format!("synth_shapes needs size >= 16, got {size}")));
    }
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    let s = size as f32;
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, i as u64]));
        let bg = rng.gen_range(0.2..0.4);
        let fg = hsv_to_rgb(rng.gen_range(0.0..HUE_BAND), rng.gen_range(0.5..1.0), rng.gen_range(0.6..0.85));
        let radius = rng.gen_range(0.2..0.4) * s;
        let cx = rng.gen_range(0.25..0.75) * s;
        let cy = rng.gen_range(0.25..0.75) * s;
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 + 0.5 - cx) / radius;
                let v = (y as f32 + 0.5 - cy) / radius;
                let on = inside(class, u, v);
                let shade = 1.15 - 0.2 * (v + 1.0);
                for ch in 0..3 {
                    let base = if on { fg[ch] * shade } else { bg };
                    let noisy = base + rng.gen_range(-0.08..0.08);
                    pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class);
    }
    let names = SHAPE_KINDS[..num_classes].iter().map(|s| s.to_string()).collect();
    ImageDataset::new(size, size, 3, pixels, Some(labels), Some(names))
}
