//! Labeled images, the synthetic shape dataset and the `SEMD` file format.
//!
//! `SEMD` layout (little-endian): magic `SEMD`, version `u16`, num_classes
//! `u16`, count `u32`, height `u16`, width `u16`, channels `u16`, then per
//! image: id `u32`, label `u16`, `channels * height * width` `f32` pixels in
//! channel-major, row-major order.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SEMD";
pub const DATASET_VERSION: u16 = 1;
pub const CHANNELS: usize = 3;

/// Amplitude of the uniform background texture.
pub const BACKGROUND_AMPLITUDE: f64 = 0.2;
/// Brightest channel value of a shape's fill colour.
pub const SHAPE_INTENSITY: f64 = 0.9;
const SHAPE_SATURATION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u32,
    pub label: usize,
    /// `(3, h, w)`, values in `[0, 1]`.
    pub pixels: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<LabeledImage>,
    num_classes: usize,
    height: usize,
    width: usize,
    split: Split,
}

impl Dataset {
    /// Validates that every image is `(3, height, width)` with pixels in
    /// `[0, 1]` and a label below `num_classes`.
    pub fn new(
        images: Vec<LabeledImage>,
        num_classes: usize,
        height: usize,
        width: usize,
        split: Split,
    ) -> Result<Self> {
        for img in &images {
            if img.pixels.shape() != [CHANNELS, height, width] {
                return Err(Error::shape(format!(
                    "image {} has shape {:?}, dataset is (3, {height}, {width})",
                    img.id,
                    img.pixels.shape()
                )));
            }
            if img.label >= num_classes {
                return Err(Error::arg(format!(
                    "image {} label {} >= {num_classes} classes",
                    img.id, img.label
                )));
            }
            if !img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::arg(format!(
                    "image {} has pixels outside [0, 1]",
                    img.id
                )));
            }
        }
        Ok(Self {
            images,
            num_classes,
            height,
            width,
            split,
        })
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn check_patch_size(&self, patch: usize) -> Result<()> {
        check_divisible(self.height, self.width, patch).map_err(Error::from)
    }

    /// Serializes to `SEMD` bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::arg(format!("{what} {v} exceeds u16")))
        };
        let mut out =
            Vec::with_capacity(18 + self.len() * (6 + 4 * CHANNELS * self.height * self.width));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&narrow(self.num_classes, "num_classes")?.to_le_bytes());
        let count = u32::try_from(self.len()).map_err(|_| Error::arg("too many images"))?;
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&narrow(self.height, "height")?.to_le_bytes());
        out.extend_from_slice(&narrow(self.width, "width")?.to_le_bytes());
        out.extend_from_slice(&(CHANNELS as u16).to_le_bytes());
        for img in &self.images {
            out.extend_from_slice(&img.id.to_le_bytes());
            out.extend_from_slice(&narrow(img.label, "label")?.to_le_bytes());
            put_f32s(&mut out, img.pixels.data());
        }
        Ok(out)
    }

    /// Parses `SEMD` bytes; `patch` is the patch size the images must tile.
    pub fn from_bytes(bytes: &[u8], patch: usize, split: Split) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let short = || FormatError::MalformedHeader("header shorter than 18 bytes".into());
        let magic = r.take(4).ok_or_else(short)?;
        if magic != DATASET_MAGIC {
            return Err(FormatError::BadMagic { expected: "SEMD" }.into());
        }
        let version = r.u16().ok_or_else(short)?;
        if version != DATASET_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let num_classes = r.u16().ok_or_else(short)? as usize;
        let count = r.u32().ok_or_else(short)? as usize;
        let height = r.u16().ok_or_else(short)? as usize;
        let width = r.u16().ok_or_else(short)? as usize;
        let channels = r.u16().ok_or_else(short)? as usize;
        if channels != CHANNELS {
            return Err(FormatError::MalformedHeader(format!(
                "expected 3 channels, got {channels}"
            ))
            .into());
        }
        if num_classes == 0 {
            return Err(FormatError::MalformedHeader("zero classes".into()).into());
        }
        check_divisible(height, width, patch)?;
        let pixels_per_image = CHANNELS * height * width;
        let record = 6 + 4 * pixels_per_image;
        if r.remaining() < count.saturating_mul(record) {
            return Err(FormatError::TruncatedPayload.into());
        }
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.u32().ok_or(FormatError::TruncatedPayload)?;
            let label = r.u16().ok_or(FormatError::TruncatedPayload)? as usize;
            let data = r
                .f32s(pixels_per_image)
                .ok_or(FormatError::TruncatedPayload)?;
            if label >= num_classes {
                return Err(FormatError::InvalidRecord(format!(
                    "image {id}: label {label} >= {num_classes} classes"
                ))
                .into());
            }
            if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(FormatError::InvalidRecord(format!(
                    "image {id}: pixel outside [0, 1]"
                ))
                .into());
            }
            images.push(LabeledImage {
                id,
                label,
                pixels: Tensor::new(&[CHANNELS, height, width], data)?,
            });
        }
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()).into());
        }
        Self::new(images, num_classes, height, width, split)
    }
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<(), FormatError> {
    if patch == 0 {
        return Err(FormatError::MalformedHeader("patch size 0".into()));
    }
    for extent in [height, width] {
        if extent == 0 || extent % patch != 0 {
            return Err(FormatError::NotDivisible { extent, patch });
        }
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    crate::tensor::write_atomic(path, &dataset.to_bytes()?)
}

pub fn load_dataset(path: &Path, patch: usize, split: Split) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?, patch, split)
}

/// Class shapes of the synthetic dataset, one per class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeTemplate {
    Disk,
    Square,
    Cross,
    Triangle,
    Ring,
    Diamond,
    Bars,
    Saltire,
}

impl ShapeTemplate {
    pub const ALL: [ShapeTemplate; 8] = [
        ShapeTemplate::Disk,
        ShapeTemplate::Square,
        ShapeTemplate::Cross,
        ShapeTemplate::Triangle,
        ShapeTemplate::Ring,
        ShapeTemplate::Diamond,
        ShapeTemplate::Bars,
        ShapeTemplate::Saltire,
    ];

    pub fn for_class(class: usize) -> Option<Self> {
        Self::ALL.get(class).copied()
    }

    /// Membership test in box coordinates `u, v` in `[-1, 1]`
    /// (`v` grows downwards).
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeTemplate::Disk => u * u + v * v <= 1.0,
            ShapeTemplate::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeTemplate::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
            ShapeTemplate::Triangle => u.abs() <= (v + 1.0) / 2.0,
            ShapeTemplate::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeTemplate::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeTemplate::Bars => {
                u.abs() <= 0.9 && ((v + 0.6).abs() <= 0.25 || (v - 0.6).abs() <= 0.25)
            }
            ShapeTemplate::Saltire => (u - v).abs() <= 0.35 || (u + v).abs() <= 0.35,
        }
    }

    /// Fill colour: a fixed hue per template at value [`SHAPE_INTENSITY`].
    pub fn color(self) -> [f64; 3] {
        let index = Self::ALL.iter().position(|&t| t == self).unwrap_or(0);
        hsv_to_rgb(
            index as f64 / Self::ALL.len() as f64,
            SHAPE_SATURATION,
            SHAPE_INTENSITY,
        )
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 32,
            height: 32,
            width: 32,
            patch: 8,
            seed: 7,
        }
    }
}

/// Side length of the square box a shape is drawn in.
pub fn shape_box_size(height: usize, width: usize) -> usize {
    (height.min(width) * 3 / 8).max(3)
}

/// Draws `template` with its box's top-left corner at `origin` over a
/// uniform-noise background drawn from `rng`.
pub fn render_shape<R: Rng + ?Sized>(
    template: ShapeTemplate,
    height: usize,
    width: usize,
    origin: (usize, usize),
    rng: &mut R,
) -> Tensor {
    let size = shape_box_size(height, width);
    let color = template.color();
    let mut pixels = Tensor::zeros(&[CHANNELS, height, width]);
    let data = pixels.data_mut();
    for v in data.iter_mut() {
        *v = (rng.random::<f64>() * BACKGROUND_AMPLITUDE) as f32 as f64;
    }
    let (top, left) = origin;
    for y in top..(top + size).min(height) {
        for x in left..(left + size).min(width) {
            // pixel centres mapped onto [-1, 1]
            let u = ((x - left) as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let v = ((y - top) as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            if template.contains(u, v) {
                for (c, &value) in color.iter().enumerate() {
                    data[(c * height + y) * width + x] = value as f32 as f64;
                }
            }
        }
    }
    pixels
}

/// Deterministic toy dataset: class `c` is [`ShapeTemplate::ALL`]`[c]` at a
/// random position on noise. Labels cycle `0, 1, .., C-1, 0, ..` so any
/// prefix is close to balanced.
pub fn generate_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let SyntheticSpec {
        num_classes,
        per_class,
        height,
        width,
        patch,
        seed,
    } = *spec;
    if num_classes < 2 {
        return Err(Error::arg("need at least 2 classes"));
    }
    if num_classes > ShapeTemplate::ALL.len() {
        return Err(Error::arg(format!(
            "{num_classes} classes requested, only {} shape templates exist",
            ShapeTemplate::ALL.len()
        )));
    }
    check_divisible(height, width, patch)?;
    let size = shape_box_size(height, width);
    if size > height || size > width {
        return Err(Error::arg("image too small for shape templates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = num_classes * per_class;
    let mut images = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % num_classes;
        let top = rng.random_range(0..=height - size);
        let left = rng.random_range(0..=width - size);
        let template = ShapeTemplate::for_class(label).expect("checked above");
        let pixels = render_shape(template, height, width, (top, left), &mut rng);
        images.push(LabeledImage {
            id: i as u32,
            label,
            pixels,
        });
    }
    Dataset::new(images, num_classes, height, width, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            per_class: 8,
            height: 32,
            width: 32,
            patch: 8,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_balanced_and_deterministic() {
        let a = generate_synthetic(&small(), Split::Train).unwrap();
        assert_eq!(a.len(), 32);
        let mut counts = [0; 4];
        for img in a.images() {
            counts[img.label] += 1;
        }
        assert_eq!(counts, [8; 4]);
        let b = generate_synthetic(&small(), Split::Train).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn shape_covers_under_a_quarter() {
        let spec = SyntheticSpec {
            num_classes: 2,
            per_class: 1,
            seed: 1,
            ..small()
        };
        let ds = generate_synthetic(&spec, Split::Train).unwrap();
        for img in ds.images() {
            let (h, w) = (32, 32);
            let mut above = 0;
            for y in 0..h {
                for x in 0..w {
                    if (0..3).any(|c| img.pixels.at(&[c, y, x]) > BACKGROUND_AMPLITUDE) {
                        above += 1;
                    }
                }
            }
            assert!(above > 0);
            assert!((above as f64) < 0.25 * (h * w) as f64, "{above} pixels");
        }
    }

    #[test]
    fn too_many_classes_rejected() {
        let spec = SyntheticSpec {
            num_classes: 9,
            ..small()
        };
        assert!(matches!(
            generate_synthetic(&spec, Split::Train),
            Err(Error::Argument(_))
        ));
        let spec = SyntheticSpec {
            num_classes: 1,
            ..small()
        };
        assert!(generate_synthetic(&spec, Split::Train).is_err());
    }

    #[test]
    fn templates_are_distinct_at_the_same_position() {
        for (i, a) in ShapeTemplate::ALL.iter().enumerate() {
            for b in &ShapeTemplate::ALL[i + 1..] {
                let ia = render_shape(*a, 32, 32, (5, 9), &mut ChaCha8Rng::seed_from_u64(3));
                let ib = render_shape(*b, 32, 32, (5, 9), &mut ChaCha8Rng::seed_from_u64(3));
                assert_ne!(ia, ib, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn semd_roundtrip() {
        let ds = generate_synthetic(&small(), Split::Train).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes, 8, Split::Train).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_rejected() {
        let ds = generate_synthetic(&small(), Split::Train).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 1], 8, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::TruncatedPayload)));
        let err = Dataset::from_bytes(&bytes[..10], 8, Split::Train).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::MalformedHeader(_))
        ));
    }

    #[test]
    fn indivisible_extent_rejected_at_load() {
        let img = LabeledImage {
            id: 0,
            label: 0,
            pixels: Tensor::zeros(&[3, 30, 32]),
        };
        let ds = Dataset::new(vec![img], 2, 30, 32, Split::Train).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let err = Dataset::from_bytes(&bytes, 8, Split::Train).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::NotDivisible {
                extent: 30,
                patch: 8
            })
        ));
        assert!(Dataset::from_bytes(&bytes, 2, Split::Train).is_ok());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let ds = generate_synthetic(&small(), Split::Train).unwrap();
        let mut bytes = ds.to_bytes().unwrap();
        // first record's label sits after the 18-byte header and 4-byte id
        bytes[22] = 9;
        let err = Dataset::from_bytes(&bytes, 8, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::InvalidRecord(_))));
    }
}
