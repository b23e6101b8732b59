use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngKey};
use crate::tensor::Tensor;

/// Images in `[-1, 1]` with optional integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, R, R]`
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
    pub resolution: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        let (_, c, r, _) = self.images.dims4()?;
        self.images.slice_outer(i, i + 1)?.reshape(&[c, r, r])
    }

    /// Splits off the last `count` images (e.g. as a held-out set).
    pub fn split_tail(&self, count: usize) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        if count > n {
            return Err(Error::OutOfRange(format!("cannot hold out {count} of {n} images")));
        }
        let cut = n - count;
        let part = |a: usize, b: usize, tag: &str| -> Result<Dataset> {
            Ok(Dataset {
                images: self.images.slice_outer(a, b)?,
                labels: self.labels.as_ref().map(|l| l[a..b].to_vec()),
                num_classes: self.num_classes,
                resolution: self.resolution,
                provenance: format!("{} [{tag} {a}..{b}]", self.provenance),
            })
        };
        Ok((part(0, cut, "head")?, part(cut, n, "tail")?))
    }

    fn validate(&self) -> Result<()> {
        if let Some(v) = self.images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pixel value {v} outside [-1, 1]")));
        }
        if !self.resolution.is_multiple_of(4) {
            return Err(Error::InvalidResolution {
                resolution: self.resolution,
                reason: "dataset resolution must be divisible by 4".into(),
            });
        }
        Ok(())
    }
}

pub const SHAPE_FAMILIES: [&str; 4] = ["rectangle", "disk", "triangle", "cross"];

struct ShapeParams {
    family: usize,
    cx: f64,
    cy: f64,
    half: f64,
    border: f64,
    fill: [f64; 3],
    edge: [f64; 3],
    bg_a: [f64; 3],
    bg_b: [f64; 3],
    bg_dir: (f64, f64),
}

impl ShapeParams {
    /// Signed "inside depth": positive inside the shape, scaled in canvas units.
    fn depth(&self, u: f64, v: f64) -> f64 {
        let (dx, dy) = (u - self.cx, v - self.cy);
        let h = self.half;
        match self.family {
            0 => (h - dx.abs()).min(0.75 * h - dy.abs()),
            1 => h - (dx * dx + dy * dy).sqrt(),
            2 => {
                // upward triangle with apex at (0, -h) and base at y = +h
                let base = h - dy;
                let slope = 0.5 * (dy + h) - dx.abs();
                base.min(slope * 2.0 / 5f64.sqrt())
            }
            _ => {
                let arm = h / 3.0;
                let horiz = (h - dx.abs()).min(arm - dy.abs());
                let vert = (arm - dx.abs()).min(h - dy.abs());
                horiz.max(vert)
            }
        }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let d = self.depth(u, v);
        if d > self.border {
            self.fill
        } else if d > 0.0 {
            self.edge
        } else {
            let t = 0.5 + 0.5 * (u * self.bg_dir.0 + v * self.bg_dir.1) / 2f64.sqrt();
            std::array::from_fn(|k| self.bg_a[k] * (1.0 - t) + self.bg_b[k] * t)
        }
    }
}

/// Procedural dataset: one large shape per image, family determined by class.
///
/// Each image has a solid fill, a darker border and a smooth background
/// gradient, so an image is only plausible if distant regions agree.
pub fn synth_shapes(count: usize, resolution: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if resolution < 16 || !resolution.is_multiple_of(4) {
        return Err(Error::InvalidResolution {
            resolution,
            reason: "synthetic shapes need a resolution >= 16 divisible by 4".into(),
        });
    }
    let classes = num_classes.max(1);
    let key = RngKey::new(seed);
    let r = resolution;
    let mut data = Vec::with_capacity(count * 3 * r * r);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let mut rng = key.stream(Purpose::Data, i as u64, 0);
        let hue = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| -> [f64; 3] {
            std::array::from_fn(|_| rng.random_range(lo..hi))
        };
        let fill = hue(&mut rng, 0.0, 1.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let params = ShapeParams {
            family: label % SHAPE_FAMILIES.len(),
            cx: rng.random_range(-0.12..0.12),
            cy: rng.random_range(-0.12..0.12),
            half: rng.random_range(0.5..0.72),
            border: 2.5 * 2.0 / r as f64,
            edge: fill.map(|c| c * 0.35),
            fill,
            bg_a: hue(&mut rng, -0.9, -0.2),
            bg_b: hue(&mut rng, -0.9, -0.2),
            bg_dir: (angle.cos(), angle.sin()),
        };
        let mut img = vec![0.0f32; 3 * r * r];
        // 2x2 supersampling per pixel
        for y in 0..r {
            for x in 0..r {
                let mut acc = [0.0; 3];
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let u = -1.0 + 2.0 * (x as f64 + ox) / r as f64;
                    let v = -1.0 + 2.0 * (y as f64 + oy) / r as f64;
                    let c = params.color(u, v);
                    for k in 0..3 {
                        acc[k] += 0.25 * c[k];
                    }
                }
                for k in 0..3 {
                    img[k * r * r + y * r + x] = acc[k].clamp(-1.0, 1.0) as f32;
                }
            }
        }
        data.extend_from_slice(&img);
        labels.push(label);
    }
    let ds = Dataset {
        images: Tensor::from_vec(&[count, 3, r, r], data)?,
        labels: (num_classes > 0).then_some(labels),
        num_classes: (num_classes > 0).then_some(num_classes),
        resolution,
        provenance: format!("synth_shapes(n={count}, r={resolution}, classes={num_classes}, seed={seed})"),
    };
    ds.validate()?;
    Ok(ds)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn decode(path: &Path, resolution: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let img = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let r = resolution as u32;
    let img = img.resize_exact(r, r, FilterType::Triangle);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => {
            return Err(Error::config(
                "channels",
                format!("{c} channels unsupported (use 1 or 3)"),
            ))
        }
    };
    let hw = resolution * resolution;
    let mut out = vec![0.0f32; channels * hw];
    for (i, &v) in raw.iter().enumerate() {
        out[(i % channels) * hw + i / channels] = v as f32 / 127.5 - 1.0;
    }
    Ok(out)
}

/// Loads PNG files, one class per subdirectory when subdirectories exist.
///
/// Files are visited in lexicographic order. Undecodable files are skipped
/// with a warning.
pub fn load_image_dir(dir: &Path, resolution: usize, channels: usize) -> Result<Dataset> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let groups: Vec<(Option<usize>, Vec<PathBuf>)> = if subdirs.is_empty() {
        vec![(None, png_files(dir)?)]
    } else {
        subdirs
            .iter()
            .enumerate()
            .map(|(k, d)| Ok((Some(k), png_files(d)?)))
            .collect::<Result<_>>()?
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (label, files) in &groups {
        for f in files {
            match decode(f, resolution, channels) {
                Ok(px) => {
                    data.extend(px);
                    labels.push(label.unwrap_or(0));
                }
                Err(Error::Config { key, reason }) => return Err(Error::Config { key, reason }),
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let n = labels.len();
    let classes = (!subdirs.is_empty()).then_some(subdirs.len());
    let ds = Dataset {
        images: Tensor::from_vec(&[n, channels, resolution, resolution], data)?,
        labels: classes.map(|_| labels),
        num_classes: classes,
        resolution,
        provenance: format!("image directory {}", dir.display()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Maps `[-1, 1]` to `0..=255` with round-half-up, clamping out-of-range values.
pub fn to_u8(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn to_dynamic(img: &Tensor<f32>) -> Result<DynamicImage> {
    let (c, h, w) = img.dims3()?;
    let hw = h * w;
    let (wu, hu) = (w as u32, h as u32);
    match c {
        1 => {
            let px: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
            Ok(DynamicImage::ImageLuma8(
                ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, px).expect("buffer size"),
            ))
        }
        3 => {
            let mut px = Vec::with_capacity(3 * hw);
            for i in 0..hw {
                for k in 0..3 {
                    px.push(to_u8(img.data()[k * hw + i]));
                }
            }
            Ok(DynamicImage::ImageRgb8(
                ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, px).expect("buffer size"),
            ))
        }
        _ => Err(Error::shape(&[3, h, w], img.shape())),
    }
}

/// Encodes a `[C, h, w]` image (C = 1 or 3) as PNG bytes.
pub fn image_to_png_bytes(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    to_dynamic(img)?.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decodes PNG bytes to `[C, h, w]` in `[-1, 1]` without resizing.
pub fn png_bytes_to_image(bytes: &[u8], channels: usize) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => {
            return Err(Error::config(
                "channels",
                format!("{c} channels unsupported (use 1 or 3)"),
            ))
        }
    };
    let hw = h * w;
    let mut out = vec![0.0f32; channels * hw];
    for (i, &v) in raw.iter().enumerate() {
        out[(i % channels) * hw + i / channels] = v as f32 / 127.5 - 1.0;
    }
    Tensor::from_vec(&[channels, h, w], out)
}

pub fn save_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, image_to_png_bytes(img)?)?;
    Ok(())
}

/// Tiles a `[B, C, h, w]` batch into a near-square grid with 1-pixel gutters.
pub fn save_grid_png(batch: &Tensor<f32>, path: &Path) -> Result<()> {
    let (b, c, h, w) = batch.dims4()?;
    let cols = (b as f64).sqrt().ceil().max(1.0) as usize;
    let rows = b.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut canvas = Tensor::full(&[c, gh, gw], -1.0f32);
    for n in 0..b {
        let img = batch.slice_outer(n, n + 1)?.reshape(&[c, h, w])?;
        canvas.paste(&img, 1 + (n / cols) * (h + 1), 1 + (n % cols) * (w + 1))?;
    }
    save_png(&canvas, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_shapes(8, 16, 4, 3).unwrap();
        let b = synth_shapes(8, 16, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, synth_shapes(8, 16, 4, 4).unwrap().images);
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.labels.as_deref(), Some(&[0, 1, 2, 3, 0, 1, 2, 3][..]));
        assert!(synth_shapes(2, 12, 1, 0).is_err());
    }

    #[test]
    fn shapes_are_centered_and_large() {
        // every family covers the canvas center and leaves the corner as background
        let ds = synth_shapes(4, 32, 4, 1).unwrap();
        for i in 0..4 {
            let img = ds.image(i).unwrap();
            let center = img.data()[16 * 32 + 16];
            let corner = img.data()[0];
            assert!(corner <= -0.2 + 1e-6, "family {i} corner {corner}");
            assert_ne!(center, corner, "family {i}");
        }
    }

    #[test]
    fn u8_mapping_endpoints() {
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.0), 128); // 127.5 rounds half up
        assert_eq!(to_u8(7.0), 255);
        assert_eq!(to_u8(-3.0), 0);
    }

    #[test]
    fn png_decode_encode_is_idempotent() {
        let ds = synth_shapes(1, 16, 1, 0).unwrap();
        let first = image_to_png_bytes(&ds.image(0).unwrap()).unwrap();
        let decoded = png_bytes_to_image(&first, 3).unwrap();
        let second = image_to_png_bytes(&decoded).unwrap();
        assert_eq!(first, second);
        assert_eq!(png_bytes_to_image(&second, 3).unwrap(), decoded);
    }
}
