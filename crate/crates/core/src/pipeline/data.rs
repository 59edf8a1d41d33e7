//! Image and manifest I/O.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::eval::SparseGroundTruth;
use crate::tensor::{Shape, Tensor};

use super::augment::AugmentRecord;

/// A rectified stereo pair, each image `1 x 3 x h x w` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub left_path: PathBuf,
    pub right_path: PathBuf,
    pub augment: Option<AugmentRecord>,
}

impl StereoSample {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(Error::shape("stereo pair", format!("left {} vs right {}", left.shape(), right.shape())));
        }
        Ok(StereoSample { left, right, left_path: PathBuf::new(), right_path: PathBuf::new(), augment: None })
    }

    pub fn height(&self) -> usize {
        self.left.shape().h()
    }

    pub fn width(&self) -> usize {
        self.left.shape().w()
    }
}

/// Decodes an 8-bit PNG or binary PPM into `1 x 3 x h x w`, scaled by 1/255.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

/// Writes a `1 x 3 x h x w` tensor in `[0, 1]` as an 8-bit PNG/PPM (by extension).
pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = t.shape().0;
    if c != 3 {
        return Err(Error::shape("save_image", format!("expected 3 channels, got {}", t.shape())));
    }
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|ch| (t.at([0, ch, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Parses a manifest of `left right` path pairs; relative paths resolve
/// against the manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [l, r] = fields[..] else {
            return Err(Error::data(
                path,
                format!("line {}: expected `left_path right_path`, got {} fields", lineno + 1, fields.len()),
            ));
        };
        pairs.push((base.join(l), base.join(r)));
    }
    Ok(pairs)
}

/// Loads every pair in the manifest, in order.
pub fn load_pairs(manifest: &Path) -> Result<Vec<StereoSample>> {
    read_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(k, (lp, rp))| {
            let ctx = |e: Error| Error::data(manifest, format!("entry {}: {e}", k + 1));
            let left = load_image(&lp).map_err(ctx)?;
            let right = load_image(&rp).map_err(ctx)?;
            if left.shape() != right.shape() {
                let (a, b) = (left.shape(), right.shape());
                return Err(Error::data(
                    manifest,
                    format!(
                        "entry {}: size mismatch, left {} is {}x{} but right {} is {}x{}",
                        k + 1,
                        lp.display(),
                        a.h(),
                        a.w(),
                        rp.display(),
                        b.h(),
                        b.w()
                    ),
                ));
            }
            Ok(StereoSample { left, right, left_path: lp, right_path: rp, augment: None })
        })
        .collect()
}

/// Writes a single-channel map as a 16-bit PGM with values `round(v * scale)`.
pub fn write_pgm16(path: &Path, t: &Tensor<f32>, scale: f32) -> Result<()> {
    let [_, _, h, w] = t.shape().0;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(t.at([0, 0, y as usize, x as usize]) * scale).round().clamp(0.0, u16::MAX as f32) as u16])
    });
    pgm_encoder(path, (w, h), u16::MAX as u32)?
        .encode(img.as_raw().as_slice(), w as u32, h as u32, ExtendedColorType::L16)
        .map_err(|e| Error::data(path, e.to_string()))
}

fn pgm_encoder(path: &Path, (w, h): (usize, usize), maxwhite: u32) -> Result<PnmEncoder<BufWriter<fs::File>>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = GraymapHeader { encoding: SampleEncoding::Binary, width: w as u32, height: h as u32, maxwhite };
    Ok(PnmEncoder::new(BufWriter::new(file)).with_header(header.into()))
}

/// Writes a single-channel map in `[0, 1]` as an 8-bit PGM scaled by 255.
pub fn write_pgm8(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [_, _, h, w] = t.shape().0;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(t.at([0, 0, y as usize, x as usize]).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    pgm_encoder(path, (w, h), 255)?
        .encode(img.as_raw().as_slice(), w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::data(path, e.to_string()))
}

/// Reads a 16-bit disparity map stored as `disparity * 256`, where 0 marks
/// a missing measurement.
pub fn load_sparse_disparity(path: &Path) -> Result<SparseGroundTruth> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let valid = raw.iter().map(|&v| v > 0).collect();
    let values = raw.iter().map(|&v| v as f64 / 256.0).collect();
    SparseGroundTruth::new(h, w, values, valid)
}

/// Writes sparse ground truth in the same 16-bit encoding.
pub fn save_sparse_disparity(path: &Path, gt: &SparseGroundTruth) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(gt.width as u32, gt.height as u32, |x, y| {
        let k = y as usize * gt.width + x as usize;
        let v = if gt.valid[k] { (gt.values[k] * 256.0).round().clamp(1.0, u16::MAX as f64) as u16 } else { 0 };
        Luma([v])
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_and_normalisation() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(Shape::new(1, 3, 2, 3), |[_, c, i, j]| if c == 0 && i == 0 && j == 0 { 1.0 } else { 0.2 });
        let p = dir.path().join("a.png");
        save_image(&p, &t).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.at([0, 0, 0, 0]), 1.0);
        assert_eq!(back.at([0, 1, 1, 2]), 51.0 / 255.0);
        let q = dir.path().join("a.ppm");
        save_image(&q, &t).unwrap();
        assert_eq!(load_image(&q).unwrap(), back);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        fs::write(&m, "# nothing\n\n").unwrap();
        assert!(load_pairs(&m).unwrap().is_empty());

        save_image(&dir.path().join("l.png"), &Tensor::zeros(Shape::new(1, 3, 2, 4))).unwrap();
        save_image(&dir.path().join("r.png"), &Tensor::zeros(Shape::new(1, 3, 3, 4))).unwrap();
        fs::write(&m, "l.png r.png\n").unwrap();
        let err = load_pairs(&m).unwrap_err().to_string();
        assert!(err.contains("2x4") && err.contains("3x4"), "{err}");

        fs::write(&m, "l.png\n").unwrap();
        assert!(load_pairs(&m).unwrap_err().to_string().contains("line 1"));
        fs::write(&m, "l.png missing.png\n").unwrap();
        assert!(load_pairs(&m).unwrap_err().to_string().contains("entry 1"));
    }

    #[test]
    fn pgm_and_sparse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Tensor::from_fn(Shape::new(1, 1, 2, 2), |[_, _, i, j]| (i * 2 + j) as f32 * 10.5);
        let p = dir.path().join("d.pgm");
        write_pgm16(&p, &d, 256.0).unwrap();
        let img = image::open(&p).unwrap().into_luma16();
        assert_eq!(img.get_pixel(1, 1).0[0], (31.5 * 256.0) as u16);
        let text = fs::read(&p).unwrap();
        assert_eq!(&text[..2], b"P5");

        let gt = SparseGroundTruth::new(1, 3, vec![0.0, 12.25, 3.5], vec![false, true, true]).unwrap();
        let g = dir.path().join("gt.png");
        save_sparse_disparity(&g, &gt).unwrap();
        assert_eq!(load_sparse_disparity(&g).unwrap(), gt);
    }
}
