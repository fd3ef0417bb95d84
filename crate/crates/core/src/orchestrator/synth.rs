use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{ClassId, PrototypeMap, StdVec};
use crate::modelzoo::VtcDecoder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoded samples `x' ∈ [0,1]^d` with the class they were drawn for.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<ClassId>,
}

/// Draws `total` latents `c^y + σ⊙ε`, spread over the classes present in
/// `prototypes` so that per-class counts differ by at most one (lower class
/// ids receive the remainder). Rows are grouped by class.
pub fn sample_latents<T: Scalar, R: Rng>(
    prototypes: &PrototypeMap<T>,
    sigma: &StdVec<T>,
    total: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<ClassId>)> {
    if prototypes.is_empty() {
        return Err(Error::Generation("no initialized prototypes to sample from".into()));
    }
    let p = sigma.len();
    if let Some((y, c)) = prototypes.iter().find(|(_, c)| c.len() != p) {
        return Err(Error::Generation(format!(
            "prototype for class {y} has length {}, spread has {p}",
            c.len()
        )));
    }
    let classes = prototypes.len();
    let mut data = Vec::with_capacity(total * p);
    let mut labels = Vec::with_capacity(total);
    for (j, (&y, c)) in prototypes.iter().enumerate() {
        let count = total / classes + usize::from(j < total % classes);
        for _ in 0..count {
            data.extend(
                c.iter()
                    .zip(sigma.values())
                    .map(|(&m, &s)| m + s * T::of(rng.sample::<f64, _>(StandardNormal))),
            );
            labels.push(y);
        }
    }
    Ok((Tensor::from_vec(&[total, p], data)?, labels))
}

/// Samples latents as in [`sample_latents`] and decodes them with the
/// decoder's running normalization statistics.
pub fn generate_synthetic<T: Scalar, R: Rng>(
    decoder: &VtcDecoder<T>,
    prototypes: &PrototypeMap<T>,
    sigma: &StdVec<T>,
    total: usize,
    rng: &mut R,
) -> Result<SyntheticDataset<T>> {
    if sigma.len() != decoder.latent_dim() {
        return Err(Error::Generation(format!(
            "spread of length {} for a decoder with latent size {}",
            sigma.len(),
            decoder.latent_dim()
        )));
    }
    let (latents, labels) = sample_latents(prototypes, sigma, total, rng)?;
    let p = sigma.len();
    let mut out = Vec::with_capacity(total * decoder.output.iter().product::<usize>());
    for chunk in latents.data().chunks(256 * p) {
        let v = Tensor::from_vec(&[chunk.len() / p, p], chunk.to_vec())?;
        out.extend(decoder.generate(&v)?.into_data());
    }
    let mut shape = vec![total];
    shape.extend(decoder.output);
    let images = Tensor::from_vec(&shape, out)?;
    if !images.is_finite() {
        return Err(Error::Generation("decoder produced non-finite pixels".into()));
    }
    Ok(SyntheticDataset { images, labels })
}

fn to_byte<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first `count` images of a `[n, c, h, w]` tensor (c = 1 or 3)
/// as one PNG grid with `cols` tiles per row and a one-pixel gutter.
pub fn save_png_grid<T: Scalar>(images: &Tensor<T>, count: usize, cols: usize, path: &Path) -> Result<()> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::invalid(format!(
            "expected [n, c, h, w], got {:?}",
            images.shape()
        )));
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("cannot render {c}-channel images")));
    }
    let count = count.min(n);
    let cols = cols.clamp(1, count.max(1));
    let rows = count.div_ceil(cols);
    let (gw, gh) = ((cols * (w + 1) + 1) as u32, (rows * (h + 1) + 1) as u32);
    let pixel = |i: usize, ch: usize, y: usize, x: usize| to_byte(images.sample(i)[(ch * h + y) * w + x]);
    let origin = |i: usize| ((i % cols) * (w + 1) + 1, (i / cols) * (h + 1) + 1);
    let res = if c == 1 {
        let mut img: GrayImage = ImageBuffer::from_pixel(gw, gh, Luma([128]));
        for i in 0..count {
            let (ox, oy) = origin(i);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([pixel(i, 0, y, x)]));
                }
            }
        }
        img.save(path)
    } else {
        let mut img: RgbImage = ImageBuffer::from_pixel(gw, gh, Rgb([128, 128, 128]));
        for i in 0..count {
            let (ox, oy) = origin(i);
            for y in 0..h {
                for x in 0..w {
                    let rgb = [pixel(i, 0, y, x), pixel(i, 1, y, x), pixel(i, 2, y, x)];
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(rgb));
                }
            }
        }
        img.save(path)
    };
    res.map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}
