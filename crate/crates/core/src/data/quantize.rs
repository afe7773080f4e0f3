//! A toy patch quantizer for grayscale images and PGM raster I/O.
//!
//! Pixels are intensities in `[0, 1]`. Each `p×p` patch is mean-pooled and
//! the mean binned uniformly into `levels` tokens.

use std::io::{BufRead, Write};

use super::{DataError, TokenGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::Shape(format!(
                "{} pixels do not fill a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DataError::Range(format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

fn bin(mean: f64, levels: usize) -> usize {
    ((mean * levels as f64).floor() as usize).min(levels - 1)
}

/// Centre of bin `token`.
pub fn bin_center(token: usize, levels: usize) -> f64 {
    (token as f64 + 0.5) / levels as f64
}

/// Mean of every `patch×patch` block, in raster order.
pub fn patch_means(image: &GrayImage, patch: usize) -> Result<Vec<f64>, DataError> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(DataError::Shape(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let mut means = vec![0.0; gh * gw];
    for r in 0..image.height {
        for c in 0..image.width {
            means[(r / patch) * gw + c / patch] += image.at(r, c);
        }
    }
    let area = (patch * patch) as f64;
    means.iter_mut().for_each(|m| *m /= area);
    Ok(means)
}

pub fn quantize_image(
    image: &GrayImage,
    patch: usize,
    levels: usize,
    label: usize,
) -> Result<TokenGrid, DataError> {
    if levels == 0 {
        return Err(DataError::Spec("levels must be at least 1".into()));
    }
    let means = patch_means(image, patch)?;
    let tokens = means.iter().map(|&m| bin(m, levels)).collect();
    TokenGrid::new(image.height / patch, image.width / patch, tokens, label)
}

/// Expands every token to a `patch×patch` block at its bin centre.
pub fn dequantize(grid: &TokenGrid, patch: usize, levels: usize) -> Result<GrayImage, DataError> {
    grid.validate(levels, usize::MAX)?;
    let (h, w) = (grid.height * patch, grid.width * patch);
    let mut pixels = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            pixels[r * w + c] = bin_center(grid.get(r / patch, c / patch), levels);
        }
    }
    GrayImage::new(h, w, pixels)
}

/// Binary (P5) PGM with maxval 255.
pub fn write_pgm<W: Write>(mut out: W, image: &GrayImage) -> Result<(), DataError> {
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|p| (p * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_pgm<R: BufRead>(mut input: R) -> Result<GrayImage, DataError> {
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(DataError::Parse("truncated PGM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "P5" {
        return Err(DataError::Parse(format!(
            "not a binary PGM (magic {:?})",
            header[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DataError::Parse(format!("bad PGM header field {s:?}")))
    };
    let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height];
    input.read_exact(&mut bytes)?;
    GrayImage::new(
        height,
        width,
        bytes
            .iter()
            .map(|&b| f64::from(b) / maxval as f64)
            .collect(),
    )
}
