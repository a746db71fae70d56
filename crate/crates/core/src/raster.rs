//! Raster types shared by every stage of the pipeline, plus PNG/PGM I/O and
//! patch geometry.
//!
//! Coordinates are `(x, y)` = `(column, row)` with the origin at the top-left
//! corner; all buffers are row-major.

use std::io::BufWriter;
use std::path::Path;

use image::{DynamicImage, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive pixel rectangle `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for Rect {
    fn from(v: [usize; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1, "degenerate rect");
        Rect { x0, y0, x1, y1 }
    }

    /// Square of side `size` with top-left corner at `(x, y)`.
    pub fn square(x: usize, y: usize, size: usize) -> Self {
        Rect::new(x, y, x + size - 1, y + size - 1)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    /// Grows the rectangle by `margin` on every side, clipped to a `width × height` image.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> Rect {
        Rect::new(
            self.x0.saturating_sub(margin),
            self.y0.saturating_sub(margin),
            (self.x1 + margin).min(width - 1),
            (self.y1 + margin).min(height - 1),
        )
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x1 < width && self.y1 < height
    }
}

/// Incrementally grown bounding box.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BoxAccumulator(Option<Rect>);

impl BoxAccumulator {
    pub fn add(&mut self, x: usize, y: usize) {
        self.0 = Some(match self.0 {
            None => Rect::new(x, y, x, y),
            Some(r) => Rect::new(r.x0.min(x), r.y0.min(y), r.x1.max(x), r.y1.max(y)),
        });
    }

    pub fn get(self) -> Option<Rect> {
        self.0
    }
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn extract_patch(&self, x: usize, y: usize, size: usize) -> Result<GrayImage> {
        check_patch(self.width, self.height, x, y, size)?;
        let mut data = Vec::with_capacity(size * size);
        for row in y..y + size {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + size]);
        }
        Ok(GrayImage {
            width: size,
            height: size,
            data,
        })
    }

    pub fn crop(&self, r: &Rect) -> Result<GrayImage> {
        if !r.fits_in(self.width, self.height) {
            return Err(Error::OutOfBounds(format!("{r:?} outside {}x{}", self.width, self.height)));
        }
        Ok(GrayImage::from_fn(r.width(), r.height(), |x, y| {
            self.get(r.x0 + x, r.y0 + y)
        }))
    }

    /// Copies `patch` into this image with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, patch: &GrayImage, x: usize, y: usize) -> Result<()> {
        if x + patch.width > self.width || y + patch.height > self.height {
            return Err(Error::OutOfBounds(format!(
                "{}x{} patch at ({x},{y}) in {}x{}",
                patch.width, patch.height, self.width, self.height
            )));
        }
        for row in 0..patch.height {
            let dst = (y + row) * self.width + x;
            let src = row * patch.width;
            self.data[dst..dst + patch.width].copy_from_slice(&patch.data[src..src + patch.width]);
        }
        Ok(())
    }
}

/// Binary segmentation raster (`true` = foreground).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            data,
        }
    }

    /// Foreground where `img > threshold`.
    pub fn threshold(img: &GrayImage, threshold: u8) -> Self {
        BinaryMask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn fill_rect(&mut self, r: &Rect, v: bool) {
        for y in r.y0..=r.y1.min(self.height - 1) {
            for x in r.x0..=r.x1.min(self.width - 1) {
                self.set(x, y, v);
            }
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any_in(&self, r: &Rect) -> bool {
        (r.y0..=r.y1).any(|y| (r.x0..=r.x1).any(|x| self.get(x, y)))
    }

    pub fn transpose(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    /// Mask as a `{0, 255}` gray image.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn extract_patch(&self, x: usize, y: usize, size: usize) -> Result<BinaryMask> {
        check_patch(self.width, self.height, x, y, size)?;
        self.crop(&Rect::square(x, y, size))
    }

    pub fn crop(&self, r: &Rect) -> Result<BinaryMask> {
        if !r.fits_in(self.width, self.height) {
            return Err(Error::OutOfBounds(format!("{r:?} outside {}x{}", self.width, self.height)));
        }
        Ok(BinaryMask::from_fn(r.width(), r.height(), |x, y| {
            self.get(r.x0 + x, r.y0 + y)
        }))
    }

    /// Square-structuring-element dilation with the given radius (Chebyshev distance).
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        let (w, h) = (self.width, self.height);
        // Separable: horizontal pass then vertical pass.
        let mut tmp = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if self.get(x, y) {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(w - 1);
                    for xx in lo..=hi {
                        tmp.set(xx, y, true);
                    }
                }
            }
        }
        let mut out = BinaryMask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                if tmp.get(x, y) {
                    let lo = y.saturating_sub(radius);
                    let hi = (y + radius).min(h - 1);
                    for yy in lo..=hi {
                        out.set(x, yy, true);
                    }
                }
            }
        }
        out
    }
}

/// Up to three equally sized gray channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiChannelImage {
    channels: Vec<GrayImage>,
}

impl MultiChannelImage {
    pub fn new(channels: Vec<GrayImage>) -> Result<Self> {
        if channels.is_empty() || channels.len() > 3 {
            return Err(Error::InvalidParameter(format!(
                "channel count {} not in 1..=3",
                channels.len()
            )));
        }
        let dims = channels[0].dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(Error::DimensionMismatch("channels differ in size".into()));
        }
        Ok(MultiChannelImage { channels })
    }

    pub fn channels(&self) -> &[GrayImage] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn extract_patch(&self, x: usize, y: usize, size: usize) -> Result<MultiChannelImage> {
        let channels = self
            .channels
            .iter()
            .map(|c| c.extract_patch(x, y, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiChannelImage { channels })
    }
}

fn check_patch(width: usize, height: usize, x: usize, y: usize, size: usize) -> Result<()> {
    if size == 0 || x + size > width || y + size > height {
        return Err(Error::OutOfBounds(format!(
            "patch ({x},{y}) size {size} outside {width}x{height}"
        )));
    }
    Ok(())
}

/// Square patches laid over a `width × height` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// Regular tiling. The last row/column of origins is clamped so every patch
    /// stays inside the image and every pixel is covered.
    pub fn tile(width: usize, height: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || patch_size > width.min(height) {
            return Err(Error::InvalidParameter(format!(
                "patch size {patch_size} does not fit {width}x{height}"
            )));
        }
        if stride == 0 || stride > patch_size {
            return Err(Error::InvalidParameter(format!(
                "stride {stride} not in 1..={patch_size}"
            )));
        }
        let xs = axis_origins(width, patch_size, stride);
        let ys = axis_origins(height, patch_size, stride);
        let origins = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
            .collect();
        Ok(PatchGrid {
            width,
            height,
            patch_size,
            stride,
            origins,
        })
    }

    /// Arbitrary origins (e.g. randomly sampled); each patch must lie inside the image.
    pub fn from_origins(
        width: usize,
        height: usize,
        patch_size: usize,
        origins: Vec<(usize, usize)>,
    ) -> Result<Self> {
        for &(x, y) in &origins {
            check_patch(width, height, x, y, patch_size)?;
        }
        Ok(PatchGrid {
            width,
            height,
            patch_size,
            stride: 1,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn rect(&self, origin: (usize, usize)) -> Rect {
        Rect::square(origin.0, origin.1, self.patch_size)
    }

    pub fn rects(&self) -> impl Iterator<Item = Rect> + '_ {
        self.origins.iter().map(|&o| self.rect(o))
    }
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *out.last().unwrap() + patch < len {
        out.push(len - patch);
    }
    out
}

/// Reads an 8-bit single-channel PNG or binary PGM.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            GrayImage::from_vec(w as usize, h as usize, buf.into_raw())
        }
        DynamicImage::ImageLuma16(_) => Err(Error::UnsupportedDepth(format!(
            "{}: 16-bit samples",
            path.display()
        ))),
        other => Err(Error::UnsupportedDepth(format!(
            "{}: {:?} is not 8-bit single-channel",
            path.display(),
            other.color()
        ))),
    }
}

/// Writes PNG, or binary PGM when the extension is `.pgm`.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let (w, h) = (img.width as u32, img.height as u32);
    let res = if is_pgm {
        image::codecs::pnm::PnmEncoder::new(out)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(
                image::codecs::pnm::SampleEncoding::Binary,
            ))
            .write_image(&img.data, w, h, image::ExtendedColorType::L8)
    } else {
        image::codecs::png::PngEncoder::new(out).write_image(
            &img.data,
            w,
            h,
            image::ExtendedColorType::L8,
        )
    };
    res.map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a mask stored as gray levels; foreground is `> 127`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(BinaryMask::threshold(&load_gray(path)?, 127))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_gray(&mask.to_gray(), path)
}

/// Writes an 8-bit RGB PNG (`data` is interleaved RGB).
pub fn save_rgb(width: usize, height: usize, data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width * height * 3 {
        return Err(Error::DimensionMismatch("rgb buffer size".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    image::codecs::png::PngEncoder::new(BufWriter::new(file))
        .write_image(data, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
