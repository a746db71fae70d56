//! Run-length extension features of a wire mask and the classifier input
//! encodings built from them.
//!
//! The extension value of a foreground pixel is the length of the maximal
//! run of foreground pixels through it along one axis; background is 0.
//! Features must be computed on the full-size mask and only then cropped into
//! patches, so that each patch carries information about wires that leave it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage, MultiChannelImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionMap {
    width: usize,
    height: usize,
    axis: Axis,
    values: Vec<u32>,
}

impl ExtensionMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> u32 {
        self.values.iter().copied().max().unwrap_or(0)
    }

    pub fn transpose(&self) -> ExtensionMap {
        let mut values = vec![0; self.values.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                values[x * self.height + y] = self.get(x, y);
            }
        }
        ExtensionMap {
            width: self.height,
            height: self.width,
            axis: match self.axis {
                Axis::Horizontal => Axis::Vertical,
                Axis::Vertical => Axis::Horizontal,
            },
            values,
        }
    }
}

pub fn h_extension(mask: &BinaryMask) -> ExtensionMap {
    let (w, h) = mask.dims();
    let fg = mask.data();
    let mut values = vec![0u32; w * h];
    for y in 0..h {
        let row = &fg[y * w..(y + 1) * w];
        let out = &mut values[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            if !row[x] {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && row[x] {
                x += 1;
            }
            out[start..x].fill((x - start) as u32);
        }
    }
    ExtensionMap {
        width: w,
        height: h,
        axis: Axis::Horizontal,
        values,
    }
}

pub fn v_extension(mask: &BinaryMask) -> ExtensionMap {
    let (w, h) = mask.dims();
    let fg = mask.data();
    // Top-down: length of the run ending at each pixel.
    let mut values = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if fg[i] {
                values[i] = if y > 0 { values[i - w] + 1 } else { 1 };
            }
        }
    }
    // Bottom-up: propagate each run's full length (held at its last pixel).
    for y in (0..h.saturating_sub(1)).rev() {
        for x in 0..w {
            let i = y * w + x;
            if fg[i] && fg[i + w] {
                values[i] = values[i + w];
            }
        }
    }
    ExtensionMap {
        width: w,
        height: h,
        axis: Axis::Vertical,
        values,
    }
}

/// Denominator used to map run lengths into `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    /// Largest run length in the (full-size) map.
    #[default]
    ImageMax,
    /// Image extent along the feature's axis.
    ImageDimension,
}

/// `round_half_up(255 · value / M)`; an all-zero map (or `M = 0`) gives an all-zero image.
pub fn normalize_extension(ext: &ExtensionMap, norm: Normalization) -> GrayImage {
    let m = match norm {
        Normalization::ImageMax => ext.max(),
        Normalization::ImageDimension => match ext.axis {
            Axis::Horizontal => ext.width as u32,
            Axis::Vertical => ext.height as u32,
        },
    } as u64;
    let data = if m == 0 {
        vec![0; ext.values.len()]
    } else {
        ext.values
            .iter()
            .map(|&v| ((510 * v as u64 + m) / (2 * m)).min(255) as u8)
            .collect()
    };
    GrayImage::from_vec(ext.width, ext.height, data).expect("same dims")
}

/// Channels `(wire, V feature, H feature)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WvhStack(MultiChannelImage);

impl WvhStack {
    pub fn wire(&self) -> &GrayImage {
        &self.0.channels()[0]
    }

    pub fn v_feature(&self) -> &GrayImage {
        &self.0.channels()[1]
    }

    pub fn h_feature(&self) -> &GrayImage {
        &self.0.channels()[2]
    }

    pub fn into_inner(self) -> MultiChannelImage {
        self.0
    }
}

impl AsRef<MultiChannelImage> for WvhStack {
    fn as_ref(&self) -> &MultiChannelImage {
        &self.0
    }
}

pub fn build_stack(wire: &BinaryMask) -> WvhStack {
    build_stack_with(wire, Normalization::default())
}

pub fn build_stack_with(wire: &BinaryMask, norm: Normalization) -> WvhStack {
    let channels = vec![
        wire.to_gray(),
        normalize_extension(&v_extension(wire), norm),
        normalize_extension(&h_extension(wire), norm),
    ];
    WvhStack(MultiChannelImage::new(channels).expect("three equal channels"))
}

/// Classifier input encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Wire mask only.
    W,
    /// V and H features only.
    VH,
    /// Wire mask, V feature, H feature.
    WVH,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::W, Variant::VH, Variant::WVH];

    pub fn channels(self) -> usize {
        match self {
            Variant::W => 1,
            Variant::VH => 2,
            Variant::WVH => 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::W => "W",
            Variant::VH => "VH",
            Variant::WVH => "WVH",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "W" => Ok(Variant::W),
            "VH" => Ok(Variant::VH),
            "WVH" => Ok(Variant::WVH),
            _ => Err(Error::InvalidParameter(format!("unknown variant {s:?}"))),
        }
    }
}

pub fn encode_variant(wire: &BinaryMask, variant: Variant) -> MultiChannelImage {
    encode_variant_with(wire, variant, Normalization::default())
}

pub fn encode_variant_with(
    wire: &BinaryMask,
    variant: Variant,
    norm: Normalization,
) -> MultiChannelImage {
    match variant {
        Variant::W => MultiChannelImage::new(vec![wire.to_gray()]).expect("one channel"),
        Variant::VH => MultiChannelImage::new(vec![
            normalize_extension(&v_extension(wire), norm),
            normalize_extension(&h_extension(wire), norm),
        ])
        .expect("two channels"),
        Variant::WVH => build_stack_with(wire, norm).into_inner(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rect;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn row_mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_fn(bits.len(), 1, |x, _| bits[x] == 1)
    }

    /// Walks left and right from every pixel.
    fn scan_oracle_h(mask: &BinaryMask) -> Vec<u32> {
        let (w, h) = mask.dims();
        let mut out = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                let mut n = 1;
                let mut l = x;
                while l > 0 && mask.get(l - 1, y) {
                    l -= 1;
                    n += 1;
                }
                let mut r = x;
                while r + 1 < w && mask.get(r + 1, y) {
                    r += 1;
                    n += 1;
                }
                out[y * w + x] = n;
            }
        }
        out
    }

    fn scan_oracle_v(mask: &BinaryMask) -> Vec<u32> {
        let (w, h) = mask.dims();
        let mut out = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                let mut n = 1;
                let mut u = y;
                while u > 0 && mask.get(x, u - 1) {
                    u -= 1;
                    n += 1;
                }
                let mut d = y;
                while d + 1 < h && mask.get(x, d + 1) {
                    d += 1;
                    n += 1;
                }
                out[y * w + x] = n;
            }
        }
        out
    }

    fn random_mask(rng: &mut impl Rng, w: usize, h: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(w, h, |_, _| rng.random_bool(p))
    }

    #[test]
    fn h_extension_examples() {
        assert_eq!(h_extension(&row_mask(&[0, 1, 1, 1, 0])).values(), &[0, 3, 3, 3, 0]);
        let full = BinaryMask::from_fn(4, 4, |_, _| true);
        assert!(h_extension(&full).values().iter().all(|&v| v == 4));
        assert!(v_extension(&full).values().iter().all(|&v| v == 4));
    }

    #[test]
    fn v_extension_column() {
        let m = BinaryMask::from_fn(1, 5, |_, _| true);
        assert_eq!(v_extension(&m).values(), &[5; 5]);
    }

    #[test]
    fn extension_matches_scan_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = rng.random_range(0.2..0.9);
            let m = random_mask(&mut rng, 32, 32, p);
            assert_eq!(h_extension(&m).values(), scan_oracle_h(&m).as_slice());
            assert_eq!(v_extension(&m).values(), scan_oracle_v(&m).as_slice());
        }
    }

    #[test]
    fn normalize_examples() {
        let ext = h_extension(&row_mask(&[0, 1, 1, 1]));
        assert_eq!(normalize_extension(&ext, Normalization::ImageMax).data(), &[0, 255, 255, 255]);

        let zero = h_extension(&BinaryMask::new(3, 3));
        assert!(normalize_extension(&zero, Normalization::ImageMax)
            .data()
            .iter()
            .all(|&v| v == 0));

        // Runs of 1, 2 and 4 → round(255·v/4).
        let ext = h_extension(&row_mask(&[0, 1, 0, 1, 1, 0, 1, 1, 1, 1]));
        let img = normalize_extension(&ext, Normalization::ImageMax);
        assert_eq!(img.data(), &[0, 64, 0, 128, 128, 0, 255, 255, 255, 255]);

        let dim = normalize_extension(&ext, Normalization::ImageDimension);
        assert_eq!(dim.get(6, 0), 102); // round(255·4/10)
    }

    #[test]
    fn stack_examples() {
        let empty = build_stack(&BinaryMask::new(8, 8));
        for c in empty.as_ref().channels() {
            assert!(c.data().iter().all(|&v| v == 0));
        }
        let mut m = BinaryMask::new(16, 5);
        m.fill_rect(&Rect::new(0, 2, 15, 2), true);
        let s = build_stack(&m);
        for x in 0..16 {
            assert_eq!(s.h_feature().get(x, 2), 255);
            assert_eq!(s.wire().get(x, 2), 255);
        }
    }

    #[test]
    fn variants() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, 12, 9, 0.5);
        let w = encode_variant(&m, Variant::W);
        assert_eq!(w.channel_count(), 1);
        assert_eq!(w.channels()[0], m.to_gray());
        assert_eq!(encode_variant(&m, Variant::VH).channel_count(), 2);
        assert_eq!(encode_variant(&m, Variant::WVH), build_stack(&m).into_inner());
        assert!("XYZ".parse::<Variant>().is_err());
        assert_eq!("wvh".parse::<Variant>().unwrap(), Variant::WVH);
    }

    #[test]
    fn crop_of_full_features_differs_from_patch_recompute() {
        // A wire crossing the right border of the patch.
        let mut m = BinaryMask::new(64, 32);
        m.fill_rect(&Rect::new(4, 10, 60, 13), true);
        m.fill_rect(&Rect::new(2, 20, 11, 23), true);
        let full = build_stack(&m).into_inner().extract_patch(0, 0, 32).unwrap();
        let local = build_stack(&m.extract_patch(0, 0, 32).unwrap()).into_inner();
        assert_ne!(full, local);
        // Full-image H value of the crossing wire reflects its whole 57 px length.
        assert_eq!(full.channels()[2].get(10, 10), 255);
    }

    proptest! {
        #[test]
        fn h_reflection_invariance(bits in prop::collection::vec(any::<bool>(), 1..200), w in 1usize..20) {
            let h = bits.len().div_ceil(w);
            let m = BinaryMask::from_fn(w, h, |x, y| bits.get(y * w + x).copied().unwrap_or(false));
            let flipped = BinaryMask::from_fn(w, h, |x, y| m.get(w - 1 - x, y));
            let a = h_extension(&m);
            let b = h_extension(&flipped);
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(a.get(x, y), b.get(w - 1 - x, y));
                }
            }
            prop_assert_eq!(v_extension(&m), h_extension(&m.transpose()).transpose());
        }

        #[test]
        fn channels_zero_off_wire(bits in prop::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::from_vec(8, 8, bits).unwrap();
            let s = build_stack(&m);
            for i in 0..64 {
                if s.wire().data()[i] == 0 {
                    prop_assert_eq!(s.v_feature().data()[i], 0);
                    prop_assert_eq!(s.h_feature().data()[i], 0);
                } else {
                    prop_assert!(s.v_feature().data()[i] > 0 || v_extension(&m).max() > 510);
                }
            }
        }

        #[test]
        fn normalization_preserves_order_and_zero_set(bits in prop::collection::vec(any::<bool>(), 100)) {
            let m = BinaryMask::from_vec(100, 1, bits).unwrap();
            let ext = h_extension(&m);
            let img = normalize_extension(&ext, Normalization::ImageMax);
            let max = ext.max();
            for (i, &v) in ext.values().iter().enumerate() {
                prop_assert_eq!(v == 0, img.data()[i] == 0);
                prop_assert_eq!(max > 0 && v == max, img.data()[i] == 255);
                for (j, &u) in ext.values().iter().enumerate() {
                    if v <= u {
                        prop_assert!(img.data()[i] <= img.data()[j]);
                    }
                }
            }
        }
    }
}
