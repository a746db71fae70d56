//! Via branch: intensity encoding of the masks, reconstruction of an SEM-like
//! image, signed differencing against the original and candidate filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    train_with_progress, InMemoryDataset, Network, Tensor4, TrainConfig, TrainReport, Translator,
};
use crate::raster::{BinaryMask, GrayImage, PatchGrid};
use crate::regions::{label_components, region_properties, Connectivity, LabelMap, Region};
use crate::report::{ErrorReport, ViaFinding, VwbSummary};

/// Representative via, wire and background intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntensityTriple {
    pub v: u8,
    pub w: u8,
    pub b: u8,
    pub low_contrast: bool,
}

impl From<IntensityTriple> for VwbSummary {
    fn from(t: IntensityTriple) -> Self {
        VwbSummary {
            v: t.v,
            w: t.w,
            b: t.b,
            low_contrast: t.low_contrast,
        }
    }
}

pub const CONTRAST_FLOOR: u8 = 20;

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[u8], pct: f64) -> u8 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// 90th percentile of via pixels, median of wire-only pixels, 10th percentile of background.
pub fn estimate_vwb(osem: &GrayImage, w_mask: &BinaryMask, v_mask: &BinaryMask) -> Result<IntensityTriple> {
    estimate_vwb_with(osem, w_mask, v_mask, CONTRAST_FLOOR)
}

pub fn estimate_vwb_with(
    osem: &GrayImage,
    w_mask: &BinaryMask,
    v_mask: &BinaryMask,
    contrast_floor: u8,
) -> Result<IntensityTriple> {
    if w_mask.dims() != osem.dims() || v_mask.dims() != osem.dims() {
        return Err(Error::DimensionMismatch("image and masks differ in size".into()));
    }
    let (mut via, mut wire, mut bg) = (Vec::new(), Vec::new(), Vec::new());
    for ((&p, &w), &v) in osem.data().iter().zip(w_mask.data()).zip(v_mask.data()) {
        if v {
            via.push(p);
        } else if w {
            wire.push(p);
        } else {
            bg.push(p);
        }
    }
    for (name, class) in [("via", &mut via), ("wire", &mut wire), ("background", &mut bg)] {
        if class.is_empty() {
            return Err(Error::EmptyClass(format!("no {name} pixels")));
        }
        class.sort_unstable();
    }
    let (v, w, b) = (percentile(&via, 90.0), percentile(&wire, 50.0), percentile(&bg, 10.0));
    Ok(IntensityTriple {
        v,
        w,
        b,
        low_contrast: i16::from(v) - i16::from(w) < i16::from(contrast_floor),
    })
}

/// Paints vias, then wires, then background with the triple's levels.
pub fn encode_wv(w_mask: &BinaryMask, v_mask: &BinaryMask, t: &IntensityTriple) -> Result<GrayImage> {
    if w_mask.dims() != v_mask.dims() {
        return Err(Error::DimensionMismatch("wire and via masks differ in size".into()));
    }
    let data = w_mask
        .data()
        .iter()
        .zip(v_mask.data())
        .map(|(&w, &v)| if v { t.v } else if w { t.w } else { t.b })
        .collect();
    GrayImage::from_vec(w_mask.width(), w_mask.height(), data)
}

/// One image's worth of translator supervision.
#[derive(Debug, Clone)]
pub struct TranslatorImage {
    pub osem: GrayImage,
    pub w_mask: BinaryMask,
    pub v_mask: BinaryMask,
}

fn to_unit(img: &GrayImage) -> Vec<f32> {
    img.data().iter().map(|&v| f32::from(v) / 255.0).collect()
}

/// Non-overlapping `(encoded, oSEM)` patch pairs from every image, scaled to `[0, 1]`.
pub fn build_translator_pairs(images: &[TranslatorImage], patch_size: usize) -> Result<InMemoryDataset<f32>> {
    if images.is_empty() {
        return Err(Error::EmptyClass("no translator training images".into()));
    }
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for img in images {
        let t = estimate_vwb(&img.osem, &img.w_mask, &img.v_mask)?;
        let enc = encode_wv(&img.w_mask, &img.v_mask, &t)?;
        let (w, h) = img.osem.dims();
        let grid = PatchGrid::tile(w, h, patch_size, patch_size)?;
        for &(x, y) in &grid.origins {
            inputs.push(to_unit(&enc.extract_patch(x, y, patch_size)?));
            targets.push(to_unit(&img.osem.extract_patch(x, y, patch_size)?));
        }
    }
    let shape = [1, patch_size, patch_size];
    Ok(InMemoryDataset::paired(shape, inputs, shape, targets))
}

pub const TRANSLATOR_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Trains a fresh translator with the L1 loss.
pub fn train_translator(
    data: &InMemoryDataset<f32>,
    cfg: &TrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<(Translator<f32>, TrainReport)> {
    let mut model = Translator::new(&TRANSLATOR_WIDTHS, cfg.seed)?;
    let report = train_with_progress(&mut model, data, cfg, progress)?;
    Ok((model, report))
}

/// Translates `encoded` tile by tile (no blending) into a reconstructed SEM image.
pub fn reconstruct(model: &Translator<f32>, encoded: &GrayImage, grid: &PatchGrid) -> Result<GrayImage> {
    if (grid.width, grid.height) != encoded.dims() {
        return Err(Error::DimensionMismatch("grid does not match image".into()));
    }
    let ps = grid.patch_size;
    let mut out = GrayImage::new(encoded.width(), encoded.height());
    for &(x, y) in &grid.origins {
        let patch = encoded.extract_patch(x, y, ps)?;
        let y_hat = model.infer(&Tensor4::from_vec([1, 1, ps, ps], to_unit(&patch))?)?;
        let pixels = y_hat
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.paste(&GrayImage::from_vec(ps, ps, pixels)?, x, y)?;
    }
    Ok(out)
}

/// `d1 = max(r − o, 0)`, `d2 = max(o − r, 0)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffPair {
    pub d1: GrayImage,
    pub d2: GrayImage,
}

pub fn diff_images(osem: &GrayImage, rsem: &GrayImage) -> Result<DiffPair> {
    if osem.dims() != rsem.dims() {
        return Err(Error::DimensionMismatch("oSEM and rSEM differ in size".into()));
    }
    let (w, h) = osem.dims();
    let (d1, d2) = osem
        .data()
        .iter()
        .zip(rsem.data())
        .map(|(&o, &r)| (r.saturating_sub(o), o.saturating_sub(r)))
        .unzip();
    Ok(DiffPair {
        d1: GrayImage::from_vec(w, h, d1)?,
        d2: GrayImage::from_vec(w, h, d2)?,
    })
}

/// Accepted ranges for a candidate's bounding-box extent and mean intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateFilter {
    pub bbox_min: usize,
    pub bbox_max: usize,
    pub mean_min: f64,
    pub mean_max: f64,
}

impl CandidateFilter {
    /// Extent within `[0.5, 2] ×` the nominal via size, mean within `[binarize, 255]`.
    pub fn for_via_size(via_size: usize, binarize_threshold: u8) -> Self {
        CandidateFilter {
            bbox_min: via_size / 2,
            bbox_max: via_size * 2,
            mean_min: f64::from(binarize_threshold),
            mean_max: 255.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bbox_min > self.bbox_max || self.mean_min > self.mean_max {
            return Err(Error::InvalidParameter(format!("inverted filter ranges {self:?}")));
        }
        Ok(())
    }

    pub fn accepts(&self, r: &Region) -> bool {
        let extent = r.bbox_extent();
        let mean = r.mean_intensity.unwrap_or(0.0);
        (self.bbox_min..=self.bbox_max).contains(&extent) && mean >= self.mean_min && mean <= self.mean_max
    }
}

/// Regions surviving the filter, with the label map they index into.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub labels: LabelMap,
    pub regions: Vec<Region>,
}

impl Candidates {
    /// Whether region `r` shares at least one pixel with `mask`.
    pub fn overlaps(&self, r: &Region, mask: &BinaryMask) -> bool {
        let b = r.bbox;
        (b.y0..=b.y1).any(|y| (b.x0..=b.x1).any(|x| self.labels.get(x, y) == r.label && mask.get(x, y)))
    }
}

/// Binarizes `d` above `binarize_threshold` and keeps the components the filter accepts.
pub fn filter_candidates(d: &GrayImage, f: &CandidateFilter, binarize_threshold: u8) -> Result<Candidates> {
    let labels = label_components(&BinaryMask::threshold(d, binarize_threshold), Connectivity::Eight);
    let regions = region_properties(&labels, Some(d))?
        .into_iter()
        .filter(|r| f.accepts(r))
        .collect();
    Ok(Candidates { labels, regions })
}

fn finding(r: &Region) -> ViaFinding {
    ViaFinding {
        bbox: r.bbox,
        mean: r.mean_intensity.unwrap_or(0.0),
    }
}

/// D1 candidates on a segmented via are extra vias; D2 candidates away from
/// every segmented via are missed vias. Returns `(extra, miss)`.
pub fn classify_via_errors(
    d1: &Candidates,
    d2: &Candidates,
    v_mask: &BinaryMask,
) -> (Vec<ViaFinding>, Vec<ViaFinding>) {
    let extra = d1
        .regions
        .iter()
        .filter(|r| d1.overlaps(r, v_mask))
        .map(finding)
        .collect();
    let miss = d2
        .regions
        .iter()
        .filter(|r| !d2.overlaps(r, v_mask))
        .map(finding)
        .collect();
    (extra, miss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViaParams {
    pub patch_size: usize,
    pub binarize_threshold: u8,
    pub filter: CandidateFilter,
    pub contrast_floor: u8,
}

impl ViaParams {
    pub fn for_via_size(via_size: usize) -> Self {
        ViaParams {
            patch_size: 64,
            binarize_threshold: 40,
            filter: CandidateFilter::for_via_size(via_size, 40),
            contrast_floor: CONTRAST_FLOOR,
        }
    }
}

/// Intermediate images of a via detection run.
#[derive(Debug, Clone)]
pub struct ViaArtifacts {
    pub vwb: IntensityTriple,
    pub encoded: GrayImage,
    pub rsem: GrayImage,
    pub diff: DiffPair,
}

/// Full via detection on one image.
pub fn detect_via(
    model: &Translator<f32>,
    image_id: &str,
    osem: &GrayImage,
    w_mask: &BinaryMask,
    v_mask: &BinaryMask,
    params: &ViaParams,
) -> Result<(ErrorReport, ViaArtifacts)> {
    detect_via_with(image_id, osem, w_mask, v_mask, params, |encoded| {
        let (w, h) = encoded.dims();
        let grid = PatchGrid::tile(w, h, params.patch_size, params.patch_size)?;
        reconstruct(model, encoded, &grid)
    })
}

/// Via detection with a caller-supplied `encoded -> rSEM` translation.
pub fn detect_via_with(
    image_id: &str,
    osem: &GrayImage,
    w_mask: &BinaryMask,
    v_mask: &BinaryMask,
    params: &ViaParams,
    translate: impl FnOnce(&GrayImage) -> Result<GrayImage>,
) -> Result<(ErrorReport, ViaArtifacts)> {
    params.filter.validate()?;
    let vwb = estimate_vwb_with(osem, w_mask, v_mask, params.contrast_floor)?;
    let encoded = encode_wv(w_mask, v_mask, &vwb)?;
    let rsem = translate(&encoded)?;
    let diff = diff_images(osem, &rsem)?;
    let c1 = filter_candidates(&diff.d1, &params.filter, params.binarize_threshold)?;
    let c2 = filter_candidates(&diff.d2, &params.filter, params.binarize_threshold)?;
    let (extra, miss) = classify_via_errors(&c1, &c2, v_mask);
    let mut report = ErrorReport::new(image_id);
    report.width = Some(osem.width());
    report.height = Some(osem.height());
    report.extra = Some(extra);
    report.miss = Some(miss);
    report.vwb = Some(vwb.into());
    if vwb.low_contrast {
        report.warnings.push(format!(
            "low contrast between vias and wires: v - w = {} < {}",
            i16::from(vwb.v) - i16::from(vwb.w),
            params.contrast_floor
        ));
    }
    Ok((
        report,
        ViaArtifacts {
            vwb,
            encoded,
            rsem,
            diff,
        },
    ))
}
