//! Wire branch: patch sampling and labelling, classifier training,
//! sliding-window inference and vote-based localization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conneval::{esd_label_patches_with, EsdOptions, Verdict};
use crate::error::{Error, Result};
use crate::extfeat::{encode_variant_with, Normalization, Variant};
use crate::neural::{
    class_weights, train_with_progress, Classifier, Dataset, Network, Targets, Tensor4,
    TrainConfig, TrainReport,
};
use crate::raster::{BinaryMask, MultiChannelImage, PatchGrid, Rect};
use crate::regions::{label_components, region_properties, Connectivity};
use crate::report::{ErrorReport, PatchVerdict};
use crate::synthgen::stage_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireParams {
    pub patch_size: usize,
    /// Inference stride; half the patch size gives up to four votes per pixel.
    pub stride: usize,
    pub vote_threshold: u32,
    pub variant: Variant,
    pub normalization: Normalization,
    pub esd: EsdOptions,
}

impl Default for WireParams {
    fn default() -> Self {
        WireParams {
            patch_size: 64,
            stride: 32,
            vote_threshold: 2,
            variant: Variant::WVH,
            normalization: Normalization::default(),
            esd: EsdOptions::default(),
        }
    }
}

/// One training patch: where it comes from and whether it holds an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireSample {
    pub image: usize,
    pub origin: (usize, usize),
    /// 1 = positive (error), 0 = negative.
    pub label: u8,
}

/// Ground-truth and candidate wire masks of one image.
#[derive(Debug, Clone)]
pub struct WirePair {
    pub id: String,
    pub gw: BinaryMask,
    pub ew: BinaryMask,
}

/// Draws `n_samples` uniformly placed, fully in-bounds patches (split evenly
/// across images) and labels them by electrically significant difference.
pub fn sample_wire_patches(
    pairs: &[WirePair],
    n_samples: usize,
    patch_size: usize,
    esd: &EsdOptions,
    seed: u64,
) -> Result<Vec<WireSample>> {
    if pairs.is_empty() || n_samples == 0 {
        return Err(Error::EmptyClass("no images or samples requested".into()));
    }
    let mut out = Vec::with_capacity(n_samples);
    for (i, pair) in pairs.iter().enumerate() {
        let (w, h) = pair.gw.dims();
        if pair.ew.dims() != (w, h) {
            return Err(Error::DimensionMismatch(format!("masks of {}", pair.id)));
        }
        if patch_size == 0 || patch_size > w.min(h) {
            return Err(Error::InvalidParameter(format!(
                "patch size {patch_size} does not fit {}",
                pair.id
            )));
        }
        let count = n_samples / pairs.len() + usize::from(i < n_samples % pairs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, i as u64));
        let origins: Vec<(usize, usize)> = (0..count)
            .map(|_| {
                (
                    rng.random_range(0..=w - patch_size),
                    rng.random_range(0..=h - patch_size),
                )
            })
            .collect();
        let grid = PatchGrid::from_origins(w, h, patch_size, origins)?;
        for label in esd_label_patches_with(&pair.gw, &pair.ew, &grid, esd)? {
            out.push(WireSample {
                image: i,
                origin: label.origin,
                label: u8::from(label.verdict == Verdict::Error),
            });
        }
    }
    Ok(out)
}

/// Training set backed by full-image feature stacks; patches are cropped on demand.
#[derive(Debug, Clone)]
pub struct WireDataset {
    pub variant: Variant,
    pub patch_size: usize,
    pub stacks: Vec<MultiChannelImage>,
    pub samples: Vec<WireSample>,
}

impl WireDataset {
    /// Encodes each candidate mask once at full size.
    pub fn new(
        pairs: &[WirePair],
        samples: Vec<WireSample>,
        patch_size: usize,
        variant: Variant,
        norm: Normalization,
    ) -> Self {
        WireDataset {
            variant,
            patch_size,
            stacks: pairs
                .iter()
                .map(|p| encode_variant_with(&p.ew, variant, norm))
                .collect(),
            samples,
        }
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.samples.len() as f64
        }
    }

    /// The input stack of sample `i`, cropped from its full-image stack.
    pub fn sample_stack(&self, i: usize) -> Result<MultiChannelImage> {
        let s = &self.samples[i];
        self.stacks[s.image].extract_patch(s.origin.0, s.origin.1, self.patch_size)
    }
}

/// Appends a patch of `stack` to `buf` as normalized `[c, h, w]` floats.
fn push_patch(buf: &mut Vec<f32>, stack: &MultiChannelImage, x: usize, y: usize, size: usize) {
    for ch in stack.channels() {
        let w = ch.width();
        for row in y..y + size {
            buf.extend(ch.data()[row * w + x..row * w + x + size].iter().map(|&v| f32::from(v) / 255.0));
        }
    }
}

impl Dataset<f32> for WireDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor4<f32>, Targets<f32>)> {
        let c = self.variant.channels();
        let ps = self.patch_size;
        let mut data = Vec::with_capacity(indices.len() * c * ps * ps);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            push_patch(&mut data, &self.stacks[s.image], s.origin.0, s.origin.1, ps);
            labels.push(s.label);
        }
        Ok((
            Tensor4::from_vec([indices.len(), c, ps, ps], data)?,
            Targets::Labels(labels),
        ))
    }
}

/// Samples, labels and encodes a wire training set in one step.
pub fn build_wire_dataset(
    pairs: &[WirePair],
    n_samples: usize,
    params: &WireParams,
    seed: u64,
) -> Result<WireDataset> {
    let samples = sample_wire_patches(pairs, n_samples, params.patch_size, &params.esd, seed)?;
    Ok(WireDataset::new(
        pairs,
        samples,
        params.patch_size,
        params.variant,
        params.normalization,
    ))
}

pub const CLASSIFIER_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Trains a fresh classifier with class weights derived from the sample counts.
pub fn train_wire_classifier(
    data: &WireDataset,
    cfg: &TrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<(Classifier<f32>, TrainReport)> {
    let p = data.positives();
    let n = data.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::EmptyClass(format!(
            "wire training set has {p} positive and {n} negative samples"
        )));
    }
    let mut cfg = cfg.clone();
    cfg.class_weights = Some(class_weights(p, n)?);
    let mut model = Classifier::new(data.variant.channels(), &CLASSIFIER_WIDTHS, cfg.seed)?;
    let report = train_with_progress(&mut model, data, &cfg, progress)?;
    Ok((model, report))
}

/// Number of worker threads, capped by `ICSV_THREADS` when set.
pub fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ICSV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(avail),
        _ => avail,
    }
}

const INFER_BATCH: usize = 64;

/// Classifies every grid patch of `ew`; features are computed once on the full mask.
pub fn classify_patches(
    model: &Classifier<f32>,
    ew: &BinaryMask,
    grid: &PatchGrid,
    variant: Variant,
    norm: Normalization,
) -> Result<Vec<PatchVerdict>> {
    if model.in_channels() != variant.channels() {
        return Err(Error::Shape(format!(
            "model takes {} channels but variant {variant} has {}",
            model.in_channels(),
            variant.channels()
        )));
    }
    let stack = encode_variant_with(ew, variant, norm);
    classify_stack(model, &stack, grid)
}

pub fn classify_stack(
    model: &Classifier<f32>,
    stack: &MultiChannelImage,
    grid: &PatchGrid,
) -> Result<Vec<PatchVerdict>> {
    let ps = grid.patch_size;
    let c = stack.channel_count();
    let run = |origins: &[(usize, usize)]| -> Result<Vec<PatchVerdict>> {
        let mut out = Vec::with_capacity(origins.len());
        for chunk in origins.chunks(INFER_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * c * ps * ps);
            for &(x, y) in chunk {
                push_patch(&mut data, stack, x, y, ps);
            }
            let logits = model.infer(&Tensor4::from_vec([chunk.len(), c, ps, ps], data)?)?;
            for (i, &(x, y)) in chunk.iter().enumerate() {
                let z = logits.item(i);
                out.push(PatchVerdict { x, y, p: z[0], n: z[1] });
            }
        }
        Ok(out)
    };
    let threads = worker_threads().min(grid.len().div_ceil(INFER_BATCH)).max(1);
    if threads == 1 {
        return run(&grid.origins);
    }
    let per = grid.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = grid.origins.chunks(per).map(|part| s.spawn(move || run(part))).collect();
        let mut out = Vec::with_capacity(grid.len());
        for h in handles {
            out.extend(h.join().expect("inference worker panicked")?);
        }
        Ok(out)
    })
}

/// Per-pixel votes and the boxes where enough positive patches agree.
#[derive(Debug, Clone, PartialEq)]
pub struct WireDetection {
    pub verdicts: Vec<PatchVerdict>,
    pub width: usize,
    pub height: usize,
    pub vote_map: Vec<u32>,
    pub error_boxes: Vec<Rect>,
}

impl WireDetection {
    pub fn votes(&self, x: usize, y: usize) -> u32 {
        self.vote_map[y * self.width + x]
    }
}

/// Counts positive patches over each pixel and boxes the 8-connected regions
/// with at least `vote_threshold` votes.
pub fn vote_localize(
    verdicts: &[PatchVerdict],
    patch_size: usize,
    width: usize,
    height: usize,
    vote_threshold: u32,
) -> Result<WireDetection> {
    if vote_threshold == 0 {
        return Err(Error::InvalidParameter("vote threshold must be at least 1".into()));
    }
    // 2-D difference array, then prefix sums.
    let (w1, h1) = (width + 1, height + 1);
    let mut diff = vec![0i64; w1 * h1];
    for v in verdicts.iter().filter(|v| v.positive()) {
        let r = Rect::square(v.x, v.y, patch_size);
        if !r.fits_in(width, height) {
            return Err(Error::OutOfBounds(format!("patch at ({}, {})", v.x, v.y)));
        }
        diff[r.y0 * w1 + r.x0] += 1;
        diff[r.y0 * w1 + r.x1 + 1] -= 1;
        diff[(r.y1 + 1) * w1 + r.x0] -= 1;
        diff[(r.y1 + 1) * w1 + r.x1 + 1] += 1;
    }
    for y in 0..h1 {
        for x in 1..w1 {
            diff[y * w1 + x] += diff[y * w1 + x - 1];
        }
    }
    for y in 1..h1 {
        for x in 0..w1 {
            diff[y * w1 + x] += diff[(y - 1) * w1 + x];
        }
    }
    let vote_map: Vec<u32> = (0..width * height)
        .map(|i| diff[(i / width) * w1 + i % width] as u32)
        .collect();
    let hot = BinaryMask::from_fn(width, height, |x, y| vote_map[y * width + x] >= vote_threshold);
    let labels = label_components(&hot, Connectivity::Eight);
    let error_boxes = region_properties(&labels, None)?
        .into_iter()
        .map(|r| r.bbox)
        .collect();
    Ok(WireDetection {
        verdicts: verdicts.to_vec(),
        width,
        height,
        vote_map,
        error_boxes,
    })
}

/// Full wire detection on one candidate mask.
pub fn detect_wire(
    model: &Classifier<f32>,
    image_id: &str,
    ew: &BinaryMask,
    params: &WireParams,
) -> Result<(ErrorReport, WireDetection)> {
    let (w, h) = ew.dims();
    let grid = PatchGrid::tile(w, h, params.patch_size, params.stride)?;
    let verdicts = classify_patches(model, ew, &grid, params.variant, params.normalization)?;
    let det = vote_localize(&verdicts, params.patch_size, w, h, params.vote_threshold)?;
    let mut report = ErrorReport::new(image_id);
    report.width = Some(w);
    report.height = Some(h);
    report.patch_size = Some(params.patch_size);
    report.patch_verdicts = Some(det.verdicts.clone());
    report.error_boxes = Some(det.error_boxes.clone());
    Ok((report, det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Differentiable, LossKind, LrSchedule};
    use proptest::prelude::*;

    fn verdict(x: usize, y: usize, pos: bool) -> PatchVerdict {
        PatchVerdict {
            x,
            y,
            p: if pos { 1.0 } else { 0.0 },
            n: 0.5,
        }
    }

    #[test]
    fn no_positives_no_boxes() {
        let grid = PatchGrid::tile(64, 64, 16, 8).unwrap();
        let v: Vec<_> = grid.origins.iter().map(|&(x, y)| verdict(x, y, false)).collect();
        let d = vote_localize(&v, 16, 64, 64, 1).unwrap();
        assert!(d.error_boxes.is_empty());
        assert!(d.vote_map.iter().all(|&c| c == 0));
        assert!(vote_localize(&v, 16, 64, 64, 0).is_err());
    }

    #[test]
    fn four_overlapping_positives_localize_their_intersection() {
        let grid = PatchGrid::tile(64, 64, 16, 8).unwrap();
        let pos = [(16, 16), (24, 16), (16, 24), (24, 24)];
        let v: Vec<_> = grid
            .origins
            .iter()
            .map(|&(x, y)| verdict(x, y, pos.contains(&(x, y))))
            .collect();
        let d = vote_localize(&v, 16, 64, 64, 2).unwrap();
        assert_eq!(d.votes(26, 26), 4);
        assert_eq!(d.votes(18, 18), 1);
        assert_eq!(d.error_boxes.len(), 1);
        let b = d.error_boxes[0];
        // Pixels with ≥2 votes form a plus shape around the 4-way intersection.
        assert_eq!(b, Rect::new(16, 16, 39, 39));
        let d4 = vote_localize(&v, 16, 64, 64, 4).unwrap();
        assert_eq!(d4.error_boxes, vec![Rect::new(24, 24, 31, 31)]);
        assert_eq!(d.verdicts, v);
    }

    #[test]
    fn threshold_one_is_union_of_positive_patches() {
        let v = vec![verdict(0, 0, true), verdict(8, 8, true), verdict(40, 40, true)];
        let d = vote_localize(&v, 16, 64, 64, 1).unwrap();
        assert_eq!(d.error_boxes, vec![Rect::new(0, 0, 23, 23), Rect::new(40, 40, 55, 55)]);
    }

    fn toy_pairs() -> Vec<WirePair> {
        let mut gw = BinaryMask::new(64, 64);
        for k in 0..4 {
            gw.fill_rect(&Rect::new(4, 6 + 16 * k, 59, 9 + 16 * k), true);
        }
        let mut ew = gw.clone();
        ew.fill_rect(&Rect::new(30, 22, 33, 25), false);
        vec![WirePair {
            id: "t".into(),
            gw,
            ew,
        }]
    }

    #[test]
    fn sampling_is_deterministic_and_labels_follow_the_gap() {
        let pairs = toy_pairs();
        let esd = EsdOptions {
            margin: 16,
            ..EsdOptions::default()
        };
        let a = sample_wire_patches(&pairs, 200, 16, &esd, 3).unwrap();
        assert_eq!(a, sample_wire_patches(&pairs, 200, 16, &esd, 3).unwrap());
        assert_eq!(a.len(), 200);
        let gap = Rect::new(30, 22, 33, 25);
        for s in &a {
            let hit = Rect::square(s.origin.0, s.origin.1, 16).intersects(&gap);
            assert_eq!(s.label == 1, hit, "{s:?}");
        }
        let clean = vec![WirePair {
            id: "c".into(),
            gw: pairs[0].gw.clone(),
            ew: pairs[0].gw.clone(),
        }];
        assert!(sample_wire_patches(&clean, 50, 16, &esd, 1).unwrap().iter().all(|s| s.label == 0));
        assert!(sample_wire_patches(&[], 50, 16, &esd, 1).is_err());
    }

    #[test]
    fn dataset_crops_full_image_features() {
        let pairs = toy_pairs();
        let params = WireParams {
            patch_size: 16,
            ..WireParams::default()
        };
        let ds = build_wire_dataset(&pairs, 20, &params, 9).unwrap();
        let full = encode_variant_with(&pairs[0].ew, Variant::WVH, Normalization::default());
        for i in 0..ds.len() {
            let s = ds.samples[i];
            assert_eq!(ds.sample_stack(i).unwrap(), full.extract_patch(s.origin.0, s.origin.1, 16).unwrap());
        }
        let (x, t) = ds.batch(&[0, 1]).unwrap();
        assert_eq!(x.shape(), [2, 3, 16, 16]);
        assert!(matches!(t, Targets::Labels(l) if l.len() == 2));
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let zero = MultiChannelImage::new(vec![crate::raster::GrayImage::new(16, 16); 3]).unwrap();
        let one = MultiChannelImage::new(vec![crate::raster::GrayImage::filled(16, 16, 255); 3]).unwrap();
        let ds = WireDataset {
            variant: Variant::WVH,
            patch_size: 16,
            stacks: vec![zero, one],
            samples: (0..8)
                .map(|i| WireSample {
                    image: i % 2,
                    origin: (0, 0),
                    label: (i % 2) as u8,
                })
                .collect(),
        };
        let mut cfg = TrainConfig::new(LossKind::WeightedCe);
        cfg.epochs = 50;
        cfg.batch_size = 4;
        cfg.lr = 0.05;
        cfg.lr_schedule = LrSchedule::Constant;
        cfg.seed = 1;
        let (model, report) = train_wire_classifier(&ds, &cfg, |_, _| {}).unwrap();
        assert_eq!(report.steps, 100);
        let grid = PatchGrid::from_origins(16, 16, 16, vec![(0, 0)]).unwrap();
        for (img, label) in [(0, false), (1, true)] {
            let v = classify_stack(&model, &ds.stacks[img], &grid).unwrap();
            assert_eq!(v.len(), 1);
            assert_eq!(v[0].positive(), label);
        }
        let (again, _) = train_wire_classifier(&ds, &cfg, |_, _| {}).unwrap();
        assert_eq!(again.flat_params(), model.flat_params());

        let mut single = ds.clone();
        single.samples.retain(|s| s.label == 0);
        assert!(matches!(train_wire_classifier(&single, &cfg, |_, _| {}), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn classify_checks_channels_and_is_pure() {
        let model = Classifier::<f32>::new(1, &CLASSIFIER_WIDTHS, 0).unwrap();
        let ew = toy_pairs().remove(0).ew;
        let grid = PatchGrid::from_origins(64, 64, 16, vec![(8, 8), (8, 8)]).unwrap();
        assert!(classify_patches(&model, &ew, &grid, Variant::WVH, Normalization::default()).is_err());
        let v = classify_patches(&model, &ew, &grid, Variant::W, Normalization::default()).unwrap();
        assert_eq!(v[0], v[1]);
        let tiles = PatchGrid::tile(1024, 1024, 256, 256).unwrap();
        assert_eq!(tiles.len(), 16);
    }

    proptest! {
        #[test]
        fn raising_threshold_shrinks_detections(bits in prop::collection::vec(any::<bool>(), 49), t in 1u32..4) {
            let grid = PatchGrid::tile(64, 64, 16, 8).unwrap();
            let v: Vec<_> = grid.origins.iter().zip(&bits).map(|(&(x, y), &b)| verdict(x, y, b)).collect();
            let lo = vote_localize(&v, 16, 64, 64, t).unwrap();
            let hi = vote_localize(&v, 16, 64, 64, t + 1).unwrap();
            prop_assert!(lo.vote_map.iter().all(|&c| c <= 4));
            for b in &hi.error_boxes {
                prop_assert!(lo.error_boxes.iter().any(|a| a.x0 <= b.x0 && a.y0 <= b.y0 && a.x1 >= b.x1 && a.y1 >= b.y1));
            }
            let area = |d: &WireDetection, t: u32| d.vote_map.iter().filter(|&&c| c >= t).count();
            prop_assert!(area(&hi, t + 1) <= area(&lo, t));
        }
    }
}
