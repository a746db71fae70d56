//! Connectivity-based evaluation: electrically significant differences between
//! wire masks, overlap matching of via masks, and recall/precision scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, BoxAccumulator, PatchGrid, Rect};
use crate::regions::{label_components, overlap_pairs, Connectivity, LabelMap};
use crate::report::ErrorReport;
use crate::synthgen::{ErrorKind, ErrorLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub kind: ErrorKind,
    pub bbox: Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabel {
    pub origin: (usize, usize),
    pub verdict: Verdict,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsdOptions {
    /// Context added around each patch before comparing components.
    pub margin: usize,
    pub connectivity: Connectivity,
    /// A ground-truth component with no candidate overlap is an open.
    pub vanished_is_open: bool,
    /// A candidate component with no ground-truth overlap is a short.
    pub phantom_is_short: bool,
}

impl Default for EsdOptions {
    fn default() -> Self {
        EsdOptions {
            margin: 64,
            connectivity: Connectivity::Eight,
            vanished_is_open: true,
            phantom_is_short: true,
        }
    }
}

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Regions where one `a` component is split across several `b` components:
/// boxes of the `a ∖ b` pieces that touch at least two of those `b` parts.
/// `a` components without any `b` overlap are reported whole when `orphans` is set.
fn split_boxes(
    a: &BinaryMask,
    b: &BinaryMask,
    la: &LabelMap,
    lb: &LabelMap,
    pairs: &[(u32, u32, usize)],
    conn: Connectivity,
    orphans: bool,
) -> Vec<Rect> {
    let (w, h) = a.dims();
    let mut partners: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); la.count() as usize + 1];
    for &(x, y, _) in pairs {
        partners[x as usize].insert(y);
    }
    let mut out = Vec::new();
    if orphans {
        let mut boxes: Vec<BoxAccumulator> = vec![BoxAccumulator::default(); la.count() as usize + 1];
        for (i, &l) in la.labels().iter().enumerate() {
            if l > 0 && partners[l as usize].is_empty() {
                boxes[l as usize].add(i % w, i / w);
            }
        }
        out.extend(boxes.into_iter().filter_map(BoxAccumulator::get));
    }
    let diff = BinaryMask::from_fn(w, h, |x, y| {
        let l = la.get(x, y);
        l > 0 && partners[l as usize].len() >= 2 && !b.get(x, y)
    });
    if diff.count() == 0 {
        return out;
    }
    let ld = label_components(&diff, conn);
    let n = ld.count() as usize;
    let mut touched: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n + 1];
    let mut boxes: Vec<BoxAccumulator> = vec![BoxAccumulator::default(); n + 1];
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ],
    };
    for y in 0..h {
        for x in 0..w {
            let d = ld.get(x, y) as usize;
            if d == 0 {
                continue;
            }
            boxes[d].add(x, y);
            let owner = &partners[la.get(x, y) as usize];
            for &(dx, dy) in offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let lbl = lb.get(nx as usize, ny as usize);
                if lbl > 0 && owner.contains(&lbl) {
                    touched[d].insert(lbl);
                }
            }
        }
    }
    out.extend(
        boxes
            .into_iter()
            .zip(&touched)
            .filter(|(_, t)| t.len() >= 2)
            .filter_map(|(b, _)| b.get()),
    );
    out
}

/// Opens and shorts separating `ew` from `gw` inside `window`, in image coordinates.
pub fn wire_diff_evidence(gw: &BinaryMask, ew: &BinaryMask, window: &Rect) -> Result<Vec<Evidence>> {
    wire_diff_evidence_with(gw, ew, window, &EsdOptions::default())
}

pub fn wire_diff_evidence_with(
    gw: &BinaryMask,
    ew: &BinaryMask,
    window: &Rect,
    opts: &EsdOptions,
) -> Result<Vec<Evidence>> {
    same_dims(gw, ew)?;
    let g = gw.crop(window)?;
    let e = ew.crop(window)?;
    if g == e {
        return Ok(Vec::new());
    }
    let lg = label_components(&g, opts.connectivity);
    let le = label_components(&e, opts.connectivity);
    let ge = overlap_pairs(&lg, &le)?;
    let eg: Vec<(u32, u32, usize)> = ge.iter().map(|&(a, b, c)| (b, a, c)).collect();
    let shift = |r: Rect| Rect::new(r.x0 + window.x0, r.y0 + window.y0, r.x1 + window.x0, r.y1 + window.y0);
    let mut out: Vec<Evidence> = split_boxes(&g, &e, &lg, &le, &ge, opts.connectivity, opts.vanished_is_open)
        .into_iter()
        .map(|b| Evidence {
            kind: ErrorKind::Open,
            bbox: shift(b),
        })
        .collect();
    out.extend(
        split_boxes(&e, &g, &le, &lg, &eg, opts.connectivity, opts.phantom_is_short)
            .into_iter()
            .map(|b| Evidence {
                kind: ErrorKind::Short,
                bbox: shift(b),
            }),
    );
    out.sort_by_key(|e| (e.bbox.y0, e.bbox.x0, e.bbox.y1, e.bbox.x1, e.kind));
    Ok(out)
}

/// Labels each grid patch Correct or Error from the evidence found in its
/// margin-expanded window; only evidence touching the patch itself counts.
pub fn esd_label_patches(
    gw: &BinaryMask,
    ew: &BinaryMask,
    grid: &PatchGrid,
    margin: usize,
) -> Result<Vec<PatchLabel>> {
    esd_label_patches_with(
        gw,
        ew,
        grid,
        &EsdOptions {
            margin,
            ..EsdOptions::default()
        },
    )
}

pub fn esd_label_patches_with(
    gw: &BinaryMask,
    ew: &BinaryMask,
    grid: &PatchGrid,
    opts: &EsdOptions,
) -> Result<Vec<PatchLabel>> {
    same_dims(gw, ew)?;
    let (w, h) = gw.dims();
    grid.origins
        .iter()
        .map(|&origin| {
            let patch = grid.rect(origin);
            let window = patch.expand(opts.margin, w, h);
            let evidence: Vec<Evidence> = wire_diff_evidence_with(gw, ew, &window, opts)?
                .into_iter()
                .filter(|e| e.bbox.intersects(&patch))
                .collect();
            let verdict = if evidence.is_empty() {
                Verdict::Correct
            } else {
                Verdict::Error
            };
            Ok(PatchLabel {
                origin,
                verdict,
                evidence,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViaMatchResult {
    /// `(ev_label, gv_label)` for every overlapping pair.
    pub matched: Vec<(u32, u32)>,
    pub extra: Vec<u32>,
    pub miss: Vec<u32>,
    pub ev_regions: u32,
    pub gv_regions: u32,
}

impl ViaMatchResult {
    pub fn matched_ev(&self) -> usize {
        self.matched.iter().map(|p| p.0).collect::<BTreeSet<_>>().len()
    }

    pub fn matched_gv(&self) -> usize {
        self.matched.iter().map(|p| p.1).collect::<BTreeSet<_>>().len()
    }
}

/// Matches candidate via regions to ground-truth regions by any pixel overlap.
pub fn via_match(ev: &BinaryMask, gv: &BinaryMask) -> Result<ViaMatchResult> {
    same_dims(ev, gv)?;
    let le = label_components(ev, Connectivity::Eight);
    let lg = label_components(gv, Connectivity::Eight);
    let pairs = overlap_pairs(&le, &lg)?;
    let matched: Vec<(u32, u32)> = pairs.iter().map(|&(a, b, _)| (a, b)).collect();
    let ev_hit: BTreeSet<u32> = matched.iter().map(|p| p.0).collect();
    let gv_hit: BTreeSet<u32> = matched.iter().map(|p| p.1).collect();
    Ok(ViaMatchResult {
        extra: (1..=le.count()).filter(|l| !ev_hit.contains(l)).collect(),
        miss: (1..=lg.count()).filter(|l| !gv_hit.contains(l)).collect(),
        matched,
        ev_regions: le.count(),
        gv_regions: lg.count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    WirePatch,
    ViaRegion,
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::WirePatch => "wire-patch",
            ScoreMode::ViaRegion => "via-region",
        })
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: f64,
    pub precision: f64,
    /// Set when `tp + fn == 0`; recall is then reported as 1.0.
    #[serde(default, skip_serializing_if = "is_false")]
    pub recall_undefined: bool,
    /// Set when `tp + fp == 0`; precision is then reported as 1.0.
    #[serde(default, skip_serializing_if = "is_false")]
    pub precision_undefined: bool,
}

impl PrScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (1.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        PrScore {
            tp,
            fp,
            fn_,
            recall,
            precision,
            recall_undefined,
            precision_undefined,
        }
    }

    pub fn combine(scores: impl IntoIterator<Item = PrScore>) -> Self {
        let (tp, fp, fn_) = scores
            .into_iter()
            .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
        Self::from_counts(tp, fp, fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image: String,
    #[serde(flatten)]
    pub score: PrScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub mode: ScoreMode,
    pub per_image: Vec<ImageScore>,
    pub total: PrScore,
}

fn score_wire(report: &ErrorReport, truth: &ErrorLog) -> Result<PrScore> {
    let (Some(w), Some(h), Some(ps), Some(verdicts)) =
        (report.width, report.height, report.patch_size, report.patch_verdicts.as_ref())
    else {
        return Err(Error::InvalidParameter(format!(
            "report for {} lacks wire patch verdicts",
            report.image
        )));
    };
    let grid = PatchGrid::tile(w, h, ps, ps)?;
    let lattice: BTreeMap<(usize, usize), bool> = verdicts
        .iter()
        .filter(|v| v.x % ps == 0 && v.y % ps == 0)
        .map(|v| ((v.x, v.y), v.positive()))
        .collect();
    let errors = truth.wire_error_patches(&grid);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &o in &grid.origins {
        let predicted = lattice.get(&o).copied().unwrap_or(false);
        match (errors.contains(&o), predicted) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => {}
        }
    }
    Ok(PrScore::from_counts(tp, fp, fn_))
}

fn score_via(report: &ErrorReport, truth: &ErrorLog) -> PrScore {
    let mut preds: Vec<(ErrorKind, Rect)> = Vec::new();
    for (kind, list) in [(ErrorKind::ViaExtra, &report.extra), (ErrorKind::ViaMiss, &report.miss)] {
        preds.extend(list.iter().flatten().map(|f| (kind, f.bbox)));
    }
    let truths: Vec<_> = truth.entries.iter().filter(|e| !e.kind.is_wire()).collect();
    let tp = truths
        .iter()
        .filter(|t| preds.iter().any(|(k, b)| *k == t.kind && b.intersects(&t.bbox)))
        .count();
    let fp = preds
        .iter()
        .filter(|(_, b)| !truths.iter().any(|t| t.bbox.intersects(b)))
        .count();
    PrScore::from_counts(tp, fp, truths.len() - tp)
}

/// Scores predictions against injected-error logs, per image and in total.
pub fn score_detections(
    predicted: &[ErrorReport],
    truth: &[(String, ErrorLog)],
    mode: ScoreMode,
) -> Result<ScoreSheet> {
    let pred_ids: BTreeSet<&str> = predicted.iter().map(|r| r.image.as_str()).collect();
    let truth_ids: BTreeSet<&str> = truth.iter().map(|(id, _)| id.as_str()).collect();
    if pred_ids != truth_ids || pred_ids.len() != predicted.len() {
        return Err(Error::ImageSetMismatch(format!(
            "predictions {pred_ids:?} vs truth {truth_ids:?}"
        )));
    }
    let mut per_image = Vec::with_capacity(truth.len());
    for (id, log) in truth {
        let report = predicted.iter().find(|r| &r.image == id).expect("checked above");
        let score = match mode {
            ScoreMode::WirePatch => score_wire(report, log)?,
            ScoreMode::ViaRegion => score_via(report, log),
        };
        per_image.push(ImageScore {
            image: id.clone(),
            score,
        });
    }
    let total = PrScore::combine(per_image.iter().map(|s| s.score));
    Ok(ScoreSheet {
        mode,
        per_image,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::{PatchVerdict, ViaFinding};
    use crate::synthgen::ErrorEntry;

    fn full(m: &BinaryMask) -> Rect {
        Rect::new(0, 0, m.width() - 1, m.height() - 1)
    }

    #[test]
    fn identical_masks_have_no_evidence() {
        let mut m = BinaryMask::new(20, 10);
        m.fill_rect(&Rect::new(2, 2, 17, 4), true);
        assert!(wire_diff_evidence(&m, &m, &full(&m)).unwrap().is_empty());
    }

    #[test]
    fn gap_is_an_open() {
        let mut gw = BinaryMask::new(40, 12);
        gw.fill_rect(&Rect::new(2, 4, 37, 7), true);
        let mut ew = gw.clone();
        ew.fill_rect(&Rect::new(18, 4, 21, 7), false);
        let ev = wire_diff_evidence(&gw, &ew, &full(&gw)).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, ErrorKind::Open);
        assert_eq!(ev[0].bbox, Rect::new(18, 4, 21, 7));
        // Swapping roles turns the open into a short.
        let dual = wire_diff_evidence(&ew, &gw, &full(&gw)).unwrap();
        assert_eq!(dual.len(), 1);
        assert_eq!(dual[0].kind, ErrorKind::Short);
        assert_eq!(dual[0].bbox, ev[0].bbox);
    }

    #[test]
    fn bridge_is_a_short() {
        let mut gw = BinaryMask::new(30, 20);
        gw.fill_rect(&Rect::new(2, 2, 27, 4), true);
        gw.fill_rect(&Rect::new(2, 12, 27, 14), true);
        let mut ew = gw.clone();
        ew.fill_rect(&Rect::new(14, 5, 15, 11), true);
        let ev = wire_diff_evidence(&gw, &ew, &full(&gw)).unwrap();
        assert_eq!(
            ev,
            vec![Evidence {
                kind: ErrorKind::Short,
                bbox: Rect::new(14, 5, 15, 11)
            }]
        );
    }

    #[test]
    fn vanished_and_phantom_components() {
        let mut gw = BinaryMask::new(30, 10);
        gw.fill_rect(&Rect::new(2, 2, 8, 4), true);
        let mut ew = BinaryMask::new(30, 10);
        ew.fill_rect(&Rect::new(20, 2, 26, 4), true);
        let ev = wire_diff_evidence(&gw, &ew, &full(&gw)).unwrap();
        assert_eq!(ev.len(), 2);
        let opts = EsdOptions {
            vanished_is_open: false,
            phantom_is_short: false,
            ..EsdOptions::default()
        };
        assert!(wire_diff_evidence_with(&gw, &ew, &full(&gw), &opts).unwrap().is_empty());
        assert!(wire_diff_evidence(&gw, &BinaryMask::new(3, 3), &full(&gw)).is_err());
    }

    #[test]
    fn dilation_without_merges_is_correct() {
        let mut gw = BinaryMask::new(64, 64);
        for k in 0..4 {
            gw.fill_rect(&Rect::new(4, 6 + 14 * k, 59, 9 + 14 * k), true);
        }
        let ew = gw.dilate(1);
        let grid = PatchGrid::tile(64, 64, 16, 16).unwrap();
        let labels = esd_label_patches(&gw, &ew, &grid, 8).unwrap();
        assert!(labels.iter().all(|l| l.verdict == Verdict::Correct));
    }

    #[test]
    fn only_the_patch_holding_the_gap_is_an_error() {
        let mut gw = BinaryMask::new(64, 48);
        gw.fill_rect(&Rect::new(2, 36, 61, 39), true);
        let mut ew = gw.clone();
        ew.fill_rect(&Rect::new(50, 36, 53, 39), false);
        let grid = PatchGrid::tile(64, 48, 16, 16).unwrap();
        let labels = esd_label_patches(&gw, &ew, &grid, 16).unwrap();
        let errors: Vec<_> = labels
            .iter()
            .filter(|l| l.verdict == Verdict::Error)
            .map(|l| l.origin)
            .collect();
        assert_eq!(errors, vec![(48, 32)]);
        for l in &labels {
            assert_eq!(l.verdict == Verdict::Error, !l.evidence.is_empty());
        }
    }

    fn blobs(w: usize, h: usize, rects: &[Rect]) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for r in rects {
            m.fill_rect(r, true);
        }
        m
    }

    #[test]
    fn via_matching_cases() {
        let vias: Vec<Rect> = (0..7).map(|i| Rect::square(2 + 6 * i, 2, 3)).collect();
        let gv = blobs(50, 20, &vias);
        let r = via_match(&gv, &gv).unwrap();
        assert_eq!((r.matched.len(), r.extra.len(), r.miss.len()), (7, 0, 0));
        let ev = blobs(50, 20, &vias[1..]);
        assert_eq!(via_match(&ev, &gv).unwrap().miss.len(), 1);

        let gv = blobs(40, 20, &[Rect::square(2, 2, 4), Rect::square(20, 2, 4)]);
        let ev = blobs(
            40,
            20,
            &[Rect::square(2, 2, 4), Rect::square(22, 2, 4), Rect::square(10, 12, 3)],
        );
        let r = via_match(&ev, &gv).unwrap();
        assert_eq!(r.extra.len(), 1);
        assert_eq!(r.miss.len(), 0);
        assert!(r.matched.contains(&(2, 2)));
        assert_eq!(r.matched_gv() + r.miss.len(), r.gv_regions as usize);
        assert_eq!(r.matched_ev() + r.extra.len(), r.ev_regions as usize);
    }

    #[test]
    fn score_arithmetic() {
        let s = PrScore::from_counts(24, 2, 1);
        assert!((s.recall - 0.96).abs() < 1e-12);
        assert!((s.precision - 24.0 / 26.0).abs() < 1e-12);
        let s = PrScore::from_counts(0, 0, 5);
        assert_eq!((s.recall, s.fn_), (0.0, 5));
        assert!(s.precision_undefined && !s.recall_undefined);
        let json = serde_json::to_string(&PrScore::from_counts(1, 0, 0)).unwrap();
        assert_eq!(json, r#"{"tp":1,"fp":0,"fn":0,"recall":1.0,"precision":1.0}"#);
    }

    fn wire_report(id: &str, positives: &[(usize, usize)]) -> ErrorReport {
        let mut r = ErrorReport::new(id);
        r.width = Some(64);
        r.height = Some(64);
        r.patch_size = Some(32);
        r.patch_verdicts = Some(
            PatchGrid::tile(64, 64, 32, 16)
                .unwrap()
                .origins
                .iter()
                .map(|&(x, y)| {
                    let p = if positives.contains(&(x, y)) { 1.0 } else { -1.0 };
                    PatchVerdict { x, y, p, n: 0.0 }
                })
                .collect(),
        );
        r
    }

    #[test]
    fn wire_patch_scoring() {
        let log = ErrorLog {
            entries: vec![ErrorEntry {
                kind: ErrorKind::Open,
                bbox: Rect::new(40, 5, 43, 8),
            }],
        };
        let truth = vec![("a".to_string(), log.clone())];
        let perfect = score_detections(&[wire_report("a", &[(32, 0), (16, 0)])], &truth, ScoreMode::WirePatch)
            .unwrap();
        assert_eq!((perfect.total.tp, perfect.total.fp, perfect.total.fn_), (1, 0, 0));
        let empty = score_detections(&[wire_report("a", &[])], &truth, ScoreMode::WirePatch).unwrap();
        assert_eq!((empty.total.recall, empty.total.fn_), (0.0, 1));
        let fp = score_detections(&[wire_report("a", &[(32, 0), (0, 32)])], &truth, ScoreMode::WirePatch)
            .unwrap();
        assert_eq!((fp.total.tp, fp.total.fp), (1, 1));
        assert!(score_detections(&[wire_report("b", &[])], &truth, ScoreMode::WirePatch).is_err());
    }

    #[test]
    fn via_region_scoring() {
        let log = ErrorLog {
            entries: vec![
                ErrorEntry {
                    kind: ErrorKind::ViaMiss,
                    bbox: Rect::new(10, 10, 19, 19),
                },
                ErrorEntry {
                    kind: ErrorKind::ViaExtra,
                    bbox: Rect::new(50, 10, 59, 19),
                },
                ErrorEntry {
                    kind: ErrorKind::Open,
                    bbox: Rect::new(0, 0, 3, 3),
                },
            ],
        };
        let find = |x: usize, y: usize| ViaFinding {
            bbox: Rect::square(x, y, 5),
            mean: 100.0,
        };
        let mut r = ErrorReport::new("a");
        r.miss = Some(vec![find(12, 12), find(80, 80)]);
        // Right place, wrong kind.
        r.extra = Some(vec![find(12, 12)]);
        let s = score_detections(&[r], &[("a".into(), log)], ScoreMode::ViaRegion).unwrap();
        assert_eq!((s.total.tp, s.total.fp, s.total.fn_), (1, 1, 1));
    }
}
