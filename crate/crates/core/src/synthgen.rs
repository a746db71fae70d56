//! Synthetic IC layouts, SEM-like renderings and controlled error injection.
//!
//! Layouts use single-layer Manhattan routing: horizontal wire segments on a
//! fixed track pitch, short vertical stubs rising from segments, and square
//! vias. Every legitimate wire end (segment ends and stub tips) carries a
//! landing pad with a via, so an injected open shows up as a bare wire end.
//! Injected shorts are thin vertical bridges across the inter-track gap.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{save_gray, save_mask, BinaryMask, GrayImage, PatchGrid, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutParams {
    pub track_pitch: usize,
    pub wire_width: usize,
    /// Probability that a span along a track is filled with a segment.
    pub density: f64,
    /// Expected stubs per 100 px of segment length.
    pub stub_rate: f64,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            track_pitch: 40,
            wire_width: 8,
            density: 0.75,
            stub_rate: 0.6,
        }
    }
}

/// Horizontal wire segment; `x0..=x1` columns, `y0..y0 + wire_width` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub track: usize,
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    /// Stub columns `(left column, top row of the stub tip pad)`.
    pub stubs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub wire_mask: BinaryMask,
    pub via_mask: BinaryMask,
    pub track_pitch: usize,
    pub wire_width: usize,
    pub segments: Vec<Segment>,
    pub vias: Vec<Rect>,
}

impl Layout {
    pub fn width(&self) -> usize {
        self.wire_mask.width()
    }

    pub fn height(&self) -> usize {
        self.wire_mask.height()
    }

    pub fn pad_size(&self) -> usize {
        self.wire_width + 4
    }

    /// Side of a via square.
    pub fn via_size(&self) -> usize {
        self.wire_width + 2
    }
}

struct Geometry {
    ww: usize,
    pad: usize,
    via: usize,
}

impl Geometry {
    fn new(ww: usize) -> Self {
        Geometry {
            ww,
            pad: ww + 4,
            via: ww + 2,
        }
    }

    /// Pad whose outer edge lies at column `x_edge` (`right` = pad ends there).
    fn end_pad(&self, x_edge: usize, y0: usize, right: bool) -> Rect {
        let x0 = if right { x_edge + 1 - self.pad } else { x_edge };
        Rect::new(x0, y0 - 2, x0 + self.pad - 1, y0 + self.ww + 1)
    }

    fn via_in(&self, pad: &Rect) -> Rect {
        Rect::square(pad.x0 + 1, pad.y0 + 1, self.via)
    }
}

pub fn gen_layout(seed: u64, width: usize, height: usize, params: &LayoutParams) -> Result<Layout> {
    let pitch = params.track_pitch;
    let ww = params.wire_width;
    if ww < 2 || pitch < 2 * ww {
        return Err(Error::InvalidParameter(format!(
            "pitch {pitch} must be at least twice the wire width {ww} (and width ≥ 2)"
        )));
    }
    if width < 4 * pitch || height < 4 * pitch {
        return Err(Error::InvalidParameter(format!(
            "{width}x{height} image too small for pitch {pitch}"
        )));
    }
    if !(0.0..=1.0).contains(&params.density) {
        return Err(Error::InvalidParameter("density must lie in [0, 1]".into()));
    }
    let g = Geometry::new(ww);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wire = BinaryMask::new(width, height);
    let mut via = BinaryMask::new(width, height);
    let mut segments = Vec::new();
    let mut vias = Vec::new();

    let min_seg = 12 * ww;
    let max_seg = (width / 2).max(min_seg + 1);
    let min_space = 5 * ww;
    let x_min = pitch;
    let x_max = width - pitch; // exclusive

    // Tallest stub (wire top to tip top) keeping ≥ ww clearance to the track above
    // including its end pads.
    let max_stub = pitch.saturating_sub(2 * ww + 2);
    let stubs_possible = max_stub >= g.pad;

    let mut track = 0;
    loop {
        let y0 = pitch + track * pitch;
        if y0 + ww + pitch > height {
            break;
        }
        let mut x = x_min + rng.random_range(0..pitch);
        while x + min_seg <= x_max {
            let len = rng.random_range(min_seg..=max_seg).min(x_max - x);
            if len < min_seg {
                break;
            }
            if rng.random_bool(params.density) {
                let seg_rect = Rect::new(x, y0, x + len - 1, y0 + ww - 1);
                wire.fill_rect(&seg_rect, true);
                let mut seg = Segment {
                    track,
                    x0: x,
                    x1: x + len - 1,
                    y0,
                    stubs: Vec::new(),
                };
                for pad in [g.end_pad(x, y0, false), g.end_pad(x + len - 1, y0, true)] {
                    wire.fill_rect(&pad, true);
                    let v = g.via_in(&pad);
                    via.fill_rect(&v, true);
                    vias.push(v);
                }
                if stubs_possible {
                    // Stub columns keep 3·ww from the end pads and 4·ww from each other.
                    let lo = x + g.pad + 3 * ww;
                    let hi = (x + len).saturating_sub(g.pad + 3 * ww + ww);
                    if hi > lo {
                        let expected = params.stub_rate * len as f64 / 100.0;
                        let n = expected.floor() as usize
                            + usize::from(rng.random_bool(expected.fract()));
                        let mut placed: Vec<usize> = Vec::new();
                        for _ in 0..n * 4 {
                            if placed.len() == n {
                                break;
                            }
                            let sx = rng.random_range(lo..hi);
                            if placed.iter().any(|&p| p.abs_diff(sx) < 4 * ww + g.pad) {
                                continue;
                            }
                            placed.push(sx);
                        }
                        placed.sort_unstable();
                        for sx in placed {
                            let stub_h = rng.random_range(g.pad..=max_stub);
                            let tip_top = y0 - stub_h;
                            wire.fill_rect(&Rect::new(sx, tip_top, sx + ww - 1, y0 - 1), true);
                            let pad = Rect::new(sx - 2, tip_top, sx + ww + 1, tip_top + g.pad - 1);
                            wire.fill_rect(&pad, true);
                            let v = g.via_in(&pad);
                            via.fill_rect(&v, true);
                            vias.push(v);
                            seg.stubs.push((sx, tip_top));
                        }
                    }
                }
                segments.push(seg);
            }
            x += len + rng.random_range(min_space..=3 * min_space);
        }
        track += 1;
    }

    if segments.is_empty() || vias.is_empty() {
        return Err(Error::NoObjects(format!(
            "seed {seed} with density {} produced no wires",
            params.density
        )));
    }
    Ok(Layout {
        wire_mask: wire,
        via_mask: via,
        track_pitch: pitch,
        wire_width: ww,
        segments,
        vias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub via_level: u8,
    pub wire_level: u8,
    pub bg_level: u8,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    /// Peak-to-peak brightness change across the image width.
    pub illumination_tilt: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            via_level: 220,
            wire_level: 140,
            bg_level: 40,
            noise_sigma: 6.0,
            blur_radius: 1,
            illumination_tilt: 10.0,
        }
    }
}

impl RenderParams {
    /// Noise-free, blur-free, flat rendering.
    pub fn clean(via_level: u8, wire_level: u8, bg_level: u8) -> Self {
        RenderParams {
            via_level,
            wire_level,
            bg_level,
            noise_sigma: 0.0,
            blur_radius: 0,
            illumination_tilt: 0.0,
        }
    }
}

/// Renders a SEM-like image: three intensity levels, additive Gaussian noise,
/// box blur, then a horizontal illumination ramp.
pub fn render_sem(layout: &Layout, rp: &RenderParams, seed: u64) -> Result<GrayImage> {
    render_masks(&layout.wire_mask, &layout.via_mask, rp, seed)
}

pub fn render_masks(
    wire: &BinaryMask,
    via: &BinaryMask,
    rp: &RenderParams,
    seed: u64,
) -> Result<GrayImage> {
    if !(rp.via_level > rp.wire_level && rp.wire_level > rp.bg_level) {
        return Err(Error::InvalidParameter(format!(
            "levels must satisfy via > wire > background, got {}/{}/{}",
            rp.via_level, rp.wire_level, rp.bg_level
        )));
    }
    if wire.dims() != via.dims() {
        return Err(Error::DimensionMismatch("wire and via masks".into()));
    }
    if rp.noise_sigma < 0.0 {
        return Err(Error::InvalidParameter("negative noise sigma".into()));
    }
    let (w, h) = wire.dims();
    let mut buf: Vec<f64> = wire
        .data()
        .iter()
        .zip(via.data())
        .map(|(&wi, &vi)| {
            if vi {
                rp.via_level
            } else if wi {
                rp.wire_level
            } else {
                rp.bg_level
            }
        })
        .map(f64::from)
        .collect();

    if rp.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, rp.noise_sigma).expect("finite sigma");
        for v in buf.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if rp.blur_radius > 0 {
        buf = box_blur(&buf, w, h, rp.blur_radius);
    }
    if rp.illumination_tilt != 0.0 && w > 1 {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] += rp.illumination_tilt * (x as f64 / (w - 1) as f64 - 0.5);
            }
        }
    }
    let data = buf.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_vec(w, h, data)
}

/// Separable mean filter over a `(2r+1)²` window with edge clamping.
fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let n = (2 * r + 1) as f64;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..=2 * r {
                let xx = (x + k).saturating_sub(r).min(w - 1);
                s += src[y * w + xx];
            }
            tmp[y * w + x] = s / n;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..=2 * r {
                let yy = (y + k).saturating_sub(r).min(h - 1);
                s += tmp[yy * w + x];
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    Open,
    Short,
    ViaMiss,
    ViaExtra,
}

impl ErrorKind {
    pub fn is_wire(self) -> bool {
        matches!(self, ErrorKind::Open | ErrorKind::Short)
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub kind: ErrorKind,
    pub bbox: Rect,
}

/// Ground-truth record of injected errors; serialized as a plain JSON list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorLog {
    pub entries: Vec<ErrorEntry>,
}

impl ErrorLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: ErrorKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn merged(&self, other: &ErrorLog) -> ErrorLog {
        let mut entries = self.entries.clone();
        entries.extend_from_slice(&other.entries);
        ErrorLog { entries }
    }

    /// Origins of the grid patches each entry intersects.
    pub fn affected_patches(&self, grid: &PatchGrid) -> Vec<Vec<(usize, usize)>> {
        self.entries
            .iter()
            .map(|e| {
                grid.origins
                    .iter()
                    .copied()
                    .filter(|&o| grid.rect(o).intersects(&e.bbox))
                    .collect()
            })
            .collect()
    }

    /// Patch origins intersected by at least one wire (open/short) entry.
    pub fn wire_error_patches(&self, grid: &PatchGrid) -> HashSet<(usize, usize)> {
        grid.origins
            .iter()
            .copied()
            .filter(|&o| {
                let r = grid.rect(o);
                self.entries
                    .iter()
                    .any(|e| e.kind.is_wire() && e.bbox.intersects(&r))
            })
            .collect()
    }
}

/// Placement constraints shared by the injectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectOptions {
    /// Minimum distance between an injected error and the image border.
    pub border_margin: usize,
    pub max_attempts: usize,
}

impl Default for InjectOptions {
    fn default() -> Self {
        InjectOptions {
            border_margin: 16,
            max_attempts: 400,
        }
    }
}

fn far_from_border(r: &Rect, margin: usize, w: usize, h: usize) -> bool {
    r.x0 >= margin && r.y0 >= margin && r.x1 + margin < w && r.y1 + margin < h
}

/// Columns of a segment that are at least `clear` px away from its end pads and stubs.
fn clear_of_features(seg: &Segment, g: &Geometry, x0: usize, x1: usize, clear: usize) -> bool {
    if x0 < seg.x0 + g.pad + clear || x1 + g.pad + clear > seg.x1 {
        return false;
    }
    seg.stubs.iter().all(|&(sx, _)| {
        let (s0, s1) = (sx.saturating_sub(2), sx + g.ww + 1);
        x1 + clear < s0 || x0 > s1 + clear
    })
}

/// Erases interior gaps (opens) and adds thin bridges between adjacent tracks (shorts).
pub fn inject_wire_errors(
    layout: &Layout,
    n_open: usize,
    n_short: usize,
    seed: u64,
) -> Result<(BinaryMask, ErrorLog)> {
    inject_wire_errors_with(layout, n_open, n_short, seed, &InjectOptions::default())
}

pub fn inject_wire_errors_with(
    layout: &Layout,
    n_open: usize,
    n_short: usize,
    seed: u64,
    opts: &InjectOptions,
) -> Result<(BinaryMask, ErrorLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::new(layout.wire_width);
    let ww = g.ww;
    let (w, h) = layout.wire_mask.dims();
    let mut mask = layout.wire_mask.clone();
    let mut log = ErrorLog::default();
    // Each segment takes part in at most one error, which keeps every
    // injection a clean single split or single merge.
    let mut touched = vec![false; layout.segments.len()];
    let segs = &layout.segments;

    let mut opens = 0;
    for _ in 0..opens_attempts(n_open, opts) {
        if opens == n_open {
            break;
        }
        let si = rng.random_range(0..segs.len());
        if touched[si] {
            continue;
        }
        let seg = &segs[si];
        let gap = rng.random_range(ww..=3 * ww);
        if seg.x1 < seg.x0 + gap {
            continue;
        }
        let gx0 = rng.random_range(seg.x0..=seg.x1 + 1 - gap);
        let gx1 = gx0 + gap - 1;
        if !clear_of_features(seg, &g, gx0, gx1, 2 * ww) {
            continue;
        }
        let r = Rect::new(gx0, seg.y0, gx1, seg.y0 + ww - 1);
        if !far_from_border(&r, opts.border_margin, w, h) {
            continue;
        }
        mask.fill_rect(&r, false);
        touched[si] = true;
        log.entries.push(ErrorEntry {
            kind: ErrorKind::Open,
            bbox: r,
        });
        opens += 1;
    }

    // Segments indexed by track for neighbour lookup.
    let n_tracks = segs.iter().map(|s| s.track + 1).max().unwrap_or(0);
    let mut by_track: Vec<Vec<usize>> = vec![Vec::new(); n_tracks];
    for (i, s) in segs.iter().enumerate() {
        by_track[s.track].push(i);
    }

    let mut shorts = 0;
    for _ in 0..opens_attempts(n_short, opts) {
        if shorts == n_short || n_tracks < 2 {
            break;
        }
        let lower_i = rng.random_range(0..segs.len());
        let lower = &segs[lower_i];
        if touched[lower_i] || lower.track == 0 {
            continue;
        }
        let bw = rng.random_range(2..=(ww / 2).max(2));
        if lower.x1 < lower.x0 + bw {
            continue;
        }
        let bx0 = rng.random_range(lower.x0..=lower.x1 + 1 - bw);
        let bx1 = bx0 + bw - 1;
        if !clear_of_features(lower, &g, bx0, bx1, 2 * ww) {
            continue;
        }
        let Some(&upper_i) = by_track[lower.track - 1]
            .iter()
            .find(|&&j| segs[j].x0 <= bx0 && segs[j].x1 >= bx1)
        else {
            continue;
        };
        let upper = &segs[upper_i];
        if touched[upper_i] || !clear_of_features(upper, &g, bx0, bx1, 2 * ww) {
            continue;
        }
        let r = Rect::new(bx0, upper.y0 + ww, bx1, lower.y0 - 1);
        if !far_from_border(&r, opts.border_margin, w, h) {
            continue;
        }
        mask.fill_rect(&r, true);
        touched[lower_i] = true;
        touched[upper_i] = true;
        log.entries.push(ErrorEntry {
            kind: ErrorKind::Short,
            bbox: r,
        });
        shorts += 1;
    }

    if opens < n_open {
        return Err(Error::Placement {
            what: "opens",
            requested: n_open,
            achieved: opens,
        });
    }
    if shorts < n_short {
        return Err(Error::Placement {
            what: "shorts",
            requested: n_short,
            achieved: shorts,
        });
    }
    Ok((mask, log))
}

fn opens_attempts(n: usize, opts: &InjectOptions) -> usize {
    opts.max_attempts * n.max(1)
}

/// Chebyshev gap between two rectangles (0 when they touch or overlap).
fn rect_gap(a: &Rect, b: &Rect) -> usize {
    let dx = b.x0.saturating_sub(a.x1).max(a.x0.saturating_sub(b.x1));
    let dy = b.y0.saturating_sub(a.y1).max(a.y0.saturating_sub(b.y1));
    dx.max(dy)
}

/// Deletes existing vias (miss) and adds via squares on bare wire (extra).
pub fn inject_via_errors(
    layout: &Layout,
    n_miss: usize,
    n_extra: usize,
    seed: u64,
) -> Result<(BinaryMask, ErrorLog)> {
    inject_via_errors_with(layout, n_miss, n_extra, seed, &InjectOptions::default())
}

pub fn inject_via_errors_with(
    layout: &Layout,
    n_miss: usize,
    n_extra: usize,
    seed: u64,
    opts: &InjectOptions,
) -> Result<(BinaryMask, ErrorLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::new(layout.wire_width);
    let (w, h) = layout.via_mask.dims();
    if n_miss > layout.vias.len() {
        return Err(Error::Placement {
            what: "missing vias",
            requested: n_miss,
            achieved: layout.vias.len(),
        });
    }
    let mut mask = layout.via_mask.clone();
    let mut log = ErrorLog::default();

    let mut order: Vec<usize> = (0..layout.vias.len()).collect();
    // Fisher-Yates on the via indices; the first n_miss are removed.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for &i in order.iter().take(n_miss) {
        let r = layout.vias[i];
        mask.fill_rect(&r, false);
        log.entries.push(ErrorEntry {
            kind: ErrorKind::ViaMiss,
            bbox: r,
        });
    }

    let mut added: Vec<Rect> = Vec::new();
    let min_gap = 2 * g.ww;
    let segs = &layout.segments;
    for _ in 0..opens_attempts(n_extra, opts) {
        if added.len() == n_extra {
            break;
        }
        let seg = &segs[rng.random_range(0..segs.len())];
        if seg.x1 < seg.x0 + g.via {
            continue;
        }
        let ex = rng.random_range(seg.x0..=seg.x1 + 1 - g.via);
        let r = Rect::square(ex, seg.y0 - 1, g.via);
        if !clear_of_features(seg, &g, r.x0, r.x1, 0) {
            continue;
        }
        if !far_from_border(&r, opts.border_margin, w, h) {
            continue;
        }
        if layout
            .vias
            .iter()
            .chain(added.iter())
            .any(|v| rect_gap(v, &r) < min_gap)
        {
            continue;
        }
        mask.fill_rect(&r, true);
        added.push(r);
        log.entries.push(ErrorEntry {
            kind: ErrorKind::ViaExtra,
            bbox: r,
        });
    }
    if added.len() < n_extra {
        return Err(Error::Placement {
            what: "extra vias",
            requested: n_extra,
            achieved: added.len(),
        });
    }
    Ok((mask, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degradation {
    Contamination,
    Exposure,
}

/// Imaging defects: dark elliptical blotches or a global gamma shift.
pub fn degrade(img: &GrayImage, kind: Degradation, severity: f64, seed: u64) -> Result<GrayImage> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidParameter(format!("severity {severity} not in [0, 1]")));
    }
    if severity == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    match kind {
        Degradation::Contamination => {
            let blobs = contamination_blobs(img.width(), img.height(), &mut rng);
            let keep = 1.0 - severity;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if blobs.iter().any(|b| b.contains(x as f64, y as f64)) {
                        let v = (img.get(x, y) as f64 * keep).round().clamp(0.0, 255.0);
                        out.set(x, y, v as u8);
                    }
                }
            }
        }
        Degradation::Exposure => {
            let gamma = if rng.random_bool(0.5) {
                1.0 + severity
            } else {
                1.0 - severity
            };
            let lut: Vec<u8> = (0..=255u32)
                .map(|v| (255.0 * (v as f64 / 255.0).powf(gamma)).round().clamp(0.0, 255.0) as u8)
                .collect();
            for v in out.data_mut() {
                *v = lut[*v as usize];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

fn contamination_blobs(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = rng.random_range(1..=4);
    let scale = w.min(h) as f64;
    (0..n)
        .map(|_| Ellipse {
            cx: rng.random_range(0.0..w as f64),
            cy: rng.random_range(0.0..h as f64),
            rx: rng.random_range(0.02..0.1) * scale + 1.0,
            ry: rng.random_range(0.02..0.1) * scale + 1.0,
        })
        .collect()
}

/// The blotches [`degrade`] would draw for this image size and seed.
pub fn contamination_mask(w: usize, h: usize, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = contamination_blobs(w, h, &mut rng);
    BinaryMask::from_fn(w, h, |x, y| blobs.iter().any(|b| b.contains(x as f64, y as f64)))
}

/// Everything needed to produce one synthetic dataset image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub width: usize,
    pub height: usize,
    pub layout: LayoutParams,
    pub render: RenderParams,
    pub n_open: usize,
    pub n_short: usize,
    /// Via errors as a fraction of the layout's via count, split evenly
    /// between misses and extras (misses get the odd one).
    pub via_error_ratio: f64,
    pub inject: InjectOptions,
    pub contamination: f64,
    pub exposure: f64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            width: 1024,
            height: 1024,
            layout: LayoutParams::default(),
            render: RenderParams::default(),
            n_open: 2,
            n_short: 2,
            via_error_ratio: 0.09,
            inject: InjectOptions::default(),
            contamination: 0.0,
            exposure: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub layout: Layout,
    pub osem: GrayImage,
    pub wire_err: BinaryMask,
    pub via_err: BinaryMask,
    pub log: ErrorLog,
}

/// Splits a base seed into independent per-stage seeds.
pub(crate) fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D
}

pub fn generate_sample(seed: u64, p: &SampleParams) -> Result<Sample> {
    let layout = gen_layout(stage_seed(seed, 1), p.width, p.height, &p.layout)?;
    let mut osem = render_sem(&layout, &p.render, stage_seed(seed, 2))?;
    if p.contamination > 0.0 {
        osem = degrade(&osem, Degradation::Contamination, p.contamination, stage_seed(seed, 3))?;
    }
    if p.exposure > 0.0 {
        osem = degrade(&osem, Degradation::Exposure, p.exposure, stage_seed(seed, 4))?;
    }
    let (wire_err, wire_log) =
        inject_wire_errors_with(&layout, p.n_open, p.n_short, stage_seed(seed, 5), &p.inject)?;
    let n_via_err = (p.via_error_ratio * layout.vias.len() as f64).round() as usize;
    let n_miss = n_via_err.div_ceil(2);
    let (via_err, via_log) = inject_via_errors_with(
        &layout,
        n_miss,
        n_via_err - n_miss,
        stage_seed(seed, 6),
        &p.inject,
    )?;
    Ok(Sample {
        osem,
        wire_err,
        via_err,
        log: wire_log.merged(&via_log),
        layout,
    })
}

pub const OSEM_FILE: &str = "oSEM.png";
pub const WIRE_GT_FILE: &str = "W_gt.png";
pub const VIA_GT_FILE: &str = "V_gt.png";
pub const WIRE_ERR_FILE: &str = "W_err.png";
pub const VIA_ERR_FILE: &str = "V_err.png";
pub const ERRORS_FILE: &str = "errors.json";

/// Writes `{oSEM, W_gt, V_gt, W_err, V_err}.png` and `errors.json` into `dir`.
pub fn write_sample_dir(sample: &Sample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_gray(&sample.osem, dir.join(OSEM_FILE))?;
    save_mask(&sample.layout.wire_mask, dir.join(WIRE_GT_FILE))?;
    save_mask(&sample.layout.via_mask, dir.join(VIA_GT_FILE))?;
    save_mask(&sample.wire_err, dir.join(WIRE_ERR_FILE))?;
    save_mask(&sample.via_err, dir.join(VIA_ERR_FILE))?;
    let json = serde_json::to_string_pretty(&sample.log).expect("log serializes");
    let path = dir.join(ERRORS_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn read_error_log(path: &Path) -> Result<ErrorLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::{label_components, Connectivity};

    /// Component counter independent of the union-find labeler.
    fn flood_count(mask: &BinaryMask) -> usize {
        let (w, h) = mask.dims();
        let mut seen = vec![false; w * h];
        let mut n = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if !mask.data()[start] || seen[start] {
                continue;
            }
            n += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if mask.data()[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        n
    }

    fn small() -> Layout {
        gen_layout(7, 512, 512, &LayoutParams::default()).unwrap()
    }

    #[test]
    fn layout_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.wire_mask, b.wire_mask);
        assert_eq!(a.via_mask, b.via_mask);
        assert!(!a.segments.is_empty() && !a.vias.is_empty());
    }

    #[test]
    fn zero_density_has_no_objects() {
        let p = LayoutParams {
            density: 0.0,
            ..LayoutParams::default()
        };
        assert!(matches!(gen_layout(1, 512, 512, &p), Err(Error::NoObjects(_))));
    }

    #[test]
    fn infeasible_pitch() {
        let p = LayoutParams {
            track_pitch: 10,
            wire_width: 8,
            ..LayoutParams::default()
        };
        assert!(matches!(gen_layout(1, 512, 512, &p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn vias_lie_on_wires() {
        let p = LayoutParams {
            track_pitch: 32,
            wire_width: 8,
            ..LayoutParams::default()
        };
        let l = gen_layout(1, 1024, 1024, &p).unwrap();
        let grown = l.wire_mask.dilate(1);
        for (i, &v) in l.via_mask.data().iter().enumerate() {
            assert!(!v || grown.data()[i]);
        }
        // Here vias are fully inside wires, not just in the dilation.
        for (i, &v) in l.via_mask.data().iter().enumerate() {
            assert!(!v || l.wire_mask.data()[i]);
        }
    }

    #[test]
    fn clean_render_is_three_level() {
        let l = small();
        let img = render_sem(&l, &RenderParams::clean(220, 140, 40), 0).unwrap();
        for (i, &v) in img.data().iter().enumerate() {
            let expected = if l.via_mask.data()[i] {
                220
            } else if l.wire_mask.data()[i] {
                140
            } else {
                40
            };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn default_render_keeps_level_order() {
        let l = small();
        let img = render_sem(&l, &RenderParams::default(), 3).unwrap();
        let median = |pred: &dyn Fn(usize) -> bool| {
            let mut v: Vec<u8> = (0..img.data().len())
                .filter(|&i| pred(i))
                .map(|i| img.data()[i])
                .collect();
            v.sort_unstable();
            v[v.len() / 2]
        };
        let vm = median(&|i| l.via_mask.data()[i]);
        let wm = median(&|i| l.wire_mask.data()[i] && !l.via_mask.data()[i]);
        let bm = median(&|i| !l.wire_mask.data()[i]);
        assert!(vm > wm && wm > bm, "{vm} {wm} {bm}");
        assert_eq!(img, render_sem(&l, &RenderParams::default(), 3).unwrap());
    }

    #[test]
    fn render_rejects_bad_levels() {
        let l = small();
        assert!(render_sem(&l, &RenderParams::clean(100, 140, 40), 0).is_err());
    }

    #[test]
    fn no_wire_errors_is_identity() {
        let l = small();
        let (m, log) = inject_wire_errors(&l, 0, 0, 1).unwrap();
        assert_eq!(m, l.wire_mask);
        assert!(log.is_empty());
    }

    #[test]
    fn open_adds_one_component_short_removes_one() {
        let l = gen_layout(2, 1024, 1024, &LayoutParams::default()).unwrap();
        let base = flood_count(&l.wire_mask);
        for seed in 0..5 {
            let (m, log) = inject_wire_errors(&l, 1, 0, seed).unwrap();
            assert_eq!(flood_count(&m), base + 1);
            assert_eq!(log.count(ErrorKind::Open), 1);
            let (m, _) = inject_wire_errors(&l, 0, 1, seed).unwrap();
            assert_eq!(flood_count(&m), base - 1);
        }
        let (m, log) = inject_wire_errors(&l, 3, 4, 9).unwrap();
        assert_eq!(flood_count(&m) as isize, base as isize + 3 - 4);
        // Logged boxes are disjoint and each touches the changed pixels.
        for (i, a) in log.entries.iter().enumerate() {
            for b in &log.entries[i + 1..] {
                assert!(!a.bbox.intersects(&b.bbox));
            }
            let changed = (a.bbox.y0..=a.bbox.y1)
                .any(|y| (a.bbox.x0..=a.bbox.x1).any(|x| m.get(x, y) != l.wire_mask.get(x, y)));
            assert!(changed);
        }
    }

    #[test]
    fn too_many_errors_reports_achieved() {
        let l = small();
        match inject_wire_errors(&l, 500, 0, 1) {
            Err(Error::Placement {
                requested, achieved, ..
            }) => {
                assert_eq!(requested, 500);
                assert!(achieved < 500);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn via_injection_counts() {
        let l = small();
        let regions = |m: &BinaryMask| label_components(m, Connectivity::Eight).count() as isize;
        let base = regions(&l.via_mask);
        let (m, log) = inject_via_errors(&l, 2, 3, 4).unwrap();
        assert_eq!(regions(&m), base + 1);
        assert_eq!(log.count(ErrorKind::ViaMiss), 2);
        assert_eq!(log.count(ErrorKind::ViaExtra), 3);
        let (m, _) = inject_via_errors(&l, l.vias.len(), 0, 4).unwrap();
        assert_eq!(m.count(), 0);
        let (m, log) = inject_via_errors(&l, 0, 0, 4).unwrap();
        assert_eq!(m, l.via_mask);
        assert!(log.is_empty());
        assert!(inject_via_errors(&l, l.vias.len() + 1, 0, 4).is_err());
    }

    #[test]
    fn degrade_cases() {
        let l = small();
        let img = render_sem(&l, &RenderParams::default(), 1).unwrap();
        for kind in [Degradation::Contamination, Degradation::Exposure] {
            assert_eq!(degrade(&img, kind, 0.0, 5).unwrap(), img);
        }
        assert!(degrade(&img, Degradation::Exposure, 1.5, 5).is_err());

        let gray = GrayImage::filled(16, 16, 128);
        for seed in 0..4 {
            let out = degrade(&gray, Degradation::Exposure, 1.0, seed).unwrap();
            let up = out.data().iter().all(|&v| v > 128);
            let down = out.data().iter().all(|&v| v < 128);
            assert!(up || down);
        }

        let out = degrade(&img, Degradation::Contamination, 0.7, 9).unwrap();
        let blobs = contamination_mask(img.width(), img.height(), 9);
        for i in 0..img.data().len() {
            if img.data()[i] != out.data()[i] {
                assert!(blobs.data()[i]);
            }
        }
    }

    #[test]
    fn sample_dir_files() {
        let p = SampleParams {
            width: 512,
            height: 512,
            n_open: 1,
            n_short: 1,
            ..SampleParams::default()
        };
        let s = generate_sample(3, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample_dir(&s, dir.path()).unwrap();
        for f in [OSEM_FILE, WIRE_GT_FILE, VIA_GT_FILE, WIRE_ERR_FILE, VIA_ERR_FILE, ERRORS_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let log = read_error_log(&dir.path().join(ERRORS_FILE)).unwrap();
        assert_eq!(log, s.log);
        let text = std::fs::read_to_string(dir.path().join(ERRORS_FILE)).unwrap();
        assert!(text.trim_start().starts_with('['));
    }
}
