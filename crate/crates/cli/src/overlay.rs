//! Bounding-box overlays on the SEM image.

use std::path::Path;

use icsv_core::raster::{save_rgb, GrayImage, Rect};
use icsv_core::report::ErrorReport;

pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const MAGENTA: [u8; 3] = [255, 0, 255];

const THICKNESS: usize = 2;

pub struct Overlay {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Overlay {
    pub fn new(base: &GrayImage) -> Self {
        Overlay {
            width: base.width(),
            height: base.height(),
            rgb: base.data().iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = 3 * (y * self.width + x);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Outline of `r`, drawn inward.
    pub fn draw_box(&mut self, r: &Rect, c: [u8; 3]) {
        for y in r.y0..=r.y1 {
            for x in r.x0..=r.x1 {
                let edge = x < r.x0 + THICKNESS || x + THICKNESS > r.x1 || y < r.y0 + THICKNESS || y + THICKNESS > r.y1;
                if edge {
                    self.put(x, y, c);
                }
            }
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn save(&self, path: &Path) -> icsv_core::Result<()> {
        save_rgb(self.width, self.height, &self.rgb, path)
    }
}

/// Wire boxes in magenta (their kind is not predicted), missed vias red, extra vias blue.
pub fn render_report(base: &GrayImage, report: &ErrorReport) -> Overlay {
    let mut o = Overlay::new(base);
    for b in report.error_boxes.iter().flatten() {
        o.draw_box(b, MAGENTA);
    }
    for f in report.miss.iter().flatten() {
        o.draw_box(&f.bbox, RED);
    }
    for f in report.extra.iter().flatten() {
        o.draw_box(&f.bbox, BLUE);
    }
    o
}
