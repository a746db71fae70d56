//! Connected-component labeling (two-pass with a union-find forest) and
//! per-region measurements.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, BoxAccumulator, GrayImage, Rect};

/// Which neighbours of a pixel are considered connected to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// N, S, E and W neighbours.
    Four,
    /// All eight neighbours.
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

/// Per-pixel component labels; `0` is background, components are `1..=count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: u32,
}

impl LabelMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Number of components (`K`).
    pub fn count(&self) -> u32 {
        self.count
    }

    /// Foreground mask of a single label.
    pub fn mask_of(&self, label: u32) -> BinaryMask {
        BinaryMask::from_vec(
            self.width,
            self.height,
            self.labels.iter().map(|&l| l == label).collect(),
        )
        .expect("label map dims")
    }
}

/// Disjoint-set forest with path compression and union by rank.
struct DisjointSets {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSets {
    fn new() -> Self {
        // Slot 0 is the background and is never united.
        DisjointSets {
            parent: vec![0],
            rank: vec![0],
        }
    }

    fn make_set(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        self.rank.push(0);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[x as usize] != root {
            let next = self.parent[x as usize];
            self.parent[x as usize] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        let (ka, kb) = (self.rank[ra as usize], self.rank[rb as usize]);
        if ka < kb {
            self.parent[ra as usize] = rb;
            rb
        } else {
            self.parent[rb as usize] = ra;
            if ka == kb {
                self.rank[ra as usize] += 1;
            }
            ra
        }
    }
}

/// Labels the connected foreground components of `mask`.
///
/// Labels are numbered in order of first encounter in a row-major scan.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> LabelMap {
    let (w, h) = mask.dims();
    let fg = mask.data();
    let mut labels = vec![0u32; w * h];
    let mut sets = DisjointSets::new();

    // First pass: provisional labels from already-visited neighbours.
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let i = row + x;
            if !fg[i] {
                continue;
            }
            let mut current = 0u32;
            let mut visit = |n: u32, sets: &mut DisjointSets| {
                if n != 0 {
                    current = if current == 0 { n } else { sets.union(current, n) };
                }
            };
            if x > 0 {
                visit(labels[i - 1], &mut sets);
            }
            if y > 0 {
                let up = i - w;
                visit(labels[up], &mut sets);
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        visit(labels[up - 1], &mut sets);
                    }
                    if x + 1 < w {
                        visit(labels[up + 1], &mut sets);
                    }
                }
            }
            labels[i] = if current == 0 {
                sets.make_set()
            } else {
                current
            };
        }
    }

    // Second pass: resolve to roots and compact.
    let mut compact = vec![0u32; sets.parent.len()];
    let mut count = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = sets.find(*l) as usize;
        if compact[root] == 0 {
            count += 1;
            compact[root] = count;
        }
        *l = compact[root];
    }

    LabelMap {
        width: w,
        height: h,
        labels,
        count,
    }
}

/// Measurements of one labeled component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: u32,
    pub area: usize,
    pub bbox: Rect,
    /// Mean of the reference image over this region's nonzero reference pixels
    /// (0 when there are none). `None` without a reference image.
    pub mean_intensity: Option<f64>,
}

impl Region {
    /// Longer side of the bounding box.
    pub fn bbox_extent(&self) -> usize {
        self.bbox.width().max(self.bbox.height())
    }
}

/// One [`Region`] per label `1..=K`, in label order.
pub fn region_properties(lm: &LabelMap, reference: Option<&GrayImage>) -> Result<Vec<Region>> {
    if let Some(r) = reference {
        if r.dims() != (lm.width, lm.height) {
            return Err(Error::DimensionMismatch(format!(
                "reference {}x{} vs labels {}x{}",
                r.width(),
                r.height(),
                lm.width,
                lm.height
            )));
        }
    }
    let k = lm.count as usize;
    let mut boxes = vec![BoxAccumulator::default(); k];
    let mut areas = vec![0usize; k];
    let mut sums = vec![0u64; k];
    let mut nonzero = vec![0usize; k];
    for y in 0..lm.height {
        for x in 0..lm.width {
            let l = lm.get(x, y);
            if l == 0 {
                continue;
            }
            let i = (l - 1) as usize;
            areas[i] += 1;
            boxes[i].add(x, y);
            if let Some(r) = reference {
                let v = r.get(x, y);
                if v > 0 {
                    sums[i] += v as u64;
                    nonzero[i] += 1;
                }
            }
        }
    }
    Ok((0..k)
        .map(|i| Region {
            label: i as u32 + 1,
            area: areas[i],
            bbox: boxes[i].get().expect("every label has pixels"),
            mean_intensity: reference.map(|_| {
                if nonzero[i] == 0 {
                    0.0
                } else {
                    sums[i] as f64 / nonzero[i] as f64
                }
            }),
        })
        .collect())
}

/// `(label_a, label_b, shared_pixels)` for every pair of regions that overlap,
/// sorted by `(label_a, label_b)`.
pub fn overlap_pairs(a: &LabelMap, b: &LabelMap) -> Result<Vec<(u32, u32, usize)>> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        if la != 0 && lb != 0 {
            *counts.entry((la, lb)).or_insert(0) += 1;
        }
    }
    let mut pairs: Vec<_> = counts.into_iter().map(|((i, j), n)| (i, j, n)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(w, h, |x, y| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn empty_mask() {
        let lm = label_components(&BinaryMask::new(5, 4), Connectivity::Eight);
        assert_eq!(lm.count(), 0);
        assert!(lm.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn diagonal_pixels() {
        let m = mask(&["#.", ".#"]);
        assert_eq!(label_components(&m, Connectivity::Four).count(), 2);
        assert_eq!(label_components(&m, Connectivity::Eight).count(), 1);
    }

    #[test]
    fn first_encounter_order() {
        let m = mask(&["..#", "#..", "#.#"]);
        let lm = label_components(&m, Connectivity::Four);
        assert_eq!(lm.get(2, 0), 1);
        assert_eq!(lm.get(0, 1), 2);
        assert_eq!(lm.get(2, 2), 3);
    }

    #[test]
    fn u_shape_merges() {
        let m = mask(&["#.#", "#.#", "###"]);
        let lm = label_components(&m, Connectivity::Four);
        assert_eq!(lm.count(), 1);
    }

    #[test]
    fn square_properties() {
        let mut m = BinaryMask::new(6, 6);
        m.fill_rect(&Rect::new(1, 2, 3, 4), true);
        let lm = label_components(&m, Connectivity::Eight);
        let reference = GrayImage::filled(6, 6, 100);
        let regions = region_properties(&lm, Some(&reference)).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].area, 9);
        assert_eq!(regions[0].bbox, Rect::new(1, 2, 3, 4));
        assert_eq!(regions[0].mean_intensity, Some(100.0));
    }

    #[test]
    fn mean_over_nonzero_reference() {
        let m = mask(&["###"]);
        let lm = label_components(&m, Connectivity::Eight);
        let reference = GrayImage::from_vec(3, 1, vec![0, 10, 20]).unwrap();
        let r = &region_properties(&lm, Some(&reference)).unwrap()[0];
        assert_eq!(r.mean_intensity, Some(15.0));
        let zero = GrayImage::new(3, 1);
        let r = &region_properties(&lm, Some(&zero)).unwrap()[0];
        assert_eq!(r.mean_intensity, Some(0.0));
    }

    #[test]
    fn l_shape_bbox() {
        // pixels (0,0), (0,1), (1,1)
        let m = mask(&["#.", "##"]);
        let lm = label_components(&m, Connectivity::Four);
        let r = &region_properties(&lm, None).unwrap()[0];
        assert_eq!(r.bbox, Rect::new(0, 0, 1, 1));
        assert_eq!(r.area, 3);
        assert_eq!(r.mean_intensity, None);
    }

    #[test]
    fn reference_dimension_mismatch() {
        let lm = label_components(&BinaryMask::new(3, 3), Connectivity::Eight);
        assert!(region_properties(&lm, Some(&GrayImage::new(2, 3))).is_err());
        let other = label_components(&BinaryMask::new(3, 2), Connectivity::Eight);
        assert!(overlap_pairs(&lm, &other).is_err());
    }

    #[test]
    fn overlap_identical_and_disjoint() {
        let m = mask(&["##..#", "##..#", ".....", "###.."]);
        let lm = label_components(&m, Connectivity::Eight);
        let pairs = overlap_pairs(&lm, &lm).unwrap();
        assert_eq!(pairs, vec![(1, 1, 4), (2, 2, 2), (3, 3, 3)]);

        let other = mask(&["..##.", "..##.", "#####", "....."]);
        let lo = label_components(&other, Connectivity::Four);
        let disjoint = mask(&["....#", ".....", ".....", "....."]);
        let ld = label_components(&disjoint, Connectivity::Four);
        assert!(overlap_pairs(&ld, &lo).unwrap().is_empty());
    }

    #[test]
    fn overlap_split_region() {
        // a: one horizontal bar; b: the same bar cut in two.
        let a = mask(&[
            "........", "........", "........", ".######.", ".######.", "........", "........",
            "........",
        ]);
        let b = mask(&[
            "........", "........", "........", ".##..##.", ".##..##.", "........", "........",
            "........",
        ]);
        let la = label_components(&a, Connectivity::Eight);
        let lb = label_components(&b, Connectivity::Eight);
        assert_eq!(overlap_pairs(&la, &lb).unwrap(), vec![(1, 1, 4), (1, 2, 4)]);
    }
}
