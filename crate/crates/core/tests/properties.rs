use proptest::prelude::*;

use icsv_core::conneval::via_match;
use icsv_core::extfeat::{h_extension, v_extension};
use icsv_core::neural::class_weights;
use icsv_core::raster::BinaryMask;
use icsv_core::regions::{label_components, overlap_pairs, region_properties, Connectivity};

fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
    (1..max, 1..max).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<bool>(), w * h).prop_map(move |d| BinaryMask::from_vec(w, h, d).unwrap())
    })
}

fn same_size_pair(max: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..max, 1..max).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(any::<bool>(), w * h),
            prop::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| (BinaryMask::from_vec(w, h, a).unwrap(), BinaryMask::from_vec(w, h, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn labels_cover_exactly_the_foreground(m in mask_strategy(24)) {
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let lm = label_components(&m, conn);
            for (l, &on) in lm.labels().iter().zip(m.data()) {
                prop_assert_eq!(*l != 0, on);
            }
            let regions = region_properties(&lm, None).unwrap();
            prop_assert_eq!(regions.len() as u32, lm.count());
            prop_assert_eq!(regions.iter().map(|r| r.area).sum::<usize>(), m.count());
        }
    }

    #[test]
    fn eight_connectivity_never_has_more_components(m in mask_strategy(24)) {
        let four = label_components(&m, Connectivity::Four).count();
        let eight = label_components(&m, Connectivity::Eight).count();
        prop_assert!(eight <= four);
    }

    #[test]
    fn extension_is_transpose_symmetric(m in mask_strategy(20)) {
        let t = m.transpose();
        let (a, b) = (h_extension(&t), v_extension(&m).transpose());
        prop_assert_eq!(a.values(), b.values());
        for (v, &on) in h_extension(&m).values().iter().zip(m.data()) {
            prop_assert_eq!(*v == 0, !on);
        }
    }

    #[test]
    fn class_weights_sum_to_one(p in 1usize..10_000_000, n in 1usize..10_000_000) {
        let (wp, wn) = class_weights(p, n).unwrap();
        prop_assert!((wp + wn - 1.0).abs() < 1e-12);
        prop_assert!((wp >= wn) == (n >= p));
    }

    #[test]
    fn via_match_conserves_regions((ev, gv) in same_size_pair(24)) {
        let r = via_match(&ev, &gv).unwrap();
        prop_assert_eq!(r.matched_ev() + r.extra.len(), r.ev_regions as usize);
        prop_assert_eq!(r.matched_gv() + r.miss.len(), r.gv_regions as usize);
        let swapped = via_match(&gv, &ev).unwrap();
        prop_assert_eq!(swapped.extra, r.miss);
    }

    #[test]
    fn overlap_areas_sum_to_intersection((a, b) in same_size_pair(24)) {
        let la = label_components(&a, Connectivity::Eight);
        let lb = label_components(&b, Connectivity::Eight);
        let total: usize = overlap_pairs(&la, &lb).unwrap().iter().map(|p| p.2).sum();
        let both = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
        prop_assert_eq!(total, both);
    }
}
