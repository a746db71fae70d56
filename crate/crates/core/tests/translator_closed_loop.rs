use icsv_core::neural::{LossKind, TrainConfig};
use icsv_core::raster::PatchGrid;
use icsv_core::synthgen::{gen_layout, render_sem, LayoutParams, RenderParams};
use icsv_core::viadetect::{build_translator_pairs, encode_wv, estimate_vwb, reconstruct, train_translator, TranslatorImage};

fn clean_image(seed: u64) -> TranslatorImage {
    let layout = gen_layout(seed, 256, 256, &LayoutParams::default()).unwrap();
    let osem = render_sem(&layout, &RenderParams::clean(220, 140, 40), seed).unwrap();
    TranslatorImage {
        osem,
        w_mask: layout.wire_mask,
        v_mask: layout.via_mask,
    }
}

#[test]
fn zero_noise_reconstruction_is_close() {
    let train: Vec<_> = (0..3).map(clean_image).collect();
    let ds = build_translator_pairs(&train, 64).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        lr: 0.02,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::new(LossKind::L1)
    };
    let (model, report) = train_translator(&ds, &cfg, |_, _| {}).unwrap();
    assert!(report.epoch_losses.last() < report.epoch_losses.first());

    let held = clean_image(99);
    let t = estimate_vwb(&held.osem, &held.w_mask, &held.v_mask).unwrap();
    let enc = encode_wv(&held.w_mask, &held.v_mask, &t).unwrap();
    let rsem = reconstruct(&model, &enc, &PatchGrid::tile(256, 256, 64, 64).unwrap()).unwrap();
    let mae = rsem
        .data()
        .iter()
        .zip(held.osem.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
        .sum::<f64>()
        / rsem.data().len() as f64;
    assert!(mae < 5.0, "mean absolute error {mae}");

    let (again, _) = train_translator(&ds, &cfg, |_, _| {}).unwrap();
    assert_eq!(reconstruct(&again, &enc, &PatchGrid::tile(256, 256, 64, 64).unwrap()).unwrap(), rsem);
}
