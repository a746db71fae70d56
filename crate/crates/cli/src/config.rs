//! Flat `key = value` run configuration with embedded defaults.

use std::fmt::Write as _;
use std::path::Path;

use icsv_core::conneval::EsdOptions;
use icsv_core::extfeat::{Normalization, Variant};
use icsv_core::neural::{LossKind, LrSchedule, TrainConfig};
use icsv_core::synthgen::{InjectOptions, LayoutParams, RenderParams, SampleParams};
use icsv_core::viadetect::{CandidateFilter, ViaParams};
use icsv_core::wiredetect::WireParams;

use crate::error::CliError;

/// A value that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u8, u32, u64, usize, f64, bool, Variant);

impl ConfigValue for Normalization {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "image-max" => Ok(Normalization::ImageMax),
            "image-dimension" => Ok(Normalization::ImageDimension),
            _ => Err("expected image-max or image-dimension".into()),
        }
    }
    fn show(&self) -> String {
        match self {
            Normalization::ImageMax => "image-max".into(),
            Normalization::ImageDimension => "image-dimension".into(),
        }
    }
}

impl ConfigValue for LrSchedule {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear-decay-last-half" => Ok(LrSchedule::LinearDecayLastHalf),
            _ => Err("expected constant or linear-decay-last-half".into()),
        }
    }
    fn show(&self) -> String {
        match self {
            LrSchedule::Constant => "constant".into(),
            LrSchedule::LinearDecayLastHalf => "linear-decay-last-half".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub test_count: usize,
    pub width: usize,
    pub height: usize,
    pub track_pitch: usize,
    pub wire_width: usize,
    pub density: f64,
    pub stub_rate: f64,
    pub via_level: u8,
    pub wire_level: u8,
    pub bg_level: u8,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub illumination_tilt: f64,
    pub n_open: usize,
    pub n_short: usize,
    pub via_error_ratio: f64,
    pub border_margin: usize,
    pub contamination: f64,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireConfig {
    pub variant: Variant,
    pub patch_size: usize,
    pub stride: usize,
    pub vote_threshold: u32,
    pub normalization: Normalization,
    pub esd_margin: usize,
    pub samples_per_image: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViaConfig {
    pub patch_size: usize,
    pub binarize_threshold: u8,
    pub bbox_min_factor: f64,
    pub bbox_max_factor: f64,
    pub mean_min: f64,
    pub mean_max: f64,
    pub contrast_floor: u8,
    pub train_images: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub wire: WireConfig,
    pub via: ViaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let layout = LayoutParams::default();
        let render = RenderParams::default();
        let sample = SampleParams::default();
        let wire = WireParams::default();
        RunConfig {
            seed: 42,
            synth: SynthConfig {
                count: 24,
                test_count: 8,
                width: sample.width,
                height: sample.height,
                track_pitch: layout.track_pitch,
                wire_width: layout.wire_width,
                density: layout.density,
                stub_rate: layout.stub_rate,
                via_level: render.via_level,
                wire_level: render.wire_level,
                bg_level: render.bg_level,
                noise_sigma: render.noise_sigma,
                blur_radius: render.blur_radius,
                illumination_tilt: render.illumination_tilt,
                n_open: 3,
                n_short: 3,
                via_error_ratio: sample.via_error_ratio,
                border_margin: InjectOptions::default().border_margin,
                contamination: 0.0,
                exposure: 0.0,
            },
            wire: WireConfig {
                variant: wire.variant,
                patch_size: wire.patch_size,
                stride: wire.stride,
                vote_threshold: wire.vote_threshold,
                normalization: wire.normalization,
                esd_margin: wire.esd.margin,
                samples_per_image: 600,
                epochs: 15,
                lr: 0.05,
                lr_schedule: LrSchedule::LinearDecayLastHalf,
                batch_size: 32,
                momentum: 0.9,
            },
            via: ViaConfig {
                patch_size: 64,
                binarize_threshold: 40,
                bbox_min_factor: 0.5,
                bbox_max_factor: 2.0,
                mean_min: 40.0,
                mean_max: 255.0,
                contrast_floor: 20,
                train_images: 4,
                epochs: 10,
                lr: 0.01,
                lr_schedule: LrSchedule::LinearDecayLastHalf,
                batch_size: 8,
                momentum: 0.9,
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $t:ty),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => self.$($field).+ = <$t as ConfigValue>::parse_value(value)?,)*
                    _ => return Err("unknown key".into()),
                }
                Ok(())
            }

            /// Every key with its current value, one per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", $key, ConfigValue::show(&self.$($field).+)).unwrap();)*
                s
            }
        }
    };
}

config_keys! {
    "seed" => seed: u64,
    "synth.count" => synth.count: usize,
    "synth.test_count" => synth.test_count: usize,
    "synth.width" => synth.width: usize,
    "synth.height" => synth.height: usize,
    "synth.track_pitch" => synth.track_pitch: usize,
    "synth.wire_width" => synth.wire_width: usize,
    "synth.density" => synth.density: f64,
    "synth.stub_rate" => synth.stub_rate: f64,
    "synth.via_level" => synth.via_level: u8,
    "synth.wire_level" => synth.wire_level: u8,
    "synth.bg_level" => synth.bg_level: u8,
    "synth.noise_sigma" => synth.noise_sigma: f64,
    "synth.blur_radius" => synth.blur_radius: usize,
    "synth.illumination_tilt" => synth.illumination_tilt: f64,
    "synth.n_open" => synth.n_open: usize,
    "synth.n_short" => synth.n_short: usize,
    "synth.via_error_ratio" => synth.via_error_ratio: f64,
    "synth.border_margin" => synth.border_margin: usize,
    "synth.contamination" => synth.contamination: f64,
    "synth.exposure" => synth.exposure: f64,
    "wire.variant" => wire.variant: Variant,
    "wire.patch_size" => wire.patch_size: usize,
    "wire.stride" => wire.stride: usize,
    "wire.vote_threshold" => wire.vote_threshold: u32,
    "wire.normalization" => wire.normalization: Normalization,
    "wire.esd_margin" => wire.esd_margin: usize,
    "wire.samples_per_image" => wire.samples_per_image: usize,
    "wire.epochs" => wire.epochs: usize,
    "wire.lr" => wire.lr: f64,
    "wire.lr_schedule" => wire.lr_schedule: LrSchedule,
    "wire.batch_size" => wire.batch_size: usize,
    "wire.momentum" => wire.momentum: f64,
    "via.patch_size" => via.patch_size: usize,
    "via.binarize_threshold" => via.binarize_threshold: u8,
    "via.bbox_min_factor" => via.bbox_min_factor: f64,
    "via.bbox_max_factor" => via.bbox_max_factor: f64,
    "via.mean_min" => via.mean_min: f64,
    "via.mean_max" => via.mean_max: f64,
    "via.contrast_floor" => via.contrast_floor: u8,
    "via.train_images" => via.train_images: usize,
    "via.epochs" => via.epochs: usize,
    "via.lr" => via.lr: f64,
    "via.lr_schedule" => via.lr_schedule: LrSchedule,
    "via.batch_size" => via.batch_size: usize,
    "via.momentum" => via.momentum: f64,
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("config line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| CliError::Validation(format!("config line {}: {key}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text)
            }
        }
    }

    pub fn sample_params(&self) -> SampleParams {
        let s = &self.synth;
        SampleParams {
            width: s.width,
            height: s.height,
            layout: LayoutParams {
                track_pitch: s.track_pitch,
                wire_width: s.wire_width,
                density: s.density,
                stub_rate: s.stub_rate,
            },
            render: RenderParams {
                via_level: s.via_level,
                wire_level: s.wire_level,
                bg_level: s.bg_level,
                noise_sigma: s.noise_sigma,
                blur_radius: s.blur_radius,
                illumination_tilt: s.illumination_tilt,
            },
            n_open: s.n_open,
            n_short: s.n_short,
            via_error_ratio: s.via_error_ratio,
            inject: InjectOptions {
                border_margin: s.border_margin,
                ..InjectOptions::default()
            },
            contamination: s.contamination,
            exposure: s.exposure,
        }
    }

    pub fn wire_params(&self) -> WireParams {
        let w = &self.wire;
        WireParams {
            patch_size: w.patch_size,
            stride: w.stride,
            vote_threshold: w.vote_threshold,
            variant: w.variant,
            normalization: w.normalization,
            esd: EsdOptions {
                margin: w.esd_margin,
                ..EsdOptions::default()
            },
        }
    }

    pub fn wire_train_config(&self) -> TrainConfig {
        let w = &self.wire;
        TrainConfig {
            epochs: w.epochs,
            lr: w.lr,
            lr_schedule: w.lr_schedule,
            batch_size: w.batch_size,
            seed: self.seed,
            momentum: w.momentum,
            ..TrainConfig::new(LossKind::WeightedCe)
        }
    }

    pub fn via_params(&self, nominal_via_size: usize) -> ViaParams {
        let v = &self.via;
        let size = nominal_via_size as f64;
        ViaParams {
            patch_size: v.patch_size,
            binarize_threshold: v.binarize_threshold,
            filter: CandidateFilter {
                bbox_min: (v.bbox_min_factor * size).floor() as usize,
                bbox_max: (v.bbox_max_factor * size).ceil() as usize,
                mean_min: v.mean_min,
                mean_max: v.mean_max,
            },
            contrast_floor: v.contrast_floor,
        }
    }

    pub fn via_train_config(&self) -> TrainConfig {
        let v = &self.via;
        TrainConfig {
            epochs: v.epochs,
            lr: v.lr,
            lr_schedule: v.lr_schedule,
            batch_size: v.batch_size,
            seed: self.seed,
            momentum: v.momentum,
            ..TrainConfig::new(LossKind::L1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        let text = d.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), d);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# c\nseed = 7\nwire.variant = VH  # inline\n\nvia.lr=0.5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.wire.variant, Variant::VH);
        assert_eq!(c.via.lr, 0.5);
    }

    #[test]
    fn bad_lines_are_validation_errors() {
        for text in ["nokey", "seed = x", "wire.bogus = 1", "wire.normalization = max"] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Validation(_))), "{text}");
        }
    }

    #[test]
    fn via_filter_scales_with_via_size() {
        let f = RunConfig::default().via_params(10).filter;
        assert_eq!((f.bbox_min, f.bbox_max), (5, 20));
    }
}
