use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use icsv_core::conneval::{score_detections, ScoreMode, ScoreSheet};
use icsv_core::extfeat::{build_stack_with, Variant};
use icsv_core::neural::{Arch, Checkpoint, Classifier, TrainReport, Translator};
use icsv_core::raster::save_gray;
use icsv_core::report::ErrorReport;
use icsv_core::synthgen::{generate_sample, read_error_log, write_sample_dir, ErrorKind, ErrorLog, ERRORS_FILE, OSEM_FILE, VIA_ERR_FILE, VIA_GT_FILE, WIRE_ERR_FILE, WIRE_GT_FILE};
use icsv_core::viadetect::{build_translator_pairs, detect_via, train_translator, TranslatorImage};
use icsv_core::wiredetect::{build_wire_dataset, detect_wire, train_wire_classifier, WirePair};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{DatasetManifest, ManifestEntry, Split, SplitFilter};
use crate::overlay::render_report;

#[derive(Debug, Parser)]
#[command(name = "icsv", version, about = "Connectivity-aware error detection for IC segmentation masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitFilter::Test)]
    pub split: SplitFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the V/H extension features of each candidate wire mask.
    Features {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the wire patch classifier on the manifest's train split.
    TrainWire {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Checkpoint path; the loss log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the via translator on the manifest's train split.
    TrainVia {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect wire errors in candidate wire masks.
    DetectWire {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect missed and extra vias in candidate via masks.
    DetectVia {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write rSEM, D1 and D2 images.
        #[arg(long)]
        dump: bool,
    },
    /// Run both branches and write merged reports.
    Detect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        wire_checkpoint: PathBuf,
        #[arg(long)]
        via_checkpoint: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score report directories against the injected-error logs.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// `DIR` or `LABEL=DIR`; repeatable.
        #[arg(long, required = true)]
        predictions: Vec<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect configuration.
    Config {
        /// Print every key with its default value.
        #[arg(long)]
        print_defaults: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    WirePatch,
    ViaRegion,
}

impl From<ModeArg> for ScoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::WirePatch => ScoreMode::WirePatch,
            ModeArg::ViaRegion => ScoreMode::ViaRegion,
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, out } => cmd_synth(&common.load()?, &out),
        Command::Features { common, data, out } => cmd_features(&common.load()?, &data, &out),
        Command::TrainWire {
            common,
            manifest,
            variant,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.wire.variant = v;
            }
            cmd_train_wire(&cfg, &manifest, &out)
        }
        Command::TrainVia { common, manifest, out } => cmd_train_via(&common.load()?, &manifest, &out),
        Command::DetectWire {
            common,
            data,
            checkpoint,
            variant,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.wire.variant = v;
            }
            cmd_detect(&cfg, &data, Some(&checkpoint), None, &out, false)
        }
        Command::DetectVia {
            common,
            data,
            checkpoint,
            out,
            dump,
        } => cmd_detect(&common.load()?, &data, None, Some(&checkpoint), &out, dump),
        Command::Detect {
            common,
            data,
            wire_checkpoint,
            via_checkpoint,
            variant,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.wire.variant = v;
            }
            cmd_detect(&cfg, &data, Some(&wire_checkpoint), Some(&via_checkpoint), &out, false)
        }
        Command::Eval {
            data,
            predictions,
            mode,
            out,
        } => cmd_eval(&data, &predictions, mode.map(Into::into), &out),
        Command::Config { print_defaults } => {
            if print_defaults {
                print!("{}", RunConfig::default().to_text());
                Ok(())
            } else {
                Err(CliError::Validation("nothing to do; try --print-defaults".into()))
            }
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let s = &cfg.synth;
    if s.test_count > s.count {
        return Err(CliError::Validation(format!(
            "synth.test_count {} exceeds synth.count {}",
            s.test_count, s.count
        )));
    }
    create_dir(out)?;
    let params = cfg.sample_params();
    let mut images = Vec::with_capacity(s.count);
    let mut via_size = cfg.synth.wire_width + 2;
    for i in 0..s.count {
        let id = format!("img{i:03}");
        let sample = generate_sample(sample_seed(cfg.seed, i), &params)?;
        via_size = sample.layout.via_size();
        write_sample_dir(&sample, &out.join(&id))?;
        let n_via = sample.log.count(ErrorKind::ViaMiss) + sample.log.count(ErrorKind::ViaExtra);
        eprintln!(
            "{id}: {} opens, {} shorts, {} via errors of {} vias",
            sample.log.count(ErrorKind::Open),
            sample.log.count(ErrorKind::Short),
            n_via,
            sample.layout.vias.len()
        );
        let rel = |f: &str| PathBuf::from(&id).join(f);
        images.push(ManifestEntry {
            split: if i + s.test_count >= s.count { Split::Test } else { Split::Train },
            osem: rel(OSEM_FILE),
            wire_gt: rel(WIRE_GT_FILE),
            via_gt: rel(VIA_GT_FILE),
            wire_candidate: rel(WIRE_ERR_FILE),
            via_candidate: rel(VIA_ERR_FILE),
            errors: rel(ERRORS_FILE),
            id,
        });
    }
    let manifest = DatasetManifest {
        patch_size: cfg.wire.patch_size,
        nominal_via_size: via_size,
        images,
        base_dir: out.to_path_buf(),
    };
    let path = out.join(DatasetManifest::FILE_NAME);
    manifest.save(&path)?;
    DatasetManifest::load(&path)?.validate()
}

pub fn cmd_features(cfg: &RunConfig, data: &DataArgs, out: &Path) -> CliResult<()> {
    let manifest = DatasetManifest::load(&data.manifest)?;
    create_dir(out)?;
    for e in manifest.entries(data.split) {
        let img = manifest.load_entry(e)?;
        let stack = build_stack_with(&img.wire_candidate, cfg.wire.normalization);
        save_gray(stack.v_feature(), out.join(format!("{}_V.png", e.id)))?;
        save_gray(stack.h_feature(), out.join(format!("{}_H.png", e.id)))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainLog<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    seed: u64,
    images: usize,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    positives: Option<usize>,
    epoch_losses: &'a [f64],
    steps: usize,
    /// Last epoch's loss below the first's.
    loss_decreased: bool,
}

fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

fn finish_training(log: &TrainLog<'_>, ckpt: &Checkpoint, out: &Path) -> CliResult<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ckpt.save(out)?;
    if !log.loss_decreased {
        eprintln!("warning: training loss did not decrease");
    }
    write_text(&log_path(out), &(serde_json::to_string_pretty(log).expect("log serializes") + "\n"))
}

fn decreased(r: &TrainReport) -> bool {
    matches!((r.epoch_losses.first(), r.epoch_losses.last()), (Some(a), Some(b)) if b < a)
}

fn progress(kind: &'static str) -> impl FnMut(usize, f64) {
    move |e, l| eprintln!("{kind} epoch {e}: loss {l:.5}")
}

fn train_entries(manifest: &DatasetManifest) -> CliResult<Vec<&ManifestEntry>> {
    let entries: Vec<_> = manifest.entries(SplitFilter::Train).collect();
    if entries.is_empty() {
        return Err(CliError::Validation("manifest has no train images".into()));
    }
    Ok(entries)
}

pub fn cmd_train_wire(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> CliResult<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut pairs = Vec::new();
    for e in train_entries(&manifest)? {
        let img = manifest.load_entry(e)?;
        pairs.push(WirePair {
            id: img.id,
            gw: img.wire_gt,
            ew: img.wire_candidate,
        });
    }
    let params = cfg.wire_params();
    let n = pairs.len() * cfg.wire.samples_per_image;
    let ds = build_wire_dataset(&pairs, n, &params, cfg.seed)?;
    eprintln!("wire: {} samples, {} positive", n, ds.positives());
    let tc = cfg.wire_train_config();
    let (model, report) = train_wire_classifier(&ds, &tc, progress("wire"))?;
    let log = TrainLog {
        kind: "wire",
        variant: Some(cfg.wire.variant.to_string()),
        seed: cfg.seed,
        images: pairs.len(),
        samples: n,
        positives: Some(ds.positives()),
        epoch_losses: &report.epoch_losses,
        steps: report.steps,
        loss_decreased: decreased(&report),
    };
    finish_training(&log, &Checkpoint::capture(&model, cfg.seed, tc.epochs), out)
}

pub fn cmd_train_via(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> CliResult<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut images = Vec::new();
    for e in train_entries(&manifest)?.into_iter().take(cfg.via.train_images.max(1)) {
        let img = manifest.load_entry(e)?;
        images.push(TranslatorImage {
            osem: img.osem,
            w_mask: img.wire_gt,
            v_mask: img.via_gt,
        });
    }
    let ds = build_translator_pairs(&images, cfg.via.patch_size)?;
    eprintln!("via: {} patch pairs", ds.inputs.len());
    let tc = cfg.via_train_config();
    let (model, report) = train_translator(&ds, &tc, progress("via"))?;
    let log = TrainLog {
        kind: "via",
        variant: None,
        seed: cfg.seed,
        images: images.len(),
        samples: ds.inputs.len(),
        positives: None,
        epoch_losses: &report.epoch_losses,
        steps: report.steps,
        loss_decreased: decreased(&report),
    };
    finish_training(&log, &Checkpoint::capture(&model, cfg.seed, tc.epochs), out)
}

fn load_classifier(path: &Path, variant: Variant) -> CliResult<Classifier<f32>> {
    let ckpt = Checkpoint::load(path)?;
    match &ckpt.header.arch {
        Arch::Classifier { in_channels, .. } if *in_channels == variant.channels() => Ok(ckpt.classifier()?),
        Arch::Classifier { in_channels, .. } => Err(CliError::Validation(format!(
            "{}: checkpoint takes {in_channels} input channels but variant {variant} needs {}",
            path.display(),
            variant.channels()
        ))),
        other => Err(CliError::Validation(format!(
            "{}: expected a classifier checkpoint, found {other:?}",
            path.display()
        ))),
    }
}

fn load_translator(path: &Path) -> CliResult<Translator<f32>> {
    let ckpt = Checkpoint::load(path)?;
    match ckpt.header.arch {
        Arch::Translator { .. } => Ok(ckpt.translator()?),
        other => Err(CliError::Validation(format!(
            "{}: expected a translator checkpoint, found {other:?}",
            path.display()
        ))),
    }
}

pub fn cmd_detect(
    cfg: &RunConfig,
    data: &DataArgs,
    wire_ckpt: Option<&Path>,
    via_ckpt: Option<&Path>,
    out: &Path,
    dump: bool,
) -> CliResult<()> {
    let manifest = DatasetManifest::load(&data.manifest)?;
    let classifier = wire_ckpt.map(|p| load_classifier(p, cfg.wire.variant)).transpose()?;
    let translator = via_ckpt.map(load_translator).transpose()?;
    let wire_params = cfg.wire_params();
    let via_params = cfg.via_params(manifest.nominal_via_size);
    create_dir(out)?;
    for e in manifest.entries(data.split) {
        let img = manifest.load_entry(e)?;
        let mut report = ErrorReport::new(&img.id);
        if let Some(model) = &classifier {
            let (r, _) = detect_wire(model, &img.id, &img.wire_candidate, &wire_params)?;
            report = report.merge(r)?;
        }
        if let Some(model) = &translator {
            let (r, art) = detect_via(
                model,
                &img.id,
                &img.osem,
                &img.wire_candidate,
                &img.via_candidate,
                &via_params,
            )?;
            for w in &r.warnings {
                eprintln!("warning: {}: {w}", img.id);
            }
            if dump {
                save_gray(&art.rsem, out.join(format!("{}_rSEM.png", img.id)))?;
                save_gray(&art.diff.d1, out.join(format!("{}_D1.png", img.id)))?;
                save_gray(&art.diff.d2, out.join(format!("{}_D2.png", img.id)))?;
            }
            report = report.merge(r)?;
        }
        report.save(&out.join(format!("{}.json", img.id)))?;
        render_report(&img.osem, &report).save(&out.join(format!("{}_overlay.png", img.id)))?;
        eprintln!(
            "{}: {} wire boxes, {} extra, {} miss",
            img.id,
            report.error_boxes.as_ref().map_or(0, Vec::len),
            report.extra.as_ref().map_or(0, Vec::len),
            report.miss.as_ref().map_or(0, Vec::len)
        );
    }
    Ok(())
}

/// Splits `LABEL=DIR` into its parts; a bare `DIR` has no label.
pub fn parse_prediction_arg(arg: &str) -> (Option<String>, PathBuf) {
    match arg.split_once('=') {
        Some((label, dir)) if !label.is_empty() => (Some(label.to_string()), PathBuf::from(dir)),
        _ => (None, PathBuf::from(arg)),
    }
}

fn load_reports(dir: &Path) -> CliResult<Vec<ErrorReport>> {
    let rd = fs::read_dir(dir)
        .map_err(|e| CliError::Validation(format!("cannot read predictions {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| ErrorReport::load(p).map_err(CliError::from)).collect()
}

#[derive(Debug, Serialize)]
pub struct LabelledSheet {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub sheet: ScoreSheet,
}

pub fn scores_csv(sheets: &[LabelledSheet]) -> String {
    let labelled = sheets.iter().any(|s| s.label.is_some());
    let mut s = String::new();
    if labelled {
        s.push_str("label,");
    }
    s.push_str("image,mode,tp,fp,fn,recall,precision\n");
    for ls in sheets {
        let rows = ls
            .sheet
            .per_image
            .iter()
            .map(|r| (r.image.as_str(), &r.score))
            .chain(std::iter::once(("total", &ls.sheet.total)));
        for (image, p) in rows {
            if labelled {
                write!(s, "{},", ls.label.as_deref().unwrap_or("")).unwrap();
            }
            writeln!(
                s,
                "{image},{},{},{},{},{:.6},{:.6}",
                ls.sheet.mode, p.tp, p.fp, p.fn_, p.recall, p.precision
            )
            .unwrap();
        }
    }
    s
}

pub fn cmd_eval(data: &DataArgs, predictions: &[String], mode: Option<ScoreMode>, out: &Path) -> CliResult<()> {
    let manifest = DatasetManifest::load(&data.manifest)?;
    let truth: Vec<(String, ErrorLog)> = manifest
        .entries(data.split)
        .map(|e| Ok((e.id.clone(), read_error_log(&manifest.resolve(&e.errors))?)))
        .collect::<CliResult<_>>()?;
    let mut sheets = Vec::new();
    for arg in predictions {
        let (label, dir) = parse_prediction_arg(arg);
        let reports = load_reports(&dir)?;
        let modes = match mode {
            Some(m) => vec![m],
            None => {
                let mut m = Vec::new();
                if !reports.is_empty() && reports.iter().all(|r| r.patch_verdicts.is_some()) {
                    m.push(ScoreMode::WirePatch);
                }
                if !reports.is_empty() && reports.iter().all(|r| r.extra.is_some()) {
                    m.push(ScoreMode::ViaRegion);
                }
                m
            }
        };
        if modes.is_empty() {
            return Err(CliError::Validation(format!(
                "{}: no report section to score",
                dir.display()
            )));
        }
        for m in modes {
            let sheet = score_detections(&reports, &truth, m)?;
            eprintln!(
                "{}{m}: recall {:.4} precision {:.4}",
                label.as_deref().map(|l| format!("{l} ")).unwrap_or_default(),
                sheet.total.recall,
                sheet.total.precision
            );
            sheets.push(LabelledSheet {
                label: label.clone(),
                sheet,
            });
        }
    }
    create_dir(out)?;
    write_text(
        &out.join("scores.json"),
        &(serde_json::to_string_pretty(&sheets).expect("scores serialize") + "\n"),
    )?;
    write_text(&out.join("scores.csv"), &scores_csv(&sheets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use icsv_core::conneval::{ImageScore, PrScore};

    #[test]
    fn prediction_args() {
        assert_eq!(parse_prediction_arg("out/w"), (None, PathBuf::from("out/w")));
        assert_eq!(
            parse_prediction_arg("WVH=out/w"),
            (Some("WVH".to_string()), PathBuf::from("out/w"))
        );
    }

    #[test]
    fn csv_layout() {
        let sheet = ScoreSheet {
            mode: ScoreMode::WirePatch,
            per_image: vec![ImageScore {
                image: "a".into(),
                score: PrScore::from_counts(1, 1, 0),
            }],
            total: PrScore::from_counts(1, 1, 0),
        };
        let plain = scores_csv(&[LabelledSheet {
            label: None,
            sheet: sheet.clone(),
        }]);
        assert_eq!(
            plain,
            "image,mode,tp,fp,fn,recall,precision\na,wire-patch,1,1,0,1.000000,0.500000\ntotal,wire-patch,1,1,0,1.000000,0.500000\n"
        );
        let labelled = scores_csv(&[LabelledSheet {
            label: Some("W".into()),
            sheet,
        }]);
        assert!(labelled.starts_with("label,image,"));
        assert!(labelled.contains("\nW,a,wire-patch,"));
    }
}
