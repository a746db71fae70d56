//! Dataset manifest: image roles and file locations, relative to the manifest.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use icsv_core::raster::{load_gray, load_mask, BinaryMask, GrayImage};
use icsv_core::synthgen::{read_error_log, ErrorLog};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Which images a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

impl SplitFilter {
    pub fn admits(self, s: Split) -> bool {
        matches!(
            (self, s),
            (SplitFilter::All, _) | (SplitFilter::Train, Split::Train) | (SplitFilter::Test, Split::Test)
        )
    }
}

impl fmt::Display for SplitFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitFilter::Train => "train",
            SplitFilter::Test => "test",
            SplitFilter::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub osem: PathBuf,
    pub wire_gt: PathBuf,
    pub via_gt: PathBuf,
    pub wire_candidate: PathBuf,
    pub via_candidate: PathBuf,
    pub errors: PathBuf,
}

impl ManifestEntry {
    fn files(&self) -> [&Path; 6] {
        [
            &self.osem,
            &self.wire_gt,
            &self.via_gt,
            &self.wire_candidate,
            &self.via_candidate,
            &self.errors,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patch_size: usize,
    pub nominal_via_size: usize,
    pub images: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One manifest image with every raster loaded.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub id: String,
    pub osem: GrayImage,
    pub wire_gt: BinaryMask,
    pub via_gt: BinaryMask,
    pub wire_candidate: BinaryMask,
    pub via_candidate: BinaryMask,
    pub errors: ErrorLog,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("malformed manifest {}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_files()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n")
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Unique ids and every referenced file present.
    pub fn check_files(&self) -> CliResult<()> {
        let mut ids: Vec<&str> = self.images.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Validation(format!("duplicate image id {}", w[0])));
        }
        for entry in &self.images {
            for f in entry.files() {
                let p = self.resolve(f);
                if !p.is_file() {
                    return Err(CliError::Validation(format!(
                        "image {}: missing file {}",
                        entry.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// File presence plus per-image dimension agreement.
    pub fn validate(&self) -> CliResult<()> {
        self.check_files()?;
        for entry in &self.images {
            self.load_entry(entry)?;
        }
        Ok(())
    }

    pub fn entries(&self, split: SplitFilter) -> impl Iterator<Item = &ManifestEntry> {
        self.images.iter().filter(move |e| split.admits(e.split))
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> CliResult<LoadedImage> {
        let img = LoadedImage {
            id: e.id.clone(),
            osem: load_gray(self.resolve(&e.osem))?,
            wire_gt: load_mask(self.resolve(&e.wire_gt))?,
            via_gt: load_mask(self.resolve(&e.via_gt))?,
            wire_candidate: load_mask(self.resolve(&e.wire_candidate))?,
            via_candidate: load_mask(self.resolve(&e.via_candidate))?,
            errors: read_error_log(&self.resolve(&e.errors))?,
        };
        let dims = img.osem.dims();
        for (name, m) in [
            ("wire_gt", &img.wire_gt),
            ("via_gt", &img.via_gt),
            ("wire_candidate", &img.wire_candidate),
            ("via_candidate", &img.via_candidate),
        ] {
            if m.dims() != dims {
                return Err(CliError::Validation(format!(
                    "image {}: {name} is {:?} but oSEM is {dims:?}",
                    e.id,
                    m.dims()
                )));
            }
        }
        Ok(img)
    }
}
