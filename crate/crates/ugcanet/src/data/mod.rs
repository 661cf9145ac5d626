//! Dataset records, manifest IO and the synthetic dataset generator.
//!
//! Datasets live on disk as a CSV manifest plus netpbm rasters. Task
//! indicators are derived from which annotations a row carries, so the
//! `label present <=> indicator set` invariant holds by construction; range
//! and file errors are reported with their manifest row number.

pub mod augment;
pub mod netpbm;
pub mod resize;
pub mod synth;

use crate::nn::heads::{TaskIndicator, LE_CLASSES, POS_CLASSES};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LIGHTING_MODES: [&str; 4] = ["wli", "fice", "bli", "lci"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest {path} row {row}: {detail}")]
    Row {
        path: String,
        row: usize,
        detail: String,
    },
    #[error("manifest {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("raster {path}: {source}")]
    Netpbm {
        path: String,
        source: netpbm::NetpbmError,
    },
}

/// Optional class labels of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelRecord {
    /// Anatomical site, 0..=9.
    pub pos: Option<usize>,
    /// Lesion type, 0..=5.
    pub le: Option<usize>,
    /// HP status, 0 or 1.
    pub hp: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleMeta {
    pub source_id: String,
    pub lighting: Option<String>,
}

/// One dataset sample in memory; `mu` mirrors which annotations exist.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor,
    /// `[1,H,W]` binary, present iff the segmentation indicator is set.
    pub mask: Option<Tensor>,
    pub labels: LabelRecord,
    pub mu: TaskIndicator,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn new(
        image: Tensor,
        mask: Option<Tensor>,
        labels: LabelRecord,
        meta: SampleMeta,
    ) -> Self {
        let mu = TaskIndicator {
            pos: labels.pos.is_some(),
            le: labels.le.is_some(),
            hp: labels.hp.is_some(),
            seg: mask.is_some(),
        };
        Self {
            image,
            mask,
            labels,
            mu,
            meta,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// Stratification key: anatomical site x lighting mode when the sample is
    /// site-labelled, then lesion type, then HP status, then plain "seg".
    pub fn stratum_key(&self) -> String {
        if let Some(p) = self.labels.pos {
            let light = self.meta.lighting.as_deref().unwrap_or("none");
            format!("site{p}|{light}")
        } else if let Some(le) = self.labels.le {
            format!("le{le}")
        } else if let Some(hp) = self.labels.hp {
            format!("hp{hp}")
        } else {
            "seg".to_string()
        }
    }

    /// Resize to `(h, w)`: bilinear for the image, nearest for the mask.
    pub fn resized(&self, h: usize, w: usize) -> Result<SampleRecord, crate::tensor::TensorError> {
        let image = resize::resize_bilinear(&self.image, h, w)?;
        let mask = match &self.mask {
            Some(m) => Some(resize::resize_nearest(m, h, w)?),
            None => None,
        };
        Ok(SampleRecord {
            image,
            mask,
            labels: self.labels,
            mu: self.mu,
            meta: self.meta.clone(),
        })
    }
}

pub const MANIFEST_HEADER: &str = "image,mask?,pos_label?,le_label?,hp_label?,lighting?";

/// One manifest row; paths are relative to the manifest file.
#[derive(Debug, Clone, Default)]
pub struct ManifestRow {
    pub image: String,
    pub mask: Option<String>,
    pub pos_label: Option<usize>,
    pub le_label: Option<usize>,
    pub hp_label: Option<u8>,
    pub lighting: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a manifest CSV. Fields must not contain commas (the format is
/// deliberately quote-free).
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "{MANIFEST_HEADER}").map_err(|e| io_err(path, e))?;
    for row in rows {
        let opt_us =
            |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{}",
            row.image,
            row.mask.clone().unwrap_or_default(),
            opt_us(&row.pos_label),
            opt_us(&row.le_label),
            row.hp_label.map(|x| x.to_string()).unwrap_or_default(),
            row.lighting.clone().unwrap_or_default()
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn parse_opt_field<T: std::str::FromStr>(
    field: &str,
    name: &str,
    path: &Path,
    row: usize,
) -> Result<Option<T>, DataError> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<T>().map(Some).map_err(|_| DataError::Row {
        path: path.display().to_string(),
        row,
        detail: format!("cannot parse {name} value {field:?}"),
    })
}

/// Parse a manifest into rows; label ranges are validated here, file
/// contents when samples are loaded.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::Format {
        path: path.display().to_string(),
        detail: "empty manifest".into(),
    })?;
    if header.trim() != MANIFEST_HEADER {
        return Err(DataError::Format {
            path: path.display().to_string(),
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row_no = i + 2; // 1-based, after the header
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(DataError::Row {
                path: path.display().to_string(),
                row: row_no,
                detail: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let row = ManifestRow {
            image: fields[0].to_string(),
            mask: (!fields[1].is_empty()).then(|| fields[1].to_string()),
            pos_label: parse_opt_field(fields[2], "pos_label", path, row_no)?,
            le_label: parse_opt_field(fields[3], "le_label", path, row_no)?,
            hp_label: parse_opt_field(fields[4], "hp_label", path, row_no)?,
            lighting: (!fields[5].is_empty()).then(|| fields[5].to_string()),
        };
        if row.image.is_empty() {
            return Err(DataError::Row {
                path: path.display().to_string(),
                row: row_no,
                detail: "missing image path".into(),
            });
        }
        if let Some(p) = row.pos_label {
            if p >= POS_CLASSES {
                return Err(DataError::Row {
                    path: path.display().to_string(),
                    row: row_no,
                    detail: format!("pos_label {p} out of range 0..{}", POS_CLASSES - 1),
                });
            }
        }
        if let Some(le) = row.le_label {
            if le >= LE_CLASSES {
                return Err(DataError::Row {
                    path: path.display().to_string(),
                    row: row_no,
                    detail: format!("le_label {le} out of range 0..{}", LE_CLASSES - 1),
                });
            }
        }
        if let Some(hp) = row.hp_label {
            if hp > 1 {
                return Err(DataError::Row {
                    path: path.display().to_string(),
                    row: row_no,
                    detail: format!("hp_label {hp} must be 0 or 1"),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Load every sample a manifest names. Images must be P6 (RGB), masks P5.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let rows = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row_no = i + 2;
        let image_path: PathBuf = base.join(&row.image);
        let image = netpbm::load(&image_path).map_err(|e| DataError::Netpbm {
            path: image_path.display().to_string(),
            source: e,
        })?;
        if image.shape()[0] != 3 {
            return Err(DataError::Row {
                path: manifest_path.display().to_string(),
                row: row_no,
                detail: format!("image {} is not RGB (P6)", row.image),
            });
        }
        let mask = match &row.mask {
            Some(rel) => {
                let mask_path = base.join(rel);
                let m = netpbm::load_mask(&mask_path).map_err(|e| DataError::Netpbm {
                    path: mask_path.display().to_string(),
                    source: e,
                })?;
                if m.shape()[1..] != image.shape()[1..] {
                    return Err(DataError::Row {
                        path: manifest_path.display().to_string(),
                        row: row_no,
                        detail: format!(
                            "mask dims {:?} do not match image dims {:?}",
                            &m.shape()[1..],
                            &image.shape()[1..]
                        ),
                    });
                }
                Some(m)
            }
            None => None,
        };
        samples.push(SampleRecord::new(
            image,
            mask,
            LabelRecord {
                pos: row.pos_label,
                le: row.le_label,
                hp: row.hp_label,
            },
            SampleMeta {
                source_id: row.image.clone(),
                lighting: row.lighting.clone(),
            },
        ));
    }
    Ok(samples)
}
