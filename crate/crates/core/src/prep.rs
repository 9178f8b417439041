//! Patch dataset assembly: ROI crops as positives, sampled background boxes
//! as negatives, and a patient-level split.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_geom::{extract, plan_patch, split_patients, NegativeSampler, PatchPlan, RoiBox, Split, SplitFractions};
use crate::pgm::{read_pgm, write_pgm};
use crate::records::MISSING;
use crate::seed::derive_seed;

/// Box size used for negatives when the manifest holds no ROI at all.
pub const FALLBACK_SIZE: (usize, usize) = (360, 437);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepOptions {
    pub fractions: SplitFractions,
    pub seed: u64,
    /// Negatives drawn per ROI on images with ROIs.
    pub negatives_per_roi: usize,
    /// Negatives drawn on ROI-free images.
    pub negatives_per_image: usize,
    pub attempts: usize,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self {
            fractions: SplitFractions::default(),
            seed: 0,
            negatives_per_roi: 1,
            negatives_per_image: 1,
            attempts: crate::patch_geom::DEFAULT_ATTEMPTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ImageEntry {
    image: String,
    patient_id: String,
    rois: Vec<RoiBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch_id: String,
    pub patient_id: String,
    pub source_image: String,
    pub plan: PatchPlan,
    pub label: bool,
    pub split: Split,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepReport {
    pub patches: Vec<PatchEntry>,
    /// Images where a requested negative could not be placed.
    pub warnings: Vec<String>,
}

fn malformed(row: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        row,
        message: message.into(),
    }
}

fn read_manifest(path: &Path) -> Result<Vec<ImageEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => malformed(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(1, format!("missing column `{name}`")))
    };
    let (ci, cp) = (col("image")?, col("patient_id")?);
    let cbox = [col("x")?, col("y")?, col("width")?, col("height")?];

    let mut entries: Vec<ImageEntry> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| malformed(row, e.to_string()))?;
        let image = rec.get(ci).unwrap_or("").to_string();
        let patient = rec.get(cp).unwrap_or("").to_string();
        if image.is_empty() || patient.is_empty() {
            return Err(malformed(row, "image and patient_id are required"));
        }
        let fields: Vec<&str> = cbox.iter().map(|&c| rec.get(c).unwrap_or("")).collect();
        let missing = |s: &&str| s.is_empty() || *s == MISSING;
        let roi = if fields.iter().all(missing) {
            None
        } else if fields.iter().any(missing) {
            return Err(malformed(row, "ROI box is partially missing"));
        } else {
            let v: Vec<usize> = fields
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| malformed(row, format!("bad box value `{s}`"))))
                .collect::<Result<_>>()?;
            if v[2] == 0 || v[3] == 0 {
                return Err(malformed(row, "ROI box has zero size"));
            }
            Some(RoiBox::new(v[0], v[1], v[2], v[3]))
        };
        let at = *index.entry(image.clone()).or_insert_with(|| {
            entries.push(ImageEntry {
                image: image.clone(),
                patient_id: patient.clone(),
                rois: Vec::new(),
            });
            entries.len() - 1
        });
        if entries[at].patient_id != patient {
            return Err(malformed(row, format!("image `{image}` listed under two patients")));
        }
        entries[at].rois.extend(roi);
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(entries)
}

/// Builds positive and negative patches for every manifest image and writes
/// them with `manifest.csv` under `out`. Image paths resolve against the
/// manifest's directory.
pub fn cmd_prep(manifest: &Path, out: &Path, options: &PrepOptions) -> Result<PrepReport> {
    options.fractions.validate()?;
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let patients: BTreeSet<&str> = entries.iter().map(|e| e.patient_id.as_str()).collect();
    let patients: Vec<&str> = patients.into_iter().collect();
    let splits = split_patients(&patients, &options.fractions, options.seed)?;
    let pool: Vec<(usize, usize)> = entries
        .iter()
        .flat_map(|e| e.rois.iter().map(|r| (r.width, r.height)))
        .collect();

    let patch_dir = out.join("patches");
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let mut report = PrepReport {
        patches: Vec::new(),
        warnings: Vec::new(),
    };
    for entry in &entries {
        let image = read_pgm(&base.join(&entry.image))?;
        for roi in &entry.rois {
            if !image.contains(roi) {
                return Err(Error::Geometry(format!(
                    "{}: ROI {:?} lies outside the {}x{} image",
                    entry.image, roi, image.width, image.height
                )));
            }
        }
        let split = splits[&entry.patient_id];
        let stem = crate::render::slug(
            Path::new(&entry.image)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(&entry.image),
        );
        let mut emit = |kind: &str, k: usize, roi: &RoiBox, label: bool| -> Result<()> {
            let plan = plan_patch(roi)?;
            let patch = extract(&image, &plan)?;
            let patch_id = format!("{stem}_{kind}{k}");
            let file = Path::new("patches").join(format!("{patch_id}.pgm"));
            write_pgm(&patch, &out.join(&file))?;
            report.patches.push(PatchEntry {
                patch_id,
                patient_id: entry.patient_id.clone(),
                source_image: entry.image.clone(),
                plan,
                label,
                split,
                file,
            });
            Ok(())
        };
        for (k, roi) in entry.rois.iter().enumerate() {
            emit("pos", k, roi, true)?;
        }

        let sizes: Vec<(usize, usize)> = if !entry.rois.is_empty() {
            entry.rois.iter().map(|r| (r.width, r.height)).collect()
        } else if !pool.is_empty() {
            pool.clone()
        } else {
            vec![FALLBACK_SIZE]
        };
        let wanted = if entry.rois.is_empty() {
            options.negatives_per_image
        } else {
            options.negatives_per_roi * entry.rois.len()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, &format!("negative/{}", entry.image)));
        let mut sampler = NegativeSampler::new(&image, &entry.rois);
        sampler.attempts = options.attempts;
        for k in 0..wanted {
            match sampler.sample(&sizes, &mut rng) {
                Ok(b) => emit("neg", k, &b, false)?,
                Err(e @ Error::NoValidPatch { .. }) => {
                    report.warnings.push(format!("{}: negative {k}: {e}", entry.image));
                }
                Err(e) => return Err(e),
            }
        }
    }
    write_manifest(&report.patches, &out.join("manifest.csv"))?;
    Ok(report)
}

pub const MANIFEST_HEADER: [&str; 16] = [
    "patch_id",
    "patient_id",
    "source_image",
    "x",
    "y",
    "width",
    "height",
    "scale",
    "scaled_width",
    "scaled_height",
    "pad_left",
    "pad_top",
    "label",
    "split",
    "file",
    "canvas",
];

pub fn write_manifest(patches: &[PatchEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => malformed(0, format!("{other:?}")),
    })?;
    let fail = |e: csv::Error| malformed(0, format!("writing {}: {e}", path.display()));
    w.write_record(MANIFEST_HEADER).map_err(fail)?;
    for p in patches {
        let b = &p.plan.source;
        w.write_record([
            p.patch_id.clone(),
            p.patient_id.clone(),
            p.source_image.clone(),
            b.x.to_string(),
            b.y.to_string(),
            b.width.to_string(),
            b.height.to_string(),
            p.plan.scale.to_string(),
            p.plan.scaled_width.to_string(),
            p.plan.scaled_height.to_string(),
            p.plan.pad_left.to_string(),
            p.plan.pad_top.to_string(),
            u8::from(p.label).to_string(),
            p.split.as_str().to_string(),
            p.file.to_string_lossy().replace('\\', "/"),
            crate::patch_geom::CANVAS.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
