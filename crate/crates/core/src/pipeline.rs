//! Dataset synthesis: edit source masks, export condition bundles, render
//! images through a backend and record everything in a manifest.
//!
//! Output layout under the output directory:
//!
//! ```text
//! <id>.mask.png  <id>.canny.png  <id>.prompt.txt  <id>.image.png
//! manifest.json  backend_status.json
//! ```
//!
//! The `stub` backend renders images in-process. Any other backend tag
//! leaves images pending; an external process reads `manifest.json`,
//! writes the declared image files plus `backend_status.json`, and
//! [`merge_backend_status`] folds the outcome back into the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{derive_seed, train, TrainConfig};
use crate::deform::{content_loss, DeformationField, Template};
use crate::edges::{canny, CannyParams, EdgeMap};
use crate::error::{Error, Result};
use crate::mask::{encode_png, iou, load_mask, BinaryMask};
use crate::rigid::{rigid_edit, sample_rigid, RigidRanges, RigidTransform};
use crate::topology::{topology, TopologySignature};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const STATUS_SCHEMA_VERSION: u32 = 1;
pub const STUB_BACKEND: &str = "stub";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATUS_FILE: &str = "backend_status.json";

/// Prompts used for sources without a prompt file, by source index.
pub const DEFAULT_PROMPTS: &[&str] = &[
    "a rounder silhouette",
    "the same object with square edges",
    "a taller variant",
    "a wider variant",
    "a slightly twisted variant",
    "a wavy outline",
    "a bulging variant",
    "a slimmer variant",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub dataset: String,
    /// Directory of source masks (PNG or PGM).
    pub sources_dir: PathBuf,
    /// Optional directory of `<stem>.txt` prompts.
    pub prompts_dir: Option<PathBuf>,
    pub seed: u64,
    pub rigid_variants: usize,
    pub nonrigid_variants: usize,
    pub rigid_ranges: RigidRanges,
    /// Transform draws per rigid variant before it is skipped.
    pub max_rigid_attempts: usize,
    pub canny: CannyParams,
    /// `variants_per_source` and `seed` are set per source from the fields above.
    pub train: TrainConfig,
    pub backend: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: "maskforge-synthetic".into(),
            sources_dir: PathBuf::from("sources"),
            prompts_dir: None,
            seed: 0,
            rigid_variants: 1,
            nonrigid_variants: 1,
            rigid_ranges: RigidRanges::default(),
            max_rigid_attempts: 8,
            canny: CannyParams::default(),
            train: TrainConfig::default(),
            backend: STUB_BACKEND.into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::param(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.backend.is_empty() {
            return Err(Error::param("backend tag must not be empty"));
        }
        if self.rigid_variants > 0 && self.max_rigid_attempts == 0 {
            return Err(Error::param("max_rigid_attempts must be >= 1"));
        }
        self.rigid_ranges.validate()?;
        self.canny.validate()?;
        self.train.validate()
    }

    /// Reads a JSON config. Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                context: path.display().to_string(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.sources_dir = base.join(&cfg.sources_dir);
        cfg.prompts_dir = cfg.prompts_dir.map(|p| base.join(p));
        Ok(cfg)
    }
}

/// Edit that produced a bundle mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditSpec {
    Rigid {
        transform: RigidTransform,
        attempts: usize,
    },
    NonRigid {
        template: Template,
        noise_seed: u64,
        steps: usize,
        field: DeformationField,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub edit: EditSpec,
}

/// Mask, its Canny map and prompt, handed to the image backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub id: String,
    pub mask: BinaryMask,
    pub canny: EdgeMap,
    pub prompt: String,
    pub provenance: Provenance,
}

/// Derives the Canny condition of `mask` and packs the bundle.
pub fn export_conditions(
    id: &str,
    mask: &BinaryMask,
    prompt: &str,
    provenance: Provenance,
    params: &CannyParams,
) -> Result<ConditionBundle> {
    if !mask.has_foreground() {
        return Err(Error::EmptyMask);
    }
    Ok(ConditionBundle {
        id: id.to_string(),
        mask: mask.clone(),
        canny: canny(mask, params)?,
        prompt: prompt.to_string(),
        provenance,
    })
}

/// File names of a bundle, relative to the output directory.
pub fn bundle_paths(id: &str) -> [String; 4] {
    [
        format!("{id}.mask.png"),
        format!("{id}.canny.png"),
        format!("{id}.prompt.txt"),
        format!("{id}.image.png"),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileRef> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef {
        path: name.to_string(),
        sha256: Some(sha256_hex(bytes)),
    })
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

const FG_BASE: [f64; 3] = [210.0, 170.0, 120.0];
const BG_BASE: [f64; 3] = [50.0, 80.0, 120.0];
const TEXTURE_AMPLITUDE: f64 = 25.0;

/// Value noise on a lattice of `cell`-pixel cells, in [-1, 1].
fn value_noise(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (i, j) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - i as f64, fy - j as f64);
            let l = |a: usize, b: usize| lattice[b * gw + a];
            let top = l(i, j) * (1.0 - tx) + l(i + 1, j) * tx;
            let bottom = l(i, j + 1) * (1.0 - tx) + l(i + 1, j + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Procedural stand-in for an image generator: a warm coarse texture on
/// the mask and a cool fine texture off it. The red channel stays above
/// 128 on the mask and below it elsewhere.
pub fn stub_generate(bundle: &ConditionBundle, seed: u64) -> RgbImage {
    let (w, h) = bundle.mask.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = value_noise(w, h, 8, &mut rng);
    let fine = value_noise(w, h, 3, &mut rng);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let (base, n) = if bundle.mask.get(x as usize, y as usize) {
            (FG_BASE, coarse[i])
        } else {
            (BG_BASE, fine[i])
        };
        let px = |c: usize| (base[c] + TEXTURE_AMPLITUDE * n).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Mask recovered from a stub image by thresholding its red channel.
pub fn recover_stub_mask(img: &RgbImage) -> Result<BinaryMask> {
    BinaryMask::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        img.get_pixel(x as u32, y as u32)[0] > 128
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Pending,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryMetrics {
    pub iou_vs_source: f64,
    pub content_loss_vs_source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub provenance: Provenance,
    pub width: usize,
    pub height: usize,
    pub mask: FileRef,
    pub canny: FileRef,
    pub prompt: FileRef,
    /// Always declared; `sha256` is set once the image exists.
    pub image: FileRef,
    pub backend: String,
    pub status: EntryStatus,
    pub error: Option<String>,
    pub topology: TopologySignature,
    pub source_topology: TopologySignature,
    pub metrics: EntryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedEdit {
    pub source: String,
    pub variant: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset: String,
    pub producer: String,
    pub config: PipelineConfig,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedEdit>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "schema version {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(self).expect("manifest serializes");
        s.push(b'\n');
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &self.to_json())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub status: EntryStatus,
    #[serde(default)]
    pub message: Option<String>,
}

/// Document a backend writes next to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStatus {
    pub schema_version: u32,
    pub backend: String,
    pub entries: BTreeMap<String, StatusEntry>,
}

impl BackendStatus {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATUS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: BackendStatus = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        if s.schema_version != STATUS_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "backend status schema version {} is not supported",
                s.schema_version
            )));
        }
        Ok(s)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_vec_pretty(self).expect("status serializes");
        s.push(b'\n');
        write_atomic(&dir.join(STATUS_FILE), &s)
    }
}

/// Source masks in `dir` sorted by stem.
pub fn list_sources(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "pgm")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::param(format!(
            "no source masks in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn prompt_for(cfg: &PipelineConfig, stem: &str, index: usize) -> Result<String> {
    if let Some(dir) = &cfg.prompts_dir {
        let path = dir.join(format!("{stem}.txt"));
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return Ok(text.trim_end_matches(['\n', '\r']).to_string());
        }
    }
    Ok(DEFAULT_PROMPTS[index % DEFAULT_PROMPTS.len()].to_string())
}

struct Emission {
    id: String,
    mask: BinaryMask,
    provenance: Provenance,
}

fn rigid_emissions(
    stem: &str,
    index: usize,
    source: &BinaryMask,
    cfg: &PipelineConfig,
    skipped: &mut Vec<SkippedEdit>,
) -> Result<Vec<Emission>> {
    let target = topology(source);
    let mut out = Vec::new();
    for v in 0..cfg.rigid_variants {
        let mut done = false;
        for attempt in 0..cfg.max_rigid_attempts {
            let stream =
                ((index * cfg.rigid_variants + v) * cfg.max_rigid_attempts + attempt) as u64;
            let t = sample_rigid(
                derive_seed(cfg.seed ^ 0x5249_4749, stream),
                &cfg.rigid_ranges,
            )?;
            match rigid_edit(source, &t) {
                Ok(m) if topology(&m) == target => {
                    out.push(Emission {
                        id: format!("{stem}-r{v}"),
                        mask: m,
                        provenance: Provenance {
                            source: stem.to_string(),
                            edit: EditSpec::Rigid {
                                transform: t,
                                attempts: attempt + 1,
                            },
                        },
                    });
                    done = true;
                    break;
                }
                Ok(_) | Err(Error::EmptyResult) => continue,
                Err(e) => return Err(e),
            }
        }
        if !done {
            log::warn!(
                "{stem}: rigid variant {v} skipped after {} draws",
                cfg.max_rigid_attempts
            );
            skipped.push(SkippedEdit {
                source: stem.to_string(),
                variant: v,
                reason: format!(
                    "no topology-preserving in-frame transform in {} draws",
                    cfg.max_rigid_attempts
                ),
            });
        }
    }
    Ok(out)
}

fn nonrigid_emissions(
    stem: &str,
    index: usize,
    source: &BinaryMask,
    prompt: &str,
    cfg: &PipelineConfig,
) -> Result<Vec<Emission>> {
    if cfg.nonrigid_variants == 0 {
        return Ok(Vec::new());
    }
    let tc = TrainConfig {
        variants_per_source: cfg.nonrigid_variants,
        seed: derive_seed(cfg.seed ^ 0x4e4f_4e52, index as u64),
        ..cfg.train.clone()
    };
    let outcome = train(std::slice::from_ref(source), &[prompt.to_string()], &tc)?;
    Ok(outcome
        .generators
        .into_iter()
        .zip(outcome.masks)
        .map(|(g, mask)| Emission {
            id: format!("{stem}-n{}", g.variant),
            mask,
            provenance: Provenance {
                source: stem.to_string(),
                edit: EditSpec::NonRigid {
                    template: g.template,
                    noise_seed: g.noise_seed,
                    steps: g.step,
                    field: g.field,
                },
            },
        })
        .collect())
}

struct SourceJob {
    entries: Vec<ManifestEntry>,
    skipped: Vec<SkippedEdit>,
}

fn run_source(
    stem: &str,
    index: usize,
    path: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<SourceJob> {
    let source = load_mask(path)?;
    if !source.has_foreground() {
        return Err(Error::param(format!("source {stem} has no foreground")));
    }
    let prompt = prompt_for(cfg, stem, index)?;
    let source_topology = topology(&source);
    let mut skipped = Vec::new();
    let mut emissions = rigid_emissions(stem, index, &source, cfg, &mut skipped)?;
    emissions.extend(nonrigid_emissions(stem, index, &source, &prompt, cfg)?);

    let mut entries = Vec::with_capacity(emissions.len());
    for (k, e) in emissions.into_iter().enumerate() {
        let topo = topology(&e.mask);
        if topo != source_topology {
            return Err(Error::param(format!(
                "{}: emitted mask changed topology",
                e.id
            )));
        }
        let bundle = export_conditions(&e.id, &e.mask, &prompt, e.provenance, &cfg.canny)?;
        let [mask_name, canny_name, prompt_name, image_name] = bundle_paths(&bundle.id);
        let mask = write_file(
            out_dir,
            &mask_name,
            &encode_png(&bundle.mask.to_gray_image()),
        )?;
        let canny_ref = write_file(out_dir, &canny_name, &bundle.canny.to_png_bytes())?;
        let prompt_ref = write_file(out_dir, &prompt_name, bundle.prompt.as_bytes())?;
        let (image, status) = if cfg.backend == STUB_BACKEND {
            let seed = derive_seed(cfg.seed ^ 0x5354_5542, (index * 1_000 + k) as u64);
            let img = stub_generate(&bundle, seed);
            (
                write_file(out_dir, &image_name, &encode_png(&img))?,
                EntryStatus::Ok,
            )
        } else {
            let path = out_dir.join(&image_name);
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            (
                FileRef {
                    path: image_name,
                    sha256: None,
                },
                EntryStatus::Pending,
            )
        };
        let (w, h) = bundle.mask.dims();
        entries.push(ManifestEntry {
            metrics: EntryMetrics {
                iou_vs_source: iou(&bundle.mask, &source)?,
                content_loss_vs_source: content_loss(&bundle.mask, &source)?,
            },
            id: bundle.id,
            provenance: bundle.provenance,
            width: w,
            height: h,
            mask,
            canny: canny_ref,
            prompt: prompt_ref,
            image,
            backend: cfg.backend.clone(),
            status,
            error: None,
            topology: topo,
            source_topology,
        });
    }
    Ok(SourceJob { entries, skipped })
}

/// Runs the full synthesis into `out_dir` and writes the manifest.
pub fn run(cfg: &PipelineConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let sources = list_sources(&cfg.sources_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<Result<SourceJob>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, (stem, path))| run_source(stem, i, path, cfg, out_dir))
        .collect();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for job in jobs {
        let job = job?;
        entries.extend(job.entries);
        skipped.extend(job.skipped);
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset: cfg.dataset.clone(),
        producer: format!("maskforge-core {}", env!("CARGO_PKG_VERSION")),
        config: cfg.clone(),
        entries,
        skipped,
    };
    if cfg.backend == STUB_BACKEND {
        BackendStatus {
            schema_version: STATUS_SCHEMA_VERSION,
            backend: STUB_BACKEND.into(),
            entries: manifest
                .entries
                .iter()
                .map(|e| {
                    (
                        e.id.clone(),
                        StatusEntry {
                            status: EntryStatus::Ok,
                            message: None,
                        },
                    )
                })
                .collect(),
        }
        .save(out_dir)?;
    }
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn check_file(dir: &Path, f: &FileRef, problems: &mut Vec<String>, id: &str) -> Option<Vec<u8>> {
    let path = dir.join(&f.path);
    let Ok(bytes) = std::fs::read(&path) else {
        problems.push(format!("{id}: missing file {}", f.path));
        return None;
    };
    match &f.sha256 {
        Some(d) if *d != sha256_hex(&bytes) => {
            problems.push(format!("{id}: digest mismatch for {}", f.path));
            None
        }
        _ => Some(bytes),
    }
}

/// Checks that every referenced file exists and matches its digest, ids are
/// unique, Canny maps re-derive from their masks and recorded topologies hold.
pub fn validate_manifest(dir: &Path) -> Result<Manifest> {
    let m = Manifest::load(dir)?;
    let mut problems = Vec::new();
    let mut ids = BTreeSet::new();
    for e in &m.entries {
        if !ids.insert(e.id.as_str()) {
            problems.push(format!("duplicate id {}", e.id));
        }
        if e.topology != e.source_topology {
            problems.push(format!("{}: topology differs from source", e.id));
        }
        let mask_bytes = check_file(dir, &e.mask, &mut problems, &e.id);
        let canny_bytes = check_file(dir, &e.canny, &mut problems, &e.id);
        check_file(dir, &e.prompt, &mut problems, &e.id);
        if e.status == EntryStatus::Ok {
            if e.image.sha256.is_none() {
                problems.push(format!("{}: finished image has no digest", e.id));
            }
            check_file(dir, &e.image, &mut problems, &e.id);
        }
        if let (Some(_), Some(canny_bytes)) = (mask_bytes, canny_bytes) {
            let mask = load_mask(dir.join(&e.mask.path))?;
            if mask.dims() != (e.width, e.height) {
                problems.push(format!("{}: mask dimensions differ from manifest", e.id));
            }
            if topology(&mask) != e.topology {
                problems.push(format!("{}: mask topology differs from manifest", e.id));
            }
            if canny(&mask, &m.config.canny)?.to_png_bytes() != canny_bytes {
                problems.push(format!("{}: canny map does not re-derive from mask", e.id));
            }
        }
    }
    if problems.is_empty() {
        Ok(m)
    } else {
        Err(Error::Manifest(problems.join("; ")))
    }
}

/// Folds an external backend's `backend_status.json` into the manifest.
/// Images reported ok must exist at the declared path with the mask's
/// dimensions; otherwise the entry is marked as an error.
pub fn merge_backend_status(dir: &Path) -> Result<Manifest> {
    let mut m = Manifest::load(dir)?;
    let status = BackendStatus::load(dir)?;
    let known: BTreeSet<&str> = m.entries.iter().map(|e| e.id.as_str()).collect();
    if let Some(id) = status
        .entries
        .keys()
        .find(|id| !known.contains(id.as_str()))
    {
        return Err(Error::Manifest(format!(
            "backend status names unknown id {id}"
        )));
    }
    for e in &mut m.entries {
        let Some(s) = status.entries.get(&e.id) else {
            continue;
        };
        e.backend = status.backend.clone();
        match s.status {
            EntryStatus::Ok => {
                let path = dir.join(&e.image.path);
                let checked = std::fs::read(&path)
                    .map_err(|err| err.to_string())
                    .and_then(|bytes| {
                        let img = image::load_from_memory(&bytes).map_err(|err| err.to_string())?;
                        if (img.width() as usize, img.height() as usize) != (e.width, e.height) {
                            return Err(format!(
                                "image is {}x{}, mask is {}x{}",
                                img.width(),
                                img.height(),
                                e.width,
                                e.height
                            ));
                        }
                        Ok(sha256_hex(&bytes))
                    });
                match checked {
                    Ok(digest) => {
                        e.image.sha256 = Some(digest);
                        e.status = EntryStatus::Ok;
                        e.error = None;
                    }
                    Err(msg) => {
                        e.image.sha256 = None;
                        e.status = EntryStatus::Error;
                        e.error = Some(msg);
                    }
                }
            }
            EntryStatus::Error => {
                e.image.sha256 = None;
                e.status = EntryStatus::Error;
                e.error = s
                    .message
                    .clone()
                    .or_else(|| Some("backend reported an error".into()));
            }
            EntryStatus::Pending => {}
        }
    }
    m.save(dir)?;
    Ok(m)
}

/// Cosine similarity between the centroids of two feature sets.
pub fn distribution_report(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = a[0].len();
    if dim == 0 {
        return Err(Error::param("feature vectors must be non-empty"));
    }
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::param(format!(
            "feature dimension {} differs from {dim}",
            v.len()
        )));
    }
    let centroid = |set: &[Vec<f64>]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for v in set {
            for (ci, x) in c.iter_mut().zip(v) {
                *ci += x;
            }
        }
        c.iter_mut().for_each(|x| *x /= set.len() as f64);
        c
    };
    let (ca, cb) = (centroid(a), centroid(b));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&ca), norm(&cb));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::param("a feature centroid has zero norm"));
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Reads feature vectors from JSON (`[[...], ...]`) or from text with one
/// comma- or whitespace-separated vector per line.
pub fn load_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        return serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        });
    }
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .enumerate()
        .map(|(n, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        Error::param(format!(
                            "{}: line {}: bad number {t:?}",
                            path.display(),
                            n + 1
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DeformationField;

    fn square() -> BinaryMask {
        BinaryMask::from_fn(16, 16, |x, y| (4..12).contains(&x) && (4..12).contains(&y)).unwrap()
    }

    fn provenance(m: &BinaryMask) -> Provenance {
        Provenance {
            source: "src".into(),
            edit: EditSpec::NonRigid {
                template: Template::Jitter,
                noise_seed: 0,
                steps: 0,
                field: DeformationField::for_mask(m),
            },
        }
    }

    #[test]
    fn square_bundle_canny_is_boundary_ring() {
        let m = square();
        let b = export_conditions("sq", &m, "p", provenance(&m), &CannyParams::default()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if b.canny.get(x, y) {
                    assert!(crate::edges::on_boundary_band(&m, x, y));
                }
            }
        }
        assert!(b.canny.count() >= 24);
        let again =
            export_conditions("sq", &m, "p", provenance(&m), &CannyParams::default()).unwrap();
        assert_eq!(b.canny.to_png_bytes(), again.canny.to_png_bytes());
        assert!(export_conditions(
            "e",
            &BinaryMask::new(4, 4).unwrap(),
            "p",
            provenance(&m),
            &CannyParams::default()
        )
        .is_err());
    }

    #[test]
    fn stub_is_deterministic_and_recoverable() {
        let m = square();
        let b = export_conditions("sq", &m, "p", provenance(&m), &CannyParams::default()).unwrap();
        let a = stub_generate(&b, 3);
        assert_eq!(a, stub_generate(&b, 3));
        assert_eq!(recover_stub_mask(&a).unwrap(), m);
    }

    #[test]
    fn distribution_cases() {
        let a = vec![vec![1.0, 0.0], vec![3.0, 0.0]];
        assert!((distribution_report(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = vec![vec![0.0, 2.0]];
        assert!(distribution_report(&a, &b).unwrap().abs() < 1e-12);
        let x = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]];
        let y = vec![vec![0.0, 1.0, 0.0], vec![2.0, 1.0, 2.0]];
        // centroids (2,2,2) and (1,1,1)
        assert!((distribution_report(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let z = vec![vec![1.0, 0.0, 1.0]];
        let expected = 4.0 / (12f64.sqrt() * 2f64.sqrt());
        assert!((distribution_report(&x, &z).unwrap() - expected).abs() < 1e-12);
        assert!(distribution_report(&x, &[vec![1.0]]).is_err());
        assert!(distribution_report(&[], &x).is_err());
        assert!(distribution_report(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = PipelineConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = PipelineConfig {
            schema_version: 99,
            ..c
        };
        assert!(bad.validate().is_err());
    }
}
