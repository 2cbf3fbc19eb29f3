//! Batch transformation of image directory trees.
//!
//! Every recognized image under the source root (PNG, binary PNM, JPEG) is
//! decoded, transformed with the key and written losslessly under the
//! destination root at the same relative path, with the extension of the
//! output format. A `manifest.jsonl` describing the run is written last, and
//! only when every file succeeded.
//!
//! The manifest is line-delimited JSON: one header object followed by one
//! object per image, sorted by source path.
//!
//! Augmentations that resample pixels (resizing, arbitrary crops) destroy
//! the block structure and must not be applied after this stage. Crops to
//! block-aligned offsets are safe.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::codec::{decode_image_as, encode_image, InputKind, OutputFormat};
use crate::key::{Key, KeyFingerprint};
use crate::transform::{negpos_transform_with, CropMode};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TOOL_VERSION: &str = concat!("negpos/", env!("CARGO_PKG_VERSION"));

const LOSSY_SOURCE_NOTE: &str = "decoded from lossy JPEG source; re-encoded losslessly";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileFailure {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FileFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_failures(failures: &[FileFailure]) -> String {
    failures.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid options: {0}")]
    Options(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no images found under {0}")]
    NoImages(PathBuf),
    #[error("{} file(s) failed: {}", .0.len(), join_failures(.0))]
    Files(Vec<FileFailure>),
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOptions {
    pub block_size: usize,
    pub crop_mode: CropMode,
    pub worker_count: usize,
    pub output_format: OutputFormat,
}

impl PipelineOptions {
    pub fn for_key(key: &Key) -> Self {
        Self {
            block_size: key.block_size(),
            crop_mode: CropMode::Error,
            worker_count: 1,
            output_format: OutputFormat::Png,
        }
    }

    pub fn validate(&self, key: &Key) -> Result<(), PipelineError> {
        if self.worker_count == 0 {
            return Err(PipelineError::Options("worker count must be at least 1".into()));
        }
        if self.block_size != key.block_size() {
            return Err(PipelineError::Options(format!(
                "block size {} does not match the key's block size {}",
                self.block_size,
                key.block_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_path: String,
    pub output_path: String,
    pub width: usize,
    pub height: usize,
    /// Hex SHA-256 of the output file.
    pub content_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub run_id: String,
    pub key_fingerprint: KeyFingerprint,
    pub block_size: usize,
    pub channels: usize,
    pub crop_mode: CropMode,
    pub output_format: OutputFormat,
    pub tool_version: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    run_id: String,
    key_fingerprint: String,
    block_size: usize,
    channels: usize,
    crop_mode: CropMode,
    output_format: OutputFormat,
    tool_version: String,
    entry_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Entry(ManifestEntry),
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let header = ManifestLine::Header(ManifestHeader {
            run_id: self.run_id.clone(),
            key_fingerprint: self.key_fingerprint.to_hex(),
            block_size: self.block_size,
            channels: self.channels,
            crop_mode: self.crop_mode,
            output_format: self.output_format,
            tool_version: self.tool_version.clone(),
            entry_count: self.entries.len(),
        });
        let mut out = serde_json::to_string(&header).expect("manifest header serializes");
        out.push('\n');
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(&ManifestLine::Entry(entry.clone())).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, PipelineError> {
        let mut header = None;
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| PipelineError::Manifest(format!("line {}: {e}", n + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestLine = serde_json::from_str(&line)
                .map_err(|e| PipelineError::Manifest(format!("line {}: {e}", n + 1)))?;
            match record {
                ManifestLine::Header(h) if header.is_none() => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(PipelineError::Manifest(format!("line {}: unexpected header", n + 1)))
                }
                ManifestLine::Entry(_) if header.is_none() => {
                    return Err(PipelineError::Manifest("entry before header".into()))
                }
                ManifestLine::Entry(e) => entries.push(e),
            }
        }
        let header = header.ok_or_else(|| PipelineError::Manifest("empty manifest".into()))?;
        if header.entry_count != entries.len() {
            return Err(PipelineError::Manifest(format!(
                "header announces {} entries, found {}",
                header.entry_count,
                entries.len()
            )));
        }
        if entries.windows(2).any(|w| w[0].source_path.as_bytes() >= w[1].source_path.as_bytes()) {
            return Err(PipelineError::Manifest("entries are not strictly sorted by source path".into()));
        }
        let key_fingerprint = KeyFingerprint::from_hex(&header.key_fingerprint)
            .map_err(|e| PipelineError::Manifest(e.to_string()))?;
        Ok(Self {
            run_id: header.run_id,
            key_fingerprint,
            block_size: header.block_size,
            channels: header.channels,
            crop_mode: header.crop_mode,
            output_format: header.output_format,
            tool_version: header.tool_version,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        Self::from_jsonl(BufReader::new(file))
    }
}

/// Resolves a manifest-relative path, refusing anything that could leave
/// the root (absolute paths, `..`, `.`, empty components).
pub fn resolve_within(root: &Path, relative: &str) -> Option<PathBuf> {
    let rel = Path::new(relative);
    if relative.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

fn relative_string(path: &Path) -> Option<String> {
    let parts: Option<Vec<&str>> = path
        .components()
        .map(|c| match c {
            Component::Normal(s) => s.to_str(),
            _ => None,
        })
        .collect();
    parts.map(|p| p.join("/"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Job {
    kind: InputKind,
    source_rel: String,
    output_rel: String,
}

fn collect_jobs(source_root: &Path, options: &PipelineOptions, channels: usize) -> Result<Vec<Job>, PipelineError> {
    let mut jobs = Vec::new();
    let mut failures = Vec::new();
    for entry in WalkDir::new(source_root).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::Io {
            path: e.path().unwrap_or(source_root).to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(kind) = InputKind::from_path(entry.path()) else { continue };
        let rel = entry.path().strip_prefix(source_root).expect("walk stays under its root");
        let Some(source_rel) = relative_string(rel) else {
            failures.push(FileFailure {
                path: rel.display().to_string(),
                message: "path is not valid UTF-8".into(),
            });
            continue;
        };
        let output_rel = relative_string(&rel.with_extension(options.output_format.extension(channels)))
            .expect("extension swap keeps the path UTF-8");
        jobs.push(Job { kind, source_rel, output_rel });
    }
    if !failures.is_empty() {
        return Err(PipelineError::Files(failures));
    }
    jobs.sort_by(|a, b| a.source_rel.as_bytes().cmp(b.source_rel.as_bytes()));

    let mut outputs = BTreeSet::new();
    for job in &jobs {
        if job.output_rel == MANIFEST_FILE || !outputs.insert(job.output_rel.as_str()) {
            failures.push(FileFailure {
                path: job.source_rel.clone(),
                message: format!("output path {} collides with another output", job.output_rel),
            });
        }
    }
    if !failures.is_empty() {
        return Err(PipelineError::Files(failures));
    }
    Ok(jobs)
}

fn canonical_dest(dest_root: &Path) -> Result<PathBuf, PipelineError> {
    if dest_root.exists() {
        return dest_root.canonicalize().map_err(io_err(dest_root));
    }
    // Canonicalize the nearest existing ancestor, then re-append the rest.
    let mut missing = Vec::new();
    let mut cur = dest_root;
    loop {
        match cur.parent() {
            Some(parent) => {
                missing.push(cur.file_name().map(ToOwned::to_owned).unwrap_or_default());
                let parent = if parent.as_os_str().is_empty() { Path::new(".") } else { parent };
                if parent.exists() {
                    let mut base = parent.canonicalize().map_err(io_err(parent))?;
                    for part in missing.iter().rev() {
                        base.push(part);
                    }
                    return Ok(base);
                }
                cur = parent;
            }
            None => return Ok(dest_root.to_path_buf()),
        }
    }
}

fn process(job: &Job, source_root: &Path, dest_root: &Path, key: &Key, options: &PipelineOptions) -> Result<ManifestEntry, String> {
    let src = source_root.join(&job.source_rel);
    let bytes = fs::read(&src).map_err(|e| format!("read: {e}"))?;
    let image = decode_image_as(&bytes, job.kind).map_err(|e| e.to_string())?;
    let transformed = negpos_transform_with(&image, key, options.crop_mode).map_err(|e| e.to_string())?;
    let encoded = encode_image(&transformed, options.output_format).map_err(|e| e.to_string())?;
    let out = resolve_within(dest_root, &job.output_rel).ok_or("unsafe output path")?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("create {}: {e}", parent.display()))?;
    }
    fs::write(&out, &encoded).map_err(|e| format!("write {}: {e}", out.display()))?;
    Ok(ManifestEntry {
        source_path: job.source_rel.clone(),
        output_path: job.output_rel.clone(),
        width: transformed.width(),
        height: transformed.height(),
        content_digest: sha256_hex(&encoded),
        note: job.kind.is_lossy().then(|| LOSSY_SOURCE_NOTE.to_string()),
    })
}

/// Transforms every image under `source_root` into `dest_root`.
///
/// Output bytes and manifest entries do not depend on `worker_count`. If any
/// file fails, all failures are returned and no manifest is written.
pub fn transform_dataset(
    source_root: &Path,
    dest_root: &Path,
    key: &Key,
    options: &PipelineOptions,
) -> Result<Manifest, PipelineError> {
    options.validate(key)?;
    if !source_root.is_dir() {
        return Err(PipelineError::Options(format!("{} is not a directory", source_root.display())));
    }
    let source_canon = source_root.canonicalize().map_err(io_err(source_root))?;
    let dest_canon = canonical_dest(dest_root)?;
    if dest_canon.starts_with(&source_canon) {
        return Err(PipelineError::Options(format!(
            "destination {} lies inside the source tree",
            dest_root.display()
        )));
    }

    let jobs = collect_jobs(source_root, options, key.channels())?;
    if jobs.is_empty() {
        return Err(PipelineError::NoImages(source_root.to_path_buf()));
    }

    fs::create_dir_all(dest_root).map_err(io_err(dest_root))?;
    let manifest_path = dest_root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(io_err(&manifest_path))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.worker_count)
        .build()
        .map_err(|e| PipelineError::Options(format!("worker pool: {e}")))?;
    let results: Vec<Result<ManifestEntry, FileFailure>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                process(job, source_root, dest_root, key, options)
                    .map_err(|message| FileFailure { path: job.source_rel.clone(), message })
            })
            .collect()
    });

    let mut entries = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(f) => failures.push(f),
        }
    }
    if !failures.is_empty() {
        return Err(PipelineError::Files(failures));
    }

    let manifest = Manifest {
        run_id: uuid::Uuid::new_v4().to_string(),
        key_fingerprint: key.fingerprint(),
        block_size: key.block_size(),
        channels: key.channels(),
        crop_mode: options.crop_mode,
        output_format: options.output_format,
        tool_version: TOOL_VERSION.to_string(),
        entries,
    };
    let mut file = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    file.write_all(manifest.to_jsonl().as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryStatus {
    Ok,
    Missing,
    Modified,
    Unreadable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub entries: Vec<(String, EntryStatus)>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|(_, s)| *s == EntryStatus::Ok)
    }

    pub fn count(&self, status: &EntryStatus) -> usize {
        self.entries.iter().filter(|(_, s)| s == status).count()
    }
}

/// Recomputes output digests and reports per-entry status.
pub fn verify_manifest(dest_root: &Path, manifest: &Manifest) -> VerificationReport {
    let entries = manifest
        .entries
        .iter()
        .map(|entry| {
            let status = match resolve_within(dest_root, &entry.output_path) {
                None => EntryStatus::Unreadable("output path escapes the root".into()),
                Some(path) => match fs::read(&path) {
                    Ok(bytes) if sha256_hex(&bytes) == entry.content_digest => EntryStatus::Ok,
                    Ok(_) => EntryStatus::Modified,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => EntryStatus::Missing,
                    Err(e) => EntryStatus::Unreadable(e.to_string()),
                },
            };
            (entry.output_path.clone(), status)
        })
        .collect();
    VerificationReport { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_resolution_refuses_escapes() {
        let root = Path::new("/data/out");
        assert_eq!(resolve_within(root, "a/b.png"), Some(PathBuf::from("/data/out/a/b.png")));
        assert_eq!(resolve_within(root, "../x.png"), None);
        assert_eq!(resolve_within(root, "a/../../x.png"), None);
        assert_eq!(resolve_within(root, "/etc/passwd"), None);
        assert_eq!(resolve_within(root, "./a.png"), None);
        assert_eq!(resolve_within(root, ""), None);
    }

    #[test]
    fn options_validation() {
        let key = Key::zeros(3, 4).unwrap();
        let mut opts = PipelineOptions::for_key(&key);
        assert!(opts.validate(&key).is_ok());
        opts.worker_count = 0;
        assert!(matches!(opts.validate(&key), Err(PipelineError::Options(_))));
        opts.worker_count = 2;
        opts.block_size = 8;
        assert!(matches!(opts.validate(&key), Err(PipelineError::Options(_))));
    }

    #[test]
    fn manifest_text_round_trip() {
        let key = Key::zeros(1, 2).unwrap();
        let m = Manifest {
            run_id: "r".into(),
            key_fingerprint: key.fingerprint(),
            block_size: 2,
            channels: 1,
            crop_mode: CropMode::CenterCrop,
            output_format: OutputFormat::Ppm,
            tool_version: TOOL_VERSION.into(),
            entries: vec![
                ManifestEntry {
                    source_path: "a.jpg".into(),
                    output_path: "a.pgm".into(),
                    width: 2,
                    height: 4,
                    content_digest: "00".into(),
                    note: Some(LOSSY_SOURCE_NOTE.into()),
                },
                ManifestEntry {
                    source_path: "b/c.png".into(),
                    output_path: "b/c.pgm".into(),
                    width: 2,
                    height: 2,
                    content_digest: "11".into(),
                    note: None,
                },
            ],
        };
        let text = m.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(Manifest::from_jsonl(text.as_bytes()).unwrap(), m);
    }

    #[test]
    fn unsorted_manifest_rejected() {
        let key = Key::zeros(1, 1).unwrap();
        let entry = |p: &str| ManifestEntry {
            source_path: p.into(),
            output_path: p.into(),
            width: 1,
            height: 1,
            content_digest: String::new(),
            note: None,
        };
        let m = Manifest {
            run_id: "r".into(),
            key_fingerprint: key.fingerprint(),
            block_size: 1,
            channels: 1,
            crop_mode: CropMode::Error,
            output_format: OutputFormat::Png,
            tool_version: TOOL_VERSION.into(),
            entries: vec![entry("b.png"), entry("a.png")],
        };
        assert!(matches!(Manifest::from_jsonl(m.to_jsonl().as_bytes()), Err(PipelineError::Manifest(_))));
    }
}
