//! Synthetic dataset generation, manifests, and operator precompute.
//!
//! A dataset is a directory: `manifest.txt`, `meshes/<id>.node|.ele` (TetGen
//! text, read back through the same parser), and `caches/<id>.opcache` written
//! by [`precompute`]. Generation is deterministic per seed, and every file is
//! written atomically.

mod shell;
#[cfg(test)]
mod tests;

pub use shell::{
    anomaly_tets, generate_shell, icosphere, shell_surfaces, tetrahedralize_shell, AnomalySpec,
    ShellError, ShellSpec, ShellSurfaces, SmoothField, SHELL_LAYERS,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cache::{load_cache, peek_source_hash, save_cache, source_hash, CacheError, OperatorCache};
use crate::coarsen::{build_hierarchy, CoarsenError};
use crate::lbo::{assemble_operator, LboError, Lumping, OperatorKind};
use crate::network::{MeshSample, NetworkError, Target, Task};
use crate::rng::{stream, subseed, Purpose};
use crate::tetmesh::{parse_tetgen_with_id, MeshError, TetMesh};

pub const MANIFEST_MAGIC: &str = "tetcnn-manifest v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("mesh {id}: {source}")]
    Shell { id: String, source: ShellError },
    #[error("mesh {id}: {source}")]
    Mesh { id: String, source: MeshError },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("operator for {id}: {source}")]
    Operator { id: String, source: LboError },
    #[error("hierarchy for {id}: {source}")]
    Hierarchy { id: String, source: CoarsenError },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// What kind of synthetic cohort to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Two classes separated by mean shell thickness.
    ThicknessClasses,
    /// Two classes separated by a planted thickening cap at a random
    /// direction (class 1 = anomalous).
    AnomalyClasses,
    /// Continuous target: realized mean thickness.
    Regression,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::ThicknessClasses => "thickness",
            DatasetKind::AnomalyClasses => "anomaly",
            DatasetKind::Regression => "regress",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thickness" => Some(DatasetKind::ThicknessClasses),
            "anomaly" => Some(DatasetKind::AnomalyClasses),
            "regress" => Some(DatasetKind::Regression),
            _ => None,
        }
    }

    pub fn task(self) -> Task {
        match self {
            DatasetKind::Regression => Task::Regress,
            _ => Task::Classify,
        }
    }
}

/// Generation settings; the manifest stores a snapshot of every field.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub kind: DatasetKind,
    /// Meshes per class (classification) or total meshes (regression).
    pub per_class: usize,
    pub subdivision: usize,
    pub base_radius: f64,
    /// Smooth multiplicative thickness variation amplitude.
    pub thickness_noise: f64,
    /// Smooth radial warp amplitude of the inner surface (shape confounder).
    pub vertex_perturbation: f64,
    /// Mean thickness per class, as a fraction of the base radius
    /// (class 0, class 1).
    pub class_thickness: [f64; 2],
    /// Regression target range (fractions of the base radius).
    pub regress_range: [f64; 2],
    /// Anomaly cohort: target cap volume fraction and thickness multiplier.
    pub anomaly_volume_fraction: f64,
    pub anomaly_multiplier: f64,
    /// Base thickness fraction for the anomaly cohort (both classes).
    pub anomaly_base_thickness: f64,
    /// Meshes per class marked `split=test` (taken from the end).
    pub holdout_per_class: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn standard(kind: DatasetKind, per_class: usize, seed: u64) -> Self {
        GenConfig {
            kind,
            per_class,
            subdivision: 3,
            base_radius: 1.0,
            thickness_noise: 0.25,
            vertex_perturbation: 0.10,
            class_thickness: [0.15, 0.25],
            regress_range: [0.10, 0.30],
            anomaly_volume_fraction: 0.05,
            anomaly_multiplier: 1.8,
            anomaly_base_thickness: 0.18,
            holdout_per_class: 0,
            seed,
        }
    }

    fn snapshot(&self) -> String {
        format!(
            "kind={} per_class={} subdivision={} base_radius={:.17e} thickness_noise={:.17e} \
             vertex_perturbation={:.17e} class_thickness={:.17e},{:.17e} \
             regress_range={:.17e},{:.17e} anomaly_volume_fraction={:.17e} \
             anomaly_multiplier={:.17e} anomaly_base_thickness={:.17e} holdout_per_class={} \
             seed={}",
            self.kind.as_str(),
            self.per_class,
            self.subdivision,
            self.base_radius,
            self.thickness_noise,
            self.vertex_perturbation,
            self.class_thickness[0],
            self.class_thickness[1],
            self.regress_range[0],
            self.regress_range[1],
            self.anomaly_volume_fraction,
            self.anomaly_multiplier,
            self.anomaly_base_thickness,
            self.holdout_per_class,
            self.seed
        )
    }

    /// Cap angular radius making the anomaly region the requested volume
    /// fraction once the multiplier is applied: the cap's area fraction is
    /// `a = vf / (mult (1 - vf) + vf)` and `cos(theta) = 1 - 2a`.
    pub fn anomaly_angular_radius(&self) -> f64 {
        let vf = self.anomaly_volume_fraction;
        let a = vf / (self.anomaly_multiplier * (1.0 - vf) + vf);
        (1.0 - 2.0 * a).clamp(-1.0, 1.0).acos()
    }
}

/// One dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub node_path: PathBuf,
    pub ele_path: PathBuf,
    /// Cache path prefix; the operator kind completes the filename, so the
    /// lbo and graph caches of one mesh can coexist.
    pub cache_path: PathBuf,
    pub target: Target,
    pub split: String,
    pub node_hash: String,
    pub ele_hash: String,
}

impl SampleRecord {
    /// Concrete cache file for an operator kind: `<prefix>.<kind>.opcache`.
    pub fn cache_file(&self, operator: OperatorKind) -> PathBuf {
        let mut name = self
            .cache_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push('.');
        name.push_str(operator.as_str());
        name.push_str(".opcache");
        self.cache_path.with_file_name(name)
    }
}

/// Parsed manifest plus its base directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub records: Vec<SampleRecord>,
    pub config_snapshot: String,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn task(&self) -> Task {
        self.kind.task()
    }
}

fn sha256_hex(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    crate::cache::hex(&h.finalize())
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Per-mesh shell spec for record `index` of the dataset.
fn spec_for_record(config: &GenConfig, index: usize, label: Option<u8>) -> ShellSpec {
    let mesh_seed = subseed(config.seed, Purpose::Generation, index as u64);
    let r = config.base_radius;
    match config.kind {
        DatasetKind::ThicknessClasses => ShellSpec {
            base_radius: r,
            mean_thickness: config.class_thickness[label.unwrap() as usize] * r,
            thickness_noise: config.thickness_noise,
            vertex_perturbation: config.vertex_perturbation,
            subdivision: config.subdivision,
            anomaly: None,
            seed: mesh_seed,
        },
        DatasetKind::AnomalyClasses => {
            let anomaly = if label == Some(1) {
                let mut rng = stream(mesh_seed, Purpose::Generation, 3);
                let mut center = [0.0f64; 3];
                loop {
                    for c in center.iter_mut() {
                        *c = rng.random_range(-1.0..1.0);
                    }
                    let n2: f64 = center.iter().map(|v| v * v).sum();
                    if n2 > 1e-4 && n2 <= 1.0 {
                        let n = n2.sqrt();
                        for c in center.iter_mut() {
                            *c /= n;
                        }
                        break;
                    }
                }
                Some(AnomalySpec {
                    center,
                    angular_radius: config.anomaly_angular_radius(),
                    multiplier: config.anomaly_multiplier,
                })
            } else {
                None
            };
            ShellSpec {
                base_radius: r,
                mean_thickness: config.anomaly_base_thickness * r,
                thickness_noise: config.thickness_noise,
                vertex_perturbation: config.vertex_perturbation,
                subdivision: config.subdivision,
                anomaly,
                seed: mesh_seed,
            }
        }
        DatasetKind::Regression => {
            let mut rng = stream(mesh_seed, Purpose::Generation, 4);
            let frac = rng.random_range(config.regress_range[0]..config.regress_range[1]);
            ShellSpec {
                base_radius: r,
                mean_thickness: frac * r,
                thickness_noise: config.thickness_noise,
                vertex_perturbation: config.vertex_perturbation,
                subdivision: config.subdivision,
                anomaly: None,
                seed: mesh_seed,
            }
        }
    }
}

/// Planned (index, label) pairs in manifest order: classes interleaved so
/// truncations stay balanced; regression runs 0..per_class.
fn record_plan(config: &GenConfig) -> Vec<(usize, Option<u8>)> {
    match config.kind {
        DatasetKind::Regression => (0..config.per_class).map(|i| (i, None)).collect(),
        _ => (0..config.per_class * 2)
            .map(|i| (i, Some(u8::from(i % 2 == 1))))
            .collect(),
    }
}

/// Generate meshes and the manifest under `out_dir`. Returns the manifest.
/// Byte-identical across reruns with the same config.
pub fn generate_dataset(config: &GenConfig, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let mesh_dir = out_dir.join("meshes");
    std::fs::create_dir_all(&mesh_dir)
        .map_err(|source| DatasetError::Io { path: mesh_dir.display().to_string(), source })?;
    std::fs::create_dir_all(out_dir.join("caches"))
        .map_err(|source| DatasetError::Io { path: out_dir.display().to_string(), source })?;

    let plan = record_plan(config);
    // Generate mesh files in parallel; manifest assembly stays in plan order.
    let built: Vec<Result<SampleRecord, DatasetError>> = plan
        .par_iter()
        .map(|&(index, label)| {
            let id = format!("{index:04}");
            // Thick shells with strong warps occasionally invert; resample the
            // smooth fields from derived sub-seeds until a valid shell comes
            // out. Deterministic: the attempt schedule is a pure function of
            // the spec, and the noise amplitudes never change.
            let mut attempt = 0u64;
            let (surfaces, mesh) = loop {
                let mut spec = spec_for_record(config, index, label);
                if attempt > 0 {
                    spec.seed = subseed(spec.seed, Purpose::Generation, 100 + attempt);
                }
                let result = shell_surfaces(&spec).and_then(|surfaces| {
                    tetrahedralize_shell(&surfaces, &format!("{}-{id}", config.kind.as_str()))
                        .map(|mesh| (surfaces, mesh))
                });
                match result {
                    Ok(pair) => break pair,
                    Err(ShellError::SelfIntersection { .. }) if attempt < 8 => attempt += 1,
                    Err(source) => {
                        return Err(DatasetError::Shell { id: id.clone(), source });
                    }
                }
            };
            let node_text = mesh.to_node_text();
            let ele_text = mesh.to_ele_text();
            let node_rel = PathBuf::from(format!("meshes/{id}.node"));
            let ele_rel = PathBuf::from(format!("meshes/{id}.ele"));
            write_atomic(&out_dir.join(&node_rel), &node_text)?;
            write_atomic(&out_dir.join(&ele_rel), &ele_text)?;
            let target = match label {
                Some(l) => Target::Label(l),
                None => Target::Value(surfaces.mean_thickness()),
            };
            let per_class_position = match config.kind {
                DatasetKind::Regression => index,
                _ => index / 2,
            };
            let split = if per_class_position + config.holdout_per_class
                >= config.per_class
            {
                "test"
            } else {
                "cv"
            };
            Ok(SampleRecord {
                id,
                node_path: node_rel,
                ele_path: ele_rel,
                cache_path: PathBuf::from(format!("caches/{index:04}")),
                target,
                split: split.to_string(),
                node_hash: sha256_hex(&node_text),
                ele_hash: sha256_hex(&ele_text),
            })
        })
        .collect();
    let mut records = Vec::with_capacity(built.len());
    for r in built {
        records.push(r?);
    }

    let manifest = DatasetManifest {
        kind: config.kind,
        records,
        config_snapshot: config.snapshot(),
        base_dir: out_dir.to_path_buf(),
    };
    write_manifest(&manifest, &out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut text = String::new();
    text.push_str(MANIFEST_MAGIC);
    text.push('\n');
    let _ = writeln!(text, "task {}", manifest.task().as_str());
    let _ = writeln!(text, "kind {}", manifest.kind.as_str());
    let _ = writeln!(text, "count {}", manifest.records.len());
    let _ = writeln!(text, "config {}", manifest.config_snapshot);
    for r in &manifest.records {
        let target = match r.target {
            Target::Label(l) => format!("label={l}"),
            Target::Value(v) => format!("target={v:.17e}"),
        };
        let _ = writeln!(
            text,
            "record id={} node={} ele={} cache={} {} split={} node_sha256={} ele_sha256={}",
            r.id,
            r.node_path.display(),
            r.ele_path.display(),
            r.cache_path.display(),
            target,
            r.split,
            r.node_hash,
            r.ele_hash
        );
    }
    write_atomic(path, &text)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let display = path.display().to_string();
    let err = |detail: String| DatasetError::Manifest { path: display.clone(), detail };
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_MAGIC) {
        return Err(err("bad magic".into()));
    }
    let mut kind = None;
    let mut config_snapshot = String::new();
    let mut count = None;
    let mut records = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("kind ") {
            kind = DatasetKind::parse(rest);
        } else if let Some(rest) = line.strip_prefix("count ") {
            count = rest.parse::<usize>().ok();
        } else if let Some(rest) = line.strip_prefix("config ") {
            config_snapshot = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("record ") {
            let mut fields = std::collections::HashMap::new();
            for kv in rest.split_whitespace() {
                let (k, v) =
                    kv.split_once('=').ok_or_else(|| err(format!("bad field '{kv}'")))?;
                fields.insert(k.to_string(), v.to_string());
            }
            let get = |k: &str| -> Result<String, DatasetError> {
                fields.get(k).cloned().ok_or_else(|| err(format!("record missing '{k}'")))
            };
            let target = if let Some(l) = fields.get("label") {
                Target::Label(l.parse().map_err(|_| err(format!("bad label '{l}'")))?)
            } else if let Some(v) = fields.get("target") {
                Target::Value(v.parse().map_err(|_| err(format!("bad target '{v}'")))?)
            } else {
                return Err(err("record has neither label nor target".into()));
            };
            records.push(SampleRecord {
                id: get("id")?,
                node_path: PathBuf::from(get("node")?),
                ele_path: PathBuf::from(get("ele")?),
                cache_path: PathBuf::from(get("cache")?),
                target,
                split: get("split")?,
                node_hash: get("node_sha256")?,
                ele_hash: get("ele_sha256")?,
            });
        }
    }
    let kind = kind.ok_or_else(|| err("missing kind".into()))?;
    if count != Some(records.len()) {
        return Err(err(format!(
            "count {:?} disagrees with {} records",
            count,
            records.len()
        )));
    }
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok(DatasetManifest { kind, records, config_snapshot, base_dir })
}

/// Outcome of a precompute run.
#[derive(Debug, Default)]
pub struct PrecomputeSummary {
    pub built: usize,
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
}

/// Build (or reuse) the operator/hierarchy cache for every manifest record.
/// Idempotent: a cache whose stored source hash matches the mesh text and
/// parameters is left untouched.
pub fn precompute(
    manifest: &DatasetManifest,
    operator: OperatorKind,
    lumping: Lumping,
    levels: usize,
    seed: u64,
) -> Result<PrecomputeSummary, DatasetError> {
    let results: Vec<Result<bool, (String, String)>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let id = record.id.clone();
            let fail = |detail: String| (id.clone(), detail);
            let node_path = manifest.base_dir.join(&record.node_path);
            let ele_path = manifest.base_dir.join(&record.ele_path);
            let node_text =
                std::fs::read_to_string(&node_path).map_err(|e| fail(e.to_string()))?;
            let ele_text =
                std::fs::read_to_string(&ele_path).map_err(|e| fail(e.to_string()))?;
            let mesh_seed = subseed(seed, Purpose::Matching, index as u64);
            let hash = source_hash(&node_text, &ele_text, operator, lumping, levels, mesh_seed);
            let cache_path = manifest.base_dir.join(record.cache_file(operator));
            if peek_source_hash(&cache_path).as_deref() == Some(hash.as_str()) {
                return Ok(false);
            }
            let mesh = parse_tetgen_with_id(&node_text, &ele_text, &record.id)
                .map_err(|e| fail(e.to_string()))?;
            let report = mesh.validate();
            if !report.is_clean() {
                return Err(fail(format!(
                    "mesh failed validation: {} isolated, {} degenerate, {} components",
                    report.isolated_vertices.len(),
                    report.degenerate_tets.len(),
                    report.component_count
                )));
            }
            let op = assemble_operator(&mesh, operator, lumping)
                .map_err(|e| fail(e.to_string()))?;
            let hierarchy =
                build_hierarchy(&op, levels, mesh_seed).map_err(|e| fail(e.to_string()))?;
            let cache = OperatorCache { operator, lumping, source_hash: hash, hierarchy };
            if let Some(parent) = cache_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
            }
            save_cache(&cache, &cache_path).map_err(|e| fail(e.to_string()))?;
            Ok(true)
        })
        .collect();
    let mut summary = PrecomputeSummary::default();
    for r in results {
        match r {
            Ok(true) => summary.built += 1,
            Ok(false) => summary.skipped += 1,
            Err(fail) => summary.failed.push(fail),
        }
    }
    Ok(summary)
}

/// A loaded sample plus its manifest record.
pub struct LoadedSample {
    pub record: SampleRecord,
    pub mesh: TetMesh,
    pub sample: MeshSample,
}

/// Load meshes and caches into network-ready samples (min-max normalized xyz
/// features, padded through each hierarchy).
pub fn load_samples(
    manifest: &DatasetManifest,
    operator: OperatorKind,
) -> Result<Vec<LoadedSample>, DatasetError> {
    let loaded: Vec<Result<LoadedSample, DatasetError>> = manifest
        .records
        .par_iter()
        .map(|record| {
            let node_path = manifest.base_dir.join(&record.node_path);
            let ele_path = manifest.base_dir.join(&record.ele_path);
            let io = |p: &Path, source| DatasetError::Io { path: p.display().to_string(), source };
            let node_text = std::fs::read_to_string(&node_path).map_err(|e| io(&node_path, e))?;
            let ele_text = std::fs::read_to_string(&ele_path).map_err(|e| io(&ele_path, e))?;
            let mesh = parse_tetgen_with_id(&node_text, &ele_text, &record.id)
                .map_err(|source| DatasetError::Mesh { id: record.id.clone(), source })?;
            let cache = load_cache(&manifest.base_dir.join(record.cache_file(operator)))?;
            let feats = mesh.min_max_normalize();
            let features =
                Array2::from_shape_fn((mesh.n_vertices(), 3), |(i, c)| feats[i][c]);
            let sample = MeshSample::new(
                record.id.clone(),
                features.view(),
                Arc::new(cache.hierarchy),
                record.target,
            )?;
            Ok(LoadedSample { record: record.clone(), mesh, sample })
        })
        .collect();
    loaded.into_iter().collect()
}
