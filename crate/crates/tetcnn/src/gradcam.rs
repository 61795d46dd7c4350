//! Grad-CAM for tetrahedral meshes: class-gradient channel weights at the
//! last conv block, a ReLU-rectified coarse heatmap, propagation down the
//! coarsening hierarchy, and KNN smoothing onto the original vertices.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array1;
use thiserror::Error;

use crate::network::{forward, head_input_gradient, BnMode, ForwardCache, MeshSample, Model, NetworkError};
use crate::tetmesh::TetMesh;

#[derive(Debug, Error)]
pub enum GradCamError {
    #[error("class index {0} invalid for a binary head")]
    BadClass(usize),
    #[error("knn parameter {k} outside [1, {n}]")]
    BadKnn { k: usize, n: usize },
    #[error("heatmap has {found} values, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("heatmap io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad heatmap text {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Per-channel Grad-CAM weights for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct CamWeights {
    pub alpha: Array1<f64>,
    pub class: usize,
}

/// Nonnegative per-vertex saliency on the original mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub class: usize,
    pub normalized: bool,
}

/// Channel weights: the mean over the last conv block's real vertices of
/// `d y^c / d X`.
pub fn cam_weights(
    model: &Model,
    sample: &MeshSample,
    cache: &ForwardCache,
    class: usize,
) -> Result<CamWeights, GradCamError> {
    if class > 1 {
        return Err(GradCamError::BadClass(class));
    }
    let d_x = head_input_gradient(model, sample, cache, class);
    let level = &sample.hierarchy.levels[cache.gap_level()];
    let f = d_x.ncols();
    let mut alpha = Array1::zeros(f);
    for (slot, &is_real) in level.real.iter().enumerate() {
        if is_real {
            for c in 0..f {
                alpha[c] += d_x[(slot, c)];
            }
        }
    }
    alpha /= level.n_real as f64;
    Ok(CamWeights { alpha, class })
}

/// ReLU-rectified weighted channel sum per real coarse vertex, in compact
/// indexing at the last conv level.
pub fn heatmap_coarse(
    weights: &CamWeights,
    sample: &MeshSample,
    cache: &ForwardCache,
) -> Result<Vec<f64>, GradCamError> {
    let acts = cache.last_conv_activations();
    if acts.ncols() != weights.alpha.len() {
        return Err(GradCamError::LengthMismatch {
            expected: acts.ncols(),
            found: weights.alpha.len(),
        });
    }
    let level = &sample.hierarchy.levels[cache.gap_level()];
    let mut out = vec![0.0; level.n_real];
    for (slot, &src) in level.slots.iter().enumerate() {
        if let Some(v) = src {
            let mut acc = 0.0;
            for c in 0..acts.ncols() {
                acc += weights.alpha[c] * acts[(slot, c)];
            }
            out[v] = acc.max(0.0);
        }
    }
    Ok(out)
}

/// Propagate a coarse heatmap to the original vertices: copy every coarse
/// value to its cluster members down each level, then smooth with an
/// inverse-distance-weighted mean over the `k` nearest vertices (3D
/// Euclidean, self included at distance zero, floor 1e-12).
pub fn upsample(
    coarse: &[f64],
    sample: &MeshSample,
    mesh: &TetMesh,
    k: usize,
) -> Result<Heatmap, GradCamError> {
    let hierarchy = &sample.hierarchy;
    let n0 = hierarchy.levels[0].n_real;
    if k < 1 || k > n0 {
        return Err(GradCamError::BadKnn { k, n: n0 });
    }
    // Stage 1: copy down through the assignment matrices.
    let stages = hierarchy.n_stages();
    let top_used = top_level_of(coarse.len(), hierarchy)?;
    let mut values = coarse.to_vec();
    for l in (0..top_used).rev() {
        values = hierarchy.assignments[l].prolong(&values);
    }
    debug_assert_eq!(values.len(), n0);
    let _ = stages;

    // Stage 2: KNN inverse-distance smoothing on the original coordinates.
    let mut smoothed = vec![0.0; n0];
    let mut dist_buf: Vec<(f64, usize)> = Vec::with_capacity(n0);
    for i in 0..n0 {
        dist_buf.clear();
        let pi = mesh.vertices[i];
        for (j, pj) in mesh.vertices.iter().enumerate() {
            let dx = pi[0] - pj[0];
            let dy = pi[1] - pj[1];
            let dz = pi[2] - pj[2];
            dist_buf.push(((dx * dx + dy * dy + dz * dz).sqrt(), j));
        }
        dist_buf.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut wsum = 0.0;
        let mut acc = 0.0;
        for &(d, j) in dist_buf.iter().take(k) {
            let w = 1.0 / d.max(1e-12);
            wsum += w;
            acc += w * values[j];
        }
        smoothed[i] = acc / wsum;
    }
    Ok(Heatmap { values: smoothed, class: 0, normalized: false })
}

/// Which hierarchy level a coarse heatmap of this length belongs to.
fn top_level_of(len: usize, hierarchy: &crate::coarsen::Hierarchy) -> Result<usize, GradCamError> {
    for (l, level) in hierarchy.levels.iter().enumerate() {
        if level.n_real == len {
            return Ok(l);
        }
    }
    Err(GradCamError::LengthMismatch { expected: hierarchy.levels[0].n_real, found: len })
}

/// Full pipeline: forward in inference mode, weights, coarse map, upsample.
pub fn gradcam_heatmap(
    model: &Model,
    sample: &MeshSample,
    mesh: &TetMesh,
    class: usize,
    knn: usize,
    normalize: bool,
) -> Result<Heatmap, GradCamError> {
    let cache = forward(model, sample, BnMode::Running)?;
    let weights = cam_weights(model, sample, &cache, class)?;
    let coarse = heatmap_coarse(&weights, sample, &cache)?;
    let mut heatmap = upsample(&coarse, sample, mesh, knn)?;
    heatmap.class = class;
    if normalize {
        let max = heatmap.values.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            for v in &mut heatmap.values {
                *v /= max;
            }
        }
        heatmap.normalized = true;
    }
    Ok(heatmap)
}

/// Legacy-VTK ASCII unstructured grid with the heatmap as POINT_DATA.
pub fn export_heatmap_vtk(
    heatmap: &Heatmap,
    mesh: &TetMesh,
    path: &Path,
) -> Result<(), GradCamError> {
    if heatmap.values.len() != mesh.n_vertices() {
        return Err(GradCamError::LengthMismatch {
            expected: mesh.n_vertices(),
            found: heatmap.values.len(),
        });
    }
    let mut text = String::new();
    text.push_str("# vtk DataFile Version 3.0\n");
    text.push_str("tetcnn gradcam heatmap\n");
    text.push_str("ASCII\n");
    text.push_str("DATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(text, "POINTS {} double", mesh.n_vertices());
    for v in &mesh.vertices {
        let _ = writeln!(text, "{:.9e} {:.9e} {:.9e}", v[0], v[1], v[2]);
    }
    let _ = writeln!(text, "CELLS {} {}", mesh.n_tets(), mesh.n_tets() * 5);
    for t in &mesh.tets {
        let _ = writeln!(text, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(text, "CELL_TYPES {}", mesh.n_tets());
    for _ in 0..mesh.n_tets() {
        text.push_str("10\n");
    }
    let _ = writeln!(text, "POINT_DATA {}", mesh.n_vertices());
    text.push_str("SCALARS gradcam double 1\n");
    text.push_str("LOOKUP_TABLE default\n");
    for v in &heatmap.values {
        let _ = writeln!(text, "{v:.9e}");
    }
    write_file(path, &text)
}

/// Plain two-column text: `vertex_id value`.
pub fn export_heatmap_text(heatmap: &Heatmap, path: &Path) -> Result<(), GradCamError> {
    let mut text = String::new();
    for (i, v) in heatmap.values.iter().enumerate() {
        let _ = writeln!(text, "{i} {v:.9e}");
    }
    write_file(path, &text)
}

/// Read the two-column text format back.
pub fn import_heatmap_text(path: &Path) -> Result<Vec<f64>, GradCamError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|source| GradCamError::Io { path: display.clone(), source })?;
    let mut values = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let idx: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| GradCamError::Parse {
                path: display.clone(),
                detail: format!("line {}: bad vertex id", ln + 1),
            })?;
        let value: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| GradCamError::Parse {
                path: display.clone(),
                detail: format!("line {}: bad value", ln + 1),
            })?;
        if idx != values.len() {
            return Err(GradCamError::Parse {
                path: display.clone(),
                detail: format!("line {}: out-of-order vertex id {idx}", ln + 1),
            });
        }
        values.push(value);
    }
    Ok(values)
}

fn write_file(path: &Path, contents: &str) -> Result<(), GradCamError> {
    std::fs::write(path, contents)
        .map_err(|source| GradCamError::Io { path: path.display().to_string(), source })
}
