//! Synthetic tetrahedral shells: an icosphere inner surface, a smooth radial
//! warp, a thickness field with optional planted anomaly, and a two-layer
//! prism extrusion split into tets with a globally consistent diagonal rule.
//!
//! Shells of equal subdivision share connectivity exactly; only vertex
//! positions differ between meshes, so the class signal is purely metric.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng::{stream, Purpose};
use crate::tetmesh::{MeshError, Point3, TetMesh};

#[derive(Debug, Error)]
pub enum ShellError {
    #[error("shell self-intersects: {flipped} inverted tets (thickness too large for curvature)")]
    SelfIntersection { flipped: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("invalid shell spec: {0}")]
    BadSpec(String),
}

/// Localized thickening cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalySpec {
    /// Unit direction of the cap center.
    pub center: [f64; 3],
    /// Angular radius of the cap (radians).
    pub angular_radius: f64,
    /// Thickness multiplier inside the cap (1.0 = neutral).
    pub multiplier: f64,
}

/// Parameters of one synthetic shell.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellSpec {
    /// Nominal inner radius (length units).
    pub base_radius: f64,
    /// Mean shell thickness (length units).
    pub mean_thickness: f64,
    /// Relative amplitude of the smooth multiplicative thickness variation.
    pub thickness_noise: f64,
    /// Relative amplitude of the smooth radial warp of the inner surface.
    pub vertex_perturbation: f64,
    /// Icosphere subdivision level (>= 1).
    pub subdivision: usize,
    pub anomaly: Option<AnomalySpec>,
    pub seed: u64,
}

impl ShellSpec {
    fn validate(&self) -> Result<(), ShellError> {
        if !(self.mean_thickness > 0.0) {
            return Err(ShellError::BadSpec("thickness must be positive".into()));
        }
        if self.subdivision < 1 {
            return Err(ShellError::BadSpec("subdivision must be >= 1".into()));
        }
        if let Some(a) = &self.anomaly {
            if !(a.multiplier > 0.0) {
                return Err(ShellError::BadSpec("anomaly multiplier must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Unit icosphere: `subdivision` rounds of 4-way triangle splitting with
/// midpoint reprojection. Faces wind counter-clockwise seen from outside.
pub fn icosphere(subdivision: usize) -> (Vec<Point3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut vertices {
        normalize(v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivision {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mut mid = |i: usize, j: usize, verts: &mut Vec<Point3>| -> usize {
                let key = if i < j { (i, j) } else { (j, i) };
                *midpoints.entry(key).or_insert_with(|| {
                    let mut m = [
                        (verts[i][0] + verts[j][0]) / 2.0,
                        (verts[i][1] + verts[j][1]) / 2.0,
                        (verts[i][2] + verts[j][2]) / 2.0,
                    ];
                    normalize(&mut m);
                    verts.push(m);
                    verts.len() - 1
                })
            };
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next_faces.push([a, ab, ca]);
            next_faces.push([b, bc, ab]);
            next_faces.push([c, ca, bc]);
            next_faces.push([ab, bc, ca]);
        }
        faces = next_faces;
    }
    (vertices, faces)
}

/// Smooth band-limited scalar field on the sphere: a seeded mixture of
/// directional cosine lobes, normalized into [-1, 1].
pub struct SmoothField {
    lobes: Vec<([f64; 3], f64, f64, f64)>,
    norm: f64,
}

impl SmoothField {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = 6;
        let mut lobes = Vec::with_capacity(n);
        let mut total = 0.0;
        for _ in 0..n {
            let mut u = [
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
                rng.random_range(-1.0..1.0f64),
            ];
            if dot(u, u) < 1e-12 {
                u = [1.0, 0.0, 0.0];
            }
            normalize(&mut u);
            let freq = rng.random_range(1..=3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let weight = rng.random_range(-1.0..1.0f64);
            total += weight.abs();
            lobes.push((u, freq, phase, weight));
        }
        SmoothField { lobes, norm: total.max(1e-12) }
    }

    /// Value in [-1, 1] at a unit direction.
    pub fn eval(&self, dir: [f64; 3]) -> f64 {
        let mut acc = 0.0;
        for &(u, freq, phase, weight) in &self.lobes {
            acc += weight * (freq * std::f64::consts::PI * dot(u, dir) + phase).cos();
        }
        acc / self.norm
    }
}

/// Intermediate surfaces before tetrahedralization, exposed for the
/// thickness-recoverability check and for target bookkeeping.
pub struct ShellSurfaces {
    pub inner: Vec<Point3>,
    pub outer: Vec<Point3>,
    /// Realized per-vertex thickness (multiplier and noise applied).
    pub thickness: Vec<f64>,
    /// Per-vertex cap membership flags.
    pub in_anomaly: Vec<bool>,
    pub faces: Vec<[usize; 3]>,
}

impl ShellSurfaces {
    pub fn mean_thickness(&self) -> f64 {
        self.thickness.iter().sum::<f64>() / self.thickness.len() as f64
    }
}

/// Build the deformed inner surface, thickness field, and offset outer
/// surface for a spec. All randomness flows through per-purpose sub-streams
/// of `spec.seed`, so toggling the anomaly never shifts the other fields.
pub fn shell_surfaces(spec: &ShellSpec) -> Result<ShellSurfaces, ShellError> {
    spec.validate()?;
    let (unit, faces) = icosphere(spec.subdivision);
    let warp = SmoothField::new(&mut stream(spec.seed, Purpose::Generation, 1));
    let thick_noise = SmoothField::new(&mut stream(spec.seed, Purpose::Generation, 2));

    let inner: Vec<Point3> = unit
        .iter()
        .map(|&dir| {
            let r = spec.base_radius * (1.0 + spec.vertex_perturbation * warp.eval(dir));
            [dir[0] * r, dir[1] * r, dir[2] * r]
        })
        .collect();

    // Area-weighted vertex normals of the deformed inner surface.
    let mut normals = vec![[0.0f64; 3]; inner.len()];
    for &[a, b, c] in &faces {
        let n = cross(sub(inner[b], inner[a]), sub(inner[c], inner[a]));
        for &v in &[a, b, c] {
            for k in 0..3 {
                normals[v][k] += n[k];
            }
        }
    }
    for n in &mut normals {
        normalize(n);
    }

    let mut thickness = Vec::with_capacity(unit.len());
    let mut in_anomaly = vec![false; unit.len()];
    for (i, &dir) in unit.iter().enumerate() {
        let mut t = spec.mean_thickness * (1.0 + spec.thickness_noise * thick_noise.eval(dir));
        if let Some(a) = &spec.anomaly {
            if dot(dir, a.center) >= a.angular_radius.cos() {
                t *= a.multiplier;
                in_anomaly[i] = true;
            }
        }
        thickness.push(t);
    }

    let outer: Vec<Point3> = inner
        .iter()
        .zip(&normals)
        .zip(&thickness)
        .map(|((p, n), t)| [p[0] + n[0] * t, p[1] + n[1] * t, p[2] + n[2] * t])
        .collect();

    Ok(ShellSurfaces { inner, outer, thickness, in_anomaly, faces })
}

/// Number of radial prism layers between the surfaces.
pub const SHELL_LAYERS: usize = 2;

/// Generate the full tetrahedral shell. Errors if any prism inverts
/// (self-intersection from excessive thickness or warp).
pub fn generate_shell(spec: &ShellSpec) -> Result<TetMesh, ShellError> {
    let surfaces = shell_surfaces(spec)?;
    let mesh = tetrahedralize_shell(&surfaces, &format!("shell-s{}", spec.seed))?;
    Ok(mesh)
}

/// Extrude the surface stack into `SHELL_LAYERS` prism layers and split each
/// prism into three tets. The quad-face diagonal always runs from the
/// smaller-index column's bottom to the larger-index column's top, which is
/// consistent across neighboring prisms.
pub fn tetrahedralize_shell(
    surfaces: &ShellSurfaces,
    source_id: &str,
) -> Result<TetMesh, ShellError> {
    let v_per_layer = surfaces.inner.len();
    let layers = SHELL_LAYERS + 1;
    let mut vertices = Vec::with_capacity(v_per_layer * layers);
    for layer in 0..layers {
        let s = layer as f64 / SHELL_LAYERS as f64;
        for i in 0..v_per_layer {
            let p = surfaces.inner[i];
            let q = surfaces.outer[i];
            vertices.push([
                p[0] + s * (q[0] - p[0]),
                p[1] + s * (q[1] - p[1]),
                p[2] + s * (q[2] - p[2]),
            ]);
        }
    }
    let mut tets = Vec::with_capacity(surfaces.faces.len() * 3 * SHELL_LAYERS);
    for layer in 0..SHELL_LAYERS {
        let base = layer * v_per_layer;
        let top = (layer + 1) * v_per_layer;
        for &face in &surfaces.faces {
            // Rotate so the smallest column index leads; winding is preserved.
            let lead = (0..3).min_by_key(|&k| face[k]).unwrap();
            let v0 = face[lead];
            let v1 = face[(lead + 1) % 3];
            let v2 = face[(lead + 2) % 3];
            let (b0, b1, b2) = (base + v0, base + v1, base + v2);
            let (t0, t1, t2) = (top + v0, top + v1, top + v2);
            if v1 < v2 {
                tets.push([b0, b1, b2, t2]);
                tets.push([b0, b1, t2, t1]);
                tets.push([b0, t1, t2, t0]);
            } else {
                tets.push([b0, b1, b2, t1]);
                tets.push([b0, b2, t2, t1]);
                tets.push([b0, t0, t1, t2]);
            }
        }
    }
    let mesh = TetMesh::new(vertices, tets, source_id)?;
    let flipped = mesh.validate().orientation_fixes;
    if flipped > 0 {
        return Err(ShellError::SelfIntersection { flipped });
    }
    Ok(mesh)
}

/// Tet indices whose all four vertices lie in anomaly columns (a vertex
/// column is every radial copy of a surface vertex).
pub fn anomaly_tets(mesh: &TetMesh, in_anomaly: &[bool]) -> Vec<bool> {
    let v_per_layer = in_anomaly.len();
    mesh.tets
        .iter()
        .map(|tet| tet.iter().all(|&v| in_anomaly[v % v_per_layer]))
        .collect()
}

fn normalize(v: &mut [f64; 3]) {
    let n = dot(*v, *v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts_follow_subdivision() {
        for (s, v, f) in [(0, 12, 20), (1, 42, 80), (2, 162, 320), (3, 642, 1280)] {
            let (verts, faces) = icosphere(s);
            assert_eq!(verts.len(), v);
            assert_eq!(faces.len(), f);
            for p in &verts {
                assert!((dot(*p, *p).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn basic_spec(seed: u64) -> ShellSpec {
        ShellSpec {
            base_radius: 1.0,
            mean_thickness: 0.2,
            thickness_noise: 0.2,
            vertex_perturbation: 0.05,
            subdivision: 2,
            anomaly: None,
            seed,
        }
    }

    #[test]
    fn shell_is_valid_and_clean() {
        let mesh = generate_shell(&basic_spec(5)).unwrap();
        let report = mesh.validate();
        assert!(report.is_clean(), "{report:?}");
        assert_eq!(mesh.n_vertices(), 162 * (SHELL_LAYERS + 1));
        assert_eq!(mesh.n_tets(), 320 * 3 * SHELL_LAYERS);
    }

    #[test]
    fn shell_volume_close_to_analytic() {
        // Zero noise, no anomaly: volume of r..r+t ball shell.
        let spec = ShellSpec {
            base_radius: 1.0,
            mean_thickness: 0.2,
            thickness_noise: 0.0,
            vertex_perturbation: 0.0,
            subdivision: 3,
            anomaly: None,
            seed: 1,
        };
        let mesh = generate_shell(&spec).unwrap();
        let total: f64 = (0..mesh.n_tets()).map(|t| mesh.tet_volume(t).unwrap()).sum();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * (1.2f64.powi(3) - 1.0);
        let rel = (total - analytic).abs() / analytic;
        assert!(rel < 0.05, "volume {total} vs {analytic} (rel {rel:.4})");
    }

    #[test]
    fn thickness_recoverability_is_exact() {
        let mut spec = basic_spec(9);
        spec.anomaly = Some(AnomalySpec {
            center: [0.0, 0.0, 1.0],
            angular_radius: 0.4,
            multiplier: 1.5,
        });
        let surfaces = shell_surfaces(&spec).unwrap();
        for i in 0..surfaces.inner.len() {
            let d = sub(surfaces.outer[i], surfaces.inner[i]);
            let dist = dot(d, d).sqrt();
            assert!(
                (dist - surfaces.thickness[i]).abs() <= 1e-10,
                "vertex {i}: offset {dist} vs thickness {}",
                surfaces.thickness[i]
            );
        }
        assert!(surfaces.in_anomaly.iter().any(|&b| b));
        assert!(!surfaces.in_anomaly.iter().all(|&b| b));
    }

    #[test]
    fn neutral_anomaly_is_bit_identical_to_none() {
        let mut with = basic_spec(11);
        with.anomaly = Some(AnomalySpec {
            center: [1.0, 0.0, 0.0],
            angular_radius: 0.5,
            multiplier: 1.0,
        });
        let without = basic_spec(11);
        let a = generate_shell(&with).unwrap();
        let b = generate_shell(&without).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.tets, b.tets);
    }

    #[test]
    fn identical_connectivity_across_specs() {
        let a = generate_shell(&basic_spec(1)).unwrap();
        let mut spec = basic_spec(2);
        spec.mean_thickness = 0.35;
        let b = generate_shell(&spec).unwrap();
        assert_eq!(a.tets, b.tets, "connectivity is a function of subdivision only");
    }

    #[test]
    fn excessive_thickness_reports_self_intersection() {
        let mut spec = basic_spec(3);
        // Offset far beyond the curvature limit of the warped concavities.
        spec.mean_thickness = 4.0;
        spec.thickness_noise = 0.5;
        spec.vertex_perturbation = 0.8;
        match generate_shell(&spec) {
            Err(ShellError::SelfIntersection { flipped }) => assert!(flipped > 0),
            Ok(_) => panic!("expected self-intersection"),
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shell(&basic_spec(21)).unwrap();
        let b = generate_shell(&basic_spec(21)).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.tets, b.tets);
    }
}
