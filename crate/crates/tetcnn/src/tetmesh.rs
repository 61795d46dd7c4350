//! Tetrahedral mesh representation, TetGen ingestion, and geometric primitives.
//!
//! A [`TetMesh`] is immutable after construction: every constructor enforces
//! index validity, distinct vertices per tet, and positive signed volume
//! (negatively oriented tets are reordered by swapping the last two indices,
//! and the fix-up count is reported by [`validate`]).

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Vertex position in input units (typically mm).
pub type Point3 = [f64; 3];

/// Errors raised by mesh construction, parsing, and geometry queries.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("malformed header in {file} line {line}: {detail}")]
    MalformedHeader {
        file: &'static str,
        line: usize,
        detail: String,
    },
    #[error("malformed record in {file} line {line}: {detail}")]
    MalformedRecord {
        file: &'static str,
        line: usize,
        detail: String,
    },
    #[error("count mismatch in {file}: header says {expected}, found {found} records")]
    CountMismatch {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("tet {tet}: vertex index {index} out of range (n = {n})")]
    IndexOutOfRange { tet: usize, index: usize, n: usize },
    #[error("tet {tet}: duplicate vertex index {index}")]
    DuplicateVertex { tet: usize, index: usize },
    #[error("tet {tet} is degenerate (volume {volume:.3e} below tolerance)")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("mesh too small: n = {n}, m = {m} (need n >= 4, m >= 1)")]
    TooSmall { n: usize, m: usize },
    #[error("edge ({0}, {1}) is not an edge of the tet")]
    EdgeNotInTet(usize, usize),
    #[error("invalid tet index {0} (m = {1})")]
    BadTetIndex(usize, usize),
    #[error("vertex {0} has no incident tet")]
    IsolatedVertex(usize),
}

/// Undirected edge with canonical ordering `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
}

impl Edge {
    /// Canonicalize an endpoint pair. Panics on `a == b`; edges between a
    /// vertex and itself never arise from a valid tet.
    pub fn new(a: usize, b: usize) -> Self {
        assert_ne!(a, b, "degenerate edge ({a}, {a})");
        if a < b {
            Edge { i: a, j: b }
        } else {
            Edge { i: b, j: a }
        }
    }
}

/// The six edges of a tet, as index pairs into its 4-tuple.
pub const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// A tetrahedral mesh: vertex coordinates plus 4-tuples of vertex indices.
#[derive(Debug, Clone)]
pub struct TetMesh {
    pub vertices: Vec<Point3>,
    pub tets: Vec<[usize; 4]>,
    /// Opaque label carried through caches and reports.
    pub source_id: String,
    orientation_fixes: usize,
}

/// Relative volume tolerance: a tet is degenerate when its volume is below
/// `1e-12` times the cube of the bounding-box diagonal scale.
pub const DEGENERATE_REL_TOL: f64 = 1e-12;

impl TetMesh {
    /// Build a mesh, enforcing all invariants. Tets with negative signed
    /// volume are silently reordered (last two indices swapped); the number
    /// of fix-ups is retained for [`validate`].
    pub fn new(
        vertices: Vec<Point3>,
        mut tets: Vec<[usize; 4]>,
        source_id: impl Into<String>,
    ) -> Result<Self, MeshError> {
        let n = vertices.len();
        let m = tets.len();
        if n < 4 || m < 1 {
            return Err(MeshError::TooSmall { n, m });
        }
        for (t, tet) in tets.iter().enumerate() {
            for &v in tet {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange { tet: t, index: v, n });
                }
            }
            for a in 0..4 {
                for b in (a + 1)..4 {
                    if tet[a] == tet[b] {
                        return Err(MeshError::DuplicateVertex { tet: t, index: tet[a] });
                    }
                }
            }
        }
        let scale = bbox_scale(&vertices);
        let vol_tol = DEGENERATE_REL_TOL * scale * scale * scale;
        let mut orientation_fixes = 0;
        for (t, tet) in tets.iter_mut().enumerate() {
            let v = signed_volume(&vertices, tet);
            if v.abs() <= vol_tol {
                return Err(MeshError::DegenerateTet { tet: t, volume: v.abs() });
            }
            if v < 0.0 {
                tet.swap(2, 3);
                orientation_fixes += 1;
            }
        }
        Ok(TetMesh {
            vertices,
            tets,
            source_id: source_id.into(),
            orientation_fixes,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    /// Unsigned volume of tet `t`: `|det([v1-v0, v2-v0, v3-v0])| / 6`.
    pub fn tet_volume(&self, t: usize) -> Result<f64, MeshError> {
        let tet = self
            .tets
            .get(t)
            .ok_or(MeshError::BadTetIndex(t, self.tets.len()))?;
        let v = signed_volume(&self.vertices, tet).abs();
        let scale = bbox_scale(&self.vertices);
        if v <= DEGENERATE_REL_TOL * scale * scale * scale {
            return Err(MeshError::DegenerateTet { tet: t, volume: v });
        }
        Ok(v)
    }

    /// Interior dihedral angle along edge `e` of tet `t`, in (0, pi).
    ///
    /// Computed as the angle between the two face-plane directions obtained by
    /// projecting the off-edge vertices onto the plane orthogonal to the edge.
    pub fn dihedral_angle(&self, t: usize, e: Edge) -> Result<f64, MeshError> {
        let tet = self
            .tets
            .get(t)
            .ok_or(MeshError::BadTetIndex(t, self.tets.len()))?;
        let opp = opposite_edge(*tet, e)?;
        let p_i = self.vertices[e.i];
        let p_j = self.vertices[e.j];
        let hinge = sub(p_j, p_i);
        let h2 = dot(hinge, hinge);
        if h2 == 0.0 {
            return Err(MeshError::DegenerateTet { tet: t, volume: 0.0 });
        }
        let u = reject(sub(self.vertices[opp.i], p_i), hinge, h2);
        let w = reject(sub(self.vertices[opp.j], p_i), hinge, h2);
        let cross = cross(u, w);
        let sin = dot(cross, cross).sqrt();
        let cos = dot(u, w);
        if sin == 0.0 && cos == 0.0 {
            return Err(MeshError::DegenerateTet { tet: t, volume: 0.0 });
        }
        Ok(sin.atan2(cos))
    }

    /// Cotangent of the interior dihedral angle along edge `e` of tet `t`.
    /// Avoids the angle round-trip; used by the stiffness assembly.
    pub fn dihedral_cot(&self, t: usize, e: Edge) -> Result<f64, MeshError> {
        let tet = self.tets[t];
        let opp = opposite_edge(tet, e)?;
        let p_i = self.vertices[e.i];
        let p_j = self.vertices[e.j];
        let hinge = sub(p_j, p_i);
        let h2 = dot(hinge, hinge);
        let u = reject(sub(self.vertices[opp.i], p_i), hinge, h2);
        let w = reject(sub(self.vertices[opp.j], p_i), hinge, h2);
        let cross = cross(u, w);
        let sin = dot(cross, cross).sqrt();
        if sin == 0.0 {
            return Err(MeshError::DegenerateTet { tet: t, volume: 0.0 });
        }
        Ok(dot(u, w) / sin)
    }

    /// Length of edge `e`.
    pub fn edge_length(&self, e: Edge) -> f64 {
        let d = sub(self.vertices[e.j], self.vertices[e.i]);
        dot(d, d).sqrt()
    }

    /// Per-axis min-max normalization to [0, 1]; a constant axis maps to 0.0.
    pub fn min_max_normalize(&self) -> Vec<[f64; 3]> {
        min_max_normalize_points(&self.vertices)
    }

    /// Vertex-to-vertex and incidence adjacency, consistent with the tets.
    pub fn adjacency(&self) -> VertexAdjacency {
        VertexAdjacency::build(self)
    }

    /// Structural findings; an empty report means a clean mesh.
    pub fn validate(&self) -> ValidationReport {
        let n = self.n_vertices();
        let mut incident = vec![0usize; n];
        for tet in &self.tets {
            for &v in tet {
                incident[v] += 1;
            }
        }
        let isolated_vertices: Vec<usize> = (0..n).filter(|&v| incident[v] == 0).collect();

        // Connected components over the tet-edge graph; isolated vertices
        // count as their own components.
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; n];
        let mut component_count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX || incident[start] == 0 {
                continue;
            }
            comp[start] = component_count;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &w in adj.neighbors(v) {
                    if comp[w] == usize::MAX {
                        comp[w] = component_count;
                        stack.push(w);
                    }
                }
            }
            component_count += 1;
        }
        component_count += isolated_vertices.len();

        let scale = bbox_scale(&self.vertices);
        let vol_tol = DEGENERATE_REL_TOL * scale * scale * scale;
        let degenerate_tets: Vec<usize> = (0..self.n_tets())
            .filter(|&t| signed_volume(&self.vertices, &self.tets[t]).abs() <= vol_tol)
            .collect();

        ValidationReport {
            n: self.n_vertices(),
            m: self.n_tets(),
            orientation_fixes: self.orientation_fixes,
            isolated_vertices,
            degenerate_tets,
            component_count,
        }
    }

    /// Serialize to TetGen `.node` text (0-based, 17 significant digits).
    pub fn to_node_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} 3 0 0", self.n_vertices());
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = writeln!(s, "{i} {:.16e} {:.16e} {:.16e}", v[0], v[1], v[2]);
        }
        s
    }

    /// Serialize to TetGen `.ele` text (0-based).
    pub fn to_ele_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} 4 0", self.n_tets());
        for (t, tet) in self.tets.iter().enumerate() {
            let _ = writeln!(s, "{t} {} {} {} {}", tet[0], tet[1], tet[2], tet[3]);
        }
        s
    }
}

/// Per-axis min-max mapping of a point set to [0, 1]^3. A constant axis
/// carries no information and maps to 0.0.
pub fn min_max_normalize_points(points: &[Point3]) -> Vec<[f64; 3]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in points {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    points
        .iter()
        .map(|v| {
            let mut out = [0.0; 3];
            for a in 0..3 {
                let span = hi[a] - lo[a];
                out[a] = if span > 0.0 { (v[a] - lo[a]) / span } else { 0.0 };
            }
            out
        })
        .collect()
}

/// The edge formed by the two vertices of `tet` not in `e`.
pub fn opposite_edge(tet: [usize; 4], e: Edge) -> Result<Edge, MeshError> {
    let mut rest = [usize::MAX; 2];
    let mut k = 0;
    let mut seen_i = false;
    let mut seen_j = false;
    for &v in &tet {
        if v == e.i {
            seen_i = true;
        } else if v == e.j {
            seen_j = true;
        } else {
            if k == 2 {
                return Err(MeshError::EdgeNotInTet(e.i, e.j));
            }
            rest[k] = v;
            k += 1;
        }
    }
    if !(seen_i && seen_j) {
        return Err(MeshError::EdgeNotInTet(e.i, e.j));
    }
    Ok(Edge::new(rest[0], rest[1]))
}

/// Findings from [`TetMesh::validate`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub n: usize,
    pub m: usize,
    pub orientation_fixes: usize,
    pub isolated_vertices: Vec<usize>,
    pub degenerate_tets: Vec<usize>,
    pub component_count: usize,
}

impl ValidationReport {
    /// No findings beyond orientation fix-ups (which are repairs, not faults).
    pub fn is_clean(&self) -> bool {
        self.isolated_vertices.is_empty()
            && self.degenerate_tets.is_empty()
            && self.component_count <= 1
    }
}

/// Neighbor lists and incidence maps derived from the tets.
#[derive(Debug, Clone)]
pub struct VertexAdjacency {
    neighbor_offsets: Vec<usize>,
    neighbor_data: Vec<usize>,
    vertex_tet_offsets: Vec<usize>,
    vertex_tet_data: Vec<usize>,
    edge_tets: HashMap<Edge, Vec<usize>>,
}

impl VertexAdjacency {
    fn build(mesh: &TetMesh) -> Self {
        let n = mesh.n_vertices();
        let mut edge_tets: HashMap<Edge, Vec<usize>> = HashMap::new();
        for (t, tet) in mesh.tets.iter().enumerate() {
            for &(a, b) in &TET_EDGES {
                edge_tets.entry(Edge::new(tet[a], tet[b])).or_default().push(t);
            }
        }
        let mut neighbor_sets: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in edge_tets.keys() {
            neighbor_sets[e.i].push(e.j);
            neighbor_sets[e.j].push(e.i);
        }
        let mut neighbor_offsets = Vec::with_capacity(n + 1);
        let mut neighbor_data = Vec::new();
        neighbor_offsets.push(0);
        for set in &mut neighbor_sets {
            set.sort_unstable();
            neighbor_data.extend_from_slice(set);
            neighbor_offsets.push(neighbor_data.len());
        }
        let mut vertex_tet_sets: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (t, tet) in mesh.tets.iter().enumerate() {
            for &v in tet {
                vertex_tet_sets[v].push(t);
            }
        }
        let mut vertex_tet_offsets = Vec::with_capacity(n + 1);
        let mut vertex_tet_data = Vec::new();
        vertex_tet_offsets.push(0);
        for set in &vertex_tet_sets {
            vertex_tet_data.extend_from_slice(set);
            vertex_tet_offsets.push(vertex_tet_data.len());
        }
        VertexAdjacency {
            neighbor_offsets,
            neighbor_data,
            vertex_tet_offsets,
            vertex_tet_data,
            edge_tets,
        }
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbor_data[self.neighbor_offsets[v]..self.neighbor_offsets[v + 1]]
    }

    pub fn incident_tets(&self, v: usize) -> &[usize] {
        &self.vertex_tet_data[self.vertex_tet_offsets[v]..self.vertex_tet_offsets[v + 1]]
    }

    pub fn edge_incident_tets(&self, e: Edge) -> Option<&[usize]> {
        self.edge_tets.get(&e).map(|v| v.as_slice())
    }

    /// Edges in canonical (i, j) order, sorted.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges: Vec<Edge> = self.edge_tets.keys().copied().collect();
        edges.sort_unstable();
        edges
    }
}

/// Parse TetGen `.node` + `.ele` ASCII text into a mesh.
///
/// The index base (0 or 1) is auto-detected from the first record index of
/// each file independently, per TetGen convention. Attribute and boundary
/// marker columns are parsed and discarded.
pub fn parse_tetgen(node_text: &str, ele_text: &str) -> Result<TetMesh, MeshError> {
    parse_tetgen_with_id(node_text, ele_text, "tetgen")
}

/// [`parse_tetgen`] with an explicit source id label.
pub fn parse_tetgen_with_id(
    node_text: &str,
    ele_text: &str,
    source_id: &str,
) -> Result<TetMesh, MeshError> {
    let vertices = parse_node(node_text)?;
    let tets = parse_ele(ele_text)?;
    TetMesh::new(vertices, tets, source_id)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(ln, raw)| {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            None
        } else {
            Some((ln + 1, line))
        }
    })
}

fn parse_node(text: &str) -> Result<Vec<Point3>, MeshError> {
    const FILE: &str = ".node";
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or(MeshError::MalformedHeader {
        file: FILE,
        line: 0,
        detail: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.is_empty() || fields.len() > 4 {
        return Err(MeshError::MalformedHeader {
            file: FILE,
            line: hline,
            detail: format!("expected 'n dim n_attr n_marker', got '{header}'"),
        });
    }
    let count: usize = fields[0].parse().map_err(|_| MeshError::MalformedHeader {
        file: FILE,
        line: hline,
        detail: format!("bad vertex count '{}'", fields[0]),
    })?;
    if fields.len() >= 2 && fields[1] != "3" {
        return Err(MeshError::MalformedHeader {
            file: FILE,
            line: hline,
            detail: format!("dimension must be 3, got '{}'", fields[1]),
        });
    }
    let mut records: Vec<(usize, Point3)> = Vec::with_capacity(count);
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(MeshError::MalformedRecord {
                file: FILE,
                line: ln,
                detail: format!("expected 'idx x y z [...]', got '{line}'"),
            });
        }
        let idx: usize = fields[0].parse().map_err(|_| MeshError::MalformedRecord {
            file: FILE,
            line: ln,
            detail: format!("bad index '{}'", fields[0]),
        })?;
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a + 1].parse().map_err(|_| MeshError::MalformedRecord {
                file: FILE,
                line: ln,
                detail: format!("bad coordinate '{}'", fields[a + 1]),
            })?;
        }
        records.push((idx, p));
    }
    if records.len() != count {
        return Err(MeshError::CountMismatch {
            file: FILE,
            expected: count,
            found: records.len(),
        });
    }
    let base = records.first().map(|r| r.0).unwrap_or(0);
    let mut vertices = vec![[f64::NAN; 3]; count];
    for (idx, p) in records {
        let slot = idx.checked_sub(base).filter(|&s| s < count).ok_or(
            MeshError::MalformedRecord {
                file: FILE,
                line: 0,
                detail: format!("vertex index {idx} outside [{base}, {})", base + count),
            },
        )?;
        vertices[slot] = p;
    }
    Ok(vertices)
}

fn parse_ele(text: &str) -> Result<Vec<[usize; 4]>, MeshError> {
    const FILE: &str = ".ele";
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or(MeshError::MalformedHeader {
        file: FILE,
        line: 0,
        detail: "empty file".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.is_empty() || fields.len() > 3 {
        return Err(MeshError::MalformedHeader {
            file: FILE,
            line: hline,
            detail: format!("expected 'm nodes_per_tet n_attr', got '{header}'"),
        });
    }
    let count: usize = fields[0].parse().map_err(|_| MeshError::MalformedHeader {
        file: FILE,
        line: hline,
        detail: format!("bad tet count '{}'", fields[0]),
    })?;
    if fields.len() >= 2 && fields[1] != "4" {
        return Err(MeshError::MalformedHeader {
            file: FILE,
            line: hline,
            detail: format!("nodes per tet must be 4, got '{}'", fields[1]),
        });
    }
    let mut records: Vec<(usize, [usize; 4])> = Vec::with_capacity(count);
    let mut min_vertex = usize::MAX;
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 5 {
            return Err(MeshError::MalformedRecord {
                file: FILE,
                line: ln,
                detail: format!("expected 'idx i j k l [...]', got '{line}'"),
            });
        }
        let idx: usize = fields[0].parse().map_err(|_| MeshError::MalformedRecord {
            file: FILE,
            line: ln,
            detail: format!("bad index '{}'", fields[0]),
        })?;
        let mut tet = [0usize; 4];
        for a in 0..4 {
            tet[a] = fields[a + 1].parse().map_err(|_| MeshError::MalformedRecord {
                file: FILE,
                line: ln,
                detail: format!("bad vertex index '{}'", fields[a + 1]),
            })?;
            min_vertex = min_vertex.min(tet[a]);
        }
        records.push((idx, tet));
    }
    if records.len() != count {
        return Err(MeshError::CountMismatch {
            file: FILE,
            expected: count,
            found: records.len(),
        });
    }
    // Vertex index base: 1-based only when no 0 appears anywhere.
    let vbase = if min_vertex == usize::MAX { 0 } else { min_vertex.min(1) };
    let tbase = records.first().map(|r| r.0).unwrap_or(0);
    let mut tets = vec![[usize::MAX; 4]; count];
    for (idx, tet) in records {
        let slot = idx.checked_sub(tbase).filter(|&s| s < count).ok_or(
            MeshError::MalformedRecord {
                file: FILE,
                line: 0,
                detail: format!("tet index {idx} outside [{tbase}, {})", tbase + count),
            },
        )?;
        let mut out = [0usize; 4];
        for a in 0..4 {
            out[a] = tet[a].checked_sub(vbase).ok_or(MeshError::MalformedRecord {
                file: FILE,
                line: 0,
                detail: format!("vertex index {} below base {vbase}", tet[a]),
            })?;
        }
        tets[slot] = out;
    }
    Ok(tets)
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

/// Component of `v` orthogonal to `axis` (`axis2` = |axis|^2, precomputed).
fn reject(v: Point3, axis: Point3, axis2: f64) -> Point3 {
    let s = dot(v, axis) / axis2;
    [v[0] - s * axis[0], v[1] - s * axis[1], v[2] - s * axis[2]]
}

fn signed_volume(vertices: &[Point3], tet: &[usize; 4]) -> f64 {
    let a = sub(vertices[tet[1]], vertices[tet[0]]);
    let b = sub(vertices[tet[2]], vertices[tet[0]]);
    let c = sub(vertices[tet[3]], vertices[tet[0]]);
    dot(a, cross(b, c)) / 6.0
}

fn bbox_scale(vertices: &[Point3]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let mut s: f64 = 0.0;
    for a in 0..3 {
        s = s.max(hi[a] - lo[a]);
    }
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Vertices of a regular tetrahedron with unit edge length.
pub fn regular_tet_vertices() -> Vec<Point3> {
    let h = (2.0f64 / 3.0).sqrt();
    vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.5, 3.0f64.sqrt() / 2.0, 0.0],
        [0.5, 3.0f64.sqrt() / 6.0, h],
    ]
}

/// A single regular tetrahedron mesh with unit edge length.
pub fn regular_tet_mesh() -> TetMesh {
    TetMesh::new(regular_tet_vertices(), vec![[0, 1, 2, 3]], "regular-tet").unwrap()
}

/// Unit right-corner tetrahedron {origin, e_x, e_y, e_z}.
pub fn right_corner_tet_mesh() -> TetMesh {
    TetMesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ],
        vec![[0, 1, 2, 3]],
        "right-corner-tet",
    )
    .unwrap()
}

/// Structured tetrahedralization of an axis-aligned box: `nx x ny x nz`
/// vertices, each grid cell split into six tets around its main diagonal
/// (the Kuhn split, globally consistent).
pub fn box_grid_mesh(nx: usize, ny: usize, nz: usize, extent: [f64; 3]) -> TetMesh {
    assert!(nx >= 2 && ny >= 2 && nz >= 2);
    let idx = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;
    let mut vertices = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                vertices.push([
                    extent[0] * i as f64 / (nx - 1) as f64,
                    extent[1] * j as f64 / (ny - 1) as f64,
                    extent[2] * k as f64 / (nz - 1) as f64,
                ]);
            }
        }
    }
    // Six tets per cell walking the axes in every order from corner 000 to 111.
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity((nx - 1) * (ny - 1) * (nz - 1) * 6);
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for perm in &PERMS {
                    let mut pos = [i, j, k];
                    let mut quad = [idx(pos[0], pos[1], pos[2]), 0, 0, 0];
                    for (step, &axis) in perm.iter().enumerate() {
                        pos[axis] += 1;
                        quad[step + 1] = idx(pos[0], pos[1], pos[2]);
                    }
                    tets.push(quad);
                }
            }
        }
    }
    TetMesh::new(vertices, tets, format!("box-{nx}x{ny}x{nz}")).unwrap()
}

/// [`box_grid_mesh`] with every vertex displaced by a seeded uniform jitter of
/// up to `jitter_frac` times the local grid spacing. Small fractions keep all
/// tets positively oriented; the constructor enforces validity either way.
pub fn jittered_box_mesh(
    nx: usize,
    ny: usize,
    nz: usize,
    extent: [f64; 3],
    jitter_frac: f64,
    seed: u64,
) -> TetMesh {
    use rand::Rng;
    let base = box_grid_mesh(nx, ny, nz, extent);
    let spacing = [
        extent[0] / (nx - 1) as f64,
        extent[1] / (ny - 1) as f64,
        extent[2] / (nz - 1) as f64,
    ];
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Generation, 0);
    let vertices = base
        .vertices
        .iter()
        .map(|v| {
            let mut p = *v;
            for a in 0..3 {
                p[a] += spacing[a] * rng.random_range(-jitter_frac..jitter_frac);
            }
            p
        })
        .collect();
    TetMesh::new(vertices, base.tets, format!("jittered-box-{nx}x{ny}x{nz}-s{seed}"))
        .expect("jitter too large for grid")
}
