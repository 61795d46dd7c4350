//! Operator cache files: a versioned text header (dimensions, operator kind,
//! lumping, lambda_max per level, source hash) followed by little-endian
//! f64 and u64 arrays holding every hierarchy level and matching stage.
//! The payload carries a sha256 checksum; single-byte corruption is detected
//! at load time.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coarsen::{AssignmentMatrix, Hierarchy, Level};
use crate::lbo::{
    DiagonalMassMatrix, Lumping, OperatorKind, OperatorPair, SparseSymmetricMatrix,
};

const MAGIC: &str = "tetcnn-opcache v1";
const NONE_MARKER: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad cache file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("checksum mismatch in {path}: payload does not match header")]
    Checksum { path: String },
}

/// Everything precompute persists for one mesh.
#[derive(Debug, Clone)]
pub struct OperatorCache {
    pub operator: OperatorKind,
    pub lumping: Lumping,
    /// Hash of the source mesh text plus build parameters; used for
    /// idempotent rebuild checks.
    pub source_hash: String,
    pub hierarchy: Hierarchy,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash tying a cache to its mesh text and build parameters.
pub fn source_hash(
    node_text: &str,
    ele_text: &str,
    operator: OperatorKind,
    lumping: Lumping,
    levels: usize,
    seed: u64,
) -> String {
    let mut h = Sha256::new();
    h.update(node_text.as_bytes());
    h.update(ele_text.as_bytes());
    h.update(operator.as_str().as_bytes());
    h.update(lumping.as_str().as_bytes());
    h.update(levels.to_le_bytes());
    h.update(seed.to_le_bytes());
    hex(&h.finalize())
}

enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn type_str(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            ArrayData::U64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
}

fn hierarchy_arrays(h: &Hierarchy) -> Vec<(String, ArrayData)> {
    let mut arrays = Vec::new();
    arrays.push((
        "lambda_max".to_string(),
        ArrayData::F64(h.lambda_max.clone()),
    ));
    for (l, level) in h.levels.iter().enumerate() {
        let (row_ptr, col, val) = level.op.s.raw_parts();
        arrays.push((
            format!("level{l}.s.row_ptr"),
            ArrayData::U64(row_ptr.iter().map(|&v| v as u64).collect()),
        ));
        arrays.push((
            format!("level{l}.s.col"),
            ArrayData::U64(col.iter().map(|&v| v as u64).collect()),
        ));
        arrays.push((format!("level{l}.s.val"), ArrayData::F64(val.to_vec())));
        arrays.push((
            format!("level{l}.d"),
            ArrayData::F64(level.op.d.values().to_vec()),
        ));
        arrays.push((
            format!("level{l}.slots"),
            ArrayData::U64(
                level
                    .slots
                    .iter()
                    .map(|s| s.map_or(NONE_MARKER, |v| v as u64))
                    .collect(),
            ),
        ));
    }
    for (s, g) in h.assignments.iter().enumerate() {
        let mut first = Vec::with_capacity(g.n_coarse());
        let mut second = Vec::with_capacity(g.n_coarse());
        for c in 0..g.n_coarse() {
            let (a, b) = g.members(c);
            first.push(a as u64);
            second.push(b.map_or(NONE_MARKER, |v| v as u64));
        }
        arrays.push((format!("stage{s}.first"), ArrayData::U64(first)));
        arrays.push((format!("stage{s}.second"), ArrayData::U64(second)));
    }
    arrays
}

/// Write a cache file atomically (temp + rename).
pub fn save_cache(cache: &OperatorCache, path: &Path) -> Result<(), CacheError> {
    let io_err = |source| CacheError::Io { path: path.display().to_string(), source };
    let arrays = hierarchy_arrays(&cache.hierarchy);
    let mut payload = Vec::new();
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("source {}\n", cache.source_hash));
    manifest.push_str(&format!("operator {}\n", cache.operator.as_str()));
    manifest.push_str(&format!("lumping {}\n", cache.lumping.as_str()));
    let h = &cache.hierarchy;
    manifest.push_str(&format!("n {}\n", h.levels[0].n_real));
    manifest.push_str(&format!("nnz {}\n", h.levels[0].op.s.nnz_stored()));
    manifest.push_str(&format!("levels {}\n", h.n_stages()));
    for (l, lam) in h.lambda_max.iter().enumerate() {
        manifest.push_str(&format!("lambda level={l} {lam:.17e}\n"));
    }
    manifest.push_str(&format!("arrays {}\n", arrays.len()));
    let mut offset = 0usize;
    for (name, data) in &arrays {
        manifest.push_str(&format!(
            "array {name} {} {} offset {offset}\n",
            data.type_str(),
            data.len()
        ));
        offset += data.len() * 8;
        data.write_to(&mut payload);
    }
    let mut digest = Sha256::new();
    digest.update(&payload);
    manifest.push_str(&format!("payload {}\n", payload.len()));
    manifest.push_str(&format!("checksum sha256 {}\n", hex(&digest.finalize())));

    let tmp = path.with_extension("tmp");
    {
        let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io_err)?);
        file.write_all(manifest.as_bytes()).map_err(io_err)?;
        file.write_all(&payload).map_err(io_err)?;
        file.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Read just the source hash of an existing cache (for idempotence checks).
/// Returns None when the file is missing or unreadable as a cache.
pub fn peek_source_hash(path: &Path) -> Option<String> {
    let file = std::fs::File::open(path).ok()?;
    let mut reader = std::io::BufReader::new(file);
    let mut head = [0u8; 4096];
    let n = reader.read(&mut head).ok()?;
    // The buffer tail may cut into the binary payload; lines decode lossily.
    let text = String::from_utf8_lossy(&head[..n]);
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return None;
    }
    lines.find_map(|l| l.strip_prefix("source ").map(str::to_string))
}

/// Load and verify a cache file.
pub fn load_cache(path: &Path) -> Result<OperatorCache, CacheError> {
    let display = path.display().to_string();
    let io_err = |source| CacheError::Io { path: display.clone(), source };
    let err = |detail: String| CacheError::Format { path: display.clone(), detail };
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(io_err)?.read_to_end(&mut bytes).map_err(io_err)?;

    let mut pos = 0usize;
    let mut lines: Vec<&str> = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("truncated header".into()))?;
        let line =
            std::str::from_utf8(&rest[..nl]).map_err(|_| err("header is not utf-8".into()))?;
        pos += nl + 1;
        lines.push(line);
        if line.starts_with("checksum ") {
            break;
        }
        if lines.len() > 1_000_000 {
            return Err(err("header too long".into()));
        }
    }
    if lines.first() != Some(&MAGIC) {
        return Err(err(format!("bad magic {:?}", lines.first())));
    }
    let kv = |key: &str| -> Result<String, CacheError> {
        lines
            .iter()
            .find_map(|l| l.strip_prefix(&format!("{key} ")))
            .map(str::to_string)
            .ok_or_else(|| err(format!("missing key '{key}'")))
    };
    let source_hash = kv("source")?;
    let operator =
        OperatorKind::parse(&kv("operator")?).ok_or_else(|| err("bad operator".into()))?;
    let lumping = Lumping::parse(&kv("lumping")?).ok_or_else(|| err("bad lumping".into()))?;
    let stages: usize = kv("levels")?.parse().map_err(|_| err("bad levels".into()))?;
    let payload_len: usize = kv("payload")?.parse().map_err(|_| err("bad payload".into()))?;
    let checksum = kv("checksum")?
        .strip_prefix("sha256 ")
        .map(str::to_string)
        .ok_or_else(|| err("bad checksum line".into()))?;

    let payload = &bytes[pos..];
    if payload.len() != payload_len {
        return Err(err(format!(
            "payload is {} bytes, header says {payload_len}",
            payload.len()
        )));
    }
    let mut digest = Sha256::new();
    digest.update(payload);
    if hex(&digest.finalize()) != checksum {
        return Err(CacheError::Checksum { path: display.clone() });
    }

    // Array table.
    let mut f64_arrays: std::collections::HashMap<String, Vec<f64>> = Default::default();
    let mut u64_arrays: std::collections::HashMap<String, Vec<u64>> = Default::default();
    for line in &lines {
        let Some(rest) = line.strip_prefix("array ") else { continue };
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 5 || parts[3] != "offset" {
            return Err(err(format!("bad array line '{line}'")));
        }
        let name = parts[0].to_string();
        let len: usize = parts[2].parse().map_err(|_| err("bad array length".into()))?;
        let offset: usize = parts[4].parse().map_err(|_| err("bad array offset".into()))?;
        if offset + len * 8 > payload.len() {
            return Err(err(format!("array {name} overruns payload")));
        }
        let chunk = &payload[offset..offset + len * 8];
        match parts[1] {
            "f64" => {
                f64_arrays.insert(
                    name,
                    chunk
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            "u64" => {
                u64_arrays.insert(
                    name,
                    chunk
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            other => return Err(err(format!("unknown array type '{other}'"))),
        }
    }
    let take_f64 = |map: &mut std::collections::HashMap<String, Vec<f64>>,
                    name: String|
     -> Result<Vec<f64>, CacheError> {
        map.remove(&name).ok_or_else(|| err(format!("missing array '{name}'")))
    };
    let take_u64 = |map: &mut std::collections::HashMap<String, Vec<u64>>,
                    name: String|
     -> Result<Vec<u64>, CacheError> {
        map.remove(&name).ok_or_else(|| err(format!("missing array '{name}'")))
    };

    let lambda_max = take_f64(&mut f64_arrays, "lambda_max".into())?;
    if lambda_max.len() != stages + 1 {
        return Err(err("lambda_max length disagrees with levels".into()));
    }
    let mut levels = Vec::with_capacity(stages + 1);
    for l in 0..=stages {
        let row_ptr: Vec<usize> = take_u64(&mut u64_arrays, format!("level{l}.s.row_ptr"))?
            .into_iter()
            .map(|v| v as usize)
            .collect();
        let col: Vec<u32> = take_u64(&mut u64_arrays, format!("level{l}.s.col"))?
            .into_iter()
            .map(|v| v as u32)
            .collect();
        let val = take_f64(&mut f64_arrays, format!("level{l}.s.val"))?;
        let d = take_f64(&mut f64_arrays, format!("level{l}.d"))?;
        let slots_raw = take_u64(&mut u64_arrays, format!("level{l}.slots"))?;
        let padded_n = slots_raw.len();
        if row_ptr.len() != padded_n + 1 || d.len() != padded_n {
            return Err(err(format!("level {l} array sizes disagree")));
        }
        let slots: Vec<Option<usize>> = slots_raw
            .into_iter()
            .map(|v| if v == NONE_MARKER { None } else { Some(v as usize) })
            .collect();
        let real: Vec<bool> = slots.iter().map(|s| s.is_some()).collect();
        let n_real = real.iter().filter(|&&r| r).count();
        let s = SparseSymmetricMatrix::from_raw_parts(padded_n, row_ptr, col, val);
        let dm = DiagonalMassMatrix::new(d)
            .map_err(|e| err(format!("level {l} mass: {e}")))?;
        let mut op = OperatorPair::new(s, dm);
        op.lambda_max = Some(lambda_max[l]);
        levels.push(Level { op, slots, real, n_real });
    }
    let mut assignments = Vec::with_capacity(stages);
    for s in 0..stages {
        let first = take_u64(&mut u64_arrays, format!("stage{s}.first"))?;
        let second = take_u64(&mut u64_arrays, format!("stage{s}.second"))?;
        if first.len() != second.len() {
            return Err(err(format!("stage {s} member arrays disagree")));
        }
        let members: Vec<(usize, Option<usize>)> = first
            .into_iter()
            .zip(second)
            .map(|(a, b)| {
                (a as usize, if b == NONE_MARKER { None } else { Some(b as usize) })
            })
            .collect();
        let n_fine = levels[s].n_real;
        assignments.push(
            AssignmentMatrix::from_members(n_fine, members)
                .map_err(|detail| err(format!("stage {s}: {detail}")))?,
        );
    }
    Ok(OperatorCache {
        operator,
        lumping,
        source_hash,
        hierarchy: Hierarchy { levels, assignments, lambda_max },
    })
}
