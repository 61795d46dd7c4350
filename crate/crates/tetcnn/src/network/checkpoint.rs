//! Checkpoint container: a versioned text manifest (model settings, layer
//! specs, tensor names/shapes/offsets) followed by the contiguous
//! little-endian f64 payload. Writing is deterministic byte-for-byte.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use super::{build_model, Model, ModelConfig, Task};
use crate::lbo::{Lumping, OperatorKind};

const MAGIC: &str = "tetcnn-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint {path}: {detail}")]
    Format { path: String, detail: String },
}

fn fmt_shape(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

struct TensorRef<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f64],
}

fn state_tensors(model: &Model) -> Vec<TensorRef<'_>> {
    let mut out = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let n = i + 1;
        out.push(TensorRef {
            name: format!("conv{n}.theta"),
            shape: b.conv.theta.shape().to_vec(),
            data: b.conv.theta.as_slice().unwrap(),
        });
        out.push(TensorRef {
            name: format!("bn{n}.gamma"),
            shape: vec![b.bn.gamma.len()],
            data: b.bn.gamma.as_slice().unwrap(),
        });
        out.push(TensorRef {
            name: format!("bn{n}.beta"),
            shape: vec![b.bn.beta.len()],
            data: b.bn.beta.as_slice().unwrap(),
        });
        out.push(TensorRef {
            name: format!("bn{n}.running_mean"),
            shape: vec![b.bn.running_mean.len()],
            data: b.bn.running_mean.as_slice().unwrap(),
        });
        out.push(TensorRef {
            name: format!("bn{n}.running_var"),
            shape: vec![b.bn.running_var.len()],
            data: b.bn.running_var.as_slice().unwrap(),
        });
    }
    out.push(TensorRef {
        name: "fc1.weight".into(),
        shape: model.fc1.weight.shape().to_vec(),
        data: model.fc1.weight.as_slice().unwrap(),
    });
    out.push(TensorRef {
        name: "fc1.bias".into(),
        shape: vec![model.fc1.bias.len()],
        data: model.fc1.bias.as_slice().unwrap(),
    });
    out.push(TensorRef {
        name: "fc2.weight".into(),
        shape: model.fc2.weight.shape().to_vec(),
        data: model.fc2.weight.as_slice().unwrap(),
    });
    out.push(TensorRef {
        name: "fc2.bias".into(),
        shape: vec![model.fc2.bias.len()],
        data: model.fc2.bias.as_slice().unwrap(),
    });
    out
}

/// Write a checkpoint file (atomically: temp file + rename).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let tensors = state_tensors(model);
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    let c = &model.config;
    manifest.push_str(&format!("task {}\n", c.task.as_str()));
    manifest.push_str(&format!("order {}\n", c.order));
    manifest.push_str(&format!("in_features {}\n", c.in_features));
    manifest.push_str(&format!(
        "widths {}\n",
        c.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    ));
    manifest.push_str(&format!("fc_hidden {}\n", c.fc_hidden));
    manifest.push_str(&format!("operator {}\n", c.operator.as_str()));
    manifest.push_str(&format!("lumping {}\n", c.lumping.as_str()));
    let specs = model.layer_specs();
    manifest.push_str(&format!("layers {}\n", specs.len()));
    for s in &specs {
        manifest.push_str(&format!(
            "layer {} {} {} {} {}\n",
            s.kind.as_str(),
            s.in_channels,
            s.out_channels,
            s.order,
            s.pool_stages
        ));
    }
    manifest.push_str(&format!("tensors {}\n", tensors.len()));
    let mut offset = 0usize;
    for t in &tensors {
        manifest.push_str(&format!(
            "tensor {} f64 {} offset {}\n",
            t.name,
            fmt_shape(&t.shape),
            offset
        ));
        offset += t.data.len();
    }
    manifest.push_str(&format!("payload {offset}\n"));

    let tmp = path.with_extension("tmp");
    {
        let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        file.write_all(manifest.as_bytes())?;
        for t in &tensors {
            for v in t.data {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a checkpoint back into a model.
pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let display = path.display().to_string();
    let err = |detail: String| CheckpointError::Format { path: display.clone(), detail };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    // The manifest ends at the line after "payload N".
    let mut pos = 0usize;
    let mut lines: Vec<&str> = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("truncated manifest".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| err("manifest is not utf-8".into()))?;
        pos += nl + 1;
        lines.push(line);
        if line.starts_with("payload ") {
            break;
        }
        if lines.len() > 100_000 {
            return Err(err("manifest too long".into()));
        }
    }
    if lines.first() != Some(&MAGIC) {
        return Err(err(format!("bad magic {:?}", lines.first())));
    }
    let kv = |key: &str| -> Result<String, CheckpointError> {
        lines
            .iter()
            .find_map(|l| l.strip_prefix(&format!("{key} ")))
            .map(str::to_string)
            .ok_or_else(|| err(format!("missing key '{key}'")))
    };
    let task = Task::parse(&kv("task")?).ok_or_else(|| err("bad task".into()))?;
    let order: usize = kv("order")?.parse().map_err(|_| err("bad order".into()))?;
    let in_features: usize =
        kv("in_features")?.parse().map_err(|_| err("bad in_features".into()))?;
    let widths: Vec<usize> = kv("widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| err(format!("bad width '{w}'"))))
        .collect::<Result<_, _>>()?;
    let fc_hidden: usize = kv("fc_hidden")?.parse().map_err(|_| err("bad fc_hidden".into()))?;
    let operator = OperatorKind::parse(&kv("operator")?).ok_or_else(|| err("bad operator".into()))?;
    let lumping = Lumping::parse(&kv("lumping")?).ok_or_else(|| err("bad lumping".into()))?;
    let payload_len: usize = kv("payload")?.parse().map_err(|_| err("bad payload length".into()))?;

    let payload = &bytes[pos..];
    if payload.len() != payload_len * 8 {
        return Err(err(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            payload_len * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let config = ModelConfig { task, order, in_features, widths, fc_hidden, operator, lumping };
    let mut model = build_model(&config, 0);

    // Fill tensors from the manifest's name -> (shape, offset) records.
    for line in &lines {
        let Some(rest) = line.strip_prefix("tensor ") else { continue };
        let parts: Vec<&str> = rest.split_whitespace().collect();
        if parts.len() != 5 || parts[1] != "f64" || parts[3] != "offset" {
            return Err(err(format!("bad tensor line '{line}'")));
        }
        let name = parts[0];
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| err(format!("bad shape '{}'", parts[2]))))
            .collect::<Result<_, _>>()?;
        let offset: usize = parts[4].parse().map_err(|_| err("bad offset".into()))?;
        let len: usize = shape.iter().product();
        if offset + len > values.len() {
            return Err(err(format!("tensor {name} overruns payload")));
        }
        let data = &values[offset..offset + len];
        fill_tensor(&mut model, name, &shape, data).map_err(err)?;
    }
    Ok(model)
}

fn fill_tensor(model: &mut Model, name: &str, shape: &[usize], data: &[f64]) -> Result<(), String> {
    fn to1(shape: &[usize], data: &[f64]) -> Result<Array1<f64>, String> {
        if shape.len() != 1 {
            return Err(format!("expected rank-1, got {shape:?}"));
        }
        Ok(Array1::from_vec(data.to_vec()))
    }
    fn to2(shape: &[usize], data: &[f64]) -> Result<Array2<f64>, String> {
        if shape.len() != 2 {
            return Err(format!("expected rank-2, got {shape:?}"));
        }
        Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).map_err(|e| e.to_string())
    }
    fn to3(shape: &[usize], data: &[f64]) -> Result<Array3<f64>, String> {
        if shape.len() != 3 {
            return Err(format!("expected rank-3, got {shape:?}"));
        }
        Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.to_vec())
            .map_err(|e| e.to_string())
    }
    if let Some(rest) = name.strip_prefix("conv") {
        let (idx, field) = rest.split_once('.').ok_or(format!("bad tensor name {name}"))?;
        let b: usize = idx.parse().map_err(|_| format!("bad block index in {name}"))?;
        let block = model.blocks.get_mut(b - 1).ok_or(format!("no block {b}"))?;
        match field {
            "theta" => block.conv.theta = to3(shape, data)?,
            _ => return Err(format!("unknown conv field {field}")),
        }
        return Ok(());
    }
    if let Some(rest) = name.strip_prefix("bn") {
        let (idx, field) = rest.split_once('.').ok_or(format!("bad tensor name {name}"))?;
        let b: usize = idx.parse().map_err(|_| format!("bad block index in {name}"))?;
        let block = model.blocks.get_mut(b - 1).ok_or(format!("no block {b}"))?;
        match field {
            "gamma" => block.bn.gamma = to1(shape, data)?,
            "beta" => block.bn.beta = to1(shape, data)?,
            "running_mean" => block.bn.running_mean = to1(shape, data)?,
            "running_var" => block.bn.running_var = to1(shape, data)?,
            _ => return Err(format!("unknown bn field {field}")),
        }
        return Ok(());
    }
    match name {
        "fc1.weight" => model.fc1.weight = to2(shape, data)?,
        "fc1.bias" => model.fc1.bias = to1(shape, data)?,
        "fc2.weight" => model.fc2.weight = to2(shape, data)?,
        "fc2.bias" => model.fc2.bias = to1(shape, data)?,
        _ => return Err(format!("unknown tensor {name}")),
    }
    Ok(())
}
