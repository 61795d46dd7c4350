//! Central finite-difference verification of the hand-written backward pass,
//! covering every parameter tensor and the input features.

use ndarray::Array2;

use super::{
    backward_batch_with_faults, forward_batch, loss, loss_grad, BnMode, Faults, MeshSample,
    Model, NetworkError,
};

/// Max relative error per tensor, plus the worst over all tensors.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
    pub input_features: f64,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

fn rel_err(fd: f64, analytic: f64) -> f64 {
    let denom = fd.abs().max(analytic.abs());
    if denom < 1e-9 {
        // Both effectively zero.
        0.0
    } else {
        (fd - analytic).abs() / denom.max(1e-6)
    }
}

/// Evaluate loss at the current parameters (batch-mode BN, as in training).
fn loss_at(model: &Model, sample: &MeshSample) -> Result<f64, NetworkError> {
    let batch = forward_batch(model, &[sample], BnMode::Batch)?;
    loss(batch.per_sample[0].output, &sample.target)
}

/// Compare analytic gradients against central finite differences for every
/// parameter tensor and the padded input features. `faults` is a test fixture
/// for harness-sensitivity checks; pass default in real use.
pub fn run_gradcheck(
    model: &Model,
    sample: &MeshSample,
    faults: &Faults,
) -> Result<GradCheckReport, NetworkError> {
    let batch = forward_batch(model, &[sample], BnMode::Batch)?;
    let d_out = loss_grad(batch.per_sample[0].output, &sample.target);
    let (grads, mut grad_features_vec) =
        backward_batch_with_faults(model, &[sample], &batch, &[d_out], faults)?;
    let grad_features = grad_features_vec.pop().unwrap();

    let names = model.param_names();
    let mut work = model.clone();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    {
        let analytic_slices: Vec<Vec<f64>> =
            grads.param_slices().into_iter().map(|s| s.to_vec()).collect();
        for (t_idx, name) in names.iter().enumerate() {
            let mut tensor_worst = 0.0f64;
            let len = analytic_slices[t_idx].len();
            for j in 0..len {
                let orig = work.param_slices_mut()[t_idx][j];
                let h = 1e-5 * (1.0 + orig.abs());
                work.param_slices_mut()[t_idx][j] = orig + h;
                let up = loss_at(&work, sample)?;
                work.param_slices_mut()[t_idx][j] = orig - h;
                let down = loss_at(&work, sample)?;
                work.param_slices_mut()[t_idx][j] = orig;
                let fd = (up - down) / (2.0 * h);
                tensor_worst = tensor_worst.max(rel_err(fd, analytic_slices[t_idx][j]));
            }
            worst = worst.max(tensor_worst);
            per_tensor.push((name.clone(), tensor_worst));
        }
    }

    // Input features: perturb real slots of the padded level-0 matrix.
    let mut features = sample.padded_features.clone();
    let mut feature_worst = 0.0f64;
    let real0 = sample.hierarchy.levels[0].real.clone();
    for slot in 0..features.nrows() {
        if !real0[slot] {
            continue;
        }
        for c in 0..features.ncols() {
            let orig = features[(slot, c)];
            let h = 1e-5 * (1.0 + orig.abs());
            features[(slot, c)] = orig + h;
            let up = loss_at(model, &with_features(sample, &features))?;
            features[(slot, c)] = orig - h;
            let down = loss_at(model, &with_features(sample, &features))?;
            features[(slot, c)] = orig;
            let fd = (up - down) / (2.0 * h);
            feature_worst = feature_worst.max(rel_err(fd, grad_features[(slot, c)]));
        }
    }
    worst = worst.max(feature_worst);

    Ok(GradCheckReport { per_tensor, input_features: feature_worst, max_relative_error: worst })
}

fn with_features(sample: &MeshSample, padded: &Array2<f64>) -> MeshSample {
    MeshSample {
        id: sample.id.clone(),
        padded_features: padded.clone(),
        hierarchy: sample.hierarchy.clone(),
        target: sample.target,
    }
}
