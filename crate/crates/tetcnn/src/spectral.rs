//! Chebyshev-polynomial spectral convolution and its exact reverse-mode
//! gradients.
//!
//! Forward: `Y = sum_m x~_m theta_m` with the three-term recurrence
//! `x~_0 = X`, `x~_1 = L~ X`, `x~_m = 2 L~ x~_{m-1} - x~_{m-2}`.
//! Backward runs the adjoint recurrence with `L~^T` (mandatory: `L = D^-1 S`
//! is not symmetric), so gradients are exact to rounding.

use ndarray::{Array2, Array3, ArrayView2};
use thiserror::Error;

use crate::lbo::ScaledOperator;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("shape mismatch: {context} expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("stale cache: cached basis is {cached:?}, filter/operator need {need:?}")]
    StaleCache { cached: (usize, usize, usize), need: (usize, usize, usize) },
}

/// Chebyshev filter bank: coefficients of shape (K+1, F_in, F_out).
#[derive(Debug, Clone, PartialEq)]
pub struct ChebFilter {
    pub theta: Array3<f64>,
}

impl ChebFilter {
    pub fn new(theta: Array3<f64>) -> Self {
        ChebFilter { theta }
    }

    /// Highest polynomial degree (inclusive): shape K+1 along axis 0.
    pub fn order(&self) -> usize {
        self.theta.shape()[0] - 1
    }

    pub fn f_in(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn f_out(&self) -> usize {
        self.theta.shape()[2]
    }
}

/// Stored basis signals `x~_0 .. x~_K` from a forward pass.
#[derive(Debug, Clone)]
pub struct ChebCache {
    pub basis: Vec<Array2<f64>>,
}

impl ChebCache {
    fn key(&self) -> (usize, usize, usize) {
        let b0 = &self.basis[0];
        (b0.nrows(), b0.ncols(), self.basis.len() - 1)
    }
}

/// Evaluate the recurrence basis `[x~_0 .. x~_order]`.
pub fn cheb_basis(
    scaled: &ScaledOperator<'_>,
    x: ArrayView2<'_, f64>,
    order: usize,
) -> Result<Vec<Array2<f64>>, SpectralError> {
    if x.nrows() != scaled.dim() {
        return Err(SpectralError::ShapeMismatch {
            context: "cheb_basis input rows",
            expected: (scaled.dim(), x.ncols()),
            found: (x.nrows(), x.ncols()),
        });
    }
    let mut basis = Vec::with_capacity(order + 1);
    basis.push(x.to_owned());
    if order >= 1 {
        let mut x1 = Array2::zeros(x.raw_dim());
        scaled.apply(x, x1.view_mut());
        basis.push(x1);
    }
    for m in 2..=order {
        let mut next = Array2::zeros(x.raw_dim());
        scaled.apply(basis[m - 1].view(), next.view_mut());
        next *= 2.0;
        next -= &basis[m - 2];
        basis.push(next);
    }
    Ok(basis)
}

/// Forward convolution: `Y = sum_m x~_m theta_m`, collapsing F_in.
pub fn cheb_conv_forward(
    filter: &ChebFilter,
    scaled: &ScaledOperator<'_>,
    x: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ChebCache), SpectralError> {
    if x.ncols() != filter.f_in() {
        return Err(SpectralError::ShapeMismatch {
            context: "cheb_conv_forward feature columns",
            expected: (x.nrows(), filter.f_in()),
            found: (x.nrows(), x.ncols()),
        });
    }
    let basis = cheb_basis(scaled, x, filter.order())?;
    let mut y = Array2::zeros((x.nrows(), filter.f_out()));
    for (m, xm) in basis.iter().enumerate() {
        let theta_m = filter.theta.index_axis(ndarray::Axis(0), m);
        y += &xm.dot(&theta_m);
    }
    Ok((y, ChebCache { basis }))
}

/// Reverse-mode gradients: `grad_theta_m = x~_m^T grad_Y` and
/// `grad_X = sum_m T_m(L~^T) (grad_Y theta_m^T)`, evaluated by back-running
/// the recurrence so the cost matches the forward pass.
pub fn cheb_conv_backward(
    grad_y: ArrayView2<'_, f64>,
    cache: &ChebCache,
    scaled: &ScaledOperator<'_>,
    filter: &ChebFilter,
) -> Result<(Array3<f64>, Array2<f64>), SpectralError> {
    let order = filter.order();
    let n = scaled.dim();
    let need = (n, filter.f_in(), order);
    if cache.key() != need {
        return Err(SpectralError::StaleCache { cached: cache.key(), need });
    }
    if grad_y.nrows() != n || grad_y.ncols() != filter.f_out() {
        return Err(SpectralError::ShapeMismatch {
            context: "cheb_conv_backward grad rows",
            expected: (n, filter.f_out()),
            found: (grad_y.nrows(), grad_y.ncols()),
        });
    }

    let mut grad_theta = Array3::zeros(filter.theta.raw_dim());
    for (m, xm) in cache.basis.iter().enumerate() {
        grad_theta
            .index_axis_mut(ndarray::Axis(0), m)
            .assign(&xm.t().dot(&grad_y));
    }

    // Adjoint accumulators: acc[m] starts as the direct contribution
    // grad_Y theta_m^T, then the recurrence is unwound from the top.
    let mut acc: Vec<Array2<f64>> = (0..=order)
        .map(|m| {
            let theta_m = filter.theta.index_axis(ndarray::Axis(0), m);
            grad_y.dot(&theta_m.t())
        })
        .collect();
    let mut tmp = Array2::zeros((n, filter.f_in()));
    for m in (2..=order).rev() {
        scaled.apply_transpose(acc[m].view(), tmp.view_mut());
        let (head, tail) = acc.split_at_mut(m);
        head[m - 1].scaled_add(2.0, &tmp);
        head[m - 2] -= &tail[0];
    }
    let mut grad_x = acc[0].clone();
    if order >= 1 {
        scaled.apply_transpose(acc[1].view(), tmp.view_mut());
        grad_x += &tmp;
    }
    Ok((grad_theta, grad_x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lbo::{
        assemble_operator, dense_eigensystem, spectral_filter_exact, Lumping, OperatorKind,
        OperatorPair,
    };
    use crate::tetmesh::jittered_box_mesh;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn test_operator(seed: u64) -> OperatorPair {
        let mesh = jittered_box_mesh(3, 3, 2, [1.0, 1.0, 1.0], 0.15, seed);
        let mut op = assemble_operator(&mesh, OperatorKind::Lbo, Lumping::FemQuarter).unwrap();
        op.lambda_max().unwrap();
        op
    }

    fn random_filter(k: usize, f_in: usize, f_out: usize, seed: u64) -> ChebFilter {
        let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Test, 1);
        ChebFilter::new(Array3::from_shape_fn((k + 1, f_in, f_out), |_| {
            rng.random_range(-1.0..1.0)
        }))
    }

    fn cheb_t(m: usize, x: f64) -> f64 {
        let (mut t0, mut t1) = (1.0, x);
        match m {
            0 => t0,
            1 => t1,
            _ => {
                for _ in 2..=m {
                    let t2 = 2.0 * x * t1 - t0;
                    t0 = t1;
                    t1 = t2;
                }
                t1
            }
        }
    }

    #[test]
    fn basis_order_zero_is_input() {
        let op = test_operator(1);
        let n = op.dim();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let scaled = op.scaled().unwrap();
        let basis = cheb_basis(&scaled, x.view(), 0).unwrap();
        assert_eq!(basis.len(), 1);
        assert_eq!(basis[0], x);
    }

    #[test]
    fn basis_alternates_on_constant_input() {
        // L~ 1 = -1, so x~_m = (-1)^m on a constant column.
        let op = test_operator(2);
        let n = op.dim();
        let x = Array2::from_elem((n, 1), 1.0);
        let scaled = op.scaled().unwrap();
        let basis = cheb_basis(&scaled, x.view(), 4).unwrap();
        for (m, xm) in basis.iter().enumerate() {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            for i in 0..n {
                assert!(close(xm[(i, 0)], sign, 1e-9), "m={m} i={i}: {}", xm[(i, 0)]);
            }
        }
    }

    #[test]
    fn basis_matches_dense_eigen_oracle() {
        // x~_m = Phi T_m(Lambda~) Phi^T D x.
        let op = test_operator(3);
        let n = op.dim();
        let eig = dense_eigensystem(&op, 500).unwrap();
        let lam_max = op.lambda_max.unwrap();
        let mut rng = crate::rng::stream(5, crate::rng::Purpose::Test, 0);
        let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let scaled = op.scaled().unwrap();
        let order = 5;
        let basis = cheb_basis(&scaled, x.view(), order).unwrap();
        let xv: Vec<f64> = x.column(0).to_vec();
        for m in 0..=order {
            let coeffs: Vec<f64> = eig
                .lambda
                .iter()
                .map(|&l| cheb_t(m, 2.0 * l / lam_max - 1.0))
                .collect();
            let want = spectral_filter_exact(&eig, &op.d, &coeffs, &xv).unwrap();
            for i in 0..n {
                assert!(
                    close(basis[m][(i, 0)], want[i], 1e-8),
                    "m={m} i={i}: {} vs {}",
                    basis[m][(i, 0)],
                    want[i]
                );
            }
        }
    }

    #[test]
    fn forward_identity_and_first_order_special_cases() {
        let op = test_operator(4);
        let n = op.dim();
        let scaled = op.scaled().unwrap();
        let mut rng = crate::rng::stream(6, crate::rng::Purpose::Test, 0);
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));

        // theta_0 = I, theta_{m>0} = 0 reproduces X.
        let mut theta = Array3::zeros((3, 3, 3));
        for i in 0..3 {
            theta[(0, i, i)] = 1.0;
        }
        let (y, _) = cheb_conv_forward(&ChebFilter::new(theta), &scaled, x.view()).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!(close(*a, *b, 1e-12));
        }

        // K=1, theta_0 = 0, theta_1 = I gives L~ X.
        let mut theta = Array3::zeros((2, 3, 3));
        for i in 0..3 {
            theta[(1, i, i)] = 1.0;
        }
        let (y, _) = cheb_conv_forward(&ChebFilter::new(theta), &scaled, x.view()).unwrap();
        let mut lx = Array2::zeros((n, 3));
        scaled.apply(x.view(), lx.view_mut());
        for (a, b) in y.iter().zip(lx.iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn forward_matches_exact_spectral_path() {
        // The recurrence output equals the exact eigen-path with
        // f(lambda) = sum theta_m T_m(2 lambda / lam_max - 1), summed over
        // input channels.
        for seed in [10u64, 11, 12] {
            let op = test_operator(seed);
            let n = op.dim();
            let eig = dense_eigensystem(&op, 500).unwrap();
            let lam_max = op.lambda_max.unwrap();
            let scaled = op.scaled().unwrap();
            let (f_in, f_out, k) = (2, 3, 2);
            let filter = random_filter(k, f_in, f_out, seed);
            let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Test, 2);
            let x = Array2::from_shape_fn((n, f_in), |_| rng.random_range(-1.0..1.0));
            let (y, _) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
            let mut want = Array2::<f64>::zeros((n, f_out));
            for o in 0..f_out {
                for i_ch in 0..f_in {
                    let coeffs: Vec<f64> = eig
                        .lambda
                        .iter()
                        .map(|&l| {
                            (0..=k)
                                .map(|m| {
                                    filter.theta[(m, i_ch, o)]
                                        * cheb_t(m, 2.0 * l / lam_max - 1.0)
                                })
                                .sum()
                        })
                        .collect();
                    let xi: Vec<f64> = x.column(i_ch).to_vec();
                    let z = spectral_filter_exact(&eig, &op.d, &coeffs, &xi).unwrap();
                    for v in 0..n {
                        want[(v, o)] += z[v];
                    }
                }
            }
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in y.iter().zip(want.iter()) {
                assert!(close(*a, *b, 1e-8 * scale.max(1.0)), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_linear_in_inputs() {
        let op = test_operator(7);
        let n = op.dim();
        let scaled = op.scaled().unwrap();
        let filter = random_filter(3, 2, 2, 7);
        let mut rng = crate::rng::stream(8, crate::rng::Purpose::Test, 0);
        let x1 = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let x2 = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let (a, b) = (2.25f64, -0.75f64);
        let combo: Array2<f64> = a * &x1 + b * &x2;
        let (y_combo, _) = cheb_conv_forward(&filter, &scaled, combo.view()).unwrap();
        let (y1, _) = cheb_conv_forward(&filter, &scaled, x1.view()).unwrap();
        let (y2, _) = cheb_conv_forward(&filter, &scaled, x2.view()).unwrap();
        let want = a * &y1 + b * &y2;
        for (p, q) in y_combo.iter().zip(want.iter()) {
            assert!(close(*p, *q, 1e-12 * q.abs().max(1.0)));
        }
    }

    #[test]
    fn k_locality_of_composite_filter() {
        // Perturbing input features beyond graph distance K leaves the output
        // at the probe vertex bit-identical.
        let mesh = jittered_box_mesh(4, 4, 3, [1.0, 1.0, 1.0], 0.15, 30);
        let mut op = assemble_operator(&mesh, OperatorKind::Lbo, Lumping::FemQuarter).unwrap();
        op.lambda_max().unwrap();
        let scaled = op.scaled().unwrap();
        let n = op.dim();
        let adj = mesh.adjacency();
        let probe = 0usize;
        let mut dist = vec![usize::MAX; n];
        dist[probe] = 0;
        let mut queue = std::collections::VecDeque::from([probe]);
        while let Some(v) = queue.pop_front() {
            for &w in adj.neighbors(v) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        for k in 1..=3usize {
            let filter = random_filter(k, 1, 1, k as u64);
            let mut rng = crate::rng::stream(31, crate::rng::Purpose::Test, k as u64);
            let mut x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
            let (y, _) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
            // Perturb everything strictly beyond distance k from the probe.
            for v in 0..n {
                if dist[v] > k {
                    x[(v, 0)] += rng.random_range(1.0..2.0);
                }
            }
            let (y2, _) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
            assert_eq!(y[(probe, 0)], y2[(probe, 0)], "K={k} leaked past the {k}-hop ball");
        }
    }

    #[test]
    fn backward_k0_special_case() {
        let op = test_operator(9);
        let n = op.dim();
        let scaled = op.scaled().unwrap();
        let filter = random_filter(0, 2, 3, 9);
        let mut rng = crate::rng::stream(9, crate::rng::Purpose::Test, 3);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
        let g = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let (grad_theta, grad_x) = cheb_conv_backward(g.view(), &cache, &scaled, &filter).unwrap();
        // K=0: grad_X = grad_Y theta_0^T, grad_theta_0 = x^T grad_Y.
        let want_x = g.dot(&filter.theta.index_axis(ndarray::Axis(0), 0).t());
        for (a, b) in grad_x.iter().zip(want_x.iter()) {
            assert!(close(*a, *b, 1e-13));
        }
        let want_t = x.t().dot(&g);
        for (a, b) in grad_theta.index_axis(ndarray::Axis(0), 0).iter().zip(want_t.iter()) {
            assert!(close(*a, *b, 1e-13));
        }
    }

    #[test]
    fn backward_adjoint_identity() {
        // <conv(X), G> = <X, grad_X(G)> for fixed theta.
        let op = test_operator(13);
        let n = op.dim();
        let scaled = op.scaled().unwrap();
        let filter = random_filter(4, 2, 2, 13);
        let mut rng = crate::rng::stream(13, crate::rng::Purpose::Test, 1);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
        let (_, grad_x) = cheb_conv_backward(g.view(), &cache, &scaled, &filter).unwrap();
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &grad_x).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn backward_matches_central_differences() {
        // Loss = sum(Y): d loss / d theta and d loss / d X vs central FD.
        let op = test_operator(14);
        let n = op.dim();
        let scaled = op.scaled().unwrap();
        let (k, f_in, f_out) = (3, 2, 2);
        let mut filter = random_filter(k, f_in, f_out, 14);
        let mut rng = crate::rng::stream(14, crate::rng::Purpose::Test, 4);
        let mut x = Array2::from_shape_fn((n, f_in), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
        let ones = Array2::from_elem(y.raw_dim(), 1.0);
        let (grad_theta, grad_x) =
            cheb_conv_backward(ones.view(), &cache, &scaled, &filter).unwrap();

        let loss = |filter: &ChebFilter, x: &Array2<f64>| -> f64 {
            cheb_conv_forward(filter, &scaled, x.view()).unwrap().0.sum()
        };
        let h = 1e-5;
        for idx in 0..filter.theta.len() {
            let orig = filter.theta.as_slice().unwrap()[idx];
            filter.theta.as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(&filter, &x);
            filter.theta.as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&filter, &x);
            filter.theta.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad_theta.as_slice().unwrap()[idx];
            assert!(
                (fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1.0),
                "theta[{idx}]: fd {fd} vs {a}"
            );
        }
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            x.as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(&filter, &x);
            x.as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&filter, &x);
            x.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad_x.as_slice().unwrap()[idx];
            assert!(
                (fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1.0),
                "x[{idx}]: fd {fd} vs {a}"
            );
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let op = test_operator(15);
        let scaled = op.scaled().unwrap();
        let filter = random_filter(2, 2, 2, 15);
        let x = Array2::zeros((op.dim(), 2));
        let (_, cache) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
        let other = random_filter(3, 2, 2, 16);
        let g = Array2::zeros((op.dim(), 2));
        assert!(matches!(
            cheb_conv_backward(g.view(), &cache, &scaled, &other),
            Err(SpectralError::StaleCache { .. })
        ));
    }

    #[test]
    fn cache_recurrence_residual_is_tiny() {
        let op = test_operator(17);
        let n = op.dim();
        let scaled = op.scaled().unwrap();
        let filter = random_filter(4, 1, 1, 17);
        let mut rng = crate::rng::stream(17, crate::rng::Purpose::Test, 0);
        let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = cheb_conv_forward(&filter, &scaled, x.view()).unwrap();
        assert_eq!(cache.basis[0], x);
        let scale: f64 =
            cache.basis.iter().flat_map(|b| b.iter()).fold(0.0, |m, v| m.max(v.abs()));
        for m in 2..cache.basis.len() {
            let mut lx = Array2::zeros((n, 1));
            scaled.apply(cache.basis[m - 1].view(), lx.view_mut());
            let res = (2.0 * &lx - &cache.basis[m - 2] - &cache.basis[m]).mapv(f64::abs);
            let max = res.iter().fold(0.0f64, |a, &b| a.max(b));
            assert!(max <= 1e-10 * scale, "residual {max} at m={m}");
        }
    }
}
