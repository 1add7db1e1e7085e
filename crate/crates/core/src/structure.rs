//! Structure learning: frame features to K weighted adjacency matrices.
//!
//! Each head projects frames with `F = tanh(X·Wf + bf)` and scores every
//! frame pair with `Â[i,j] = relu(F[i]·F[j])`. The graph convolution consumes
//! the symmetrically normalized `S = D̂^{-1/2} Â D̂^{-1/2}` where
//! `D̂[i] = Σ_j Â[i,j] + eps_deg`. No self loops are added.

use rand::Rng;

use crate::error::{Result, TdnError};
use crate::linalg::{dot, Matrix};

/// Default degree regularizer, keeps isolated frames finite.
pub const EPS_DEG: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct StructureHead {
    /// `m × (m/K)` projection.
    pub wf: Matrix,
    /// `1 × (m/K)` bias.
    pub bf: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructureParams {
    pub heads: Vec<StructureHead>,
}

impl StructureParams {
    pub fn zeros(m: usize, k: usize) -> Result<Self> {
        let width = head_width(m, k)?;
        Ok(StructureParams {
            heads: (0..k)
                .map(|_| StructureHead {
                    wf: Matrix::zeros(m, width),
                    bf: Matrix::zeros(1, width),
                })
                .collect(),
        })
    }

    /// Glorot-uniform projections, zero biases.
    pub fn init<R: Rng>(m: usize, k: usize, rng: &mut R) -> Result<Self> {
        let width = head_width(m, k)?;
        let bound = (6.0 / (m + width) as f64).sqrt();
        Ok(StructureParams {
            heads: (0..k)
                .map(|_| StructureHead {
                    wf: Matrix::random_uniform(m, width, bound, rng),
                    bf: Matrix::zeros(1, width),
                })
                .collect(),
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.wf.rows())
    }
}

/// Width of each head's output, `m / K`.
pub fn head_width(m: usize, k: usize) -> Result<usize> {
    if k == 0 || m == 0 || m % k != 0 {
        return Err(TdnError::validation(format!(
            "head count {k} must be positive and divide feature dim {m}"
        )));
    }
    Ok(m / k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySet {
    /// `Â_k`, symmetric and non-negative.
    pub raw: Vec<Matrix>,
    /// `S_k`.
    pub normalized: Vec<Matrix>,
    /// `D̂_k` including the regularizer.
    pub degrees: Vec<Vec<f64>>,
}

/// Forward values retained for [`structure_backward`].
#[derive(Clone, Debug)]
pub struct StructureTrace {
    pub adjacency: AdjacencySet,
    input: Matrix,
    projections: Vec<Matrix>,
}

impl StructureTrace {
    pub fn projections(&self) -> &[Matrix] {
        &self.projections
    }
}

/// `F_k = tanh(X·Wf_k + bf_k)`; `head` is zero based.
pub fn project_frames(x: &Matrix, params: &StructureParams, head: usize) -> Result<Matrix> {
    let h = params.heads.get(head).ok_or_else(|| {
        TdnError::validation(format!(
            "head {head} out of range for {} heads",
            params.heads.len()
        ))
    })?;
    let pre = x.matmul(&h.wf)?.broadcast_add_row(&h.bf)?;
    Ok(pre.map(f64::tanh))
}

/// Rectified Gram matrix of the projected frames. Only the upper triangle is
/// computed, so the result is exactly symmetric.
pub fn adjacency(f: &Matrix) -> Matrix {
    let n = f.rows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = dot(f.row(i), f.row(j));
            let v = if g > 0.0 { g } else { 0.0 };
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

pub fn normalize(a: &Matrix, eps_deg: f64) -> Result<(Matrix, Vec<f64>)> {
    if a.rows() != a.cols() {
        return Err(TdnError::shape("normalize", a.shape(), (a.cols(), a.rows())));
    }
    if !(eps_deg > 0.0) {
        return Err(TdnError::validation(format!("eps_deg must be positive, got {eps_deg}")));
    }
    if let Some(bad) = a.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(TdnError::contract(format!(
            "adjacency entry {bad} is negative or NaN"
        )));
    }
    let n = a.rows();
    let degrees: Vec<f64> = (0..n)
        .map(|i| a.row(i).iter().sum::<f64>() + eps_deg)
        .collect();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s.set(i, j, a.get(i, j) / (degrees[i] * degrees[j]).sqrt());
        }
    }
    Ok((s, degrees))
}

pub fn structure_forward(x: &Matrix, params: &StructureParams, eps_deg: f64) -> Result<StructureTrace> {
    if x.rows() == 0 {
        return Err(TdnError::EmptyInput("frame features with zero frames"));
    }
    if params.heads.is_empty() {
        return Err(TdnError::validation("structure layer has no heads"));
    }
    let k = params.heads.len();
    let mut projections = Vec::with_capacity(k);
    let mut raw = Vec::with_capacity(k);
    let mut normalized = Vec::with_capacity(k);
    let mut degrees = Vec::with_capacity(k);
    for head in 0..k {
        let f = project_frames(x, params, head)?;
        let a = adjacency(&f);
        let (s, d) = normalize(&a, eps_deg)?;
        projections.push(f);
        raw.push(a);
        normalized.push(s);
        degrees.push(d);
    }
    Ok(StructureTrace {
        adjacency: AdjacencySet {
            raw,
            normalized,
            degrees,
        },
        input: x.clone(),
        projections,
    })
}

/// Reverse pass from `∂L/∂S_k` to the frame features and head parameters.
pub fn structure_backward(
    grad_s: &[Matrix],
    trace: &StructureTrace,
    params: &StructureParams,
) -> Result<(Matrix, StructureParams)> {
    let k = params.heads.len();
    if grad_s.len() != k || trace.projections.len() != k {
        return Err(TdnError::contract(format!(
            "structure backward got {} gradients and {} cached heads for {k} heads",
            grad_s.len(),
            trace.projections.len()
        )));
    }
    let x = &trace.input;
    let n = x.rows();
    let mut grad_x = Matrix::zeros(n, x.cols());
    let mut grads = Vec::with_capacity(k);

    for head in 0..k {
        let gs = &grad_s[head];
        if gs.shape() != (n, n) {
            return Err(TdnError::shape("structure_backward", gs.shape(), (n, n)));
        }
        let a = &trace.adjacency.raw[head];
        let s = &trace.adjacency.normalized[head];
        let d = &trace.adjacency.degrees[head];
        let f = &trace.projections[head];

        // d_i enters S through both row i and column i.
        let grad_deg: Vec<f64> = (0..n)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += gs.get(i, j) * s.get(i, j) + gs.get(j, i) * s.get(j, i);
                }
                -0.5 * acc / d[i]
            })
            .collect();

        // Through relu: entries clipped to zero pass no gradient.
        let mut grad_gram = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if a.get(i, j) > 0.0 {
                    let g = gs.get(i, j) / (d[i] * d[j]).sqrt() + grad_deg[i];
                    grad_gram.set(i, j, g);
                }
            }
        }

        // G = F·Fᵀ  ⇒  ∂F = (∂G + ∂Gᵀ)·F
        let sym = grad_gram.add(&grad_gram.transpose())?;
        let grad_f = sym.matmul(f)?;
        let grad_pre = grad_f.hadamard(&f.map(|v| 1.0 - v * v))?;

        let h = &params.heads[head];
        grad_x.add_assign(&grad_pre.matmul_transposed(&h.wf)?)?;
        grads.push(StructureHead {
            wf: x.transposed_matmul(&grad_pre)?,
            bf: grad_pre.col_sums(),
        });
    }
    Ok((grad_x, StructureParams { heads: grads }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(m: usize, k: usize, rng: &mut ChaCha8Rng) -> StructureParams {
        let w = head_width(m, k).unwrap();
        StructureParams {
            heads: (0..k)
                .map(|_| StructureHead {
                    wf: Matrix::random_uniform(m, w, 0.8, rng),
                    bf: Matrix::random_uniform(1, w, 0.3, rng),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_weights_give_zero_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::random_uniform(4, 4, 2.0, &mut rng);
        let p = StructureParams::zeros(4, 2).unwrap();
        assert!(project_frames(&x, &p, 1).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(project_frames(&x, &p, 2).is_err());
    }

    #[test]
    fn scalar_projection() {
        let p = StructureParams {
            heads: vec![StructureHead {
                wf: Matrix::identity(1),
                bf: Matrix::zeros(1, 1),
            }],
        };
        let f = project_frames(&Matrix::from_rows(&[vec![0.5]]), &p, 0).unwrap();
        assert!((f.get(0, 0) - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn projection_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::random_uniform(7, 6, 2.0, &mut rng);
        let p = random_params(6, 2, &mut rng);
        for head in 0..2 {
            let f = project_frames(&x, &p, head).unwrap();
            assert!(f.as_slice().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn gram_cases() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let expected = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]]);
        assert_eq!(adjacency(&f), expected);

        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(adjacency(&f), Matrix::identity(2));

        assert_eq!(adjacency(&Matrix::zeros(3, 2)), Matrix::zeros(3, 3));
    }

    #[test]
    fn normalize_cases() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let (s, _) = normalize(&a, 1e-15).unwrap();
        for (got, want) in s.as_slice().iter().zip([0.0, 1.0, 1.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }

        let a = Matrix::filled(2, 2, 2.0);
        let (s, d) = normalize(&a, 1e-15).unwrap();
        assert!(s.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(d.iter().all(|v| (v - 4.0).abs() < 1e-12));

        let (s, d) = normalize(&Matrix::zeros(2, 2), 1e-9).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
        assert!(d.iter().all(|&v| v == 1e-9));

        let neg = Matrix::from_rows(&[vec![1.0, -0.1], vec![-0.1, 1.0]]);
        assert!(matches!(normalize(&neg, 1e-9), Err(TdnError::Contract(_))));
    }

    #[test]
    fn zero_weights_give_zero_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        let t = structure_forward(&x, &StructureParams::zeros(3, 1).unwrap(), EPS_DEG).unwrap();
        assert_eq!(t.adjacency.raw[0], Matrix::zeros(5, 5));
        assert_eq!(t.adjacency.normalized[0], Matrix::zeros(5, 5));
    }

    #[test]
    fn two_heads_are_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random_uniform(3, 4, 1.5, &mut rng);
        let p = random_params(4, 2, &mut rng);
        let t = structure_forward(&x, &p, EPS_DEG).unwrap();
        assert_eq!(t.adjacency.normalized.len(), 2);
        for (a, s) in t.adjacency.raw.iter().zip(&t.adjacency.normalized) {
            assert_eq!(s.shape(), (3, 3));
            assert_eq!(a, &a.transpose());
            assert_eq!(s, &s.transpose());
            assert!(a.min().unwrap() >= 0.0 && s.min().unwrap() >= 0.0);
            let lambda = s.dominant_abs_eigenvalue(500, 0).unwrap();
            assert!(lambda <= 1.0 + 1e-8, "{lambda}");
        }
    }

    #[test]
    fn permutation_equivariance_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::random_uniform(4, 4, 1.0, &mut rng);
        let p = random_params(4, 2, &mut rng);
        let perm = [2, 0, 3, 1];
        let base = structure_forward(&x, &p, EPS_DEG).unwrap();
        let moved = structure_forward(&x.permute_rows(&perm), &p, EPS_DEG).unwrap();
        for head in 0..2 {
            // Brute-force P·A·Pᵀ with explicit permutation matrices.
            let mut pm = Matrix::zeros(4, 4);
            for (i, &j) in perm.iter().enumerate() {
                pm.set(i, j, 1.0);
            }
            let expected = pm
                .matmul(&base.adjacency.raw[head])
                .unwrap()
                .matmul(&pm.transpose())
                .unwrap();
            let diff = expected.sub(&moved.adjacency.raw[head]).unwrap().max_abs();
            assert!(diff < 1e-9);
            let expected_s = base.adjacency.normalized[head].permute_symmetric(&perm);
            assert!(expected_s.sub(&moved.adjacency.normalized[head]).unwrap().max_abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_uniform(4, 4, 1.0, &mut rng);
        let p = random_params(4, 2, &mut rng);
        let t = structure_forward(&x, &p, EPS_DEG).unwrap();
        let (gx, gp) = structure_backward(&[Matrix::zeros(4, 4), Matrix::zeros(4, 4)], &t, &p).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert!(gp.heads.iter().all(|h| h.wf.max_abs() == 0.0 && h.bf.max_abs() == 0.0));
        assert!(matches!(
            structure_backward(&[Matrix::zeros(4, 4)], &t, &p),
            Err(TdnError::Contract(_))
        ));
    }

    /// Scalar objective Σ_k Σ_ij W_k[i,j]·S_k[i,j] for a fixed random W.
    fn objective(x: &Matrix, p: &StructureParams, weights: &[Matrix]) -> f64 {
        let t = structure_forward(x, p, EPS_DEG).unwrap();
        t.adjacency
            .normalized
            .iter()
            .zip(weights)
            .map(|(s, w)| s.hadamard(w).unwrap().as_slice().iter().sum::<f64>())
            .sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_central_differences() {
        let (n, m, k) = (5, 6, 2);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::random_uniform(n, m, 1.0, &mut rng);
        let p = random_params(m, k, &mut rng);
        let weights: Vec<Matrix> = (0..k).map(|_| Matrix::random_uniform(n, n, 1.0, &mut rng)).collect();
        let t = structure_forward(&x, &p, EPS_DEG).unwrap();
        let (gx, gp) = structure_backward(&weights, &t, &p).unwrap();

        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[idx] -= h;
            let num = (objective(&plus, &p, &weights) - objective(&minus, &p, &weights)) / (2.0 * h);
            worst = worst.max(rel_err(gx.as_slice()[idx], num));
        }
        for head in 0..k {
            for which in 0..2 {
                let len = if which == 0 { p.heads[head].wf.len() } else { p.heads[head].bf.len() };
                for idx in 0..len {
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        let target = if which == 0 { &mut q.heads[head].wf } else { &mut q.heads[head].bf };
                        target.as_mut_slice()[idx] += delta;
                        objective(&x, &q, &weights)
                    };
                    let num = (bump(h) - bump(-h)) / (2.0 * h);
                    let ana = if which == 0 { gp.heads[head].wf.as_slice()[idx] } else { gp.heads[head].bf.as_slice()[idx] };
                    worst = worst.max(rel_err(ana, num));
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn clipped_edges_pass_no_gradient() {
        // Two frames pointing in opposite directions: the off-diagonal Gram
        // entry is negative and clipped.
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0]]);
        let p = StructureParams {
            heads: vec![StructureHead {
                wf: Matrix::identity(1),
                bf: Matrix::zeros(1, 1),
            }],
        };
        let t = structure_forward(&x, &p, EPS_DEG).unwrap();
        assert_eq!(t.adjacency.raw[0].get(0, 1), 0.0);
        let mut g = Matrix::zeros(2, 2);
        g.set(0, 1, 1.0);
        g.set(1, 0, 1.0);
        let (gx, gp) = structure_backward(&[g], &t, &p).unwrap();
        assert_eq!(gx.max_abs(), 0.0);
        assert_eq!(gp.heads[0].wf.max_abs(), 0.0);
    }
}
