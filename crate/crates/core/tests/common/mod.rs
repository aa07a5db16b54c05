//! Dense reference assembly shared by the integration tests. Written from the
//! P1 formulas directly so the checks do not go through the library's sparse
//! assembler.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Node coordinates and triangles of the uniform `n x n` mesh, with each cell
/// split along its lower-left to upper-right diagonal.
pub fn mesh(n: usize) -> (Vec<[f64; 2]>, Vec<[usize; 3]>) {
    let h = 1.0 / n as f64;
    let mut nodes = Vec::new();
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([i as f64 * h, j as f64 * h]);
        }
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut tris = Vec::new();
    for cj in 0..n {
        for ci in 0..n {
            tris.push([idx(ci, cj), idx(ci + 1, cj), idx(ci + 1, cj + 1)]);
            tris.push([idx(ci, cj), idx(ci + 1, cj + 1), idx(ci, cj + 1)]);
        }
    }
    (nodes, tris)
}

/// Dense stiffness `int k grad u . grad v` and mass `int w u v` with
/// per-triangle coefficients.
pub fn dense_matrices(n: usize, k: &[f64], w: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nodes, tris) = mesh(n);
    let size = nodes.len();
    let mut a = DMatrix::zeros(size, size);
    let mut m = DMatrix::zeros(size, size);
    for (t, tri) in tris.iter().enumerate() {
        let p = tri.map(|v| nodes[v]);
        let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
        let grad = |r: usize| {
            let (b, c) = (p[(r + 1) % 3], p[(r + 2) % 3]);
            [(b[1] - c[1]) / (2.0 * area), (c[0] - b[0]) / (2.0 * area)]
        };
        for r in 0..3 {
            for s in 0..3 {
                let (gr, gs) = (grad(r), grad(s));
                a[(tri[r], tri[s])] += k[t] * area * (gr[0] * gs[0] + gr[1] * gs[1]);
                m[(tri[r], tri[s])] += w[t] * area * if r == s { 1.0 / 6.0 } else { 1.0 / 12.0 };
            }
        }
    }
    (a, m)
}

pub fn dense_mass(n: usize) -> DMatrix<f64> {
    let ones = vec![1.0; 2 * n * n];
    dense_matrices(n, &ones, &ones).1
}

/// Log-uniform per-triangle coefficient in `[1, 10^decades]`.
pub fn random_kappa(n: usize, decades: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * n * n).map(|_| 10f64.powf(rng.random_range(0.0..decades))).collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// Interior lattice nodes of the cell rectangle `[x0, x1) x [y0, y1)`.
pub fn interior_nodes(n: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for j in y0 + 1..y1 {
        for i in x0 + 1..x1 {
            out.push(j * (n + 1) + i);
        }
    }
    out
}

/// Smallest eigenpairs of `a x = lambda b x` with `b`-orthonormal vectors,
/// ascending.
pub fn dense_generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let l = b.clone().cholesky().expect("b is SPD").l();
    let linv = l.clone().try_inverse().expect("invertible factor");
    let c = &linv * a * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, k| eig.eigenvectors[(r, order[k])]);
    (values, linv.transpose() * vectors)
}

/// Solves the dense saddle-point system `[A C; C^T 0] [x; mu] = [0; d]`.
pub fn dense_kkt(a: &DMatrix<f64>, c: &DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    let (n, m) = (a.nrows(), c.ncols());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(a);
    k.view_mut((0, n), (n, m)).copy_from(c);
    k.view_mut((n, 0), (m, n)).copy_from(&c.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(n, m).copy_from(d);
    let sol = k.lu().solve(&rhs).expect("nonsingular saddle-point system");
    sol.rows(0, n).into_owned()
}

/// `|x - y| / |y|` after flipping `x` to the sign of `y`.
pub fn rel_up_to_sign(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let s = if x.dot(y) < 0.0 { -1.0 } else { 1.0 };
    (x * s - y).norm() / y.norm()
}
