//! Dense complex linear algebra used throughout the simulator.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>` (column-major). The few
//! kernels that dominate training time (`matmul`, Kronecker-structured
//! products) are written against the raw column-major storage.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Negative eigenvalues above this are truncation noise and get clamped to zero.
pub const PSD_CLAMP: f64 = -1e-9;

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn trace(m: &CMatrix) -> C64 {
    m.diagonal().iter().sum()
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).norm()))
}

/// Largest absolute element of `m - m†`.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut err = 0.0f64;
    for j in 0..n {
        for i in 0..=j {
            err = err.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    err
}

/// `(m + m†) / 2`
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    let mut out = m.clone();
    let n = m.nrows();
    for j in 0..n {
        for i in 0..=j {
            let v = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    out
}

/// Kronecker product with `a` as the most significant index.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// `a * b` on raw column-major storage.
pub fn matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul shape mismatch");
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = CMatrix::zeros(m, n);
    let a_s = a.as_slice();
    let b_s = b.as_slice();
    let o_s = out.as_mut_slice();
    for j in 0..n {
        let col = &mut o_s[j * m..(j + 1) * m];
        for p in 0..k {
            let bv = b_s[j * k + p];
            if bv.re == 0.0 && bv.im == 0.0 {
                continue;
            }
            let acol = &a_s[p * m..(p + 1) * m];
            for (o, av) in col.iter_mut().zip(acol) {
                o.re += av.re * bv.re - av.im * bv.im;
                o.im += av.re * bv.im + av.im * bv.re;
            }
        }
    }
    out
}

/// `a * b†`
pub fn matmul_adj(a: &CMatrix, b: &CMatrix) -> CMatrix {
    matmul(a, &b.adjoint())
}

/// Hermitian eigendecomposition: ascending real eigenvalues and unitary eigenvectors.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let n = m.nrows();
    let mut vecs = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Rebuild `V diag(f(λ)) V†`.
pub fn spectral_map(vals: &[f64], vecs: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let n = vecs.nrows();
    let mut scaled = vecs.clone();
    for (j, &lam) in vals.iter().enumerate() {
        let s = f(lam);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    matmul_adj(&scaled, vecs)
}

/// Eigenvalues of a Hermitian PSD matrix with the noise clamp applied.
///
/// Fails with `NotPsd` when an eigenvalue lies below [`PSD_CLAMP`].
pub fn psd_eigen(m: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let (mut vals, vecs) = hermitian_eigen(m);
    for v in vals.iter_mut() {
        if *v < PSD_CLAMP {
            return Err(Error::NotPsd { eigenvalue: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((vals, vecs))
}

/// Principal square root of a Hermitian PSD matrix.
pub fn hermitian_sqrt(m: &CMatrix) -> Result<CMatrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!("square matrix expected, got {}x{}", m.nrows(), m.ncols())));
    }
    let herm = hermiticity_error(m);
    if herm > 1e-10 {
        return Err(Error::InvalidState(format!("matrix not Hermitian (deviation {herm:.3e})")));
    }
    let (vals, vecs) = psd_eigen(m)?;
    Ok(spectral_map(&vals, &vecs, f64::sqrt))
}

/// Trace distance `½‖a − b‖₁` between Hermitian matrices.
pub fn trace_distance(a: &CMatrix, b: &CMatrix) -> f64 {
    let (vals, _) = hermitian_eigen(&(a - b));
    0.5 * vals.iter().map(|v| v.abs()).sum::<f64>()
}

fn one_norm(m: &CMatrix) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé approximant coefficients and 1-norm thresholds for the
// scaling-and-squaring exponential (degrees 3, 5, 7, 9, 13).
const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

fn scaled(m: &CMatrix, s: f64) -> CMatrix {
    m.map(|z| z * s)
}

fn add_scaled(acc: &mut CMatrix, m: &CMatrix, s: f64) {
    for (a, z) in acc.iter_mut().zip(m.iter()) {
        *a += z * s;
    }
}

/// Odd/even Padé parts (U, V) for degree `coeffs.len() - 1` ≤ 9.
fn pade_low(a: &CMatrix, coeffs: &[f64]) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    let a2 = matmul(a, a);
    let mut powers = vec![identity(n), a2.clone()];
    while powers.len() < coeffs.len() / 2 {
        let next = matmul(powers.last().unwrap(), &a2);
        powers.push(next);
    }
    let mut odd = CMatrix::zeros(n, n);
    let mut even = CMatrix::zeros(n, n);
    for (k, p) in powers.iter().enumerate() {
        add_scaled(&mut odd, p, coeffs[2 * k + 1]);
        add_scaled(&mut even, p, coeffs[2 * k]);
    }
    (matmul(a, &odd), even)
}

fn pade13(a: &CMatrix) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    let b = &B13;
    let eye = identity(n);
    let a2 = matmul(a, a);
    let a4 = matmul(&a2, &a2);
    let a6 = matmul(&a4, &a2);

    let mut w1 = scaled(&a6, b[13]);
    add_scaled(&mut w1, &a4, b[11]);
    add_scaled(&mut w1, &a2, b[9]);
    let mut w2 = scaled(&a6, b[7]);
    add_scaled(&mut w2, &a4, b[5]);
    add_scaled(&mut w2, &a2, b[3]);
    add_scaled(&mut w2, &eye, b[1]);
    let u = matmul(a, &(matmul(&a6, &w1) + w2));

    let mut z1 = scaled(&a6, b[12]);
    add_scaled(&mut z1, &a4, b[10]);
    add_scaled(&mut z1, &a2, b[8]);
    let mut z2 = scaled(&a6, b[6]);
    add_scaled(&mut z2, &a4, b[4]);
    add_scaled(&mut z2, &a2, b[2]);
    add_scaled(&mut z2, &eye, b[0]);
    let v = matmul(&a6, &z1) + z2;
    (u, v)
}

/// Matrix exponential by scaling and squaring with Padé approximants.
pub fn expm(m: &CMatrix) -> Result<CMatrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!("expm needs a square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("expm input".into()));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(CMatrix::zeros(0, 0));
    }
    let norm = one_norm(m);
    let low: [&[f64]; 4] = [&B3, &B5, &B7, &B9];
    for (theta, coeffs) in THETA.iter().zip(low) {
        if norm <= *theta {
            let (u, v) = pade_low(m, coeffs);
            return solve_pade(u, v);
        }
    }
    let squarings = if norm > THETA[4] {
        (norm / THETA[4]).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let a = scaled(m, 0.5f64.powi(squarings as i32));
    let (u, v) = pade13(&a);
    let mut r = solve_pade(u, v)?;
    for _ in 0..squarings {
        r = matmul(&r, &r);
    }
    Ok(r)
}

fn solve_pade(u: CMatrix, v: CMatrix) -> Result<CMatrix> {
    let num = &v + &u;
    let den = v - u;
    den.lu()
        .solve(&num)
        .ok_or_else(|| Error::NonFinite("singular Padé denominator".into()))
}

/// Exponential and Fréchet derivative `L(m, e) = d/ds exp(m + s e)|₀`,
/// read off the upper-right block of `exp([[m, e], [0, m]])`.
pub fn expm_frechet(m: &CMatrix, e: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let n = m.nrows();
    let mut block = CMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(m);
    block.view_mut((n, n), (n, n)).copy_from(m);
    block.view_mut((0, n), (n, n)).copy_from(e);
    let full = expm(&block)?;
    Ok((
        full.view((0, 0), (n, n)).into_owned(),
        full.view((0, n), (n, n)).into_owned(),
    ))
}
