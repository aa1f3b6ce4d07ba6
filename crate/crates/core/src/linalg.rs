//! Dense symmetric eigensolver used by the feature-space extraction.
//!
//! Classic two-stage scheme: Householder reduction to tridiagonal form with
//! accumulated transform, then tridiagonal QL with implicit shifts rotating
//! the accumulated vectors. Loops are arranged so the hot inner passes run
//! over contiguous rows; the eigenvector accumulator is kept transposed for
//! the same reason.

use crate::error::{Error, Result};

/// Dot product of two equal-length slices.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Eigendecomposition of a symmetric n x n matrix (row-major, only assumed
/// symmetric; the lower triangle is what gets read).
///
/// Returns `(eigenvalue, eigenvector)` pairs sorted by descending eigenvalue.
/// Eigenvectors are unit length and mutually orthogonal.
pub(crate) fn sym_eigen_desc(mat: &[f64], n: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if mat.len() != n * n {
        return Err(Error::Dim(format!(
            "matrix buffer {} does not match n = {n}",
            mat.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if !mat.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric(
            "non-finite entry in symmetric matrix".into(),
        ));
    }

    let mut a = mat.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut a, n, &mut d, &mut e);

    // Transpose the accumulated transform so each eigenvector ends up a row.
    let mut z = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            z[r * n + c] = a[c * n + r];
        }
    }
    ql_implicit(&mut d, &mut e, n, &mut z)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("finite eigenvalues"));
    Ok(order
        .into_iter()
        .map(|j| (d[j], z[j * n..(j + 1) * n].to_vec()))
        .collect())
}

/// Householder reduction of a symmetric matrix to tridiagonal form.
/// On exit `d` holds the diagonal, `e` the subdiagonal (e[0] unused), and `a`
/// the accumulated orthogonal transform (columns correspond to the
/// tridiagonal basis).
fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    let mut p = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i; // row i is reduced against columns 0..l
        let mut h = 0.0;
        if l > 1 {
            let scale: f64 = a[i * n..i * n + l].iter().map(|x| x.abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l - 1];
            } else {
                for k in 0..l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l - 1];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l - 1] = f - g;

                // p = A_sub * u / h, using only the lower triangle, row-major.
                p[..l].fill(0.0);
                for j in 0..l {
                    let uj = a[i * n + j];
                    let row = &a[j * n..j * n + j + 1];
                    let mut s = 0.0;
                    for k in 0..=j {
                        s += row[k] * a[i * n + k];
                    }
                    p[j] += s;
                    // Mirror contributions A[j][k] * u[j] for k < j.
                    for k in 0..j {
                        p[k] += row[k] * uj;
                    }
                }
                let mut f_acc = 0.0;
                for j in 0..l {
                    a[j * n + i] = a[i * n + j] / h; // store u/h in column i
                    p[j] /= h;
                    f_acc += p[j] * a[i * n + j];
                }
                let hh = f_acc / (h + h);
                for j in 0..l {
                    p[j] -= hh * a[i * n + j];
                }
                // Rank-2 update of the lower triangle: A -= u qᵀ + q uᵀ.
                for j in 0..l {
                    let (fj, gj) = (a[i * n + j], p[j]);
                    for k in 0..=j {
                        a[j * n + k] -= fj * p[k] + gj * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l - 1];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;

    // Accumulate the transforms into `a`.
    let mut g = vec![0.0; n];
    for i in 0..n {
        let l = i;
        if d[i] != 0.0 {
            g[..l].fill(0.0);
            for k in 0..l {
                let uik = a[i * n + k];
                let row = &a[k * n..k * n + l];
                for j in 0..l {
                    g[j] += uik * row[j];
                }
            }
            for k in 0..l {
                let aki = a[k * n + i];
                let row = &mut a[k * n..k * n + l];
                for j in 0..l {
                    row[j] -= g[j] * aki;
                }
            }
        }
        d[i] = a[i * n + i];
        a[i * n + i] = 1.0;
        for j in 0..l {
            a[j * n + i] = 0.0;
            a[i * n + j] = 0.0;
        }
    }
}

/// QL with implicit shifts on a tridiagonal matrix, rotating the rows of `z`
/// (row j of `z` becomes the eigenvector of the returned `d[j]`).
fn ql_implicit(d: &mut [f64], e: &mut [f64], n: usize, z: &mut [f64]) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            // Find the first negligible subdiagonal element at or after l.
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd + f64::MIN_POSITIVE {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(Error::Numeric("tridiagonal QL failed to converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;

                // Plane rotation of eigenvector rows i and i+1.
                let (lo, hi) = z.split_at_mut((i + 1) * n);
                let row_i = &mut lo[i * n..(i + 1) * n];
                let row_i1 = &mut hi[..n];
                for k in 0..n {
                    let f = row_i1[k];
                    row_i1[k] = s * row_i[k] + c * f;
                    row_i[k] = c * row_i[k] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}
