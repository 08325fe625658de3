//! Dense kernels. Each output element is reduced in a fixed order, so the
//! parallel and sequential paths agree bit for bit.

use crate::par;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[r, o] (+)= bias[o] + Σ_i x[r, i] w[o, i]` with `x: [rows, inp]`,
/// `w: [outp, inp]`. When `accumulate` is set the product is added to `out`.
pub fn matmul_nt(
    x: &[f64],
    rows: usize,
    inp: usize,
    w: &[f64],
    outp: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(x.len(), rows * inp);
    debug_assert_eq!(w.len(), outp * inp);
    debug_assert_eq!(out.len(), rows * outp);
    if rows == 0 || outp == 0 {
        return;
    }
    par::for_each_chunk(out, outp, rows * inp * outp, |r, orow| {
        let xr = &x[r * inp..(r + 1) * inp];
        for (o, dst) in orow.iter_mut().enumerate() {
            let mut v = dot(xr, &w[o * inp..(o + 1) * inp]);
            if let Some(b) = bias {
                v += b[o];
            }
            if accumulate {
                *dst += v;
            } else {
                *dst = v;
            }
        }
    });
}

/// `dx[r, :] += Σ_o dy[r, o] w[o, :]`.
pub fn matmul_nn_acc(dy: &[f64], rows: usize, outp: usize, w: &[f64], inp: usize, dx: &mut [f64]) {
    if rows == 0 || inp == 0 {
        return;
    }
    par::for_each_chunk(dx, inp, rows * inp * outp, |r, dxr| {
        let dyr = &dy[r * outp..(r + 1) * outp];
        for (o, &g) in dyr.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &w[o * inp..(o + 1) * inp], dxr);
            }
        }
    });
}

/// `dw[o, :] += Σ_r dy[r, o] x[r, :]`.
pub fn matmul_tn_acc(dy: &[f64], rows: usize, outp: usize, x: &[f64], inp: usize, dw: &mut [f64]) {
    if rows == 0 || inp == 0 {
        return;
    }
    par::for_each_chunk(dw, inp, rows * inp * outp, |o, dwo| {
        for r in 0..rows {
            let g = dy[r * outp + o];
            if g != 0.0 {
                axpy(g, &x[r * inp..(r + 1) * inp], dwo);
            }
        }
    });
}

/// Column sums of `dy` added to `db`.
pub fn col_sum_acc(dy: &[f64], rows: usize, cols: usize, db: &mut [f64]) {
    for r in 0..rows {
        for (d, g) in db.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
            *d += g;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let (r, i, o) = (5, 7, 3);
        let x: Vec<f64> = (0..r * i).map(|v| (v as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..o * i).map(|v| (v as f64 * 0.11).cos()).collect();
        let b = vec![0.5, -1.0, 2.0];
        let mut out = vec![0.0; r * o];
        matmul_nt(&x, r, i, &w, o, Some(&b), &mut out, false);
        for rr in 0..r {
            for oo in 0..o {
                let naive: f64 = (0..i).map(|k| x[rr * i + k] * w[oo * i + k]).sum::<f64>() + b[oo];
                assert!((out[rr * o + oo] - naive).abs() < 1e-12);
            }
        }
        let dy: Vec<f64> = (0..r * o).map(|v| v as f64 - 4.0).collect();
        let mut dx = vec![0.0; r * i];
        matmul_nn_acc(&dy, r, o, &w, i, &mut dx);
        let mut dw = vec![0.0; o * i];
        matmul_tn_acc(&dy, r, o, &x, i, &mut dw);
        for rr in 0..r {
            for k in 0..i {
                let naive: f64 = (0..o).map(|oo| dy[rr * o + oo] * w[oo * i + k]).sum();
                assert!((dx[rr * i + k] - naive).abs() < 1e-12);
            }
        }
        for oo in 0..o {
            for k in 0..i {
                let naive: f64 = (0..r).map(|rr| dy[rr * o + oo] * x[rr * i + k]).sum();
                assert!((dw[oo * i + k] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
