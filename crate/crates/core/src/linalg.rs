//! Minimal dense row-major kernels shared by the encoder and head.

/// y = W x + b, with W of shape (rows, cols) row-major, x of length cols.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

/// y = W x (no bias).
pub fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, y: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

/// dx += W^T dy, with W of shape (rows, cols).
pub fn matvec_t_accum(w: &[f64], dy: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        for c in 0..cols {
            dx[c] += row[c] * g;
        }
    }
}

/// dW += dy ⊗ x (outer product), dW of shape (rows, cols).
pub fn outer_accum(dy: &[f64], x: &[f64], rows: usize, cols: usize, dw: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += g * x[c];
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}
