//! Raw slice kernels shared by forward and backward passes.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `(m×k) · (k×n)`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn conv1d(x: &[f64], w: &[f64], l: usize, d: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= l {
                continue;
            }
            let s = src - pad;
            for c in 0..d {
                out[t * d + c] += w[c * k + j] * x[s * d + c];
            }
        }
    }
    out
}

pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    l: usize,
    d: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = k / 2;
    let mut dx = vec![0.0; l * d];
    let mut dw = vec![0.0; d * k];
    for t in 0..l {
        for j in 0..k {
            let src = t + j;
            if src < pad || src - pad >= l {
                continue;
            }
            let s = src - pad;
            for c in 0..d {
                let gv = g[t * d + c];
                dx[s * d + c] += w[c * k + j] * gv;
                dw[c * k + j] += x[s * d + c] * gv;
            }
        }
    }
    (dx, dw)
}

/// `h_t = a ⊙ h_{t-1} + v_t` over L steps of width N.
pub fn diag_scan(v: &[f64], a: &[f64], l: usize, n: usize) -> Vec<f64> {
    let mut h = vec![0.0; l * n];
    h[..n].copy_from_slice(&v[..n]);
    for t in 1..l {
        for i in 0..n {
            h[t * n + i] = a[i] * h[(t - 1) * n + i] + v[t * n + i];
        }
    }
    h
}

/// Adjoint recurrence `λ_t = g_t + a ⊙ λ_{t+1}`; `dv = λ`, `da = Σ λ_t ⊙ h_{t-1}`.
pub fn diag_scan_backward(h: &[f64], a: &[f64], g: &[f64], l: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lam = vec![0.0; l * n];
    let mut da = vec![0.0; n];
    for t in (0..l).rev() {
        for i in 0..n {
            let next = if t + 1 < l { a[i] * lam[(t + 1) * n + i] } else { 0.0 };
            let v = g[t * n + i] + next;
            lam[t * n + i] = v;
            if t > 0 {
                da[i] += v * h[(t - 1) * n + i];
            }
        }
    }
    (lam, da)
}
