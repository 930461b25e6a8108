//! Dense kernels shared by the tape ops: GEMM wrappers, im2col convolution, layer norm.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`; a transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted above)
    // and the strides index within those bounds for both layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        ConvGeom { c_in, h, w, k, stride, pad, h_out, w_out }
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Lays out one image `[C, H, W]` as columns `[C*k*k, Ho*Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution `[N, Ci, H, W] * [Co, Ci, k, k] -> [N, Co, Ho, Wo]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    c_out: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_img = g.c_in * g.h * g.w;
    let out_img = c_out * g.out_plane();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch() * g.out_plane()] };
    for b in 0..n {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let ob = &mut out[b * out_img..(b + 1) * out_img];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(c_out, g.patch(), g.out_plane(), weight, false, src, false, ob, 0.0);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ob[co * g.out_plane()..(co + 1) * g.out_plane()] {
                    *v += bv;
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]. Each output slot is accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    c_out: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let in_img = g.c_in * g.h * g.w;
    let out_img = c_out * g.out_plane();
    let plane = g.out_plane();
    if let Some(db) = db {
        for b in 0..n {
            for co in 0..c_out {
                let s: f64 = dy[b * out_img + co * plane..b * out_img + (co + 1) * plane].iter().sum();
                db[co] += s;
            }
        }
    }
    let mut cols = vec![0.0; g.patch() * plane];
    if let Some(dw) = dw {
        for b in 0..n {
            let xb = &x[b * in_img..(b + 1) * in_img];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(c_out, plane, g.patch(), &dy[b * out_img..(b + 1) * out_img], false, src, true, dw, 1.0);
        }
    }
    if let Some(dx) = dx {
        for b in 0..n {
            let dyb = &dy[b * out_img..(b + 1) * out_img];
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if g.is_pointwise() {
                gemm(g.patch(), c_out, plane, weight, true, dyb, false, dxb, 1.0);
            } else {
                gemm(g.patch(), c_out, plane, weight, true, dyb, false, &mut cols, 0.0);
                col2im(&cols, g, dxb);
            }
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise normalization over the last dimension. Returns `(xhat, rstd)` for the backward pass.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gain[j] + bias[j];
        }
    }
    (xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    d: usize,
    gain: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dg: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let rows = rstd.len();
    if let Some(dg) = dg {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for j in 0..d {
                let gj = dy[r * d + j] * gain[j];
                mean_g += gj;
                mean_gx += gj * xhat[r * d + j];
            }
            mean_g /= d as f64;
            mean_gx /= d as f64;
            for j in 0..d {
                let gj = dy[r * d + j] * gain[j];
                dx[r * d + j] += rstd[r] * (gj - mean_g - xhat[r * d + j] * mean_gx);
            }
        }
    }
}
