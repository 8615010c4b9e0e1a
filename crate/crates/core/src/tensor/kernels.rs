//! Convolution kernels: im2col/col2im lowering onto single-precision GEMM,
//! plus direct loops for depthwise convolution.

/// Spatial padding policy.
///
/// `Same` pads symmetrically with zeros so that the output extent is
/// `ceil(input / stride)`; when the total padding is odd the extra row/column
/// goes on the bottom/right. `Valid` applies no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Geometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        match padding {
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
                Some(Geometry {
                    in_h,
                    in_w,
                    kh,
                    kw,
                    stride,
                    out_h,
                    out_w,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                })
            }
            Padding::Valid => {
                if kh > in_h || kw > in_w {
                    return None;
                }
                Some(Geometry {
                    in_h,
                    in_w,
                    kh,
                    kw,
                    stride,
                    out_h: (in_h - kh) / stride + 1,
                    out_w: (in_w - kw) / stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
        }
    }

    pub fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when im2col is the identity map (1×1 kernel, unit stride, no pad).
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Lowers one HWC image into a `patches × (kh·kw·channels)` matrix.
pub(crate) fn im2col(src: &[f32], channels: usize, g: &Geometry, cols: &mut Vec<f32>) {
    let k = g.kh * g.kw * channels;
    cols.clear();
    cols.resize(g.patches() * k, 0.0);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.kw + kx) * channels;
                        let s = (y * g.in_w + x) * channels;
                        row[dst..dst + channels].copy_from_slice(&src[s..s + channels]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto an HWC image.
pub(crate) fn col2im_add(cols: &[f32], channels: usize, g: &Geometry, dst: &mut [f32]) {
    let k = g.kh * g.kw * channels;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * k..][..k];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                        let s = (ky * g.kw + kx) * channels;
                        let d = (y * g.in_w + x) * channels;
                        for (o, v) in dst[d..d + channels].iter_mut().zip(&row[s..s + channels]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `C = A·B + beta·C` where `A` is `m×k` (or its transpose when
/// `trans_a`, stored `k×m`) and `B` is `k×n` (or stored `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths checked above cover every index the strides
    // can reach for the given m, k, n.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub geom: Geometry,
}

/// Forward convolution. Weights are `kh × kw × in_c × out_c`.
pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let g = &d.geom;
    let p = g.patches();
    let k = g.kh * g.kw * d.in_c;
    let in_len = g.in_h * g.in_w * d.in_c;
    let mut out = vec![0.0f32; d.batch * p * d.out_c];
    let mut cols = Vec::new();
    for b in 0..d.batch {
        let src = &x[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * p * d.out_c..(b + 1) * p * d.out_c];
        if g.is_pointwise() {
            gemm(p, k, d.out_c, src, false, w, false, 0.0, dst);
        } else {
            im2col(src, d.in_c, g, &mut cols);
            gemm(p, k, d.out_c, &cols, false, w, false, 0.0, dst);
        }
        if let Some(bias) = bias {
            for row in dst.chunks_exact_mut(d.out_c) {
                for (o, b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Any of the output buffers may be skipped.
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let g = &d.geom;
    let p = g.patches();
    let k = g.kh * g.kw * d.in_c;
    let in_len = g.in_h * g.in_w * d.in_c;
    let mut cols = Vec::new();
    let mut dcols = vec![0.0f32; if g.is_pointwise() { 0 } else { p * k }];
    for b in 0..d.batch {
        let src = &x[b * in_len..(b + 1) * in_len];
        let g_out = &dy[b * p * d.out_c..(b + 1) * p * d.out_c];
        if let Some(dw) = dw.as_deref_mut() {
            if g.is_pointwise() {
                gemm(k, p, d.out_c, src, true, g_out, false, 1.0, dw);
            } else {
                im2col(src, d.in_c, g, &mut cols);
                gemm(k, p, d.out_c, &cols, true, g_out, false, 1.0, dw);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dst = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(p, d.out_c, k, g_out, false, w, true, 1.0, dst);
            } else {
                gemm(p, d.out_c, k, g_out, false, w, true, 0.0, &mut dcols);
                col2im_add(&dcols, d.in_c, g, dst);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for row in g_out.chunks_exact(d.out_c) {
                for (o, v) in db.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
}

/// Transposed convolution, the adjoint of a "same" strided convolution whose
/// input is the (larger) output here. `dims.geom` describes that forward
/// convolution: `in_h × in_w` is the upsampled extent, `out_h × out_w` the
/// extent of `x`. `dims.in_c` is the channel count of the upsampled side.
/// Weights are `kh × kw × up_c × x_c`.
pub(crate) fn conv_transpose_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    d: &ConvDims,
) -> Vec<f32> {
    let g = &d.geom;
    let p = g.patches();
    let k = g.kh * g.kw * d.in_c;
    let up_len = g.in_h * g.in_w * d.in_c;
    let mut out = vec![0.0f32; d.batch * up_len];
    let mut cols = vec![0.0f32; p * k];
    for b in 0..d.batch {
        let src = &x[b * p * d.out_c..(b + 1) * p * d.out_c];
        let dst = &mut out[b * up_len..(b + 1) * up_len];
        gemm(p, d.out_c, k, src, false, w, true, 0.0, &mut cols);
        col2im_add(&cols, d.in_c, g, dst);
        if let Some(bias) = bias {
            for row in dst.chunks_exact_mut(d.in_c) {
                for (o, b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let g = &d.geom;
    let p = g.patches();
    let k = g.kh * g.kw * d.in_c;
    let up_len = g.in_h * g.in_w * d.in_c;
    let mut cols = Vec::new();
    for b in 0..d.batch {
        let src = &x[b * p * d.out_c..(b + 1) * p * d.out_c];
        let g_up = &dy[b * up_len..(b + 1) * up_len];
        im2col(g_up, d.in_c, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            let dst = &mut dx[b * p * d.out_c..(b + 1) * p * d.out_c];
            gemm(p, k, d.out_c, &cols, false, w, false, 1.0, dst);
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(k, p, d.out_c, &cols, true, src, false, 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for row in g_up.chunks_exact(d.in_c) {
                for (o, v) in db.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }
}

/// Depthwise convolution with channel multiplier `mult`.
/// Weights are `kh × kw × channels × mult`; output channel `c·mult + j`.
pub(crate) fn depthwise_forward(
    x: &[f32],
    w: &[f32],
    batch: usize,
    channels: usize,
    mult: usize,
    g: &Geometry,
) -> Vec<f32> {
    let out_c = channels * mult;
    let in_len = g.in_h * g.in_w * channels;
    let out_len = g.patches() * out_c;
    let mut out = vec![0.0f32; batch * out_len];
    for b in 0..batch {
        let src = &x[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = &mut dst[(oy * g.out_w + ox) * out_c..][..out_c];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((y, xx)) = g.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let s = &src[(y * g.in_w + xx) * channels..][..channels];
                        let wk = &w[(ky * g.kw + kx) * out_c..][..out_c];
                        for c in 0..channels {
                            for j in 0..mult {
                                o[c * mult + j] += s[c] * wk[c * mult + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    batch: usize,
    channels: usize,
    mult: usize,
    g: &Geometry,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let out_c = channels * mult;
    let in_len = g.in_h * g.in_w * channels;
    let out_len = g.patches() * out_c;
    for b in 0..batch {
        let src = &x[b * in_len..(b + 1) * in_len];
        let g_out = &dy[b * out_len..(b + 1) * out_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let go = &g_out[(oy * g.out_w + ox) * out_c..][..out_c];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((y, xx)) = g.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let s_off = b * in_len + (y * g.in_w + xx) * channels;
                        let w_off = (ky * g.kw + kx) * out_c;
                        for c in 0..channels {
                            for j in 0..mult {
                                let gv = go[c * mult + j];
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[w_off + c * mult + j] += gv * src[(y * g.in_w + xx) * channels + c];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[s_off + c] += gv * w[w_off + c * mult + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_geometry_extents() {
        let g = Geometry::new(64, 64, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (32, 32, 0, 0));
        let g = Geometry::new(7, 5, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 3));
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        // Transposed 4×4 kernel geometry: 8 → 4 with total pad 2.
        let g = Geometry::new(8, 8, 4, 4, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
        // Odd total padding puts the extra row at the bottom.
        let g = Geometry::new(4, 4, 4, 4, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
    }

    #[test]
    fn valid_geometry_rejects_oversized_kernel() {
        assert!(Geometry::new(3, 3, 4, 4, 1, Padding::Valid).is_none());
        let g = Geometry::new(4, 4, 4, 4, 1, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 1));
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
