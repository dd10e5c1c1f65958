//! Slice-level compute kernels shared by the tape ops and the non-differentiable
//! image utilities.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source offset in the input plane, or `None` if the tap lands in padding.
    #[inline]
    fn tap(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<usize> {
        let s = &self.spec;
        let y = (oy * s.stride + ky * s.dilation).checked_sub(s.padding)?;
        let x = (ox * s.stride + kx * s.dilation).checked_sub(s.padding)?;
        (y < self.h && x < self.w).then_some(y * self.w + x)
    }
}

/// Output columns `[lo, hi)` of row `oy` whose tap `(ky, kx)` lands inside a
/// stride-1 input, with the source offset of column `lo`.
#[inline]
fn tap_span(g: &ConvGeom, oy: usize, ky: usize, kx: usize) -> Option<(usize, usize, usize)> {
    let s = &g.spec;
    let y = (oy + ky * s.dilation).checked_sub(s.padding)?;
    if y >= g.h {
        return None;
    }
    let shift = kx * s.dilation;
    let lo = s.padding.saturating_sub(shift);
    let hi = (g.w + s.padding).saturating_sub(shift).min(g.wo);
    (lo < hi).then(|| (lo, hi, y * g.w + lo + shift - s.padding))
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    let plane = g.h * g.w;
    for c in 0..g.c {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    if g.spec.stride == 1 {
                        if let Some((lo, hi, off)) = tap_span(g, oy, ky, kx) {
                            dst[oy * g.wo + lo..oy * g.wo + hi]
                                .copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        if let Some(off) = g.tap(oy, ky, ox, kx) {
                            dst[oy * g.wo + ox] = src[off];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, grad_in: &mut [f64]) {
    let n = g.cols();
    let plane = g.h * g.w;
    for c in 0..g.c {
        let dst = &mut grad_in[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    if g.spec.stride == 1 {
                        if let Some((lo, hi, off)) = tap_span(g, oy, ky, kx) {
                            let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                            for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(s) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        if let Some(off) = g.tap(oy, ky, ox, kx) {
                            dst[off] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with four fixed-order partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot4([a; 4], b)[0]
}

/// Four dot products against a shared right-hand side, each summed exactly
/// like [`dot`].
#[inline(always)]
fn dot4(a: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let n = b.len();
    let split = n / 4 * 4;
    let a = a.map(|x| &x[..n]);
    let mut acc = [[0.0f64; 4]; 4];
    let bs = b[..split].chunks_exact(4);
    let xs = a.map(|x| x[..split].chunks_exact(4));
    let [x0, x1, x2, x3] = xs;
    for ((((bj, c0), c1), c2), c3) in bs.zip(x0).zip(x1).zip(x2).zip(x3) {
        for (acc, c) in acc.iter_mut().zip([c0, c1, c2, c3]) {
            acc[0] += c[0] * bj[0];
            acc[1] += c[1] * bj[1];
            acc[2] += c[2] * bj[2];
            acc[3] += c[3] * bj[3];
        }
    }
    let mut out = [0.0; 4];
    for (k, (acc, x)) in acc.iter().zip(&a).enumerate() {
        let mut tail = 0.0;
        for j in split..n {
            tail += x[j] * b[j];
        }
        out[k] = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    out
}

/// Forward convolution of one batch item. `weight` is out×(c·k·k) row-major.
pub(crate) fn conv_forward_item(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out_ch: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let n = g.cols();
    let rows = g.rows();
    let owned;
    let cols: &[f64] = if g.spec.is_pointwise(g.k) {
        input
    } else {
        owned = im2col(input, g);
        &owned
    };
    let mut out = vec![0.0; out_ch * n];
    for (blk, dst) in out.chunks_mut(4 * n).enumerate() {
        let o0 = 4 * blk;
        if let Some(b) = bias {
            for (j, d) in dst.chunks_mut(n).enumerate() {
                d.fill(b[o0 + j]);
            }
        }
        if dst.len() < 4 * n {
            for (j, d) in dst.chunks_mut(n).enumerate() {
                let wrow = &weight[(o0 + j) * rows..(o0 + j + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    axpy(wv, &cols[r * n..(r + 1) * n], d);
                }
            }
            continue;
        }
        let (d0, rest) = dst.split_at_mut(n);
        let (d1, rest) = rest.split_at_mut(n);
        let (d2, d3) = rest.split_at_mut(n);
        for r in 0..rows {
            let w = [0, 1, 2, 3].map(|j| weight[(o0 + j) * rows + r]);
            let x = &cols[r * n..(r + 1) * n];
            let rows4 = d0.iter_mut().zip(d1.iter_mut()).zip(d2.iter_mut()).zip(d3.iter_mut());
            for ((((a, b), c), d), &xi) in rows4.zip(x) {
                *a += w[0] * xi;
                *b += w[1] * xi;
                *c += w[2] * xi;
                *d += w[3] * xi;
            }
        }
    }
    out
}

pub(crate) struct ConvItemGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv_backward_item(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    need_input: bool,
) -> ConvItemGrads {
    let n = g.cols();
    let rows = g.rows();
    let pointwise = g.spec.is_pointwise(g.k);
    let owned;
    let cols: &[f64] = if pointwise {
        input
    } else {
        owned = im2col(input, g);
        &owned
    };

    let bias = grad_out
        .chunks(n)
        .map(|d| d.iter().sum::<f64>())
        .collect::<Vec<_>>();

    let d_row = |o: usize| &grad_out[o * n..(o + 1) * n];
    let mut gw = vec![0.0; out_ch * rows];
    let full = out_ch / 4 * 4;
    for o0 in (0..full).step_by(4) {
        let d = [d_row(o0), d_row(o0 + 1), d_row(o0 + 2), d_row(o0 + 3)];
        for r in 0..rows {
            let v = dot4(d, &cols[r * n..(r + 1) * n]);
            for (j, v) in v.into_iter().enumerate() {
                gw[(o0 + j) * rows + r] = v;
            }
        }
    }
    for o in full..out_ch {
        for r in 0..rows {
            gw[o * rows + r] = dot(d_row(o), &cols[r * n..(r + 1) * n]);
        }
    }

    let mut gi = Vec::new();
    if need_input {
        let mut gcols = vec![0.0; rows * n];
        for (r, gr) in gcols.chunks_mut(n).enumerate() {
            for o0 in (0..full).step_by(4) {
                let w = [0, 1, 2, 3].map(|j| weight[(o0 + j) * rows + r]);
                let d = d_row(o0).iter().zip(d_row(o0 + 1)).zip(d_row(o0 + 2)).zip(d_row(o0 + 3));
                for (g, (((a, b), c), e)) in gr.iter_mut().zip(d) {
                    *g = *g + w[0] * a + w[1] * b + w[2] * c + w[3] * e;
                }
            }
            for o in full..out_ch {
                axpy(weight[o * rows + r], d_row(o), gr);
            }
        }
        if pointwise {
            gi = gcols;
        } else {
            gi = vec![0.0; g.c * g.h * g.w];
            col2im(&gcols, g, &mut gi);
        }
    }
    ConvItemGrads {
        input: gi,
        weight: gw,
        bias,
    }
}

/// Max pooling over one plane. Returns values and the in-plane argmax of each
/// window; ties resolve to the first maximum in row-major window order.
/// Positions outside the plane never win.
pub(crate) fn maxpool_plane(
    src: &[f64],
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut vals = Vec::with_capacity(ho * wo);
    let mut idx = Vec::with_capacity(ho * wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let mut best = f64::NEG_INFINITY;
            let mut arg = usize::MAX;
            for ky in 0..kernel {
                let Some(y) = (oy * stride + ky).checked_sub(padding) else {
                    continue;
                };
                if y >= h {
                    continue;
                }
                for kx in 0..kernel {
                    let Some(x) = (ox * stride + kx).checked_sub(padding) else {
                        continue;
                    };
                    if x >= w {
                        continue;
                    }
                    let v = src[y * w + x];
                    if arg == usize::MAX || v > best {
                        best = v;
                        arg = y * w + x;
                    }
                }
            }
            vals.push(best);
            idx.push(arg);
        }
    }
    (vals, idx)
}

/// Interpolation taps for one axis of an align-corners=false bilinear resize.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub(crate) fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let frac = pos - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

pub(crate) fn bilinear_plane(
    src: &[f64],
    w: usize,
    ys: &[Tap],
    xs: &[Tap],
    dst: &mut [f64],
) {
    let wo = xs.len();
    for (oy, ty) in ys.iter().enumerate() {
        let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
        let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
        for (ox, tx) in xs.iter().enumerate() {
            let top = tx.w_lo * r0[tx.lo] + tx.w_hi * r0[tx.hi];
            let bot = tx.w_lo * r1[tx.lo] + tx.w_hi * r1[tx.hi];
            dst[oy * wo + ox] = ty.w_lo * top + ty.w_hi * bot;
        }
    }
}

pub(crate) fn bilinear_plane_backward(
    grad_out: &[f64],
    w: usize,
    ys: &[Tap],
    xs: &[Tap],
    grad_in: &mut [f64],
) {
    let wo = xs.len();
    for (oy, ty) in ys.iter().enumerate() {
        for (ox, tx) in xs.iter().enumerate() {
            let g = grad_out[oy * wo + ox];
            grad_in[ty.lo * w + tx.lo] += ty.w_lo * tx.w_lo * g;
            grad_in[ty.lo * w + tx.hi] += ty.w_lo * tx.w_hi * g;
            grad_in[ty.hi * w + tx.lo] += ty.w_hi * tx.w_lo * g;
            grad_in[ty.hi * w + tx.hi] += ty.w_hi * tx.w_hi * g;
        }
    }
}
