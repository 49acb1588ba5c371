//! Flat-slice math kernels behind the tape ops.
//!
//! All kernels take row-major NCHW buffers. Reductions accumulate in `f64`
//! and are cast to `f32` on store. Backward kernels add into the destination
//! gradient buffers so that fan-out contributions sum naturally.

/// Output spatial extent of a 3x3 convolution, if it is a positive integer.
pub(crate) fn conv2d_out_extent(extent: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if padded < 3 {
        return None;
    }
    let span = padded - 3;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// acc[oy, ox] += wgt * plane[oy*stride+ky-padding, ox*stride+kx-padding]
/// over the valid region. Contiguous inner loop for stride 1.
#[inline]
fn conv_accumulate_shifted(
    acc: &mut [f64],
    plane: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
    wgt: f64,
) {
    for oy in 0..oh {
        let y = (oy * stride + ky) as isize - padding as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        let row = &plane[y as usize * w..y as usize * w + w];
        let arow = &mut acc[oy * ow..oy * ow + ow];
        if stride == 1 {
            let ox_lo = padding.saturating_sub(kx);
            let ox_hi = (w + padding).saturating_sub(kx).min(ow);
            if ox_lo >= ox_hi {
                continue;
            }
            let x_lo = ox_lo + kx - padding;
            let src = &row[x_lo..x_lo + (ox_hi - ox_lo)];
            for (a, s) in arow[ox_lo..ox_hi].iter_mut().zip(src) {
                *a += wgt * f64::from(*s);
            }
        } else {
            for (ox, a) in arow.iter_mut().enumerate() {
                let x = (ox * stride + kx) as isize - padding as isize;
                if x >= 0 && x < w as isize {
                    *a += wgt * f64::from(row[x as usize]);
                }
            }
        }
    }
}

/// Tile length for the blocked matmul paths; the f64 accumulator tile stays
/// cache-resident.
const CONV_TILE: usize = 2048;

/// Spatial extent below which the im2col paths beat the shift-sweep paths
/// (short rows starve the sweep's inner loops).
const IM2COL_BELOW: usize = 32;

/// Dot product with eight independent f64 accumulators in a fixed combine
/// order; the lanes let the reduction vectorize.
#[inline]
fn dot_f32_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let av = &a[i * 8..i * 8 + 8];
        let bv = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            lanes[l] += f64::from(av[l]) * f64::from(bv[l]);
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 8..a.len() {
        tail += f64::from(a[i]) * f64::from(b[i]);
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// Unfold a batch into patch-row matrix form: row `(ci*3+ky)*3+kx` holds the
/// input value under that kernel tap for every output position, laid out as
/// `[b][oy][ox]` (zero where the tap falls outside the frame). Stride 1.
fn im2col_stride1(
    input: &[f32],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let n = bsz * oh * ow;
    let mut cols = vec![0.0f32; cin * 9 * n];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ci * 3 + ky) * 3 + kx;
                let ox_lo = padding.saturating_sub(kx);
                let ox_hi = (w + padding).saturating_sub(kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let x_lo = ox_lo + kx - padding;
                let len = ox_hi - ox_lo;
                let dst_row = &mut cols[r * n..(r + 1) * n];
                for b in 0..bsz {
                    let plane = &input[(b * cin + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let y = (oy + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src = &plane[y as usize * w + x_lo..][..len];
                        dst_row[b * oh * ow + oy * ow + ox_lo..][..len].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Write an f64 accumulator segment starting at flat output position `t0`
/// (in `[b][plane]` order) into the NCHW output of channel `co`.
fn scatter_tile_to_out(
    acc: &[f64],
    t0: usize,
    out: &mut [f32],
    co: usize,
    cout: usize,
    plane: usize,
) {
    let mut written = 0;
    while written < acc.len() {
        let pos = t0 + written;
        let b = pos / plane;
        let p = pos % plane;
        let chunk = (plane - p).min(acc.len() - written);
        let dst = &mut out[(b * cout + co) * plane + p..][..chunk];
        for (o, a) in dst.iter_mut().zip(&acc[written..written + chunk]) {
            *o = *a as f32;
        }
        written += chunk;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    input: &[f32],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[f32],
    cout: usize,
    bias: &[f32],
    stride: usize,
    padding: usize,
    out: &mut [f32],
    oh: usize,
    ow: usize,
) {
    if stride != 1 || ow >= IM2COL_BELOW {
        return conv2d_forward_strided(
            input, bsz, cin, h, w, kernels, cout, bias, stride, padding, out, oh, ow,
        );
    }
    let n = bsz * oh * ow;
    let plane = oh * ow;
    let rows = cin * 9;
    let cols = im2col_stride1(input, bsz, cin, h, w, padding, oh, ow);
    let mut acc = vec![0.0f64; CONV_TILE.min(n)];
    for co in 0..cout {
        let kbase = co * rows;
        let mut t0 = 0;
        while t0 < n {
            let len = CONV_TILE.min(n - t0);
            let acc = &mut acc[..len];
            acc.fill(f64::from(bias[co]));
            for r in 0..rows {
                let wgt = f64::from(kernels[kbase + r]);
                let src = &cols[r * n + t0..][..len];
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += wgt * f64::from(*s);
                }
            }
            scatter_tile_to_out(acc, t0, out, co, cout, plane);
            t0 += len;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward_strided(
    input: &[f32],
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[f32],
    cout: usize,
    bias: &[f32],
    stride: usize,
    padding: usize,
    out: &mut [f32],
    oh: usize,
    ow: usize,
) {
    let mut acc = vec![0.0f64; oh * ow];
    for b in 0..bsz {
        for co in 0..cout {
            acc.fill(f64::from(bias[co]));
            for ci in 0..cin {
                let plane = &input[(b * cin + ci) * h * w..][..h * w];
                let kbase = (co * cin + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = f64::from(kernels[kbase + ky * 3 + kx]);
                        conv_accumulate_shifted(
                            &mut acc, plane, h, w, oh, ow, stride, padding, ky, kx, wgt,
                        );
                    }
                }
            }
            let dst = &mut out[(b * cout + co) * oh * ow..][..oh * ow];
            for (o, a) in dst.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input(
    dout: &[f32],
    bsz: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    kernels: &[f32],
    cin: usize,
    stride: usize,
    padding: usize,
    dinput: &mut [f32],
    h: usize,
    w: usize,
) {
    if stride != 1 || ow >= IM2COL_BELOW {
        return conv2d_backward_input_strided(
            dout, bsz, cout, oh, ow, kernels, cin, stride, padding, dinput, h, w,
        );
    }
    let n = bsz * oh * ow;
    let plane = oh * ow;
    let rows = cin * 9;
    // dcols = kernels^T (x) dout, then fold the patch rows back onto the
    // input with overlap-add.
    let mut dcols = vec![0.0f32; rows * n];
    let mut acc = vec![0.0f64; CONV_TILE.min(plane)];
    for b in 0..bsz {
        let mut p0 = 0;
        while p0 < plane {
            let len = CONV_TILE.min(plane - p0);
            for r in 0..rows {
                let acc = &mut acc[..len];
                acc.fill(0.0);
                for co in 0..cout {
                    let wgt = f64::from(kernels[co * rows + r]);
                    let src = &dout[(b * cout + co) * plane + p0..][..len];
                    for (a, s) in acc.iter_mut().zip(src) {
                        *a += wgt * f64::from(*s);
                    }
                }
                let dst = &mut dcols[r * n + b * plane + p0..][..len];
                for (d, a) in dst.iter_mut().zip(acc.iter()) {
                    *d = *a as f32;
                }
            }
            p0 += len;
        }
    }

    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ci * 3 + ky) * 3 + kx;
                let ox_lo = padding.saturating_sub(kx);
                let ox_hi = (w + padding).saturating_sub(kx).min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let x_lo = ox_lo + kx - padding;
                let len = ox_hi - ox_lo;
                let src_row = &dcols[r * n..(r + 1) * n];
                for b in 0..bsz {
                    let dst_plane = &mut dinput[(b * cin + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let y = (oy + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src = &src_row[b * plane + oy * ow + ox_lo..][..len];
                        let dst = &mut dst_plane[y as usize * w + x_lo..][..len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input_strided(
    dout: &[f32],
    bsz: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    kernels: &[f32],
    cin: usize,
    stride: usize,
    padding: usize,
    dinput: &mut [f32],
    h: usize,
    w: usize,
) {
    let mut acc = vec![0.0f64; h * w];
    for b in 0..bsz {
        for ci in 0..cin {
            acc.fill(0.0);
            for co in 0..cout {
                let dplane = &dout[(b * cout + co) * oh * ow..][..oh * ow];
                let kbase = (co * cin + ci) * 9;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = f64::from(kernels[kbase + ky * 3 + kx]);
                        scatter_shifted(
                            &mut acc, dplane, h, w, oh, ow, stride, padding, ky, kx, wgt,
                        );
                    }
                }
            }
            let dst = &mut dinput[(b * cin + ci) * h * w..][..h * w];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d += *a as f32;
            }
        }
    }
}

/// acc[y, x] += wgt * dplane[oy, ox] with y = oy*stride+ky-padding,
/// x = ox*stride+kx-padding, over the valid region.
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_shifted(
    acc: &mut [f64],
    dplane: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
    wgt: f64,
) {
    for oy in 0..oh {
        let y = (oy * stride + ky) as isize - padding as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        let drow = &dplane[oy * ow..oy * ow + ow];
        let arow = &mut acc[y as usize * w..y as usize * w + w];
        if stride == 1 {
            let ox_lo = padding.saturating_sub(kx);
            let ox_hi = (w + padding).saturating_sub(kx).min(ow);
            if ox_lo >= ox_hi {
                continue;
            }
            let x_lo = ox_lo + kx - padding;
            let dst = &mut arow[x_lo..x_lo + (ox_hi - ox_lo)];
            for (a, d) in dst.iter_mut().zip(&drow[ox_lo..ox_hi]) {
                *a += wgt * f64::from(*d);
            }
        } else {
            for (ox, d) in drow.iter().enumerate() {
                let x = (ox * stride + kx) as isize - padding as isize;
                if x >= 0 && x < w as isize {
                    arow[x as usize] += wgt * f64::from(*d);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_kernels(
    dout: &[f32],
    bsz: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    dkernels: &mut [f32],
    fault_scale: f32,
) {
    if stride != 1 || ow >= IM2COL_BELOW {
        return conv2d_backward_kernels_strided(
            dout, bsz, cout, oh, ow, input, cin, h, w, stride, padding, dkernels, fault_scale,
        );
    }
    let n = bsz * oh * ow;
    let plane = oh * ow;
    let rows = cin * 9;
    let cols = im2col_stride1(input, bsz, cin, h, w, padding, oh, ow);
    // dK = dout (x) cols^T, accumulated tile by tile in f64.
    let mut dk = vec![0.0f64; cout * rows];
    let mut t0 = 0;
    while t0 < n {
        let len = CONV_TILE.min(n - t0);
        for co in 0..cout {
            // Gather this channel's dout segment (it is strided by plane).
            for r in 0..rows {
                let src = &cols[r * n + t0..][..len];
                let mut acc = 0.0f64;
                let mut off = 0;
                while off < len {
                    let pos = t0 + off;
                    let b = pos / plane;
                    let p = pos % plane;
                    let chunk = (plane - p).min(len - off);
                    let d = &dout[(b * cout + co) * plane + p..][..chunk];
                    acc += dot_f32_f64(d, &src[off..off + chunk]);
                    off += chunk;
                }
                dk[co * rows + r] += acc;
            }
        }
        t0 += len;
    }
    for (d, a) in dkernels.iter_mut().zip(&dk) {
        *d += *a as f32 * fault_scale;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernels_strided(
    dout: &[f32],
    bsz: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    dkernels: &mut [f32],
    fault_scale: f32,
) {
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0f64;
                    for b in 0..bsz {
                        let dplane = &dout[(b * cout + co) * oh * ow..][..oh * ow];
                        let plane = &input[(b * cin + ci) * h * w..][..h * w];
                        acc += correlate_shifted(dplane, plane, h, w, oh, ow, stride, padding, ky, kx);
                    }
                    dkernels[(co * cin + ci) * 9 + ky * 3 + kx] += acc as f32 * fault_scale;
                }
            }
        }
    }
}

/// sum over (oy, ox) of dplane[oy, ox] * plane[oy*stride+ky-padding, ox*stride+kx-padding].
#[inline]
#[allow(clippy::too_many_arguments)]
fn correlate_shifted(
    dplane: &[f32],
    plane: &[f32],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) -> f64 {
    let mut acc = 0.0f64;
    for oy in 0..oh {
        let y = (oy * stride + ky) as isize - padding as isize;
        if y < 0 || y >= h as isize {
            continue;
        }
        let row = &plane[y as usize * w..y as usize * w + w];
        let drow = &dplane[oy * ow..oy * ow + ow];
        if stride == 1 {
            let ox_lo = padding.saturating_sub(kx);
            let ox_hi = (w + padding).saturating_sub(kx).min(ow);
            if ox_lo >= ox_hi {
                continue;
            }
            let x_lo = ox_lo + kx - padding;
            let src = &row[x_lo..x_lo + (ox_hi - ox_lo)];
            acc += dot_f32_f64(&drow[ox_lo..ox_hi], src);
        } else {
            for (ox, d) in drow.iter().enumerate() {
                let x = (ox * stride + kx) as isize - padding as isize;
                if x >= 0 && x < w as isize {
                    acc += f64::from(*d) * f64::from(row[x as usize]);
                }
            }
        }
    }
    acc
}

pub(crate) fn conv2d_backward_bias(
    dout: &[f32],
    bsz: usize,
    cout: usize,
    plane_len: usize,
    dbias: &mut [f32],
) {
    for co in 0..cout {
        let mut acc = 0.0f64;
        for b in 0..bsz {
            let dplane = &dout[(b * cout + co) * plane_len..][..plane_len];
            acc += dplane.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        dbias[co] += acc as f32;
    }
}

/// 2x2 max pooling with stride 2. Returns per-output flat indices into the
/// input buffer (first occurrence in scan order on ties).
pub(crate) fn maxpool2x2_forward(
    input: &[f32],
    bsz: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f32],
    argmax: &mut Vec<u32>,
) {
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.reserve(bsz * c * oh * ow);
    for bc in 0..bsz * c {
        let plane_base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = plane_base + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = input[best];
                for &i in &candidates[1..] {
                    if input[i] > best_v {
                        best_v = input[i];
                        best = i;
                    }
                }
                out[bc * oh * ow + oy * ow + ox] = best_v;
                argmax.push(best as u32);
            }
        }
    }
}

pub(crate) fn maxpool2x2_backward(dout: &[f32], argmax: &[u32], dinput: &mut [f32]) {
    for (g, &i) in dout.iter().zip(argmax) {
        dinput[i as usize] += *g;
    }
}

pub(crate) fn global_avg_pool_forward(
    input: &[f32],
    bsz: usize,
    c: usize,
    plane_len: usize,
    out: &mut [f32],
) {
    let inv = 1.0f64 / plane_len as f64;
    for bc in 0..bsz * c {
        let plane = &input[bc * plane_len..][..plane_len];
        let sum: f64 = plane.iter().map(|&v| f64::from(v)).sum();
        out[bc] = (sum * inv) as f32;
    }
}

pub(crate) fn global_avg_pool_backward(
    dout: &[f32],
    bsz: usize,
    c: usize,
    plane_len: usize,
    dinput: &mut [f32],
) {
    let inv = 1.0f64 / plane_len as f64;
    for bc in 0..bsz * c {
        let g = (f64::from(dout[bc]) * inv) as f32;
        for d in &mut dinput[bc * plane_len..][..plane_len] {
            *d += g;
        }
    }
}

pub(crate) fn dense_forward(
    input: &[f32],
    bsz: usize,
    n: usize,
    weight: &[f32],
    m: usize,
    bias: &[f32],
    out: &mut [f32],
) {
    for b in 0..bsz {
        let irow = &input[b * n..][..n];
        for j in 0..m {
            let wrow = &weight[j * n..][..n];
            out[b * m + j] = (f64::from(bias[j]) + dot_f32_f64(irow, wrow)) as f32;
        }
    }
}

pub(crate) fn dense_backward_input(
    dout: &[f32],
    bsz: usize,
    m: usize,
    weight: &[f32],
    n: usize,
    dinput: &mut [f32],
) {
    let mut acc = vec![0.0f64; n];
    for b in 0..bsz {
        acc.fill(0.0);
        for j in 0..m {
            let g = f64::from(dout[b * m + j]);
            let wrow = &weight[j * n..][..n];
            for (a, wv) in acc.iter_mut().zip(wrow) {
                *a += g * f64::from(*wv);
            }
        }
        for (d, a) in dinput[b * n..][..n].iter_mut().zip(&acc) {
            *d += *a as f32;
        }
    }
}

pub(crate) fn dense_backward_weight(
    dout: &[f32],
    bsz: usize,
    m: usize,
    input: &[f32],
    n: usize,
    dweight: &mut [f32],
) {
    let mut acc = vec![0.0f64; n];
    for j in 0..m {
        acc.fill(0.0);
        for b in 0..bsz {
            let g = f64::from(dout[b * m + j]);
            let irow = &input[b * n..][..n];
            for (a, x) in acc.iter_mut().zip(irow) {
                *a += g * f64::from(*x);
            }
        }
        for (d, a) in dweight[j * n..][..n].iter_mut().zip(&acc) {
            *d += *a as f32;
        }
    }
}

pub(crate) fn dense_backward_bias(dout: &[f32], bsz: usize, m: usize, dbias: &mut [f32]) {
    for j in 0..m {
        let mut acc = 0.0f64;
        for b in 0..bsz {
            acc += f64::from(dout[b * m + j]);
        }
        dbias[j] += acc as f32;
    }
}

pub(crate) fn relu_forward(input: &[f32], out: &mut [f32]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = x.max(0.0);
    }
}

/// Subgradient at exactly 0 is 0.
pub(crate) fn relu_backward(dout: &[f32], input: &[f32], dinput: &mut [f32]) {
    for ((d, &g), &x) in dinput.iter_mut().zip(dout).zip(input) {
        if x > 0.0 {
            *d += g;
        }
    }
}

/// Row-stabilized softmax probabilities plus mean cross-entropy loss.
pub(crate) fn softmax_cross_entropy_forward(
    logits: &[f32],
    bsz: usize,
    classes: usize,
    labels: &[usize],
    probs: &mut [f32],
) -> f32 {
    let mut loss = 0.0f64;
    for b in 0..bsz {
        let row = &logits[b * classes..][..classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (p, &z) in probs[b * classes..][..classes].iter_mut().zip(row) {
            let e = f64::from(z - max).exp();
            *p = e as f32;
            sum += e;
        }
        for p in &mut probs[b * classes..][..classes] {
            *p = (f64::from(*p) / sum) as f32;
        }
        loss += sum.ln() - f64::from(row[labels[b]] - max);
    }
    (loss / bsz as f64) as f32
}

pub(crate) fn softmax_cross_entropy_backward(
    g: f32,
    probs: &[f32],
    bsz: usize,
    classes: usize,
    labels: &[usize],
    dlogits: &mut [f32],
) {
    let scale = f64::from(g) / bsz as f64;
    for b in 0..bsz {
        for j in 0..classes {
            let indicator = if labels[b] == j { 1.0 } else { 0.0 };
            dlogits[b * classes + j] +=
                (scale * (f64::from(probs[b * classes + j]) - indicator)) as f32;
        }
    }
}

pub(crate) fn sum_all(input: &[f32]) -> f32 {
    input.iter().map(|&v| f64::from(v)).sum::<f64>() as f32
}
