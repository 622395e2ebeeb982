//! Dense loops behind the convolution ops. All loops visit elements in a
//! fixed order, so results are bit-reproducible on a given machine.

// `fma!` expands to `a * b + c`; spelling it `+=` would hide the macro
#![allow(clippy::assign_op_pattern)]

use std::sync::OnceLock;

fn has_fma() -> bool {
    static FMA: OnceLock<bool> = OnceLock::new();
    *FMA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

macro_rules! dispatch {
    ($(#[$m:meta])* fn $name:ident($($arg:ident : $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        #[inline]
        pub fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn fast($($arg: $ty),*) $(-> $ret)? {
                    #[allow(unused_macros)]
                    macro_rules! fma { ($a:expr, $b:expr, $c:expr) => { f64::mul_add($a, $b, $c) } }
                    $body
                }
                if has_fma() {
                    // SAFETY: the CPU supports the enabled features.
                    return unsafe { fast($($arg),*) };
                }
            }
            #[allow(unused_macros)]
            macro_rules! fma { ($a:expr, $b:expr, $c:expr) => { $a * $b + $c } }
            $body
        }
    };
}

dispatch! {
    /// `y[i] += a · x[i]`
    fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = fma!(a, xi, *yi);
        }
    }
}

dispatch! {
    /// `y[i] += w0·x[i−1] + w1·x[i] + w2·x[i+1]` with zero padding: the three
    /// taps of one kernel row fused into a single pass.
    fn row3(y: &mut [f64], x: &[f64], w0: f64, w1: f64, w2: f64) {
        let n = y.len();
        if n == 1 {
            y[0] = fma!(w1, x[0], y[0]);
            return;
        }
        y[0] = fma!(w2, x[1], fma!(w1, x[0], y[0]));
        let (a, b, c) = (&x[..n - 2], &x[1..n - 1], &x[2..n]);
        for (((yi, &p), &q), &r) in y[1..n - 1].iter_mut().zip(a).zip(b).zip(c) {
            *yi = fma!(w2, r, fma!(w1, q, fma!(w0, p, *yi)));
        }
        y[n - 1] = fma!(w1, x[n - 1], fma!(w0, x[n - 2], y[n - 1]));
    }
}

dispatch! {
    /// `y[i] += a · x[start + step·i]`
    fn axpy_gather(y: &mut [f64], a: f64, x: &[f64], start: usize, step: usize) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = fma!(a, x[start + step * i], *yi);
        }
    }
}

dispatch! {
    /// `y[start + step·i] += a · x[i]`
    fn axpy_scatter(y: &mut [f64], start: usize, step: usize, a: f64, x: &[f64]) {
        for (i, &xi) in x.iter().enumerate() {
            let t = &mut y[start + step * i];
            *t = fma!(a, xi, *t);
        }
    }
}

dispatch! {
    /// `Σ x[i] · y[i]` with eight interleaved partial sums.
    fn dot(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len().min(y.len());
        let mut acc = [0.0f64; 8];
        let chunks = n / 8;
        for c in 0..chunks {
            let xs = &x[8 * c..8 * c + 8];
            let ys = &y[8 * c..8 * c + 8];
            for l in 0..8 {
                acc[l] = fma!(xs[l], ys[l], acc[l]);
            }
        }
        let mut tail = 0.0;
        for i in 8 * chunks..n {
            tail = fma!(x[i], y[i], tail);
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }
}

dispatch! {
    /// The three shifted products `Σ d[i]·x[i−1]`, `Σ d[i]·x[i]`,
    /// `Σ d[i]·x[i+1]` (zero padded) in one pass, four lanes each.
    fn dot3(d: &[f64], x: &[f64]) -> [f64; 3] {
        let n = d.len();
        if n == 1 {
            return [0.0, d[0] * x[0], 0.0];
        }
        let mut acc = [[0.0f64; 4]; 3];
        let inner = n - 2;
        let chunks = inner / 4;
        for c in 0..chunks {
            let base = 1 + 4 * c;
            for l in 0..4 {
                let i = base + l;
                let di = d[i];
                acc[0][l] = fma!(di, x[i - 1], acc[0][l]);
                acc[1][l] = fma!(di, x[i], acc[1][l]);
                acc[2][l] = fma!(di, x[i + 1], acc[2][l]);
            }
        }
        let lanes = |a: [f64; 4]| (a[0] + a[2]) + (a[1] + a[3]);
        let mut out = [lanes(acc[0]), lanes(acc[1]), lanes(acc[2])];
        for i in 1 + 4 * chunks..n - 1 {
            out[0] = fma!(d[i], x[i - 1], out[0]);
            out[1] = fma!(d[i], x[i], out[1]);
            out[2] = fma!(d[i], x[i + 1], out[2]);
        }
        out[1] = fma!(d[0], x[0], out[1]);
        out[2] = fma!(d[0], x[1], out[2]);
        out[0] = fma!(d[n - 1], x[n - 2], out[0]);
        out[1] = fma!(d[n - 1], x[n - 1], out[1]);
        out
    }
}

dispatch! {
    /// Stride-2 row correlation: `y[o] += w0·x[2o−1] + w1·x[2o] + w2·x[2o+1]`.
    fn row3_s2(y: &mut [f64], x: &[f64], w0: f64, w1: f64, w2: f64) {
        let n = x.len();
        for (o, yo) in y.iter_mut().enumerate() {
            let i = 2 * o;
            let mut acc = fma!(w1, x[i], *yo);
            if i >= 1 {
                acc = fma!(w0, x[i - 1], acc);
            }
            if i + 1 < n {
                acc = fma!(w2, x[i + 1], acc);
            }
            *yo = acc;
        }
    }
}

dispatch! {
    /// Adjoint of [`row3_s2`]: `y[2o+k−1] += w_k·x[o]`.
    fn row3_s2_adj(y: &mut [f64], x: &[f64], w0: f64, w1: f64, w2: f64) {
        let n = y.len();
        for (o, &xo) in x.iter().enumerate() {
            let i = 2 * o;
            if i >= 1 {
                y[i - 1] = fma!(w0, xo, y[i - 1]);
            }
            y[i] = fma!(w1, xo, y[i]);
            if i + 1 < n {
                y[i + 1] = fma!(w2, xo, y[i + 1]);
            }
        }
    }
}

dispatch! {
    /// `Σ_o d[o]·x[2o+k−1]` for k = 0, 1, 2.
    fn dot3_s2(d: &[f64], x: &[f64]) -> [f64; 3] {
        let n = x.len();
        let mut out = [0.0; 3];
        for (o, &dv) in d.iter().enumerate() {
            let i = 2 * o;
            if i >= 1 {
                out[0] = fma!(dv, x[i - 1], out[0]);
            }
            out[1] = fma!(dv, x[i], out[1]);
            if i + 1 < n {
                out[2] = fma!(dv, x[i + 1], out[2]);
            }
        }
        out
    }
}

dispatch! {
    /// `Σ x[i] · y[start + step·i]`
    fn dot_gather(x: &[f64], y: &[f64], start: usize, step: usize) -> f64 {
        let mut acc = [0.0f64; 4];
        for (i, &xi) in x.iter().enumerate() {
            acc[i % 4] = fma!(xi, y[start + step * i], acc[i % 4]);
        }
        (acc[0] + acc[2]) + (acc[1] + acc[3])
    }
}

/// Geometry of one convolution: `x [c_in, d, h, w]`, `w [c_out, c_in, k, k, k]`,
/// zero padding `(k − 1) / 2`, output `ceil(dim / stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub input: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        self.input.map(|d| d.div_ceil(self.stride))
    }

    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }

    /// Output index range along one axis for kernel tap `t`, with the
    /// matching first input index.
    fn span(&self, axis: usize, t: usize) -> Option<(usize, usize, usize)> {
        let n_in = self.input[axis] as isize;
        let n_out = self.output()[axis] as isize;
        let s = self.stride as isize;
        let off = t as isize - self.pad();
        // need 0 ≤ o·s + off < n_in
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n_in - off + s - 1) / s).min(n_out);
        (lo < hi).then(|| (lo as usize, hi as usize, (lo * s + off) as usize))
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output().iter().product()
    }

    /// Column spans for each kernel tap along the row axis.
    fn col_spans(&self) -> Vec<Option<(usize, usize, usize)>> {
        (0..self.k).map(|t| self.span(2, t)).collect()
    }

    /// Input index along `axis` feeding output `o` through tap `t`.
    fn in_index(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad();
        (i >= 0 && i < self.input[axis] as isize).then_some(i as usize)
    }

    /// Calls `f(out_row, in_row, kz, ky)` for every output row and every
    /// in-bounds input row it reads; offsets are plane-relative.
    fn for_row_pairs(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, ih, iw] = self.input;
        let [od, oh, ow] = self.output();
        for oz in 0..od {
            for oy in 0..oh {
                let orow = (oz * oh + oy) * ow;
                for kz in 0..self.k {
                    let Some(iz) = self.in_index(0, oz, kz) else { continue };
                    for ky in 0..self.k {
                        let Some(iy) = self.in_index(1, oy, ky) else { continue };
                        f(orow, (iz * ih + iy) * iw, kz, ky);
                    }
                }
            }
        }
    }

    fn weight_index(&self, f: usize, c: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((f * self.c_in + c) * self.k + kz) * self.k + ky) * self.k + kx
    }
}

/// `out += conv(x, w)` for one sample.
pub fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (ip, op, st) = (g.in_plane(), g.out_plane(), g.stride);
    let cols = g.col_spans();
    let (fused, iw, ow) = (g.k == 3, g.input[2], g.output()[2]);
    for f in 0..g.c_out {
        let o = &mut out[f * op..(f + 1) * op];
        for c in 0..g.c_in {
            let xc = &x[c * ip..(c + 1) * ip];
            g.for_row_pairs(|orow, irow, kz, ky| {
                if fused {
                    let t = g.weight_index(f, c, kz, ky, 0);
                    let (dst, src) = (&mut o[orow..orow + ow], &xc[irow..irow + iw]);
                    if st == 1 {
                        row3(dst, src, w[t], w[t + 1], w[t + 2]);
                    } else {
                        row3_s2(dst, src, w[t], w[t + 1], w[t + 2]);
                    }
                    return;
                }
                for (kx, span) in cols.iter().enumerate() {
                    let Some((lo, hi, ix0)) = *span else { continue };
                    let wv = w[g.weight_index(f, c, kz, ky, kx)];
                    let dst = &mut o[orow + lo..orow + hi];
                    if st == 1 {
                        axpy(dst, wv, &xc[irow + ix0..irow + ix0 + (hi - lo)]);
                    } else {
                        axpy_gather(dst, wv, xc, irow + ix0, st);
                    }
                }
            });
        }
    }
}

/// `dx += convᵀ(dout, w)`: the adjoint of [`conv_forward`] in `x`.
pub fn conv_backward_data(g: &ConvGeom, dout: &[f64], w: &[f64], dx: &mut [f64]) {
    let (ip, op, st) = (g.in_plane(), g.out_plane(), g.stride);
    let cols = g.col_spans();
    let (fused, iw, ow) = (g.k == 3, g.input[2], g.output()[2]);
    for c in 0..g.c_in {
        let dxc = &mut dx[c * ip..(c + 1) * ip];
        for f in 0..g.c_out {
            let d = &dout[f * op..(f + 1) * op];
            g.for_row_pairs(|orow, irow, kz, ky| {
                if fused {
                    let t = g.weight_index(f, c, kz, ky, 0);
                    let (dst, src) = (&mut dxc[irow..irow + iw], &d[orow..orow + ow]);
                    if st == 1 {
                        // the adjoint of a row correlation flips the taps
                        row3(dst, src, w[t + 2], w[t + 1], w[t]);
                    } else {
                        row3_s2_adj(dst, src, w[t], w[t + 1], w[t + 2]);
                    }
                    return;
                }
                for (kx, span) in cols.iter().enumerate() {
                    let Some((lo, hi, ix0)) = *span else { continue };
                    let wv = w[g.weight_index(f, c, kz, ky, kx)];
                    let src = &d[orow + lo..orow + hi];
                    if st == 1 {
                        axpy(&mut dxc[irow + ix0..irow + ix0 + (hi - lo)], wv, src);
                    } else {
                        axpy_scatter(dxc, irow + ix0, st, wv, src);
                    }
                }
            });
        }
    }
}

/// `dw += ∂⟨dout, conv(x, w)⟩/∂w`.
pub fn conv_backward_weight(g: &ConvGeom, dout: &[f64], x: &[f64], dw: &mut [f64]) {
    let (ip, op, k, st) = (g.in_plane(), g.out_plane(), g.k, g.stride);
    let cols = g.col_spans();
    let (fused, iw, ow) = (g.k == 3, g.input[2], g.output()[2]);
    let mut acc = vec![0.0; k * k * k];
    for f in 0..g.c_out {
        let d = &dout[f * op..(f + 1) * op];
        for c in 0..g.c_in {
            let xc = &x[c * ip..(c + 1) * ip];
            acc.iter_mut().for_each(|a| *a = 0.0);
            g.for_row_pairs(|orow, irow, kz, ky| {
                if fused {
                    let (src, xr) = (&d[orow..orow + ow], &xc[irow..irow + iw]);
                    let s3 = if st == 1 { dot3(src, xr) } else { dot3_s2(src, xr) };
                    let t = (kz * k + ky) * k;
                    for (a, v) in acc[t..t + 3].iter_mut().zip(s3) {
                        *a += v;
                    }
                    return;
                }
                for (kx, span) in cols.iter().enumerate() {
                    let Some((lo, hi, ix0)) = *span else { continue };
                    let src = &d[orow + lo..orow + hi];
                    acc[(kz * k + ky) * k + kx] += if st == 1 {
                        dot(src, &xc[irow + ix0..irow + ix0 + (hi - lo)])
                    } else {
                        dot_gather(src, xc, irow + ix0, st)
                    };
                }
            });
            for (t, a) in acc.iter().enumerate() {
                dw[g.weight_index(f, c, 0, 0, 0) + t] += a;
            }
        }
    }
}
