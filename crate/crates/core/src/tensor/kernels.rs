//! Raw numeric kernels over flat f64 slices.
//!
//! Both the autodiff graph ops and the frozen (no-grad) forward paths call
//! these, so differentiated and cached computations agree exactly.

/// Geometry of a 2D convolution. `n` is the batch size (1 for rank-3 input).
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.n * self.co * self.out_h() * self.out_w()
    }
}

/// Zero-padded cross-correlation; `out` must be zeroed, length `g.out_len()`.
pub fn conv2d_fwd(g: ConvGeom, x: &[f64], wgt: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for nb in 0..g.n {
        for co in 0..g.co {
            let b = bias.map_or(0.0, |b| b[co]);
            let out_plane = &mut out[((nb * g.co + co) * oh) * ow..][..oh * ow];
            if b != 0.0 {
                out_plane.iter_mut().for_each(|o| *o += b);
            }
            for ci in 0..g.ci {
                let x_plane = &x[((nb * g.ci + ci) * g.h) * g.w..][..g.h * g.w];
                let w_base = ((co * g.ci + ci) * g.kh) * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wgt[w_base + ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * g.w..][..g.w];
                            let o_row = &mut out_plane[oy * ow..][..ow];
                            for ox in 0..ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                o_row[ox] += wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates conv2d gradients into whichever of `gx`, `gw`, `gb` is given.
pub fn conv2d_bwd(
    g: ConvGeom,
    x: &[f64],
    wgt: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for nb in 0..g.n {
        for co in 0..g.co {
            let go_plane = &gout[((nb * g.co + co) * oh) * ow..][..oh * ow];
            if let Some(gb) = gb.as_deref_mut() {
                gb[co] += go_plane.iter().sum::<f64>();
            }
            for ci in 0..g.ci {
                let x_base = ((nb * g.ci + ci) * g.h) * g.w;
                let w_base = ((co * g.ci + ci) * g.kh) * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wgt[w_base + ky * g.kw + kx];
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row = x_base + iy as usize * g.w;
                            let go_row = &go_plane[oy * ow..][..ow];
                            for ox in 0..ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let gov = go_row[ox];
                                wacc += gov * x[row + ix as usize];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[row + ix as usize] += gov * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[w_base + ky * g.kw + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..][..k];
        let o_row = &mut out[i * n..][..n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..][..n];
            for j in 0..n {
                o_row[j] += aik * b_row[j];
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,n]`, `b: [k,n]`, `out: [m,k]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..][..n];
        let o_row = &mut out[i * k..][..k];
        for kk in 0..k {
            let b_row = &b[kk * n..][..n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            o_row[kk] += acc;
        }
    }
}

/// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..][..k];
        let b_row = &b[i * n..][..n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let o_row = &mut out[kk * n..][..n];
            for j in 0..n {
                o_row[j] += aik * b_row[j];
            }
        }
    }
}

/// Source coordinate for corner-aligned resampling: endpoints map to endpoints.
#[inline]
fn src_coord(o: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len <= 1 {
        0.0
    } else {
        o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Corner-aligned bilinear resize of `c` planes of `h*w` into `oh*ow`.
pub fn bilinear_fwd(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    for ch in 0..c {
        let xp = &x[ch * h * w..][..h * w];
        let op = &mut out[ch * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let sy = src_coord(oy, oh, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..ow {
                let sx = src_coord(ox, ow, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                op[oy * ow + ox] = (1.0 - fy) * (1.0 - fx) * xp[y0 * w + x0]
                    + (1.0 - fy) * fx * xp[y0 * w + x1]
                    + fy * (1.0 - fx) * xp[y1 * w + x0]
                    + fy * fx * xp[y1 * w + x1];
            }
        }
    }
}

/// Scatters resize gradients back through the same four-tap weights.
pub fn bilinear_bwd(gout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, gx: &mut [f64]) {
    for ch in 0..c {
        let gp = &gout[ch * oh * ow..][..oh * ow];
        let gxp = &mut gx[ch * h * w..][..h * w];
        for oy in 0..oh {
            let sy = src_coord(oy, oh, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..ow {
                let sx = src_coord(ox, ow, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let g = gp[oy * ow + ox];
                gxp[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                gxp[y0 * w + x1] += (1.0 - fy) * fx * g;
                gxp[y1 * w + x0] += fy * (1.0 - fx) * g;
                gxp[y1 * w + x1] += fy * fx * g;
            }
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
