//! Forward and backward numeric kernels shared by the tape ops.

/// Splits a shape around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_b(g: &[f64], a: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_len: usize,
    pub out_ch: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv1dGeom {
    /// Range of output positions `t` for which `t*stride + offset` lands inside `[0, in_len)`.
    fn valid_range(&self, offset: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi_excl = {
            let limit = self.in_len as isize - offset;
            if limit <= 0 {
                0
            } else {
                ((limit - 1) / s + 1).min(self.out_len as isize)
            }
        };
        (lo as usize, hi_excl.max(lo) as usize)
    }
}

/// Grouped, dilated, strided 1-D cross-correlation with symmetric zero padding.
/// `x: [B, Cin, L]`, `w: [Cout, Cin/groups, K]`, `out: [B, Cout, Lout]`.
pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Conv1dGeom) -> Vec<f64> {
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_len];
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            let grp = co / cout_g;
            let orow = &mut out[(b * g.out_ch + co) * g.out_len..(b * g.out_ch + co + 1) * g.out_len];
            if let Some(bias) = bias {
                orow.iter_mut().for_each(|v| *v = bias[co]);
            }
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let xrow = &x[(b * g.in_ch + ci) * g.in_len..(b * g.in_ch + ci + 1) * g.in_len];
                for k in 0..g.kernel {
                    let wv = w[(co * cin_g + cig) * g.kernel + k];
                    let offset = (k * g.dilation) as isize - g.padding as isize;
                    let (lo, hi) = g.valid_range(offset);
                    if g.stride == 1 {
                        let start = (lo as isize + offset) as usize;
                        let src = &xrow[start..start + (hi - lo)];
                        for (o, &xv) in orow[lo..hi].iter_mut().zip(src) {
                            *o += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            let xi = (t as isize * g.stride as isize + offset) as usize;
                            orow[t] += wv * xrow[xi];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and weight gradients of [`conv1d_forward`].
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Conv1dGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    for b in 0..g.batch {
        for co in 0..g.out_ch {
            let grp = co / cout_g;
            let grow = &grad[(b * g.out_ch + co) * g.out_len..(b * g.out_ch + co + 1) * g.out_len];
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let xbase = (b * g.in_ch + ci) * g.in_len;
                for k in 0..g.kernel {
                    let widx = (co * cin_g + cig) * g.kernel + k;
                    let offset = (k * g.dilation) as isize - g.padding as isize;
                    let (lo, hi) = g.valid_range(offset);
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        for t in lo..hi {
                            let xi = (t as isize * g.stride as isize + offset) as usize;
                            dx[xbase + xi] += wv * grow[t];
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut s = 0.0;
                        for t in lo..hi {
                            let xi = (t as isize * g.stride as isize + offset) as usize;
                            s += x[xbase + xi] * grow[t];
                        }
                        dw[widx] += s;
                    }
                }
            }
        }
    }
}

/// Transposed 1-D convolution. `x: [B, Cin, Lin]`, `w: [Cin, Cout, K]`, `out: [B, Cout, Lout]`
/// with `Lout = (Lin-1)*stride - 2*padding + dilation*(K-1) + 1`.
pub(crate) fn conv1d_transpose_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &Conv1dGeom,
) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_len];
    for b in 0..g.batch {
        if let Some(bias) = bias {
            for co in 0..g.out_ch {
                out[(b * g.out_ch + co) * g.out_len..(b * g.out_ch + co + 1) * g.out_len]
                    .iter_mut()
                    .for_each(|v| *v = bias[co]);
            }
        }
        for ci in 0..g.in_ch {
            let xrow = &x[(b * g.in_ch + ci) * g.in_len..(b * g.in_ch + ci + 1) * g.in_len];
            for co in 0..g.out_ch {
                let obase = (b * g.out_ch + co) * g.out_len;
                for k in 0..g.kernel {
                    let wv = w[(ci * g.out_ch + co) * g.kernel + k];
                    for (i, &xv) in xrow.iter().enumerate() {
                        let pos = (i * g.stride + k * g.dilation) as isize - g.padding as isize;
                        if pos >= 0 && (pos as usize) < g.out_len {
                            out[obase + pos as usize] += wv * xv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_transpose_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &Conv1dGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        for ci in 0..g.in_ch {
            let xbase = (b * g.in_ch + ci) * g.in_len;
            for co in 0..g.out_ch {
                let gbase = (b * g.out_ch + co) * g.out_len;
                for k in 0..g.kernel {
                    let widx = (ci * g.out_ch + co) * g.kernel + k;
                    let wv = w[widx];
                    let mut s = 0.0;
                    for i in 0..g.in_len {
                        let pos = (i * g.stride + k * g.dilation) as isize - g.padding as isize;
                        if pos >= 0 && (pos as usize) < g.out_len {
                            let gv = grad[gbase + pos as usize];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xbase + i] += wv * gv;
                            }
                            s += x[xbase + i] * gv;
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += s;
                    }
                }
            }
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
