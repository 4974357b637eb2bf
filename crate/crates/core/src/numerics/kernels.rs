//! Dense kernels behind the graph ops. All layouts are row-major; images are NCHW.

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the strides can reach.
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
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let l = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns `(output, im2col buffers)`; the buffers are reused by the backward pass.
pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (rows, l) = (g.rows(), g.cols());
    let mut cols = vec![0.0; g.n * rows * l];
    let mut y = vec![0.0; g.n * g.o * l];
    let in_size = g.c * g.h * g.w;
    for n in 0..g.n {
        let col = &mut cols[n * rows * l..(n + 1) * rows * l];
        im2col(g, &x[n * in_size..(n + 1) * in_size], col);
        let out = &mut y[n * g.o * l..(n + 1) * g.o * l];
        for (o, chunk) in out.chunks_mut(l).enumerate() {
            chunk.fill(b[o]);
        }
        gemm(g.o, rows, l, w, false, col, false, 1.0, out);
    }
    (y, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient if asked.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    cols: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (rows, l) = (g.rows(), g.cols());
    let in_size = g.c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_size]);
    let mut dcol = vec![0.0; if want_dx { rows * l } else { 0 }];
    for n in 0..g.n {
        let dy_n = &dy[n * g.o * l..(n + 1) * g.o * l];
        let col = &cols[n * rows * l..(n + 1) * rows * l];
        gemm(g.o, l, rows, dy_n, false, col, true, 1.0, dw);
        for (o, chunk) in dy_n.chunks(l).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, g.o, l, w, true, dy_n, false, 0.0, &mut dcol);
            col2im(g, &dcol, &mut dx[n * in_size..(n + 1) * in_size]);
        }
    }
    dx
}

/// Non-overlapping `size x size` max pooling. Returns output and argmax offsets.
pub(crate) fn maxpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / size, w / size);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}
