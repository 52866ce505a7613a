//! Numeric kernels behind the graph ops. Shapes are validated by the graph
//! before these are called.

use crate::tensor::Tensor;

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub(crate) fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = matmul(x, w);
    let m = b.numel();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % m];
    }
    y
}

/// `[n, m] -> [m]`
pub(crate) fn sum_rows(a: &Tensor) -> Tensor {
    let m = a.shape()[1];
    let mut out = vec![0.0; m];
    for (i, &v) in a.data().iter().enumerate() {
        out[i % m] += v;
    }
    Tensor::from_parts(vec![m], out)
}

/// `[m] -> [n, m]`
pub(crate) fn broadcast_rows(a: &Tensor, n: usize) -> Tensor {
    let m = a.numel();
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(a.data());
    }
    Tensor::from_parts(vec![n, m], out)
}

/// `[n, c] -> [n]`
pub(crate) fn sum_cols(a: &Tensor) -> Tensor {
    let (n, c) = (a.shape()[0], a.shape()[1]);
    let out = (0..n).map(|i| a.data()[i * c..(i + 1) * c].iter().sum()).collect();
    Tensor::from_parts(vec![n], out)
}

/// `[n] -> [n, c]`
pub(crate) fn broadcast_cols(a: &Tensor, c: usize) -> Tensor {
    let n = a.numel();
    let mut out = Vec::with_capacity(n * c);
    for &v in a.data() {
        out.extend(std::iter::repeat_n(v, c));
    }
    Tensor::from_parts(vec![n, c], out)
}

pub(crate) fn softmax_rows(z: &Tensor) -> Tensor {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &z.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= total;
        }
    }
    Tensor::from_parts(vec![n, c], out)
}

/// Mean over rows of `logsumexp(z_i) - z_i[label_i]`.
pub(crate) fn softmax_cross_entropy(z: &Tensor, labels: &[usize]) -> f64 {
    let c = z.shape()[1];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &z.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        out[i * classes + y] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], out)
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

/// Valid (no padding), stride-1 cross-correlation.
/// `x: [n, ci, h, w]`, `k: [co, ci, kh, kw]` -> `[n, co, h-kh+1, w-kw+1]`.
pub(crate) fn conv2d(x: &Tensor, k: &Tensor) -> Tensor {
    let (n, ci, h, w) = dims4(x.shape());
    let (co, _, kh, kw) = dims4(k.shape());
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for p in 0..kh {
                    for q in 0..kw {
                        let kv = kd[((o * ci + c) * kh + p) * kw + q];
                        for i in 0..ho {
                            let xrow = xbase + (i + p) * w + q;
                            let orow = obase + i * wo;
                            for j in 0..wo {
                                out[orow + j] += kv * xd[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, co, ho, wo], out)
}

/// Adjoint of [`conv2d`] in its input: `g: [n, co, ho, wo]` -> `[n, ci, h, w]`.
pub(crate) fn conv2d_input_grad(g: &Tensor, k: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, ci, h, w) = dims4(x_shape);
    let (co, _, kh, kw) = dims4(k.shape());
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let (gd, kd) = (g.data(), k.data());
    let mut out = vec![0.0; n * ci * h * w];
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for p in 0..kh {
                    for q in 0..kw {
                        let kv = kd[((o * ci + c) * kh + p) * kw + q];
                        for i in 0..ho {
                            let xrow = xbase + (i + p) * w + q;
                            let grow = gbase + i * wo;
                            for j in 0..wo {
                                out[xrow + j] += kv * gd[grow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), out)
}

/// Adjoint of [`conv2d`] in its kernel: `(x, g)` -> `[co, ci, kh, kw]`.
pub(crate) fn conv2d_kernel_grad(x: &Tensor, g: &Tensor, k_shape: &[usize]) -> Tensor {
    let (n, ci, h, w) = dims4(x.shape());
    let (co, _, kh, kw) = dims4(k_shape);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let (xd, gd) = (x.data(), g.data());
    let mut out = vec![0.0; co * ci * kh * kw];
    for b in 0..n {
        for o in 0..co {
            let gbase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for p in 0..kh {
                    for q in 0..kw {
                        let mut acc = 0.0;
                        for i in 0..ho {
                            let xrow = xbase + (i + p) * w + q;
                            let grow = gbase + i * wo;
                            for j in 0..wo {
                                acc += gd[grow + j] * xd[xrow + j];
                            }
                        }
                        out[((o * ci + c) * kh + p) * kw + q] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(k_shape.to_vec(), out)
}

/// Non-overlapping `k x k` average pooling.
pub(crate) fn avg_pool2d(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = dims4(x.shape());
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out[plane * ho * wo + (i / k) * wo + j / k] += x.data()[plane * h * w + i * w + j] * inv;
            }
        }
    }
    Tensor::from_parts(vec![n, c, ho, wo], out)
}

/// Adjoint of [`avg_pool2d`].
pub(crate) fn avg_pool2d_adjoint(g: &Tensor, k: usize) -> Tensor {
    let (n, c, ho, wo) = dims4(g.shape());
    let (h, w) = (ho * k, wo * k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out[plane * h * w + i * w + j] = g.data()[plane * ho * wo + (i / k) * wo + j / k] * inv;
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], out)
}
