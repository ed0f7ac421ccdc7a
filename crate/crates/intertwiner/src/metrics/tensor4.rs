use crate::error::{Error, Result};
use crate::metrics::lsa::linear_sum_assignment;
use crate::numerics::linalg::svd_square;
use crate::numerics::Matrix;

/// N×C×H×W hidden-feature data. Similarity is computed up to channel
/// permutation and scaling only; spatial coordinates are never mixed, so
/// the tensor cannot simply be flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureTensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        FeatureTensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(
                "FeatureTensor4",
                format!("{} values for {n}x{c}x{h}x{w}", data.len()),
            ));
        }
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("FeatureTensor4", "zero dimension"));
        }
        Ok(FeatureTensor4 { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[((i * self.c + ch) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, i: usize, ch: usize, y: usize, x: usize, v: f64) {
        self.data[((i * self.c + ch) * self.h + y) * self.w + x] = v;
    }

    /// Reorder channels: output channel j comes from input channel perm[j].
    pub fn permute_channels(&self, perm: &[usize]) -> Result<FeatureTensor4> {
        if perm.len() != self.c {
            return Err(Error::shape("permute_channels", "perm length"));
        }
        let mut out = FeatureTensor4::zeros(self.n, self.c, self.h, self.w);
        for i in 0..self.n {
            for j in 0..self.c {
                for y in 0..self.h {
                    for x in 0..self.w {
                        out.set(i, j, y, x, self.get(i, perm[j], y, x));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn channel_norms(t: &FeatureTensor4) -> Vec<f64> {
    let (n, c, h, w) = t.dims();
    let mut norms = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.get(i, ch, y, x);
                    norms[ch] += v * v;
                }
            }
        }
    }
    norms.into_iter().map(f64::sqrt).collect()
}

/// Divide each channel by its norm over all other axes (no centering).
pub fn channel_scale_normalize(t: &FeatureTensor4) -> Result<FeatureTensor4> {
    let norms = channel_norms(t);
    if let Some(ch) = norms.iter().position(|&x| x <= 1e-12) {
        return Err(Error::ZeroColumn(ch));
    }
    let (n, c, h, w) = t.dims();
    let mut out = t.clone();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(i, ch, y, x, t.get(i, ch, y, x) / norms[ch]);
                }
            }
        }
    }
    Ok(out)
}

/// Subtract each channel's mean over all other axes, then divide by the
/// centered channel norm.
pub fn channel_center_normalize(t: &FeatureTensor4) -> Result<FeatureTensor4> {
    let (n, c, h, w) = t.dims();
    let count = (n * h * w) as f64;
    let mut means = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    means[ch] += t.get(i, ch, y, x);
                }
            }
        }
    }
    for m in means.iter_mut() {
        *m /= count;
    }
    let mut centered = t.clone();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    centered.set(i, ch, y, x, t.get(i, ch, y, x) - means[ch]);
                }
            }
        }
    }
    channel_scale_normalize(&centered)
}

/// C×C cross-Gram summed over example and spatial axes:
/// `G[c, c'] = Σ_{n,h,w} X[n,c,h,w] · Y[n,c',h,w]`.
pub fn channel_gram(x: &FeatureTensor4, y: &FeatureTensor4) -> Result<Matrix> {
    let (nx, cx, hx, wx) = x.dims();
    let (ny, cy, hy, wy) = y.dims();
    if nx != ny || hx != hy || wx != wy {
        return Err(Error::shape(
            "channel_gram",
            format!("{nx}x{cx}x{hx}x{wx} vs {ny}x{cy}x{hy}x{wy}"),
        ));
    }
    let mut g = Matrix::zeros(cx, cy);
    for i in 0..nx {
        for c1 in 0..cx {
            for c2 in 0..cy {
                let mut acc = 0.0;
                for yy in 0..hx {
                    for xx in 0..wx {
                        acc += x.get(i, c1, yy, xx) * y.get(i, c2, yy, xx);
                    }
                }
                g[(c1, c2)] += acc;
            }
        }
    }
    Ok(g)
}

/// N×N kernel: spatial dot product per channel, then max over channels:
/// `K[m, n] = max_c Σ_{h,w} X[m,c,h,w] · X[n,c,h,w]`.
/// Expects channel-wise centered/normalized input (`channel_center_normalize`).
pub fn channel_max_kernel(x: &FeatureTensor4) -> Matrix {
    let (n, c, h, w) = x.dims();
    let mut k = Matrix::zeros(n, n);
    for m in 0..n {
        for nn in m..n {
            let mut best = f64::NEG_INFINITY;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        acc += x.get(m, ch, y, xx) * x.get(nn, ch, y, xx);
                    }
                }
                if acc > best {
                    best = acc;
                }
            }
            k[(m, nn)] = best;
            k[(nn, m)] = best;
        }
    }
    k
}

fn procrustes_4d(x: &FeatureTensor4, y: &FeatureTensor4, orthogonal: bool) -> Result<f64> {
    let (_, cx, ..) = x.dims();
    let (_, cy, ..) = y.dims();
    if cx != cy {
        return Err(Error::shape("procrustes_4d", format!("{cx} vs {cy} channels")));
    }
    let xn = channel_scale_normalize(x)?;
    let yn = channel_scale_normalize(y)?;
    let gram = channel_gram(&xn, &yn)?;
    // δ evaluated as an explicit difference with the maximizing transform;
    // the expanded 2C - 2·trace form cancels catastrophically near δ = 0.
    let (n, c, h, w) = xn.dims();
    let mut delta_sq = 0.0;
    if orthogonal {
        let (u, _, v) = svd_square(&gram)?;
        let best = v.matmul(&u.transpose())?;
        for i in 0..n {
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut aligned = 0.0;
                        for c2 in 0..c {
                            aligned += yn.get(i, c2, yy, xx) * best[(c2, ch)];
                        }
                        let diff = xn.get(i, ch, yy, xx) - aligned;
                        delta_sq += diff * diff;
                    }
                }
            }
        }
    } else {
        let (perm, _) = linear_sum_assignment(&gram)?;
        for i in 0..n {
            for ch in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let diff = xn.get(i, ch, yy, xx) - yn.get(i, perm[ch], yy, xx);
                        delta_sq += diff * diff;
                    }
                }
            }
        }
    }
    let d = cx as f64;
    Ok(1.0 - delta_sq.sqrt() / (2.0 * d.sqrt()))
}

/// Channel-permutation Procrustes similarity of 4-D features.
pub fn g_relu_procrustes_4d(x: &FeatureTensor4, y: &FeatureTensor4) -> Result<f64> {
    procrustes_4d(x, y, false)
}

/// Channel-orthogonal Procrustes similarity of 4-D features.
pub fn orthogonal_procrustes_4d(x: &FeatureTensor4, y: &FeatureTensor4) -> Result<f64> {
    procrustes_4d(x, y, true)
}

/// CKA on the channel-max kernels of 4-D features.
pub fn g_relu_cka_4d(x: &FeatureTensor4, y: &FeatureTensor4) -> Result<f64> {
    let (nx, ..) = x.dims();
    let (ny, ..) = y.dims();
    if nx != ny {
        return Err(Error::shape("g_relu_cka_4d", format!("{nx} vs {ny} examples")));
    }
    let xk = channel_max_kernel(&channel_center_normalize(x)?);
    let yk = channel_max_kernel(&channel_center_normalize(y)?);
    super::cka_from_kernels(&xk, &yk)
}

/// Linear-CKA baseline for 4-D features, applied to the flattened N×(CHW)
/// matrix.
pub fn linear_cka_4d(x: &FeatureTensor4, y: &FeatureTensor4) -> Result<f64> {
    super::linear_cka(&flatten(x), &flatten(y))
}

fn flatten(t: &FeatureTensor4) -> Matrix {
    let (n, c, h, w) = t.dims();
    Matrix::from_vec(n, c * h * w, t.data().to_vec()).expect("sized to fit")
}
