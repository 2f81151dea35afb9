use rand::Rng;

use super::{join, matmul, Param, Real};

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of `silu` at `x`.
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

/// Multiplies `dy` in place by the SiLU derivative evaluated at `x`.
pub fn silu_backward_inplace<T: Real>(x: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(x) {
        *g *= silu_grad(v);
    }
}

/// Fully connected layer acting on the last axis. Weight stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(&[in_dim, out_dim], std, rng),
            bias: bias.then(|| Param::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = match &self.bias {
            Some(b) => {
                let mut y = Vec::with_capacity(rows * self.out_dim);
                for _ in 0..rows {
                    y.extend_from_slice(&b.value);
                }
                y
            }
            None => vec![T::zero(); rows * self.out_dim],
        };
        matmul(x, &self.weight.value, &mut y, rows, self.in_dim, self.out_dim, false, false, true);
        y
    }

    /// Accumulates parameter gradients and returns `dx` when requested.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize, need_dx: bool) -> Option<Vec<T>> {
        matmul(x, dy, &mut self.weight.grad, self.in_dim, rows, self.out_dim, true, false, true);
        if let Some(b) = &mut self.bias {
            for row in dy.chunks_exact(self.out_dim) {
                for (g, &d) in b.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.in_dim];
            matmul(dy, &self.weight.value, &mut dx, rows, self.out_dim, self.in_dim, false, true, false);
            dx
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Spatial extent of an NHWC activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// 3×3 patches with zero padding, one row per output pixel.
pub fn im2col<T: Real>(x: &[T], s: Shape4) -> Vec<T> {
    let Shape4 { n, h, w, c } = s;
    let k = 9 * c;
    let mut col = vec![T::zero(); n * h * w * k];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        col[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Real>(col: &[T], s: Shape4) -> Vec<T> {
    let Shape4 { n, h, w, c } = s;
    let k = 9 * c;
    let mut x = vec![T::zero(); s.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for i in 0..c {
                            x[dst + i] += col[src + i];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Same-padded 3×3 convolution, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub lin: Linear<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, std_scale: f64, rng: &mut R) -> Self {
        let std = std_scale * (2.0 / (9 * cin) as f64).sqrt();
        Self { lin: Linear::new(9 * cin, cout, true, std, rng) }
    }

    pub fn in_channels(&self) -> usize {
        self.lin.in_dim / 9
    }

    pub fn out_channels(&self) -> usize {
        self.lin.out_dim
    }

    /// Returns the output and the patch matrix needed by `backward`.
    pub fn forward(&self, x: &[T], s: Shape4) -> (Vec<T>, Vec<T>) {
        let col = im2col(x, s);
        let y = self.lin.forward(&col, s.pixels());
        (y, col)
    }

    pub fn backward(&mut self, col: &[T], dy: &[T], s: Shape4, need_dx: bool) -> Option<Vec<T>> {
        self.lin.backward(col, dy, s.pixels(), need_dx).map(|dcol| col2im(&dcol, s))
    }
}

/// Rearranges each 2×2 block into channels: `(n,h,w,c) → (n,h/2,w/2,4c)`.
pub fn space_to_depth<T: Real>(x: &[T], s: Shape4) -> Vec<T> {
    let Shape4 { n, h, w, c } = s;
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((b * ho + oy) * wo + ox) * 4 * c;
                for q in 0..4 {
                    let src = ((b * h + 2 * oy + q / 2) * w + 2 * ox + q % 2) * c;
                    y[dst + q * c..dst + (q + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    y
}

/// Inverse of [`space_to_depth`]; `s` is the full-resolution shape.
pub fn depth_to_space<T: Real>(y: &[T], s: Shape4) -> Vec<T> {
    let Shape4 { n, h, w, c } = s;
    let (ho, wo) = (h / 2, w / 2);
    let mut x = vec![T::zero(); y.len()];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((b * ho + oy) * wo + ox) * 4 * c;
                for q in 0..4 {
                    let dst = ((b * h + 2 * oy + q / 2) * w + 2 * ox + q % 2) * c;
                    x[dst..dst + c].copy_from_slice(&y[src + q * c..src + (q + 1) * c]);
                }
            }
        }
    }
    x
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &[T], s: Shape4) -> Vec<T> {
    let Shape4 { n, h, w, c } = s;
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); 4 * x.len()];
    for b in 0..n {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let src = ((b * h + yy / 2) * w + xx / 2) * c;
                let dst = ((b * h2 + yy) * w2 + xx) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]; `s` is the low-resolution shape.
pub fn upsample2_backward<T: Real>(dy: &[T], s: Shape4) -> Vec<T> {
    let Shape4 { n, h, w, c } = s;
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); s.len()];
    for b in 0..n {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let dst = ((b * h + yy / 2) * w + xx / 2) * c;
                let src = ((b * h2 + yy) * w2 + xx) * c;
                for i in 0..c {
                    dx[dst + i] += dy[src + i];
                }
            }
        }
    }
    dx
}

/// Learned 2×2 stride-2 downsampling (a 2×2 conv without overlap).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDown<T> {
    pub lin: Linear<T>,
}

impl<T: Real> PatchDown<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let std = (2.0 / (4 * cin) as f64).sqrt();
        Self { lin: Linear::new(4 * cin, cout, true, std, rng) }
    }

    /// Returns the output and the rearranged input kept for backward.
    pub fn forward(&self, x: &[T], s: Shape4) -> (Vec<T>, Vec<T>) {
        let packed = space_to_depth(x, s);
        let y = self.lin.forward(&packed, s.pixels() / 4);
        (y, packed)
    }

    pub fn backward(&mut self, packed: &[T], dy: &[T], s: Shape4, need_dx: bool) -> Option<Vec<T>> {
        self.lin.backward(packed, dy, s.pixels() / 4, need_dx).map(|d| depth_to_space(&d, s))
    }
}

/// `x + conv2(silu(conv1(silu(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv3x3<T>,
    pub conv2: Conv3x3<T>,
}

/// Activations a [`ResBlock`] keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ResCache<T> {
    x: Vec<T>,
    col1: Vec<T>,
    a: Vec<T>,
    col2: Vec<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        // The residual branch starts small so the block is close to identity.
        Self { conv1: Conv3x3::new(c, c, 1.0, rng), conv2: Conv3x3::new(c, c, 0.1, rng) }
    }

    pub fn forward(&self, x: Vec<T>, s: Shape4) -> (Vec<T>, ResCache<T>) {
        let (a, col1) = self.conv1.forward(&silu_vec(&x), s);
        let (b, col2) = self.conv2.forward(&silu_vec(&a), s);
        let y = x.iter().zip(&b).map(|(&u, &v)| u + v).collect();
        (y, ResCache { x, col1, a, col2 })
    }

    pub fn backward(&mut self, cache: &ResCache<T>, dy: &[T], s: Shape4) -> Vec<T> {
        let mut da = self.conv2.backward(&cache.col2, dy, s, true).expect("dx requested");
        silu_backward_inplace(&cache.a, &mut da);
        let mut dx_branch = self.conv1.backward(&cache.col1, &da, s, true).expect("dx requested");
        silu_backward_inplace(&cache.x, &mut dx_branch);
        dx_branch.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
        dx_branch
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.lin.visit(&join(prefix, "conv1"), f);
        self.conv2.lin.visit(&join(prefix, "conv2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.lin.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.lin.visit_mut(&join(prefix, "conv2"), f);
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// Root-mean-square normalization over the last axis with a learned gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm<T> {
    pub gain: Param<T>,
}

impl<T: Real> RmsNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gain: Param::filled(&[dim], T::one()) }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    /// Returns the normalized rows and each row's inverse RMS.
    pub fn forward(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let mut y = Vec::with_capacity(x.len());
        let mut inv = Vec::with_capacity(x.len() / d);
        for row in x.chunks_exact(d) {
            let r = inv_rms(row);
            inv.push(r);
            y.extend(row.iter().zip(&self.gain.value).map(|(&v, &g)| v * r * g));
        }
        (y, inv)
    }

    pub fn backward(&mut self, x: &[T], inv: &[T], dy: &[T]) -> Vec<T> {
        let d = self.dim();
        let mut dx = vec![T::zero(); x.len()];
        for (((row, &r), drow), out) in x.chunks_exact(d).zip(inv).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
            let mut dot = T::zero();
            for i in 0..d {
                self.gain.grad[i] += drow[i] * row[i] * r;
                dot += drow[i] * self.gain.value[i] * row[i];
            }
            let coef = r * r * r * dot / T::from_f(d as f64);
            for i in 0..d {
                out[i] = r * self.gain.value[i] * drow[i] - coef * row[i];
            }
        }
        dx
    }
}

pub fn inv_rms<T: Real>(row: &[T]) -> T {
    let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_f(row.len() as f64);
    T::one() / (ms + T::from_f(RMS_EPS)).sqrt()
}
