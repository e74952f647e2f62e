//! Convolution and activation kernels.
//!
//! Convolutions lower to GEMM via im2col. Only two geometries exist in the
//! head: 3×3 with padding 1 and 1×1 with padding 0, both stride 1.

use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    K3x3,
    K1x1,
}

impl Kernel {
    pub fn taps(self) -> usize {
        match self {
            Kernel::K3x3 => 9,
            Kernel::K1x1 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Kernel::K3x3 => 3,
            Kernel::K1x1 => 1,
        }
    }

    pub fn padding(self) -> usize {
        match self {
            Kernel::K3x3 => 1,
            Kernel::K1x1 => 0,
        }
    }

    fn resolve(kh: usize, kw: usize, padding: usize, stride: usize) -> Result<Self> {
        match (kh, kw, padding, stride) {
            (3, 3, 1, 1) => Ok(Kernel::K3x3),
            (1, 1, 0, 1) => Ok(Kernel::K1x1),
            _ => Err(Error::Unsupported(format!(
                "{kh}x{kw} kernel with padding {padding} stride {stride}"
            ))),
        }
    }
}

/// Convolution kernel (out, in, kh, kw) with an optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
}

impl<T: Real> ConvWeights<T> {
    pub fn new(weight: Tensor4<T>, bias: Option<Tensor4<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            ensure!(
                b.dims() == Dims::new(1, weight.dims().b, 1, 1),
                "bias dims {} do not match {} output channels",
                b.dims(),
                weight.dims().b
            );
        }
        Ok(ConvWeights { weight, bias })
    }

    pub fn zeros(out: usize, inp: usize, k: Kernel, with_bias: bool) -> Self {
        let s = k.size();
        ConvWeights {
            weight: Tensor4::zeros(Dims::new(out, inp, s, s)),
            bias: with_bias.then(|| Tensor4::zeros(Dims::new(1, out, 1, 1))),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims().b
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims().c
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.weight.dims().h, self.weight.dims().w)
    }

    pub fn kernel(&self) -> Result<Kernel> {
        let (kh, kw) = self.kernel_hw();
        Kernel::resolve(kh, kw, if kh == 3 { 1 } else { 0 }, 1)
    }

    pub fn bias_slice(&self) -> Option<&[T]> {
        self.bias.as_ref().map(|b| b.data())
    }
}

pub(crate) fn check_conv<T: Real>(x: Dims, w: &Tensor4<T>, padding: usize, stride: usize) -> Result<Kernel> {
    let wd = w.dims();
    let k = Kernel::resolve(wd.h, wd.w, padding, stride)?;
    ensure!(
        wd.c == x.c,
        "kernel expects {} input channels, input has {}",
        wd.c,
        x.c
    );
    Ok(k)
}

/// Dense 2-D convolution with zero padding.
pub fn conv2d<T: Real>(x: &Tensor4<T>, w: &ConvWeights<T>, padding: usize, stride: usize) -> Result<Tensor4<T>> {
    let k = check_conv(x.dims(), &w.weight, padding, stride)?;
    Ok(conv_forward(x, &w.weight, w.bias_slice(), k))
}

/// 1×1 convolution: a per-pixel linear channel mix.
pub fn pointwise_conv<T: Real>(x: &Tensor4<T>, w: &ConvWeights<T>) -> Result<Tensor4<T>> {
    let (kh, kw) = w.kernel_hw();
    if (kh, kw) != (1, 1) {
        return Err(Error::Unsupported(format!("pointwise conv needs a 1x1 kernel, got {kh}x{kw}")));
    }
    conv2d(x, w, 0, 1)
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

// ---------------------------------------------------------------------------
// im2col machinery

/// Fills `cols` (rows = c·9 + dy·3 + dx, cols = pixels) for one image.
fn im2col3x3<T: Real>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), 9 * c * hw);
    for ch in 0..c {
        let src = &img[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut cols[((ch * 9) + dy * 3 + dx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => out.copy_from_slice(s),
                        _ => {
                            out[..w - 1].copy_from_slice(&s[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: accumulates `cols` back into `img`.
fn col2im3x3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let dst = &mut img[ch * hw..(ch + 1) * hw];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[((ch * 9) + dy * 3 + dx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let r = &row[y * w..(y + 1) * w];
                    match dx {
                        0 => d[..w - 1].iter_mut().zip(&r[1..]).for_each(|(a, &b)| *a = *a + b),
                        1 => d.iter_mut().zip(r).for_each(|(a, &b)| *a = *a + b),
                        _ => d[1..].iter_mut().zip(&r[..w - 1]).for_each(|(a, &b)| *a = *a + b),
                    }
                }
            }
        }
    }
}

/// Gathers the receptive fields of selected pixels into a (taps·C) × n matrix.
fn gather_cols<T: Real>(img: &[T], c: usize, h: usize, w: usize, k: Kernel, pixels: &[usize], cols: &mut [T]) {
    let n = pixels.len();
    let hw = h * w;
    match k {
        Kernel::K1x1 => {
            for ch in 0..c {
                let src = &img[ch * hw..(ch + 1) * hw];
                let row = &mut cols[ch * n..(ch + 1) * n];
                for (dst, &p) in row.iter_mut().zip(pixels) {
                    *dst = src[p];
                }
            }
        }
        Kernel::K3x3 => {
            for ch in 0..c {
                let src = &img[ch * hw..(ch + 1) * hw];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let row = &mut cols[((ch * 9) + dy * 3 + dx) * n..][..n];
                        for (dst, &p) in row.iter_mut().zip(pixels) {
                            let sy = (p / w) as isize + dy as isize - 1;
                            let sx = (p % w) as isize + dx as isize - 1;
                            *dst = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                T::zero()
                            } else {
                                src[sy as usize * w + sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_cols`].
fn scatter_cols<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: Kernel, pixels: &[usize], img: &mut [T]) {
    let n = pixels.len();
    let hw = h * w;
    match k {
        Kernel::K1x1 => {
            for ch in 0..c {
                let dst = &mut img[ch * hw..(ch + 1) * hw];
                for (&v, &p) in cols[ch * n..(ch + 1) * n].iter().zip(pixels) {
                    dst[p] = dst[p] + v;
                }
            }
        }
        Kernel::K3x3 => {
            for ch in 0..c {
                let dst = &mut img[ch * hw..(ch + 1) * hw];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let row = &cols[((ch * 9) + dy * 3 + dx) * n..][..n];
                        for (&v, &p) in row.iter().zip(pixels) {
                            let sy = (p / w) as isize + dy as isize - 1;
                            let sx = (p % w) as isize + dx as isize - 1;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                let i = sy as usize * w + sx as usize;
                                dst[i] = dst[i] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense forward over validated operands.
pub(crate) fn conv_forward<T: Real>(x: &Tensor4<T>, weight: &Tensor4<T>, bias: Option<&[T]>, k: Kernel) -> Tensor4<T> {
    let xd = x.dims();
    let o = weight.dims().b;
    let kk = xd.c * k.taps();
    let hw = xd.plane();
    let out_dims = Dims::new(xd.b, o, xd.h, xd.w);
    let mut out = Tensor4::zeros(out_dims);
    let mut cols = if k == Kernel::K3x3 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for b in 0..xd.b {
        let img = &x.data()[b * xd.c * hw..(b + 1) * xd.c * hw];
        let cols_ref: &[T] = if k == Kernel::K3x3 {
            im2col3x3(img, xd.c, xd.h, xd.w, &mut cols);
            &cols
        } else {
            img
        };
        let dst = &mut out.data_mut()[b * o * hw..(b + 1) * o * hw];
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_exact_mut(hw).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o,
            kk,
            hw,
            T::one(),
            (weight.data(), kk as isize, 1),
            (cols_ref, hw as isize, 1),
            beta,
            (dst, hw as isize, 1),
        );
    }
    out
}

/// Computes a 3×3 (or 1×1) convolution only at `active` positions, one pixel
/// list per batch element (flat `y·W + x` indices). Every other output is zero.
/// Input neighborhoods are read densely.
pub(crate) fn conv_forward_at<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    k: Kernel,
    active: &[Vec<usize>],
) -> Tensor4<T> {
    let xd = x.dims();
    let o = weight.dims().b;
    let kk = xd.c * k.taps();
    let hw = xd.plane();
    let mut out = Tensor4::zeros(Dims::new(xd.b, o, xd.h, xd.w));
    let mut cols = Vec::new();
    let mut res = Vec::new();
    for (b, pixels) in active.iter().enumerate().take(xd.b) {
        let n = pixels.len();
        if n == 0 {
            continue;
        }
        let img = &x.data()[b * xd.c * hw..(b + 1) * xd.c * hw];
        cols.resize(kk * n, T::zero());
        gather_cols(img, xd.c, xd.h, xd.w, k, pixels, &mut cols);
        res.clear();
        res.resize(o * n, T::zero());
        if let Some(bias) = bias {
            for (oc, chunk) in res.chunks_exact_mut(n).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(o, kk, n, T::one(), (weight.data(), kk as isize, 1), (&cols, n as isize, 1), beta, (&mut res, n as isize, 1));
        let dst = &mut out.data_mut()[b * o * hw..(b + 1) * o * hw];
        for oc in 0..o {
            let plane = &mut dst[oc * hw..(oc + 1) * hw];
            for (&v, &p) in res[oc * n..(oc + 1) * n].iter().zip(pixels) {
                plane[p] = v;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Backward of [`conv_forward`]. Pixels whose upstream gradient is zero in
/// every output channel are skipped, which makes masked layers cheap.
fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub(crate) fn conv_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    k: Kernel,
    need_input: bool,
) -> ConvGrads<T> {
    let xd = x.dims();
    let o = weight.dims().b;
    let kk = xd.c * k.taps();
    let hw = xd.plane();
    let mut dw = vec![T::zero(); o * kk];
    let mut db = vec![T::zero(); o];
    let mut dx = need_input.then(|| Tensor4::zeros(xd));
    let mut cols = Vec::new();
    let mut gsel = Vec::new();
    let mut dcols = Vec::new();
    let mut colst = Vec::new();
    for b in 0..xd.b {
        let img = &x.data()[b * xd.c * hw..(b + 1) * xd.c * hw];
        let g = &grad_out.data()[b * o * hw..(b + 1) * o * hw];
        for (oc, d) in db.iter_mut().enumerate() {
            *d = *d + g[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
        }
        let pixels: Vec<usize> = (0..hw).filter(|&p| (0..o).any(|oc| g[oc * hw + p] != T::zero())).collect();
        let n = pixels.len();
        if n == 0 {
            continue;
        }
        let dense = n * 10 > hw * 6;
        let (cols_ref, g_ref, n): (&[T], &[T], usize) = if dense {
            match k {
                Kernel::K3x3 => {
                    cols.resize(kk * hw, T::zero());
                    im2col3x3(img, xd.c, xd.h, xd.w, &mut cols);
                    (&cols, g, hw)
                }
                Kernel::K1x1 => (img, g, hw),
            }
        } else {
            cols.resize(kk * n, T::zero());
            gather_cols(img, xd.c, xd.h, xd.w, k, &pixels, &mut cols);
            gsel.clear();
            for oc in 0..o {
                gsel.extend(pixels.iter().map(|&p| g[oc * hw + p]));
            }
            (&cols, &gsel, n)
        };
        // dW += G · colsᵀ
        colst.resize(kk * n, T::zero());
        transpose(cols_ref, kk, n, &mut colst);
        T::gemm(o, n, kk, T::one(), (g_ref, n as isize, 1), (&colst, kk as isize, 1), T::one(), (&mut dw, kk as isize, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · G
            dcols.clear();
            dcols.resize(kk * n, T::zero());
            T::gemm(kk, o, n, T::one(), (weight.data(), 1, kk as isize), (g_ref, n as isize, 1), T::zero(), (&mut dcols, n as isize, 1));
            let dimg = &mut dx.data_mut()[b * xd.c * hw..(b + 1) * xd.c * hw];
            match (dense, k) {
                (true, Kernel::K3x3) => col2im3x3(&dcols, xd.c, xd.h, xd.w, dimg),
                (true, Kernel::K1x1) => dimg.iter_mut().zip(&dcols).for_each(|(a, &v)| *a = *a + v),
                (false, _) => scatter_cols(&dcols, xd.c, xd.h, xd.w, k, &pixels, dimg),
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: Tensor4::from_vec(weight.dims(), dw).expect("weight grad dims"),
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Quadruple-loop direct convolution, independent of the GEMM path.
    fn loop_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: Option<&[f64]>) -> Tensor4<f64> {
        let xd = x.dims();
        let wd = w.dims();
        let pad = (wd.h / 2) as isize;
        Tensor4::from_fn(Dims::new(xd.b, wd.b, xd.h, xd.w), |b, o, y, xx| {
            let mut acc = bias.map_or(0.0, |bb| bb[o]);
            for c in 0..xd.c {
                for dy in 0..wd.h {
                    for dx in 0..wd.w {
                        let sy = y as isize + dy as isize - pad;
                        let sx = xx as isize + dx as isize - pad;
                        if sy >= 0 && sy < xd.h as isize && sx >= 0 && sx < xd.w as isize {
                            acc += w.at(o, c, dy, dx) * x.at(b, c, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Dims::new(2, 1, 4, 5), &mut rng);
        let w = Tensor4::from_fn(Dims::new(1, 1, 3, 3), |_, _, y, x| if y == 1 && x == 1 { 1.0 } else { 0.0 });
        let out = conv2d(&x, &ConvWeights::new(w, None).unwrap(), 1, 1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn ones_kernel_padding_arithmetic() {
        let x = Tensor4::<f32>::full(Dims::new(1, 1, 4, 4), 2.0);
        let w = ConvWeights::new(Tensor4::full(Dims::new(1, 1, 3, 3), 1.0), None).unwrap();
        let out = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 18.0);
        assert_eq!(out.at(0, 0, 2, 2), 18.0);
        assert_eq!(out.at(0, 0, 0, 0), 8.0);
        assert_eq!(out.at(0, 0, 3, 3), 8.0);
        assert_eq!(out.at(0, 0, 0, 2), 12.0);
    }

    #[test]
    fn random_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Dims::new(1, 2, 5, 5), &mut rng);
        let w = random(Dims::new(3, 2, 3, 3), &mut rng);
        let b = vec![0.1, -0.2, 0.3];
        let cw = ConvWeights::new(w.clone(), Some(Tensor4::channel_vector(b.clone()))).unwrap();
        let got = conv2d(&x, &cw, 1, 1).unwrap();
        let want = loop_conv(&x, &w, Some(&b));
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn pointwise_identity_zero_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Dims::new(2, 3, 4, 3), &mut rng);
        let eye = Tensor4::from_fn(Dims::new(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(pointwise_conv(&x, &ConvWeights::new(eye, None).unwrap()).unwrap(), x);

        let bias = vec![0.5, -1.5];
        let zero = ConvWeights::new(Tensor4::zeros(Dims::new(2, 3, 1, 1)), Some(Tensor4::channel_vector(bias.clone()))).unwrap();
        let out = pointwise_conv(&x, &zero).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                assert!(out.plane(b, c).iter().all(|&v| v == bias[c]));
            }
        }

        let w = random(Dims::new(4, 3, 1, 1), &mut rng);
        let got = pointwise_conv(&x, &ConvWeights::new(w.clone(), None).unwrap()).unwrap();
        assert!(got.max_abs_diff(&loop_conv(&x, &w, None)).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_geometry_and_channels() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 2, 4, 4));
        let w5 = ConvWeights::new(Tensor4::zeros(Dims::new(1, 2, 5, 5)), None).unwrap();
        assert!(matches!(conv2d(&x, &w5, 2, 1), Err(Error::Unsupported(_))));
        let w3 = ConvWeights::new(Tensor4::zeros(Dims::new(1, 2, 3, 3)), None).unwrap();
        assert!(matches!(conv2d(&x, &w3, 1, 2), Err(Error::Unsupported(_))));
        let wc = ConvWeights::new(Tensor4::zeros(Dims::new(1, 3, 3, 3)), None).unwrap();
        assert!(matches!(conv2d(&x, &wc, 1, 1), Err(Error::Contract(_))));
        assert!(matches!(pointwise_conv(&x, &w3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn activations() {
        let x = Tensor4::<f32>::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&x).data()[1], 0.5);
        for v in [-30.0f32, -2.5, 0.3, 7.0, 90.0] {
            let s = sigmoid_scalar(v) + sigmoid_scalar(-v);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = Dims::new(2, 3, 6, 5);
        let x = random(dims, &mut rng);
        let y = random(dims, &mut rng);
        let w = random(Dims::new(2, 3, 3, 3), &mut rng);
        let bias = Tensor4::channel_vector(vec![0.7, -0.4]);
        let (a, b) = (1.7, -0.6);
        let biased = ConvWeights::new(w.clone(), Some(bias)).unwrap();
        let plain = ConvWeights::new(w, None).unwrap();
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &biased, 1, 1).unwrap();
        let cx = conv2d(&x, &plain, 1, 1).unwrap();
        let cy = conv2d(&y, &plain, 1, 1).unwrap();
        let bias_term = conv2d(&Tensor4::zeros(dims), &biased, 1, 1).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap().add(&bias_term).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn sparse_forward_and_backward_agree_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Dims::new(2, 3, 5, 6), &mut rng);
        let w = random(Dims::new(4, 3, 3, 3), &mut rng);
        let dense = conv_forward(&x, &w, None, Kernel::K3x3);
        let active: Vec<Vec<usize>> = vec![vec![0, 7, 29], vec![3, 4, 5, 12]];
        let sparse = conv_forward_at(&x, &w, None, Kernel::K3x3, &active);
        for (b, pix) in active.iter().enumerate() {
            for o in 0..4 {
                for p in 0..30 {
                    let want = if pix.contains(&p) { dense.plane(b, o)[p] } else { 0.0 };
                    assert!((sparse.plane(b, o)[p] - want).abs() < 1e-12);
                }
            }
        }
        // Gradient with few nonzero pixels takes the gathered path; compare to
        // the same gradient forced through the dense path by a full pattern.
        let g = Tensor4::from_fn(Dims::new(2, 4, 5, 6), |b, _, y, xx| if active[b].contains(&(y * 6 + xx)) { 1.0 } else { 0.0 });
        let sparse_g = conv_backward(&x, &w, &g, Kernel::K3x3, true);
        let eps = Tensor4::from_fn(g.dims(), |_, _, _, _| 1e-300);
        let dense_g = conv_backward(&x, &w, &g.add(&eps).unwrap(), Kernel::K3x3, true);
        assert!(sparse_g.weight.max_abs_diff(&dense_g.weight).unwrap() < 1e-9);
        assert!(sparse_g.input.unwrap().max_abs_diff(&dense_g.input.unwrap()).unwrap() < 1e-9);
    }
}

