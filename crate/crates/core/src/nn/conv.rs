//! 3-D convolution and stride-2 transposed convolution.
//!
//! Both layers lower to one GEMM per batch sample. `conv3d` unfolds the
//! receptive fields into a `(C_in·k³) × P` column matrix; the transposed
//! layer with kernel = stride = 2 has no overlapping outputs, so it is a
//! single `(C_out·8) × C_in` product followed by a scatter into 2×2×2 blocks.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

use super::kernels::{self, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Kernel 3, padding 1, isotropic `stride`.
    pub fn k3(stride: usize) -> Self {
        ConvGeometry {
            kernel: [3; 3],
            stride: [stride; 3],
            padding: [1; 3],
        }
    }

    /// 1×1×1 projection (prediction heads).
    pub fn pointwise() -> Self {
        ConvGeometry {
            kernel: [1; 3],
            stride: [1; 3],
            padding: [0; 3],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let (n, k, s, p) = (input[a], self.kernel[a], self.stride[a], self.padding[a]);
            if s == 0 || k == 0 {
                return Err(Error::shape("conv kernel and stride must be positive"));
            }
            if s > 1 && n % s != 0 {
                return Err(Error::shape(format!(
                    "spatial dim {n} not divisible by stride {s}"
                )));
            }
            if n + 2 * p < k {
                return Err(Error::shape(format!(
                    "spatial dim {n} smaller than kernel {k}"
                )));
            }
            out[a] = (n + 2 * p - k) / s + 1;
        }
        Ok(out)
    }
}

/// Gradients produced by a convolution backward pass.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Output index range `[lo, hi)` along one axis for which
/// `o·stride + k − pad` lands inside `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o·stride + k − pad ≤ n − 1
    let top = n + pad;
    let hi = if top > k { ((top - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    dims: [usize; 3],
    geom: &ConvGeometry,
    out: [usize; 3],
    col: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z0, z1) = valid_range(d, od, kz, sd, pd);
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, sh, ph);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(w, ow, kx, sw, pw);
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst.fill(T::zero());
                    for oz in z0..z1 {
                        let iz = oz * sd + kz - pd;
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let drow = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if sw == 1 {
                                let ix0 = x0 + kx - pw;
                                drow[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] = src[ox * sw + kx - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    dims: [usize; 3],
    geom: &ConvGeometry,
    out: [usize; 3],
    x: &mut [T],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            let (z0, z1) = valid_range(d, od, kz, sd, pd);
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, sh, ph);
                for kx in 0..kw {
                    let (x0, x1) = valid_range(w, ow, kx, sw, pw);
                    let src = &col[row * p..(row + 1) * p];
                    for oz in z0..z1 {
                        let iz = oz * sd + kz - pd;
                        for oy in y0..y1 {
                            let iy = oy * sh + ky - ph;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for ox in x0..x1 {
                                let ix = ox * sw + kx - pw;
                                dst[ix] = dst[ix] + srow[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Zero-padded layout for the stride-1 3×3×3 path. Outputs are computed
/// over the whole padded span and the interior is cropped afterwards.
struct Padded {
    dims: [usize; 3],
    pdims: [usize; 3],
    grid: Grid,
}

impl Padded {
    fn new(dims: [usize; 3]) -> Self {
        let pdims = dims.map(|d| d + 2);
        let (ph, pw) = (pdims[1] as isize, pdims[2] as isize);
        let offs = std::array::from_fn(|t| {
            let (kz, ky, kx) = ((t / 9) as isize, ((t / 3) % 3) as isize, (t % 3) as isize);
            (kz - 1) * ph * pw + (ky - 1) * pw + (kx - 1)
        });
        Padded {
            dims,
            pdims,
            grid: Grid {
                len: pdims.iter().product(),
                reach: pdims[1] * pdims[2] + pdims[2] + 1,
                offs,
            },
        }
    }

    fn pad<T: Real>(&self, x: &[T], channels: usize) -> Vec<T> {
        let [d, h, w] = self.dims;
        let [_, ph, pw] = self.pdims;
        let mut out = vec![T::zero(); channels * self.grid.len];
        for c in 0..channels {
            for z in 0..d {
                for y in 0..h {
                    let src = &x[((c * d + z) * h + y) * w..][..w];
                    let dst = c * self.grid.len + ((z + 1) * ph + y + 1) * pw + 1;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Copies the interior of a padded buffer into `out`, adding `shift[c]`.
    fn crop<T: Real>(&self, padded: &[T], channels: usize, shift: Option<&[T]>, out: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, ph, pw] = self.pdims;
        for c in 0..channels {
            let add = shift.map_or(T::zero(), |s| s[c]);
            for z in 0..d {
                for y in 0..h {
                    let src = &padded[c * self.grid.len + ((z + 1) * ph + y + 1) * pw + 1..][..w];
                    let dst = &mut out[((c * d + z) * h + y) * w..][..w];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = v + add;
                    }
                }
            }
        }
    }
}

fn shift_conv_forward<T: Real>(xn: &[T], w: &[T], b: &[T], cin: usize, cout: usize, grid: &Padded, yn: &mut [T]) {
    let xpad = grid.pad(xn, cin);
    let mut ypad = vec![T::zero(); cout * grid.grid.len];
    kernels::correlate(&xpad, cin, w, cout, &grid.grid, &mut ypad);
    grid.crop(&ypad, cout, Some(b), yn);
}

#[allow(clippy::too_many_arguments)]
fn shift_conv_backward<T: Real>(
    xn: &[T],
    w: &[T],
    gyn: &[T],
    cin: usize,
    cout: usize,
    grid: &Padded,
    gw: Option<&mut [T]>,
    gxn: Option<&mut [T]>,
) {
    let gypad = grid.pad(gyn, cout);
    if let Some(gw) = gw {
        let xpad = grid.pad(xn, cin);
        kernels::weight_grad(&gypad, cout, &xpad, cin, &grid.grid, gw);
    }
    if let Some(gxn) = gxn {
        // the adjoint is a correlation with the kernel transposed over
        // channels and mirrored in space: off(26 - t) = -off(t)
        let mut wt = vec![T::zero(); w.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..27 {
                    wt[(ci * cout + co) * 27 + 26 - t] = w[(co * cin + ci) * 27 + t];
                }
            }
        }
        let mut gxpad = vec![T::zero(); cin * grid.grid.len];
        kernels::correlate(&gypad, cout, &wt, cin, &grid.grid, &mut gxpad);
        grid.crop(&gxpad, cin, None, gxn);
    }
}

fn check_conv_shapes(x: Shape, w: Shape, b: Shape, transposed: bool) -> Result<(usize, usize)> {
    // conv weight: (C_out, C_in, k..); transposed weight: (C_in, C_out, k..)
    let (cin, cout) = if transposed {
        (w.0[0], w.0[1])
    } else {
        (w.0[1], w.0[0])
    };
    if x.channels() != cin {
        return Err(Error::shape(format!(
            "input has {} channels, weight expects {cin}",
            x.channels()
        )));
    }
    if b != Shape::new(1, cout, 1, 1, 1) {
        return Err(Error::shape(format!("bias {b} for {cout} output channels")));
    }
    Ok((cin, cout))
}

pub(crate) fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (cin, cout) = check_conv_shapes(x.shape(), w.shape(), b.shape(), false)?;
    if w.shape().spatial() != geom.kernel {
        return Err(Error::shape(format!(
            "weight {} does not match kernel {:?}",
            w.shape(),
            geom.kernel
        )));
    }
    let dims = x.shape().spatial();
    let out_dims = geom.output_dims(dims)?;
    let p: usize = out_dims.iter().product();
    let kk = cin * geom.kernel_volume();
    let in_per = cin * x.shape().voxels();
    let out_shape = Shape::new(x.shape().batch(), cout, out_dims[0], out_dims[1], out_dims[2]);
    let mut out = Tensor::zeros(out_shape);
    if geom == ConvGeometry::k3(1) {
        let grid = Padded::new(dims);
        for n in 0..x.shape().batch() {
            let xn = &x.data()[n * in_per..(n + 1) * in_per];
            let yn = &mut out.data_mut()[n * cout * p..(n + 1) * cout * p];
            shift_conv_forward(xn, w.data(), b.data(), cin, cout, &grid, yn);
        }
        return Ok(out);
    }
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for n in 0..x.shape().batch() {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let cols: &[T] = if geom.is_pointwise() {
            xn
        } else {
            im2col(xn, cin, dims, &geom, out_dims, &mut col);
            &col
        };
        let yn = &mut out.data_mut()[n * cout * p..(n + 1) * cout * p];
        for (co, plane) in yn.chunks_mut(p).enumerate() {
            plane.fill(b.data()[co]);
        }
        T::gemm(cout, kk, p, T::one(), w.data(), false, cols, false, T::one(), yn);
    }
    Ok(out)
}

pub(crate) fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeometry,
    gy: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let cin = x.shape().channels();
    let cout = w.shape().0[0];
    let dims = x.shape().spatial();
    let out_dims = gy.shape().spatial();
    let p = gy.shape().voxels();
    let kk = cin * geom.kernel_volume();
    let in_per = cin * x.shape().voxels();
    let pointwise = geom.is_pointwise();

    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_params.then(|| Tensor::zeros(w.shape()));
    let mut gb = need_params.then(|| vec![0.0f64; cout]);
    if geom == ConvGeometry::k3(1) {
        let grid = Padded::new(dims);
        for n in 0..x.shape().batch() {
            let gyn = &gy.data()[n * cout * p..(n + 1) * cout * p];
            let xn = &x.data()[n * in_per..(n + 1) * in_per];
            if let Some(gb) = gb.as_mut() {
                for (co, plane) in gyn.chunks(p).enumerate() {
                    gb[co] += plane.iter().map(|v| v.f64()).sum::<f64>();
                }
            }
            let gxn = gx.as_mut().map(|g| &mut g.data_mut()[n * in_per..(n + 1) * in_per]);
            shift_conv_backward(xn, w.data(), gyn, cin, cout, &grid, gw.as_mut().map(|g| g.data_mut()), gxn);
        }
        return conv_grads(cout, gx, gw, gb);
    }
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
    let mut dcol = if need_input && !pointwise {
        vec![T::zero(); kk * p]
    } else {
        Vec::new()
    };

    for n in 0..x.shape().batch() {
        let gyn = &gy.data()[n * cout * p..(n + 1) * cout * p];
        if let (Some(gw), Some(gb)) = (gw.as_mut(), gb.as_mut()) {
            let xn = &x.data()[n * in_per..(n + 1) * in_per];
            let cols: &[T] = if pointwise {
                xn
            } else {
                im2col(xn, cin, dims, &geom, out_dims, &mut col);
                &col
            };
            T::gemm(cout, p, kk, T::one(), gyn, false, cols, true, T::one(), gw.data_mut());
            for (co, plane) in gyn.chunks(p).enumerate() {
                gb[co] += plane.iter().map(|v| v.f64()).sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx.data_mut()[n * in_per..(n + 1) * in_per];
            if pointwise {
                T::gemm(kk, cout, p, T::one(), w.data(), true, gyn, false, T::zero(), gxn);
            } else {
                T::gemm(kk, cout, p, T::one(), w.data(), true, gyn, false, T::zero(), &mut dcol);
                col2im(&dcol, cin, dims, &geom, out_dims, gxn);
            }
        }
    }
    conv_grads(cout, gx, gw, gb)
}

fn conv_grads<T: Real>(cout: usize, gx: Option<Tensor<T>>, gw: Option<Tensor<T>>, gb: Option<Vec<f64>>) -> ConvGrads<T> {
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb.map(|v| {
            Tensor::from_vec(Shape::new(1, cout, 1, 1, 1), v.into_iter().map(T::of).collect())
                .expect("bias shape")
        }),
    }
}

pub(crate) fn conv_transpose3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (cin, cout) = check_conv_shapes(x.shape(), w.shape(), b.shape(), true)?;
    if w.shape().spatial() != [2, 2, 2] {
        return Err(Error::shape(format!(
            "transposed conv weight {} must have a 2×2×2 kernel",
            w.shape()
        )));
    }
    let [d, h, wd] = x.shape().spatial();
    let p = d * h * wd;
    let out_shape = Shape::new(x.shape().batch(), cout, 2 * d, 2 * h, 2 * wd);
    let mut out = Tensor::zeros(out_shape);
    let mut blocks = vec![T::zero(); cout * 8 * p];
    let out_per = cout * 8 * p;
    for n in 0..x.shape().batch() {
        let xn = &x.data()[n * cin * p..(n + 1) * cin * p];
        T::gemm(cout * 8, cin, p, T::one(), w.data(), true, xn, false, T::zero(), &mut blocks);
        let yn = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        for co in 0..cout {
            let bias = b.data()[co];
            let yc = &mut yn[co * 8 * p..(co + 1) * 8 * p];
            for k in 0..8 {
                let (a, bb, c) = (k >> 2, (k >> 1) & 1, k & 1);
                let src = &blocks[(co * 8 + k) * p..(co * 8 + k + 1) * p];
                for z in 0..d {
                    for y in 0..h {
                        let row = ((2 * z + a) * 2 * h + 2 * y + bb) * 2 * wd;
                        let s = &src[(z * h + y) * wd..(z * h + y + 1) * wd];
                        for (xi, &v) in s.iter().enumerate() {
                            yc[row + 2 * xi + c] = v + bias;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let cin = x.shape().channels();
    let cout = w.shape().0[1];
    let [d, h, wd] = x.shape().spatial();
    let p = d * h * wd;
    let out_per = cout * 8 * p;
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_params.then(|| Tensor::zeros(w.shape()));
    let mut gb = need_params.then(|| vec![0.0f64; cout]);
    let mut blocks = vec![T::zero(); cout * 8 * p];
    for n in 0..x.shape().batch() {
        let gyn = &gy.data()[n * out_per..(n + 1) * out_per];
        for co in 0..cout {
            let gc = &gyn[co * 8 * p..(co + 1) * 8 * p];
            if let Some(gb) = gb.as_mut() {
                gb[co] += gc.iter().map(|v| v.f64()).sum::<f64>();
            }
            for k in 0..8 {
                let (a, bb, c) = (k >> 2, (k >> 1) & 1, k & 1);
                let dst = &mut blocks[(co * 8 + k) * p..(co * 8 + k + 1) * p];
                for z in 0..d {
                    for y in 0..h {
                        let row = ((2 * z + a) * 2 * h + 2 * y + bb) * 2 * wd;
                        let drow = &mut dst[(z * h + y) * wd..(z * h + y + 1) * wd];
                        for (xi, v) in drow.iter_mut().enumerate() {
                            *v = gc[row + 2 * xi + c];
                        }
                    }
                }
            }
        }
        let xn = &x.data()[n * cin * p..(n + 1) * cin * p];
        if let Some(gw) = gw.as_mut() {
            T::gemm(cin, p, cout * 8, T::one(), xn, false, &blocks, true, T::one(), gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx.data_mut()[n * cin * p..(n + 1) * cin * p];
            T::gemm(cin, cout * 8, p, T::one(), w.data(), false, &blocks, false, T::zero(), gxn);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb.map(|v| {
            Tensor::from_vec(Shape::new(1, cout, 1, 1, 1), v.into_iter().map(T::of).collect())
                .expect("bias shape")
        }),
    }
}

impl<T: Real> Tape<T> {
    /// 3-D convolution. `w` is `(C_out, C_in, k_d, k_h, k_w)`, `b` is
    /// `(1, C_out, 1, 1, 1)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let value = conv3d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Kernel-2, stride-2 transposed convolution; doubles every spatial
    /// dim. `w` is `(C_in, C_out, 2, 2, 2)`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = conv_transpose3d_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose3d { x, w, b }, rg))
    }
}
