//! Forward and backward kernels on raw tensors.
//!
//! Every kernel runs single-threaded with a fixed loop order so results are
//! bit-reproducible. Volumetric kernels take `[N, C, D, H, W]` tensors.

use std::borrow::Cow;
use std::ops::Range;

use super::Tensor;
use crate::error::{Error, Result};

/// Zero padding and dilation of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub padding: [usize; 3],
    pub dilation: usize,
}

impl ConvGeometry {
    /// Padding that preserves spatial dims for a 3-wide kernel at `dilation`.
    pub fn same3(dilation: usize) -> Self {
        Self {
            padding: [dilation; 3],
            dilation,
        }
    }

    pub fn pointwise() -> Self {
        Self {
            padding: [0; 3],
            dilation: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 {
            return Err(Error::config("dilation must be positive"));
        }
        Ok(())
    }

    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize, axis: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding[axis]).checked_sub(span).map(|v| v + 1)
    }
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    beta: f32,
    c: (&mut [f32], isize, isize),
) {
    debug_assert!(m == 0 || k == 0 || a.0.len() > (m - 1) * a.1.unsigned_abs() + (k - 1) * a.2.unsigned_abs());
    debug_assert!(k == 0 || n == 0 || b.0.len() > (k - 1) * b.1.unsigned_abs() + (n - 1) * b.2.unsigned_abs());
    debug_assert!(m == 0 || n == 0 || c.0.len() > (m - 1) * c.1.unsigned_abs() + (n - 1) * c.2.unsigned_abs());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

struct ConvShape {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    padding: [usize; 3],
    dilation: usize,
    /// Flat indices of the taps that read at least one input voxel. The rest
    /// only ever see zero padding and are left out of the column matrix.
    live: Vec<usize>,
}

impl ConvShape {
    fn resolve(input: &Tensor, weight: &Tensor, geom: &ConvGeometry) -> Result<Self> {
        geom.validate()?;
        let [n, cin, d, h, w] = input.dims5()?;
        let [cout, wcin, kd, kh, kw] = weight.dims5()?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            )));
        }
        let input_sp = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = geom.out_extent(input_sp[ax], kernel[ax], ax).ok_or_else(|| {
                Error::dim(format!(
                    "axis {ax}: extent {} with padding {} too small for kernel {} at dilation {}",
                    input_sp[ax], geom.padding[ax], kernel[ax], geom.dilation
                ))
            })?;
        }
        Ok(Self::with_extents(n, cin, cout, input_sp, kernel, output, geom))
    }

    fn with_extents(
        n: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        output: [usize; 3],
        geom: &ConvGeometry,
    ) -> Self {
        let mut s = Self {
            n,
            cin,
            cout,
            input,
            kernel,
            output,
            padding: geom.padding,
            dilation: geom.dilation,
            live: Vec::new(),
        };
        let taps = kernel.iter().product::<usize>();
        s.live = (0..taps)
            .filter(|&t| {
                (0..3).all(|ax| {
                    let (lo, hi) = tap_range(output[ax], input[ax], s.offset(ax, s.tap_axis(t, ax)));
                    lo < hi
                })
            })
            .collect();
        s
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Position of flat tap `t` along axis `ax`.
    fn tap_axis(&self, t: usize, ax: usize) -> usize {
        let [_, kh, kw] = self.kernel;
        match ax {
            0 => t / (kh * kw),
            1 => t / kw % kh,
            _ => t % kw,
        }
    }

    /// Signed input offset of kernel position `k` along axis `ax`.
    fn offset(&self, ax: usize, k: usize) -> isize {
        (k * self.dilation) as isize - self.padding[ax] as isize
    }

    fn rows(&self) -> usize {
        self.cin * self.live.len()
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    /// A 1x1x1 kernel without padding reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Weight rows restricted to the live taps, `[cout, rows]`.
    fn live_weight<'a>(&self, weight: &'a [f32]) -> Cow<'a, [f32]> {
        let taps = self.taps();
        if self.live.len() == taps {
            return Cow::Borrowed(weight);
        }
        let mut out = Vec::with_capacity(self.cout * self.rows());
        for row in weight.chunks_exact(taps) {
            out.extend(self.live.iter().map(|&t| row[t]));
        }
        Cow::Owned(out)
    }

    /// Spread a `[cout, rows]` live-tap weight gradient over every tap.
    fn add_live_grad(&self, live_grad: &[f32], grad: &mut [f32]) {
        let taps = self.taps();
        let l = self.live.len();
        for (dst, src) in grad.chunks_exact_mut(taps).zip(live_grad.chunks_exact(l)) {
            for (&t, &v) in self.live.iter().zip(src) {
                dst[t] += v;
            }
        }
    }

    /// Shape and weights of the convolution taking an output gradient to the
    /// input gradient, when one exists: flipped taps, swapped channel roles
    /// and padding `dilation * (k - 1) - padding`.
    fn transposed(&self, weight: &[f32]) -> Option<(ConvShape, Vec<f32>)> {
        let mut padding = [0; 3];
        for ax in 0..3 {
            padding[ax] = (self.dilation * (self.kernel[ax] - 1)).checked_sub(self.padding[ax])?;
        }
        let taps = self.taps();
        let mut flipped = vec![0.0f32; weight.len()];
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for t in 0..taps {
                    flipped[(ci * self.cout + co) * taps + (taps - 1 - t)] = weight[(co * self.cin + ci) * taps + t];
                }
            }
        }
        let geom = ConvGeometry {
            padding,
            dilation: self.dilation,
        };
        let shape = Self::with_extents(self.n, self.cout, self.cin, self.output, self.kernel, self.input, &geom);
        Some((shape, flipped))
    }
}

/// Valid output range `[lo, hi)` along one axis for a tap at signed offset `off`.
fn tap_range(out: usize, inp: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = (inp as isize - off).clamp(0, out as isize) as usize;
    (lo.min(hi), hi)
}

/// Column-matrix floats per tile. Tiles of output lines keep the im2col
/// buffer in cache instead of materializing it for the whole volume.
const TILE_FLOATS: usize = 1 << 16;

/// Fewest output voxels per tile, so each weight-gradient product still
/// runs over a long inner dimension.
const MIN_TILE_VOXELS: usize = 512;

/// Output lines (fixed `oz`, `oy`) per tile for a column matrix with `rows` rows.
fn lines_per_tile(rows: usize, ow: usize) -> usize {
    (TILE_FLOATS / (rows * ow).max(1)).max(MIN_TILE_VOXELS.div_ceil(ow.max(1)))
}

/// Column matrix over the live taps for output lines `lines` of one batch
/// item, laid out `[rows, lines.len() * ow]`.
fn im2col(x: &[f32], s: &ConvShape, lines: Range<usize>, col: &mut [f32]) {
    let [d, h, w] = s.input;
    let [_, oh, ow] = s.output;
    let tv = lines.len() * ow;
    let mut r = 0;
    for ci in 0..s.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for &t in &s.live {
            let offz = s.offset(0, s.tap_axis(t, 0));
            let offy = s.offset(1, s.tap_axis(t, 1));
            let offx = s.offset(2, s.tap_axis(t, 2));
            let row = &mut col[r * tv..(r + 1) * tv];
            let (xlo, xhi) = tap_range(ow, w, offx);
            for (li, line) in lines.clone().enumerate() {
                let iz = (line / oh) as isize + offz;
                let iy = (line % oh) as isize + offy;
                let dst = &mut row[li * ow..(li + 1) * ow];
                if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize || xhi == xlo {
                    dst.fill(0.0);
                    continue;
                }
                let src0 = (((iz as usize * h + iy as usize) * w) as isize + xlo as isize + offx) as usize;
                dst[..xlo].fill(0.0);
                dst[xhi..].fill(0.0);
                dst[xlo..xhi].copy_from_slice(&xc[src0..src0 + (xhi - xlo)]);
            }
            r += 1;
        }
    }
}

/// Scatter-add a column-matrix tile (as produced by [`im2col`]) into `gx`.
fn col2im_add(col: &[f32], s: &ConvShape, lines: Range<usize>, gx: &mut [f32]) {
    let [d, h, w] = s.input;
    let [_, oh, ow] = s.output;
    let tv = lines.len() * ow;
    let mut r = 0;
    for ci in 0..s.cin {
        let gc = &mut gx[ci * d * h * w..(ci + 1) * d * h * w];
        for &t in &s.live {
            let offz = s.offset(0, s.tap_axis(t, 0));
            let offy = s.offset(1, s.tap_axis(t, 1));
            let offx = s.offset(2, s.tap_axis(t, 2));
            let row = &col[r * tv..(r + 1) * tv];
            let (xlo, xhi) = tap_range(ow, w, offx);
            for (li, line) in lines.clone().enumerate() {
                let iz = (line / oh) as isize + offz;
                let iy = (line % oh) as isize + offy;
                if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize || xhi == xlo {
                    continue;
                }
                let src = &row[li * ow + xlo..li * ow + xhi];
                let dst0 = (((iz as usize * h + iy as usize) * w) as isize + xlo as isize + offx) as usize;
                for (g, &v) in gc[dst0..dst0 + (xhi - xlo)].iter_mut().zip(src) {
                    *g += v;
                }
            }
            r += 1;
        }
    }
}

/// Calls `f(lines, tile_voxels)` for successive tiles of output lines.
fn for_each_tile(s: &ConvShape, mut f: impl FnMut(Range<usize>, usize)) {
    let [od, oh, ow] = s.output;
    let per = lines_per_tile(s.rows(), ow);
    let mut lo = 0;
    while lo < od * oh {
        let hi = (lo + per).min(od * oh);
        f(lo..hi, (hi - lo) * ow);
        lo = hi;
    }
}

/// `y = W . cols(x)` for one batch item, where `weight` is already restricted
/// to the live taps. `y` is `[cout, out_vox]`.
fn conv_gemm(x: &[f32], weight: &[f32], s: &ConvShape, col: &mut Vec<f32>, y: &mut [f32]) {
    let (rows, ov) = (s.rows(), s.out_vox());
    if s.is_pointwise() {
        sgemm(s.cout, rows, ov, (weight, rows as isize, 1), (x, ov as isize, 1), 0.0, (y, ov as isize, 1));
        return;
    }
    col.resize(rows * lines_per_tile(rows, s.output[2]) * s.output[2], 0.0);
    let ow = s.output[2];
    for_each_tile(s, |lines, tv| {
        let lo = lines.start;
        im2col(x, s, lines, col);
        sgemm(
            s.cout,
            rows,
            tv,
            (weight, rows as isize, 1),
            (col, tv as isize, 1),
            0.0,
            (&mut y[lo * ow..], ov as isize, 1),
        );
    });
}

/// Stride-1 3D convolution with zero padding and dilation.
pub fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let s = ConvShape::resolve(input, weight, geom)?;
    if let Some(b) = bias {
        if b.shape() != [s.cout] {
            return Err(Error::dim(format!(
                "bias shape {:?} for {} output channels",
                b.shape(),
                s.cout
            )));
        }
    }
    let (iv, ov) = (s.in_vox(), s.out_vox());
    let w = s.live_weight(weight.data());
    let mut out = vec![0.0f32; s.n * s.cout * ov];
    let mut col = Vec::new();
    for n in 0..s.n {
        let x = &input.data()[n * s.cin * iv..(n + 1) * s.cin * iv];
        let y = &mut out[n * s.cout * ov..(n + 1) * s.cout * ov];
        conv_gemm(x, &w, &s, &mut col, y);
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                y[co * ov..(co + 1) * ov].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![s.n, s.cout, s.output[0], s.output[1], s.output[2]], out)
}

/// Gradients of [`conv3d_forward`] with respect to input (when
/// `input_grad` is set), weight and (optionally) bias.
pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    input_grad: bool,
    geom: &ConvGeometry,
    grad_out: &Tensor,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let s = ConvShape::resolve(input, weight, geom)?;
    let expect = [s.n, s.cout, s.output[0], s.output[1], s.output[2]];
    if grad_out.shape() != expect {
        return Err(Error::dim(format!(
            "conv grad_out shape {:?}, forward produced {expect:?}",
            grad_out.shape()
        )));
    }
    let (rows, iv, ov) = (s.rows(), s.in_vox(), s.out_vox());
    let ow = s.output[2];
    let pointwise = s.is_pointwise();
    let w = s.live_weight(weight.data());
    let transpose = if pointwise || !input_grad {
        None
    } else {
        s.transposed(weight.data())
            .map(|(ts, tw)| {
                let tw = ts.live_weight(&tw).into_owned();
                (ts, tw)
            })
    };
    let mut gx = vec![0.0f32; if input_grad { input.len() } else { 0 }];
    let mut gw = vec![0.0f32; s.cout * rows];
    let mut gb = vec![0.0f32; s.cout];
    let mut col = Vec::new();
    let mut gcol = Vec::new();
    for n in 0..s.n {
        let x = &input.data()[n * s.cin * iv..(n + 1) * s.cin * iv];
        let gy = &grad_out.data()[n * s.cout * ov..(n + 1) * s.cout * ov];
        let gxn = if input_grad { &mut gx[n * s.cin * iv..(n + 1) * s.cin * iv] } else { &mut [][..] };
        if pointwise {
            // gW += gy . x^T, gx = W^T . gy
            sgemm(s.cout, ov, rows, (gy, ov as isize, 1), (x, 1, ov as isize), 1.0, (&mut gw, rows as isize, 1));
            if input_grad {
                sgemm(rows, s.cout, ov, (&w, 1, rows as isize), (gy, ov as isize, 1), 0.0, (gxn, ov as isize, 1));
            }
        } else {
            let scatter = input_grad && transpose.is_none();
            let tile = rows * lines_per_tile(rows, ow) * ow;
            col.resize(tile, 0.0);
            if scatter {
                gcol.resize(tile, 0.0);
            }
            for_each_tile(&s, |lines, tv| {
                let lo = lines.start;
                im2col(x, &s, lines.clone(), &mut col);
                // gW += gy_tile . col_tile^T
                sgemm(
                    s.cout,
                    tv,
                    rows,
                    (&gy[lo * ow..], ov as isize, 1),
                    (&col, 1, tv as isize),
                    1.0,
                    (&mut gw, rows as isize, 1),
                );
                if scatter {
                    sgemm(
                        rows,
                        s.cout,
                        tv,
                        (&w, 1, rows as isize),
                        (&gy[lo * ow..], ov as isize, 1),
                        0.0,
                        (&mut gcol, tv as isize, 1),
                    );
                    col2im_add(&gcol, &s, lines, gxn);
                }
            });
            if let Some((ts, tw)) = &transpose {
                conv_gemm(gy, tw, ts, &mut gcol, gxn);
            }
        }
        if with_bias {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += gy[co * ov..(co + 1) * ov].iter().sum::<f32>();
            }
        }
    }
    let mut gw_full = vec![0.0f32; weight.len()];
    s.add_live_grad(&gw, &mut gw_full);
    Ok((
        if input_grad {
            Some(Tensor::new(input.shape().to_vec(), gx)?)
        } else {
            None
        },
        Tensor::new(weight.shape().to_vec(), gw_full)?,
        if with_bias {
            Some(Tensor::new(vec![s.cout], gb)?)
        } else {
            None
        },
    ))
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index it was taken from (first index wins ties).
pub fn maxpool3d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, d, h, w] = input.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "max pooling needs even spatial dims, got {d}x{h}x{w}"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, od, oh, ow], out)?, arg))
}

pub fn maxpool3d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::dim("max-pool gradient does not match the pooled output"));
    }
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    Ok(g)
}

/// Nearest-neighbour upsampling by an integer factor along each spatial axis.
pub fn upsample3d_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    let [n, c, d, h, w] = input.dims5()?;
    if factor == 1 {
        return Tensor::new(input.shape().to_vec(), input.data().to_vec());
    }
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0.0f32; n * c * od * oh * ow];
    for nc in 0..n * c {
        let src = &x[nc * d * h * w..(nc + 1) * d * h * w];
        let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let srow = &src[((z / factor) * h + y / factor) * w..][..w];
                let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / factor];
                }
            }
        }
    }
    Tensor::new(vec![n, c, od, oh, ow], out)
}

/// Adjoint of [`upsample3d_forward`]: sums each replication block.
pub fn upsample3d_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w] = match input_shape {
        &[n, c, d, h, w] => [n, c, d, h, w],
        s => return Err(Error::dim(format!("expected 5-d input shape, got {s:?}"))),
    };
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    if grad_out.shape() != [n, c, od, oh, ow] {
        return Err(Error::dim("upsample gradient shape mismatch"));
    }
    let g = grad_out.data();
    let mut out = vec![0.0f32; n * c * d * h * w];
    for nc in 0..n * c {
        let src = &g[nc * od * oh * ow..(nc + 1) * od * oh * ow];
        let dst = &mut out[nc * d * h * w..(nc + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                let drow = &mut dst[((z / factor) * h + y / factor) * w..][..w];
                for (xo, &v) in srow.iter().enumerate() {
                    drow[xo / factor] += v;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates only.
    Eval,
}

/// Running statistics and constants of one batch-normalization layer.
/// The affine scale and shift are ordinary parameters held elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Values saved by [`batchnorm3d_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub mode: NormMode,
}

pub fn batchnorm3d_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BatchNormState,
    mode: NormMode,
) -> Result<(Tensor, BatchNormSaved)> {
    let [n, c, d, h, w] = input.dims5()?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::dim(format!(
            "batch norm over {c} channels with gamma {}, beta {}, state {}",
            gamma.len(),
            beta.len(),
            state.channels()
        )));
    }
    let s = d * h * w;
    let count = n * s;
    let x = input.data();
    let mut inv_std = vec![0.0f32; c];
    let mut mean = vec![0.0f32; c];
    for ch in 0..c {
        match mode {
            NormMode::Train => {
                let mut acc = 0.0f64;
                for b in 0..n {
                    acc += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                        .iter()
                        .map(|&v| f64::from(v))
                        .sum::<f64>();
                }
                let mu = acc / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    sq += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                        .iter()
                        .map(|&v| {
                            let t = f64::from(v) - mu;
                            t * t
                        })
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                mean[ch] = mu as f32;
                inv_std[ch] = (1.0 / (var + f64::from(state.eps)).sqrt()) as f32;
                let unbiased = if count > 1 {
                    var * count as f64 / (count - 1) as f64
                } else {
                    var
                };
                let m = state.momentum;
                state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mu as f32;
                state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * unbiased as f32;
            }
            NormMode::Eval => {
                mean[ch] = state.running_mean[ch];
                inv_std[ch] = 1.0 / (state.running_var[ch].max(0.0) + state.eps).sqrt();
            }
        }
    }
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = *xh * g[ch] + bt[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormSaved { xhat, inv_std, mode },
    ))
}

pub fn batchnorm3d_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    saved: &BatchNormSaved,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, d, h, w] = grad_out.dims5()?;
    let s = d * h * w;
    let count = (n * s) as f64;
    let gy = grad_out.data();
    let mut gx = vec![0.0f32; gy.len()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for b in 0..n {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            for (&g, &xh) in gy[r.clone()].iter().zip(&saved.xhat[r]) {
                sum_g += f64::from(g);
                sum_gx += f64::from(g) * f64::from(xh);
            }
        }
        ggamma[ch] = sum_gx as f32;
        gbeta[ch] = sum_g as f32;
        let k = gamma.data()[ch] * saved.inv_std[ch];
        let mean_g = (sum_g / count) as f32;
        let mean_gx = (sum_gx / count) as f32;
        for b in 0..n {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            for ((o, &g), &xh) in gx[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&saved.xhat[r]) {
                *o = match saved.mode {
                    NormMode::Train => k * (g - mean_g - xh * mean_gx),
                    NormMode::Eval => k * g,
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

pub fn leaky_relu_forward(input: &Tensor, slope: f32) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// The derivative at exactly zero is taken as 1.
pub fn leaky_relu_backward(input: &Tensor, slope: f32, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Concatenate along the channel axis.
pub fn concat_channels_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::dim("concatenation of zero tensors"))?;
    let [n, _, d, h, w] = first.dims5()?;
    let mut total_c = 0;
    for t in inputs {
        let [tn, tc, td, th, tw] = t.dims5()?;
        if [tn, td, th, tw] != [n, d, h, w] {
            return Err(Error::dim(format!(
                "concatenating {:?} with {:?}: non-channel dims differ",
                first.shape(),
                t.shape()
            )));
        }
        total_c += tc;
    }
    let s = d * h * w;
    let mut out = Vec::with_capacity(n * total_c * s);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * s..(b + 1) * c * s]);
        }
    }
    Tensor::new(vec![n, total_c, d, h, w], out)
}

/// Split a channel-concatenated gradient back into pieces of the given channel counts.
pub fn concat_channels_backward(grad_out: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, d, h, w] = grad_out.dims5()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::dim("concat split does not cover the channel axis"));
    }
    let s = d * h * w;
    let g = grad_out.data();
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|&k| Vec::with_capacity(n * k * s)).collect();
    for b in 0..n {
        let mut off = b * c * s;
        for (part, &k) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[off..off + k * s]);
            off += k * s;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(p, &k)| Tensor::new(vec![n, k, d, h, w], p))
        .collect()
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "adding shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Softmax over the channel axis of a `[N, C, ...]` tensor, max-subtracted.
pub fn softmax_channels_forward(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::dim("softmax needs a channel axis"));
    }
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![0.0f32; c];
    for b in 0..n {
        let base = b * c * s;
        for v in 0..s {
            let mut m = f32::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * s + v]);
            }
            let mut z = 0.0f32;
            for ch in 0..c {
                buf[ch] = (x[base + ch * s + v] - m).exp();
                z += buf[ch];
            }
            for ch in 0..c {
                out[base + ch * s + v] = buf[ch] / z;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub fn softmax_channels_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let shape = output.shape();
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let (y, g) = (output.data(), grad_out.data());
    let mut gx = vec![0.0f32; y.len()];
    for b in 0..n {
        let base = b * c * s;
        for v in 0..s {
            let mut dot = 0.0f32;
            for ch in 0..c {
                dot += y[base + ch * s + v] * g[base + ch * s + v];
            }
            for ch in 0..c {
                let i = base + ch * s + v;
                gx[i] = y[i] * (g[i] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), gx)
}
