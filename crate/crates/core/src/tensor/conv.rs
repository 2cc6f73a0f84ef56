//! 3D convolution (cross-correlation, zero padding, grouped).
//!
//! The fast path lowers each output time slice to a patch matrix and hands
//! it to `sgemm`; pointwise convolutions skip the lowering and read the
//! input in place. [`reference`] is the plain nested-loop definition and is
//! kept public so tests can compare against it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_axis, window_output, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(kt, kh, kw)`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvGeometry {
    /// Stride 1, `floor(k / 2)` padding on each axis, one group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride: [1, 1, 1],
            padding: kernel.map(|k| k / 2),
            groups: 1,
        }
    }

    pub fn cube(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::new(in_channels, out_channels, [k, k, k])
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::Config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::config("kernel and stride must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        let [kt, kh, kw] = self.kernel;
        Shape::new(self.out_channels, self.in_channels / self.groups, kt, kh, kw)
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().numel()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        check_axis("conv3d", 1, self.in_channels, input.c())?;
        let mut out = [input.n(), self.out_channels, 0, 0, 0];
        for a in 0..3 {
            out[a + 2] = window_output(
                "conv3d",
                a + 2,
                input.0[a + 2],
                self.kernel[a],
                self.stride[a],
                self.padding[a],
            )?;
        }
        Ok(Shape(out))
    }

    fn patch_len(&self) -> usize {
        self.in_channels / self.groups * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Geometry plus weight; convolutions carry no bias.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub geometry: ConvGeometry,
    pub weight: Tensor,
}

impl ConvParams {
    pub fn new(geometry: ConvGeometry, weight: Tensor) -> Result<Self> {
        geometry.validate()?;
        let expected = geometry.weight_shape();
        if weight.shape() != expected {
            return Err(Error::Config(format!(
                "conv weight shape {} does not match declared {expected}",
                weight.shape()
            )));
        }
        Ok(ConvParams { geometry, weight })
    }
}

pub fn conv3d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    forward(input, params.weight.data(), &params.geometry)
}

struct Dims {
    t: usize,
    h: usize,
    w: usize,
    ot: usize,
    oh: usize,
    ow: usize,
}

impl Dims {
    fn new(input: Shape, output: Shape) -> Self {
        Dims {
            t: input.t(),
            h: input.h(),
            w: input.w(),
            ot: output.t(),
            oh: output.h(),
            ow: output.w(),
        }
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn forward(input: &Tensor, weight: &[f32], g: &ConvGeometry) -> Result<Tensor> {
    let out_shape = g.output_shape(input.shape())?;
    if weight.len() != g.weight_len() {
        return Err(Error::config("conv weight length does not match geometry"));
    }
    let mut out = Tensor::zeros(out_shape);
    if out_shape.numel() == 0 || input.numel() == 0 {
        return Ok(out);
    }
    let dims = Dims::new(input.shape(), out_shape);
    let in_per = input.shape().per_sample();
    out.data_mut()
        .par_chunks_mut(out_shape.per_sample())
        .zip(input.data().par_chunks(in_per))
        .for_each(|(y, x)| forward_sample(x, weight, g, &dims, y));
    Ok(out)
}

fn forward_sample(x: &[f32], weight: &[f32], g: &ConvGeometry, d: &Dims, y: &mut [f32]) {
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let k = g.patch_len();
    let hw = d.out_hw();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; k * hw] };
    for to in 0..d.ot {
        for grp in 0..g.groups {
            let wg = &weight[grp * cout_g * k..];
            let (b_ptr, rsb) = if pointwise {
                let base = (grp * cin_g * d.t + to) * d.h * d.w;
                (x[base..].as_ptr(), (d.t * d.h * d.w) as isize)
            } else {
                im2col(x, g, d, to, grp, &mut col);
                (col.as_ptr(), hw as isize)
            };
            let c_off = (grp * cout_g * d.ot + to) * hw;
            // SAFETY: all strides address elements inside the borrowed slices
            // (weight block cout_g x k, patch k x hw, output rows cout_g x hw
            // spaced ot*hw apart inside this sample).
            unsafe {
                matrixmultiply::sgemm(
                    cout_g,
                    k,
                    hw,
                    1.0,
                    wg.as_ptr(),
                    k as isize,
                    1,
                    b_ptr,
                    rsb,
                    1,
                    0.0,
                    y[c_off..].as_mut_ptr(),
                    (d.ot * hw) as isize,
                    1,
                );
            }
        }
    }
}

/// Patch matrix for output time slice `to` of group `grp`: row
/// `((ci * kt + dt) * kh + dh) * kw + dw`, column `oy * ow + ox`.
fn im2col(x: &[f32], g: &ConvGeometry, d: &Dims, to: usize, grp: usize, col: &mut [f32]) {
    let cin_g = g.in_channels / g.groups;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let hw = d.out_hw();
    for ci in 0..cin_g {
        let c = grp * cin_g + ci;
        for dt in 0..kt {
            let it = (to * st + dt) as isize - pt as isize;
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    if it < 0 || it as usize >= d.t {
                        dst.fill(0.0);
                        continue;
                    }
                    let plane = (c * d.t + it as usize) * d.h;
                    for oy in 0..d.oh {
                        let seg = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                        let iy = (oy * sh + dh) as isize - ph as isize;
                        if iy < 0 || iy as usize >= d.h {
                            seg.fill(0.0);
                            continue;
                        }
                        let src = &x[(plane + iy as usize) * d.w..(plane + iy as usize + 1) * d.w];
                        gather_row(src, seg, sw, dw, pw);
                    }
                }
            }
        }
    }
}

#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // ox is valid when 0 <= ox * stride + offset - pad < in_len.
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[inline]
fn gather_row(src: &[f32], seg: &mut [f32], stride: usize, offset: usize, pad: usize) {
    let (lo, hi) = valid_range(seg.len(), src.len(), stride, offset, pad);
    seg[..lo].fill(0.0);
    seg[hi..].fill(0.0);
    if lo == hi {
        return;
    }
    let start = lo * stride + offset - pad;
    if stride == 1 {
        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
    } else {
        for (j, v) in seg[lo..hi].iter_mut().enumerate() {
            *v = src[start + j * stride];
        }
    }
}

#[inline]
fn scatter_row(seg: &[f32], dst: &mut [f32], stride: usize, offset: usize, pad: usize) {
    let (lo, hi) = valid_range(seg.len(), dst.len(), stride, offset, pad);
    if lo == hi {
        return;
    }
    let start = lo * stride + offset - pad;
    for (j, v) in seg[lo..hi].iter().enumerate() {
        dst[start + j * stride] += *v;
    }
}

/// Adds the patch matrix back into `dx` (adjoint of [`im2col`]).
fn col2im(col: &[f32], g: &ConvGeometry, d: &Dims, to: usize, grp: usize, dx: &mut [f32]) {
    let cin_g = g.in_channels / g.groups;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let hw = d.out_hw();
    for ci in 0..cin_g {
        let c = grp * cin_g + ci;
        for dt in 0..kt {
            let it = (to * st + dt) as isize - pt as isize;
            if it < 0 || it as usize >= d.t {
                continue;
            }
            let plane = (c * d.t + it as usize) * d.h;
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..d.oh {
                        let iy = (oy * sh + dh) as isize - ph as isize;
                        if iy < 0 || iy as usize >= d.h {
                            continue;
                        }
                        let r = plane + iy as usize;
                        scatter_row(
                            &src[oy * d.ow..(oy + 1) * d.ow],
                            &mut dx[r * d.w..(r + 1) * d.w],
                            sw,
                            dw,
                            pw,
                        );
                    }
                }
            }
        }
    }
}

/// Gradients with respect to the input and the weight. Per-sample weight
/// gradients are summed in batch order so the result does not depend on
/// how samples were scheduled.
pub(crate) fn backward(
    input: &Tensor,
    weight: &[f32],
    g: &ConvGeometry,
    dy: &[f32],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let out_shape = g
        .output_shape(input.shape())
        .expect("geometry validated in forward");
    let dims = Dims::new(input.shape(), out_shape);
    let in_per = input.shape().per_sample();
    let out_per = out_shape.per_sample();
    let n = input.shape().n();
    let mut dx = need_input.then(|| vec![0.0f32; input.numel()]);
    if n == 0 || in_per == 0 || out_per == 0 {
        return (dx, need_weight.then(|| vec![0.0; weight.len()]));
    }

    let partial_dw: Vec<Option<Vec<f32>>> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(in_per)
            .zip(input.data().par_chunks(in_per))
            .zip(dy.par_chunks(out_per))
            .map(|((dxs, xs), dys)| backward_sample(xs, weight, g, &dims, dys, Some(dxs), need_weight))
            .collect(),
        None => input
            .data()
            .par_chunks(in_per)
            .zip(dy.par_chunks(out_per))
            .map(|(xs, dys)| backward_sample(xs, weight, g, &dims, dys, None, need_weight))
            .collect(),
    };

    let dw = need_weight.then(|| {
        let mut acc = vec![0.0f32; weight.len()];
        for part in partial_dw.into_iter().flatten() {
            acc.iter_mut().zip(&part).for_each(|(a, b)| *a += *b);
        }
        acc
    });
    (dx, dw)
}

fn backward_sample(
    x: &[f32],
    weight: &[f32],
    g: &ConvGeometry,
    d: &Dims,
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    need_weight: bool,
) -> Option<Vec<f32>> {
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let k = g.patch_len();
    let hw = d.out_hw();
    let in_vol = d.t * d.h * d.w;
    let pointwise = g.is_pointwise();
    let mut dw = need_weight.then(|| vec![0.0f32; weight.len()]);
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; k * hw] };
    let mut dcol = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0f32; k * hw]
    };

    for to in 0..d.ot {
        for grp in 0..g.groups {
            let dy_off = (grp * cout_g * d.ot + to) * hw;
            let dy_ptr = dy[dy_off..].as_ptr();
            let dy_rs = (d.ot * hw) as isize;
            let wg = &weight[grp * cout_g * k..];

            if let Some(dw) = dw.as_mut() {
                let (b_ptr, rsb, csb) = if pointwise {
                    let base = (grp * cin_g * d.t + to) * d.h * d.w;
                    (x[base..].as_ptr(), 1isize, in_vol as isize)
                } else {
                    im2col(x, g, d, to, grp, &mut col);
                    (col.as_ptr(), 1isize, hw as isize)
                };
                // dW_g (cout_g x k) += dY (cout_g x hw) * patch^T (hw x k)
                unsafe {
                    matrixmultiply::sgemm(
                        cout_g,
                        hw,
                        k,
                        1.0,
                        dy_ptr,
                        dy_rs,
                        1,
                        b_ptr,
                        rsb,
                        csb,
                        1.0,
                        dw[grp * cout_g * k..].as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
            }

            if let Some(dx) = dx.as_deref_mut() {
                if pointwise {
                    let base = (grp * cin_g * d.t + to) * d.h * d.w;
                    // dX (cin_g x hw) += W_g^T (cin_g x cout_g) * dY (cout_g x hw)
                    unsafe {
                        matrixmultiply::sgemm(
                            cin_g,
                            cout_g,
                            hw,
                            1.0,
                            wg.as_ptr(),
                            1,
                            k as isize,
                            dy_ptr,
                            dy_rs,
                            1,
                            1.0,
                            dx[base..].as_mut_ptr(),
                            in_vol as isize,
                            1,
                        );
                    }
                } else {
                    unsafe {
                        matrixmultiply::sgemm(
                            k,
                            cout_g,
                            hw,
                            1.0,
                            wg.as_ptr(),
                            1,
                            k as isize,
                            dy_ptr,
                            dy_rs,
                            1,
                            0.0,
                            dcol.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    col2im(&dcol, g, d, to, grp, dx);
                }
            }
        }
    }
    dw
}

/// Direct nested-loop convolution, the definition the fast path must match.
pub mod reference {
    use super::*;

    pub fn conv3d(input: &Tensor, weight: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
        let os = g.output_shape(input.shape())?;
        let is = input.shape();
        let w = weight.data();
        let cin_g = g.in_channels / g.groups;
        let cout_g = g.out_channels / g.groups;
        let [kt, kh, kw] = g.kernel;
        let mut out = Tensor::zeros(os);
        for n in 0..os.n() {
            for co in 0..os.c() {
                let grp = co / cout_g;
                for ot in 0..os.t() {
                    for oh in 0..os.h() {
                        for ow in 0..os.w() {
                            let mut acc = 0.0f64;
                            for ci in 0..cin_g {
                                let c = grp * cin_g + ci;
                                for dt in 0..kt {
                                    let it = (ot * g.stride[0] + dt) as isize - g.padding[0] as isize;
                                    if it < 0 || it as usize >= is.t() {
                                        continue;
                                    }
                                    for dh in 0..kh {
                                        let ih = (oh * g.stride[1] + dh) as isize - g.padding[1] as isize;
                                        if ih < 0 || ih as usize >= is.h() {
                                            continue;
                                        }
                                        for dw in 0..kw {
                                            let iw = (ow * g.stride[2] + dw) as isize
                                                - g.padding[2] as isize;
                                            if iw < 0 || iw as usize >= is.w() {
                                                continue;
                                            }
                                            let xv = input.at(n, c, it as usize, ih as usize, iw as usize);
                                            let wv = w[(((co * cin_g + ci) * kt + dt) * kh + dh) * kw + dw];
                                            acc += f64::from(xv) * f64::from(wv);
                                        }
                                    }
                                }
                            }
                            let off = out.offset(n, co, ot, oh, ow);
                            out.data_mut()[off] = acc as f32;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
