//! Standard and deformable 2D convolution kernels.
//!
//! Both paths lower to the same column-matrix form: a `[C·N, H_out·W_out]`
//! column buffer holding the input value seen by every kernel tap at every
//! output location, followed by one GEMM against the `[O, C·N]` weight
//! matrix. The deformable path fills the column buffer by bilinear sampling
//! at `p0 + pn + Δpn` instead of reading the lattice directly. One offset
//! field drives every input channel.
//!
//! Offset channel layout is `(Δy₁, Δx₁, Δy₂, Δx₂, …)` with taps in row-major
//! grid order. Samples that fall outside the input read as zero.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let spec = Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
            dilation: 1,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `k×k` kernel, stride 1, padding that preserves spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Result<Self> {
        self.dilation = dilation;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.kernel_h % 2 == 0 || self.kernel_w % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel must be odd and positive, got {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    /// Number of taps `N = |R|`.
    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Sampling grid `R`, row-major from the top-left tap, scaled by dilation.
    pub fn grid(&self) -> Vec<(isize, isize)> {
        let (rh, rw) = ((self.kernel_h / 2) as isize, (self.kernel_w / 2) as isize);
        let d = self.dilation as isize;
        let mut grid = Vec::with_capacity(self.taps());
        for i in -rh..=rh {
            for j in -rw..=rw {
                grid.push((i * d, j * d));
            }
        }
        grid
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation * (self.kernel_h - 1) + 1;
        let span_w = self.dilation * (self.kernel_w - 1) + 1;
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ph < span_h || pw < span_w {
            return Err(Error::invalid(format!(
                "empty convolution output for {h}x{w} input with {self:?}"
            )));
        }
        Ok(((ph - span_h) / self.stride + 1, (pw - span_w) / self.stride + 1))
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Input coordinate of the grid centre for output index `o` along one axis.
    fn centre(&self, o: usize, kernel: usize) -> isize {
        (o * self.stride) as isize - self.pad as isize + ((kernel / 2) * self.dilation) as isize
    }
}

/// Weights `[out, in, kh, kw]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(spec: &ConvSpec, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.dims() != spec.weight_dims() {
            return Err(Error::ShapeMismatch {
                op: "conv_params",
                left: weight.dims().to_vec(),
                right: spec.weight_dims().to_vec(),
            });
        }
        if bias.dims() != [spec.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv_params",
                left: bias.dims().to_vec(),
                right: vec![spec.out_channels],
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(spec: &ConvSpec) -> Self {
        Self {
            weight: Tensor::zeros(&spec.weight_dims()),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

/// Per-location `(Δy, Δx)` displacements for every kernel tap, `[2N, h_out, w_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T>(Tensor<T>);

impl<T: Scalar> OffsetField<T> {
    pub fn new(spec: &ConvSpec, out_h: usize, out_w: usize, field: Tensor<T>) -> Result<Self> {
        let want = [2 * spec.taps(), out_h, out_w];
        if field.dims() != want {
            return Err(Error::ShapeMismatch {
                op: "offset_field",
                left: field.dims().to_vec(),
                right: want.to_vec(),
            });
        }
        Ok(Self(field))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// `(Δy, Δx)` for tap `n` at output location `(i, j)`.
    pub fn at(&self, n: usize, i: usize, j: usize) -> (T, T) {
        (self.0.at(&[2 * n, i, j]), self.0.at(&[2 * n + 1, i, j]))
    }

    /// Mean displacement over all taps at `(i, j)`.
    pub fn mean_at(&self, i: usize, j: usize) -> (T, T) {
        let taps = self.0.dims()[0] / 2;
        let (mut dy, mut dx) = (T::zero(), T::zero());
        for n in 0..taps {
            let (a, b) = self.at(n, i, j);
            dy = dy + a;
            dx = dx + b;
        }
        let n = T::from_usize(taps).unwrap();
        (dy / n, dx / n)
    }
}

/// Four-neighbour interpolation footprint of one fractional position.
#[derive(Clone, Copy, Debug)]
struct Footprint<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

impl<T: Scalar> Footprint<T> {
    fn new(y: T, x: T) -> Self {
        let fy = y.floor();
        let fx = x.floor();
        Self {
            y0: fy.to_isize().unwrap_or(isize::MIN / 4),
            x0: fx.to_isize().unwrap_or(isize::MIN / 4),
            ly: y - fy,
            lx: x - fx,
        }
    }

    /// `(flat index, weight)` for in-bounds neighbours with non-zero weight.
    ///
    /// Zero-weight neighbours are skipped so integer positions reproduce the
    /// lattice value exactly.
    fn taps(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, T)> {
        let one = T::one();
        let (ly, lx) = (self.ly, self.lx);
        let cand = [
            (self.y0, self.x0, (one - ly) * (one - lx)),
            (self.y0, self.x0 + 1, (one - ly) * lx),
            (self.y0 + 1, self.x0, ly * (one - lx)),
            (self.y0 + 1, self.x0 + 1, ly * lx),
        ];
        cand.into_iter().filter_map(move |(y, x, wt)| {
            (wt != T::zero() && y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| (y as usize * w + x as usize, wt))
        })
    }

    fn value(&self, plane: &[T], h: usize, w: usize) -> T {
        self.taps(h, w).fold(T::zero(), |acc, (i, wt)| acc + wt * plane[i])
    }

    fn lattice(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    }

    /// `(∂v/∂y, ∂v/∂x)` using the cell `[y0, y0+1] × [x0, x0+1]`.
    fn position_grad(&self, plane: &[T], h: usize, w: usize) -> (T, T) {
        let one = T::one();
        let v00 = Self::lattice(plane, h, w, self.y0, self.x0);
        let v01 = Self::lattice(plane, h, w, self.y0, self.x0 + 1);
        let v10 = Self::lattice(plane, h, w, self.y0 + 1, self.x0);
        let v11 = Self::lattice(plane, h, w, self.y0 + 1, self.x0 + 1);
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }
}

/// Bilinearly interpolated value of every channel of `map: [c, h, w]` at `(y, x)`.
///
/// Lattice points outside `[0, h−1] × [0, w−1]` read as zero.
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, y: T, x: T) -> Result<Vec<T>> {
    let (c, h, w) = chw(map, "bilinear_sample")?;
    if !y.is_finite() || !x.is_finite() {
        return Err(Error::NonFinite { op: "bilinear_sample" });
    }
    let fp = Footprint::new(y, x);
    Ok((0..c)
        .map(|ch| fp.value(&map.data()[ch * h * w..(ch + 1) * h * w], h, w))
        .collect())
}

/// Gradient of each channel's bilinear sample with respect to `(y, x)`.
pub fn bilinear_position_grad<T: Scalar>(map: &Tensor<T>, y: T, x: T) -> Result<Vec<(T, T)>> {
    let (c, h, w) = chw(map, "bilinear_sample")?;
    let fp = Footprint::new(y, x);
    Ok((0..c)
        .map(|ch| fp.position_grad(&map.data()[ch * h * w..(ch + 1) * h * w], h, w))
        .collect())
}

pub(crate) fn chw<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: t.dims().to_vec(),
            right: vec![0, 0, 0],
        }),
    }
}

/// Geometry shared by forward and backward passes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub(crate) fn check<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, op: &'static str) -> Result<Self> {
        spec.validate()?;
        let (c, h, w) = chw(input, op)?;
        if c != spec.in_channels {
            return Err(Error::ShapeMismatch {
                op,
                left: input.dims().to_vec(),
                right: vec![spec.in_channels, h, w],
            });
        }
        let (ho, wo) = spec.output_dims(h, w)?;
        Ok(Self { c, h, w, ho, wo })
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry, spec: &ConvSpec) -> Vec<T> {
    let n_taps = spec.taps();
    let hw = g.out_len();
    let grid = spec.grid();
    let mut cols = vec![T::zero(); g.c * n_taps * hw];
    for ch in 0..g.c {
        let plane = &input[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for (n, &(dy, dx)) in grid.iter().enumerate() {
            let row = &mut cols[(ch * n_taps + n) * hw..(ch * n_taps + n + 1) * hw];
            for i in 0..g.ho {
                let y = spec.centre(i, spec.kernel_h) + dy;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for j in 0..g.wo {
                    let x = spec.centre(j, spec.kernel_w) + dx;
                    if x >= 0 && x < g.w as isize {
                        row[i * g.wo + j] = plane[y as usize * g.w + x as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeometry, spec: &ConvSpec, dinput: &mut [T]) {
    let n_taps = spec.taps();
    let hw = g.out_len();
    let grid = spec.grid();
    for ch in 0..g.c {
        let plane = &mut dinput[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for (n, &(dy, dx)) in grid.iter().enumerate() {
            let row = &dcols[(ch * n_taps + n) * hw..(ch * n_taps + n + 1) * hw];
            for i in 0..g.ho {
                let y = spec.centre(i, spec.kernel_h) + dy;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for j in 0..g.wo {
                    let x = spec.centre(j, spec.kernel_w) + dx;
                    if x >= 0 && x < g.w as isize {
                        let idx = y as usize * g.w + x as usize;
                        plane[idx] = plane[idx] + row[i * g.wo + j];
                    }
                }
            }
        }
    }
}

fn footprints<T: Scalar>(offsets: &[T], g: &ConvGeometry, spec: &ConvSpec) -> Vec<Footprint<T>> {
    let hw = g.out_len();
    let grid = spec.grid();
    let mut fps = Vec::with_capacity(grid.len() * hw);
    for (n, &(dy, dx)) in grid.iter().enumerate() {
        let oy = &offsets[2 * n * hw..(2 * n + 1) * hw];
        let ox = &offsets[(2 * n + 1) * hw..(2 * n + 2) * hw];
        for i in 0..g.ho {
            let by = T::from_isize(spec.centre(i, spec.kernel_h) + dy).unwrap();
            for j in 0..g.wo {
                let bx = T::from_isize(spec.centre(j, spec.kernel_w) + dx).unwrap();
                let p = i * g.wo + j;
                fps.push(Footprint::new(by + oy[p], bx + ox[p]));
            }
        }
    }
    fps
}

fn deform_im2col<T: Scalar>(input: &[T], offsets: &[T], g: &ConvGeometry, spec: &ConvSpec) -> Vec<T> {
    let n_taps = spec.taps();
    let hw = g.out_len();
    let fps = footprints(offsets, g, spec);
    let mut cols = vec![T::zero(); g.c * n_taps * hw];
    for ch in 0..g.c {
        let plane = &input[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let rows = &mut cols[ch * n_taps * hw..(ch + 1) * n_taps * hw];
        for (dst, fp) in rows.iter_mut().zip(&fps) {
            *dst = fp.value(plane, g.h, g.w);
        }
    }
    cols
}

/// `out[o, p] = Σ W[o, k]·cols[k, p] + b[o]`.
fn apply_weights<T: Scalar>(cols: &[T], weight: &[T], bias: &[T], out_channels: usize, k: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_channels * hw);
    for &b in bias {
        out.extend(std::iter::repeat(b).take(hw));
    }
    T::gemm(
        out_channels,
        k,
        hw,
        T::one(),
        weight,
        (k as isize, 1),
        cols,
        (hw as isize, 1),
        T::one(),
        &mut out,
        (hw as isize, 1),
    );
    out
}

pub(crate) struct ConvOutput<T> {
    pub output: Tensor<T>,
    pub cols: Vec<T>,
}

fn check_params<T: Scalar>(spec: &ConvSpec, weight: &Tensor<T>, bias: &Tensor<T>, op: &'static str) -> Result<()> {
    if weight.dims() != spec.weight_dims() || bias.dims() != [spec.out_channels] {
        return Err(Error::ShapeMismatch {
            op,
            left: weight.dims().to_vec(),
            right: spec.weight_dims().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(ConvOutput<T>, ConvGeometry)> {
    let g = ConvGeometry::check(input, spec, "conv2d")?;
    check_params(spec, weight, bias, "conv2d")?;
    let cols = im2col(input.data(), &g, spec);
    let out = apply_weights(&cols, weight.data(), bias.data(), spec.out_channels, g.c * spec.taps(), g.out_len());
    Ok((
        ConvOutput {
            output: Tensor::from_parts(vec![spec.out_channels, g.ho, g.wo], out),
            cols,
        },
        g,
    ))
}

pub(crate) fn deform_forward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(ConvOutput<T>, ConvGeometry)> {
    if spec.stride != 1 {
        return Err(Error::invalid("deformable convolution supports stride 1 only"));
    }
    let g = ConvGeometry::check(input, spec, "deform_conv2d")?;
    check_params(spec, weight, bias, "deform_conv2d")?;
    let want = [2 * spec.taps(), g.ho, g.wo];
    if offsets.dims() != want {
        return Err(Error::ShapeMismatch {
            op: "deform_conv2d",
            left: offsets.dims().to_vec(),
            right: want.to_vec(),
        });
    }
    let cols = deform_im2col(input.data(), offsets.data(), &g, spec);
    let out = apply_weights(&cols, weight.data(), bias.data(), spec.out_channels, g.c * spec.taps(), g.out_len());
    Ok((
        ConvOutput {
            output: Tensor::from_parts(vec![spec.out_channels, g.ho, g.wo], out),
            cols,
        },
        g,
    ))
}

/// Gradients shared by both paths: weight, bias and the column buffer.
pub(crate) struct ColumnGrads<T> {
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
    pub dcols: Option<Vec<T>>,
}

pub(crate) fn column_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    weight: &[T],
    out_channels: usize,
    k: usize,
    hw: usize,
    need_cols: bool,
) -> ColumnGrads<T> {
    let mut dweight = vec![T::zero(); out_channels * k];
    // dW = dout · colsᵀ
    T::gemm(
        out_channels,
        hw,
        k,
        T::one(),
        dout,
        (hw as isize, 1),
        cols,
        (1, hw as isize),
        T::zero(),
        &mut dweight,
        (k as isize, 1),
    );
    let dbias = dout.chunks(hw).map(|row| row.iter().copied().sum()).collect();
    let dcols = need_cols.then(|| {
        let mut dcols = vec![T::zero(); k * hw];
        // dcols = Wᵀ · dout
        T::gemm(
            k,
            out_channels,
            hw,
            T::one(),
            weight,
            (1, k as isize),
            dout,
            (hw as isize, 1),
            T::zero(),
            &mut dcols,
            (hw as isize, 1),
        );
        dcols
    });
    ColumnGrads { dweight, dbias, dcols }
}

pub(crate) fn conv2d_input_grad<T: Scalar>(dcols: &[T], g: &ConvGeometry, spec: &ConvSpec) -> Vec<T> {
    let mut dinput = vec![T::zero(); g.c * g.h * g.w];
    col2im_add(dcols, g, spec, &mut dinput);
    dinput
}

/// Input and offset gradients of the deformable path given `dcols`.
pub(crate) fn deform_input_offset_grads<T: Scalar>(
    dcols: &[T],
    input: &[T],
    offsets: &[T],
    g: &ConvGeometry,
    spec: &ConvSpec,
    need_input: bool,
    need_offsets: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n_taps = spec.taps();
    let hw = g.out_len();
    let plane_len = g.h * g.w;
    let fps = footprints(offsets, g, spec);
    let mut dinput = need_input.then(|| vec![T::zero(); g.c * plane_len]);
    let mut doff = need_offsets.then(|| vec![T::zero(); 2 * n_taps * hw]);
    for ch in 0..g.c {
        let plane = &input[ch * plane_len..(ch + 1) * plane_len];
        let drows = &dcols[ch * n_taps * hw..(ch + 1) * n_taps * hw];
        for (q, (&d, fp)) in drows.iter().zip(&fps).enumerate() {
            if d == T::zero() {
                continue;
            }
            if let Some(di) = dinput.as_mut() {
                let dplane = &mut di[ch * plane_len..(ch + 1) * plane_len];
                for (idx, wt) in fp.taps(g.h, g.w) {
                    dplane[idx] = dplane[idx] + d * wt;
                }
            }
            if let Some(doff) = doff.as_mut() {
                let (n, p) = (q / hw, q % hw);
                let (gy, gx) = fp.position_grad(plane, g.h, g.w);
                doff[2 * n * hw + p] = doff[2 * n * hw + p] + d * gy;
                doff[(2 * n + 1) * hw + p] = doff[(2 * n + 1) * hw + p] + d * gx;
            }
        }
    }
    (dinput, doff)
}

/// Standard convolution `y(p0) = Σ w(pn)·x(p0 + pn) + b` outside any tape.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, params: &ConvParams<T>) -> Result<Tensor<T>> {
    Ok(conv2d_forward(input, &params.weight, &params.bias, spec)?.0.output)
}

/// Deformable convolution `y(p0) = Σ w(pn)·x(p0 + pn + Δpn) + b` outside any tape.
pub fn deform_conv2d<T: Scalar>(
    input: &Tensor<T>,
    offsets: &OffsetField<T>,
    spec: &ConvSpec,
    params: &ConvParams<T>,
) -> Result<Tensor<T>> {
    Ok(deform_forward(input, offsets.tensor(), &params.weight, &params.bias, spec)?.0.output)
}

/// Offset field predicted by a plain convolution with `2N` output channels.
pub fn offset_conv<T: Scalar>(
    input: &Tensor<T>,
    offset_spec: &ConvSpec,
    offset_params: &ConvParams<T>,
    deform_spec: &ConvSpec,
) -> Result<OffsetField<T>> {
    if offset_spec.out_channels != 2 * deform_spec.taps() {
        return Err(Error::invalid(format!(
            "offset convolution must produce {} channels, has {}",
            2 * deform_spec.taps(),
            offset_spec.out_channels
        )));
    }
    let field = conv2d(input, offset_spec, offset_params)?;
    let (_, h, w) = chw(&field, "offset_conv")?;
    OffsetField::new(deform_spec, h, w, field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map22() -> Tensor<f64> {
        Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn bilinear_hits_lattice_exactly() {
        assert_eq!(bilinear_sample(&map22(), 0.0, 0.0).unwrap(), vec![1.0]);
        assert_eq!(bilinear_sample(&map22(), 1.0, 1.0).unwrap(), vec![4.0]);
    }

    #[test]
    fn bilinear_midpoint_is_mean_of_neighbours() {
        // 0.25·(1+2+3+4)
        assert_eq!(bilinear_sample(&map22(), 0.5, 0.5).unwrap(), vec![2.5]);
    }

    #[test]
    fn bilinear_outside_reads_zero() {
        assert_eq!(bilinear_sample(&map22(), -1.0, 0.0).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&map22(), 5.0, 5.0).unwrap(), vec![0.0]);
        // half way off the edge keeps half the weight
        assert_eq!(bilinear_sample(&map22(), -0.5, 0.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn bilinear_position_grad_uses_floor_cell() {
        // at (0,0): cell [0,1]x[0,1]; ∂/∂y = 3-1, ∂/∂x = 2-1
        let g = bilinear_position_grad(&map22(), 0.0, 0.0).unwrap();
        assert_eq!(g, vec![(2.0, 1.0)]);
        // at (1,1) the floor cell reaches outside: ∂/∂y = 0-4, ∂/∂x = 0-4
        let g = bilinear_position_grad(&map22(), 1.0, 1.0).unwrap();
        assert_eq!(g, vec![(-4.0, -4.0)]);
    }

    #[test]
    fn grid_is_row_major_and_dilated() {
        let spec = ConvSpec::same(1, 1, 3).unwrap();
        assert_eq!(spec.grid()[0], (-1, -1));
        assert_eq!(spec.grid()[1], (-1, 0));
        assert_eq!(spec.grid()[8], (1, 1));
        let dil = spec.with_dilation(2).unwrap();
        assert_eq!(dil.grid()[0], (-2, -2));
    }

    #[test]
    fn even_kernels_are_rejected() {
        assert!(ConvSpec::new(1, 1, 2, 1, 0).is_err());
        assert!(ConvSpec::new(1, 1, 3, 0, 1).is_err());
    }

    #[test]
    fn output_dims_follow_stride_and_padding() {
        let spec = ConvSpec::new(1, 1, 3, 2, 1).unwrap();
        assert_eq!(spec.output_dims(64, 64).unwrap(), (32, 32));
        assert_eq!(ConvSpec::same(1, 1, 3).unwrap().output_dims(5, 7).unwrap(), (5, 7));
        assert!(ConvSpec::new(1, 1, 5, 1, 0).unwrap().output_dims(3, 3).is_err());
    }

    #[test]
    fn offset_field_mean() {
        let spec = ConvSpec::same(1, 1, 1).unwrap();
        let f = OffsetField::new(&spec, 1, 1, Tensor::<f64>::from_f64(&[2, 1, 1], &[1.5, -2.0]).unwrap()).unwrap();
        assert_eq!(f.mean_at(0, 0), (1.5, -2.0));
        assert!(OffsetField::new(&spec, 2, 1, Tensor::<f64>::zeros(&[2, 1, 1])).is_err());
    }
}
