//! 2-D convolution and its transpose via im2col + GEMM.
//!
//! Cross-correlation convention. The transposed convolution is defined as
//! the exact adjoint of the convolution that maps its output back to its
//! input, so `<conv2d(x, k), y> == <x, conv_transpose2d(y, k)>`.

use super::tape::{Op, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution, as (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }
}

/// Output extent of a convolution along one axis, if the kernel fits.
pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Inclusive range of output extents a transposed convolution may produce
/// from `input` along one axis.
pub fn conv_transpose2d_window(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    if input == 0 || stride == 0 {
        return None;
    }
    let lo = ((input - 1) * stride + kernel) as isize - 2 * pad as isize;
    let hi = lo + stride as isize - 1;
    (hi >= 1).then(|| (lo.max(1) as usize, hi as usize))
}

/// Geometry of the forward convolution `[B, cin, h, w] -> [B, cout, oh, ow]`.
/// For a transposed convolution this describes the adjoint direction, i.e.
/// `cin/h/w` is the transposed op's output.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_px(&self) -> usize {
        self.oh * self.ow
    }
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }
}

/// Unfolds one sample `[cin, h, w]` into `[cin·kh·kw, oh·ow]`.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_px();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `[cin·kh·kw, oh·ow]` columns back into `[cin, h, w]`.
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.out_px();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            let d = &mut x[base + ix as usize];
                            *d = *d + cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.patch(), g.out_px());
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.b * g.out_len()];
    for n in 0..g.b {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        let o = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        T::gemm(g.cout, k, p, w, false, &cols, false, T::one(), o);
    }
    out
}

type Grads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

fn bias_grad<T: Element>(b: usize, channels: usize, px: usize, gy: &[T]) -> Vec<T> {
    let mut gb = vec![T::zero(); channels];
    for n in 0..b {
        for (c, acc) in gb.iter_mut().enumerate() {
            let off = (n * channels + c) * px;
            *acc = *acc + gy[off..off + px].iter().copied().sum::<T>();
        }
    }
    gb
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> Grads<T> {
    let (k, p) = (g.patch(), g.out_px());
    let mut cols = vec![T::zero(); k * p];
    let mut gcols = vec![T::zero(); k * p];
    let mut gx = want_x.then(|| vec![T::zero(); g.b * g.in_len()]);
    let mut gw = want_w.then(|| vec![T::zero(); g.cout * k]);
    for n in 0..g.b {
        let gyn = &gy[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(gw) = gw.as_mut() {
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            T::gemm(g.cout, p, k, gyn, false, &cols, true, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(k, g.cout, p, w, true, gyn, false, T::zero(), &mut gcols);
            col2im(g, &gcols, &mut gx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    let gb = want_b.then(|| bias_grad(g.b, g.cout, p, gy));
    (gx, gw, gb)
}

/// Forward of the transposed convolution: `y` is `[B, cout, oh, ow]` in
/// adjoint geometry, the result `[B, cin, h, w]`.
fn conv_transpose2d_forward<T: Element>(g: &ConvGeom, y: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (k, p) = (g.patch(), g.out_px());
    let mut cols = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.b * g.in_len()];
    let hw = g.h * g.w;
    for n in 0..g.b {
        T::gemm(k, g.cout, p, w, true, &y[n * g.out_len()..(n + 1) * g.out_len()], false, T::zero(), &mut cols);
        let o = &mut out[n * g.in_len()..(n + 1) * g.in_len()];
        col2im(g, &cols, o);
        for (c, chunk) in o.chunks_mut(hw).enumerate() {
            for v in chunk {
                *v = *v + bias[c];
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    g: &ConvGeom,
    y: &[T],
    w: &[T],
    gout: &[T],
    want_y: bool,
    want_w: bool,
    want_b: bool,
) -> Grads<T> {
    let (k, p) = (g.patch(), g.out_px());
    let mut cols = vec![T::zero(); k * p];
    let mut gy = want_y.then(|| vec![T::zero(); g.b * g.out_len()]);
    let mut gw = want_w.then(|| vec![T::zero(); g.cout * k]);
    for n in 0..g.b {
        if gy.is_none() && gw.is_none() {
            break;
        }
        im2col(g, &gout[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        if let Some(gy) = gy.as_mut() {
            let dst = &mut gy[n * g.out_len()..(n + 1) * g.out_len()];
            T::gemm(g.cout, k, p, w, false, &cols, false, T::zero(), dst);
        }
        if let Some(gw) = gw.as_mut() {
            let yn = &y[n * g.out_len()..(n + 1) * g.out_len()];
            T::gemm(g.cout, p, k, yn, false, &cols, true, T::one(), gw);
        }
    }
    let gb = want_b.then(|| bias_grad(g.b, g.cin, g.h * g.w, gout));
    (gy, gw, gb)
}

fn check_stride(spec: &Conv2dSpec) -> Result<()> {
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(Error::Argument(format!("stride must be positive, got {:?}", spec.stride)));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// `input [B, Cin, H, W]`, `kernel [Cout, Cin, kH, kW]`, `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        check_stride(&spec)?;
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension(format!("conv2d expects 4-d input and kernel, got {xs:?} and {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d input has {} channels but kernel {ks:?} expects {}",
                xs[1], ks[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::Dimension(format!("conv2d bias {bs:?} does not match kernel {ks:?}")));
        }
        let oh = conv2d_out_extent(xs[2], ks[2], spec.stride.0, spec.padding.0);
        let ow = conv2d_out_extent(xs[3], ks[3], spec.stride.1, spec.padding.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Dimension(format!(
                "kernel {ks:?} larger than padded input {xs:?} (padding {:?})",
                spec.padding
            )));
        };
        let geom = ConvGeom {
            b: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            oh,
            ow,
        };
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![geom.b, geom.cout, oh, ow], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: input,
                w: kernel,
                b: bias,
                geom,
            },
        ))
    }

    /// `input [B, Cin, H, W]`, `kernel [Cin, Cout, kH, kW]`, `bias [Cout]`;
    /// `output_size` picks the result extent inside the stride window.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        spec: Conv2dSpec,
        output_size: (usize, usize),
    ) -> Result<Var> {
        check_stride(&spec)?;
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv_transpose2d expects 4-d input and kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[0] {
            return Err(Error::Dimension(format!(
                "conv_transpose2d input has {} channels but kernel {ks:?} expects {}",
                xs[1], ks[0]
            )));
        }
        if bs != [ks[1]] {
            return Err(Error::Dimension(format!("conv_transpose2d bias {bs:?} does not match kernel {ks:?}")));
        }
        let (oh, ow) = output_size;
        for (axis, inp, out, k, s, p) in [
            ("height", xs[2], oh, ks[2], spec.stride.0, spec.padding.0),
            ("width", xs[3], ow, ks[3], spec.stride.1, spec.padding.1),
        ] {
            let window = conv_transpose2d_window(inp, k, s, p);
            match window {
                Some((lo, hi)) if (lo..=hi).contains(&out) => {}
                Some((lo, hi)) => {
                    return Err(Error::Dimension(format!(
                        "output {axis} {out} is inconsistent with input {inp}; legal window is [{lo}, {hi}]"
                    )))
                }
                None => {
                    return Err(Error::Dimension(format!(
                        "no output {axis} is consistent with input {inp}, kernel {k}, padding {p}"
                    )))
                }
            }
        }
        // Adjoint geometry: a conv2d from [B, Cout, oh, ow] to [B, Cin, H, W].
        let geom = ConvGeom {
            b: xs[0],
            cin: ks[1],
            h: oh,
            w: ow,
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            oh: xs[2],
            ow: xs[3],
        };
        let out = conv_transpose2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![geom.b, geom.cin, oh, ow], out);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x: input,
                w: kernel,
                b: bias,
                geom,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(conv2d_out_extent(32, 5, 2, 2), Some(16));
        assert_eq!(conv2d_out_extent(6, 2, 2, 0), Some(3));
        assert_eq!(conv2d_out_extent(3, 5, 1, 0), None);
        assert_eq!(conv_transpose2d_window(8, 5, 2, 2), Some((15, 16)));
        assert_eq!(conv_transpose2d_window(2, 5, 2, 2), Some((3, 4)));
        assert_eq!(conv_transpose2d_window(1, 1, 3, 1), Some((1, 1)));
        assert_eq!(conv_transpose2d_window(1, 1, 2, 1), None);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let k = tape.constant(Tensor::full(&[3, 2, 3, 3], 0.7));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(x, k, b, Conv2dSpec::new(1, 1)).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(&[1, 3, 5, 5]));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 1, 3, 3], &data).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, Conv2dSpec::new(1, 0)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn transposed_zero_input_broadcasts_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let k = tape.constant(Tensor::full(&[3, 2, 5, 5], 0.3));
        let b = tape.constant(Tensor::from_f64(&[2], &[1.5, -0.5]).unwrap());
        let y = tape.conv_transpose2d(x, k, b, Conv2dSpec::new(2, 2), (8, 8)).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[2, 2, 8, 8]);
        for n in 0..2 {
            for c in 0..2 {
                let off = (n * 2 + c) * 64;
                let want = if c == 0 { 1.5 } else { -0.5 };
                assert!(v.data()[off..off + 64].iter().all(|&e| e == want));
            }
        }
    }

    #[test]
    fn argument_and_dimension_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 6, 6]));
        let k = tape.constant(Tensor::zeros(&[3, 4, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.conv2d(x, k, b, Conv2dSpec::new(1, 0)), Err(Error::Dimension(_))));
        let k = tape.constant(Tensor::zeros(&[3, 2, 2, 2]));
        assert!(matches!(tape.conv2d(x, k, b, Conv2dSpec::new(0, 0)), Err(Error::Argument(_))));

        let kt = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
        let err = tape
            .conv_transpose2d(x, kt, b, Conv2dSpec::new(2, 2), (14, 12))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[11, 12]"), "{err}");
    }
}
