use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::gemm::gemm;
use crate::par;
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D convolution. Weights are `[out, in, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    /// Stride 1 with padding `d·(k-1)/2`, which keeps the spatial size for odd `k`.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: dilation * (kernel_size - 1) / 2,
            dilation,
        }
    }

    /// Span of the kernel taps in input pixels, `d·(k-1)+1`.
    pub fn receptive_span(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        conv_output_size(input, self.kernel_size, self.stride, self.padding, self.dilation)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }
}

/// `floor((n + 2p - d(k-1) - 1)/s) + 1`, or `None` when no output position fits.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel.max(1) - 1) + 1;
    let padded = input + 2 * padding;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin·k·k, ho·wo]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let Geometry { cin, h, w, k, stride, pad, dil, ho, wo } = *self;
        let hw_out = ho * wo;
        let mut col = vec![0.0; cin * k * k * hw_out];
        for ci in 0..cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki * dil) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                        let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                        for (ow, v) in out_row.iter_mut().enumerate() {
                            let iw = (ow * stride + kj * dil) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                *v = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of `im2col`: scatters `[cin·k·k, ho·wo]` back into `[cin, h, w]`.
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let Geometry { cin, h, w, k, stride, pad, dil, ho, wo } = *self;
        let hw_out = ho * wo;
        let mut x = vec![0.0; cin * h * w];
        for ci in 0..cin {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * hw_out..(row + 1) * hw_out];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki * dil) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        for ow in 0..wo {
                            let iw = (ow * stride + kj * dil) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[iw as usize] += src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Cross-correlation with zero padding. `bias`, when given, is `[out]`.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &Conv2dSpec,
) -> Result<Var> {
    let (n, cin, h, w) = tape.value(x).dims4("conv2d")?;
    if cin != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, spec expects {}", spec.in_channels),
        ));
    }
    let wshape = spec.weight_shape();
    if tape.value(weight).shape() != wshape {
        return Err(Error::shape(
            "conv2d",
            format!("weight is {:?}, spec expects {wshape:?}", tape.value(weight).shape()),
        ));
    }
    if let Some(b) = bias {
        if tape.value(b).shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias is {:?}, expected [{}]", tape.value(b).shape(), spec.out_channels),
            ));
        }
    }
    let (Some(ho), Some(wo)) = (spec.output_size(h), spec.output_size(w)) else {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "input {h}x{w} too small for kernel span {} with padding {}",
                spec.receptive_span(),
                spec.padding
            ),
        ));
    };
    let geom = Geometry {
        cin,
        h,
        w,
        k: spec.kernel_size,
        stride: spec.stride.max(1),
        pad: spec.padding,
        dil: spec.dilation.max(1),
        ho,
        wo,
    };
    let cout = spec.out_channels;
    let xs = tape.value(x).data();
    let ws = tape.value(weight).data();
    let bs = bias.map(|b| tape.value(b).data());
    let in_len = cin * h * w;
    let out_len = cout * ho * wo;

    let per_sample = par::map_range(n, |i| {
        let xi = &xs[i * in_len..(i + 1) * in_len];
        let mut out = vec![0.0; out_len];
        if let Some(bs) = bs {
            for (co, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(bs[co]);
            }
        }
        let beta = if bs.is_some() { 1.0 } else { 0.0 };
        if geom.is_pointwise() {
            gemm(cout, cin, ho * wo, ws, false, xi, false, beta, &mut out);
        } else {
            let col = geom.im2col(xi);
            gemm(cout, geom.col_rows(), ho * wo, ws, false, &col, false, beta, &mut out);
        }
        out
    });
    let out = Tensor::new(&[n, cout, ho, wo], per_sample.concat())?;

    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.push(out, &inputs, Box::new(Conv2dOp { geom, cout })))
}

struct Conv2dOp {
    geom: Geometry,
    cout: usize,
}

impl Backward for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let geom = self.geom;
        let cout = self.cout;
        let x = ctx.input(0);
        let n = x.shape()[0];
        let xs = x.data();
        let ws = ctx.input(1).data();
        let in_len = geom.cin * geom.h * geom.w;
        let hw_out = geom.ho * geom.wo;
        let out_len = cout * hw_out;
        let k_rows = geom.col_rows();
        let need_x = ctx.needs_grad(0);
        let need_w = ctx.needs_grad(1);

        let per_sample = par::map_range(n, |i| {
            let gi = &g[i * out_len..(i + 1) * out_len];
            let xi = &xs[i * in_len..(i + 1) * in_len];
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; cout * k_rows];
                if geom.is_pointwise() {
                    gemm(cout, hw_out, k_rows, gi, false, xi, true, 0.0, &mut dw);
                } else {
                    let col = geom.im2col(xi);
                    gemm(cout, hw_out, k_rows, gi, false, &col, true, 0.0, &mut dw);
                }
                dw
            });
            let dx = need_x.then(|| {
                let mut dcol = vec![0.0; k_rows * hw_out];
                gemm(k_rows, cout, hw_out, ws, true, gi, false, 0.0, &mut dcol);
                if geom.is_pointwise() {
                    dcol
                } else {
                    geom.col2im(&dcol)
                }
            });
            (dx, dw)
        });

        let mut dx_all = need_x.then(|| Vec::with_capacity(n * in_len));
        let mut dw_all = need_w.then(|| vec![0.0; cout * k_rows]);
        for (dx, dw) in per_sample {
            if let (Some(acc), Some(dx)) = (dx_all.as_mut(), dx) {
                acc.extend_from_slice(&dx);
            }
            if let (Some(acc), Some(dw)) = (dw_all.as_mut(), dw) {
                acc.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            }
        }
        let mut grads = vec![dx_all, dw_all];
        if ctx.input_count() > 2 {
            let mut db = vec![0.0; cout];
            for i in 0..n {
                for (co, d) in db.iter_mut().enumerate() {
                    let start = i * out_len + co * hw_out;
                    *d += g[start..start + hw_out].iter().sum::<f64>();
                }
            }
            grads.push(Some(db));
        }
        grads
    }
}

/// Spreads a `[out, in, k, k]` kernel to `[out, in, s, s]` with `s = d(k-1)+1`,
/// placing the original taps `d` apart and zeros in between.
pub fn dilate_kernel(weight: &Tensor, dilation: usize) -> Result<Tensor> {
    let (o, i, k, k2) = weight.dims4("dilate_kernel")?;
    if k != k2 {
        return Err(Error::shape("dilate_kernel", "kernel must be square"));
    }
    let d = dilation.max(1);
    let span = d * (k - 1) + 1;
    let mut out = Tensor::zeros(&[o, i, span, span]);
    let src = weight.data();
    let dst = out.data_mut();
    for oc in 0..o {
        for ic in 0..i {
            for a in 0..k {
                for b in 0..k {
                    let s = ((oc * i + ic) * k + a) * k + b;
                    let t = ((oc * i + ic) * span + a * d) * span + b * d;
                    dst[t] = src[s];
                }
            }
        }
    }
    Ok(out)
}

/// Checks that a dilated convolution equals an undilated convolution with
/// the zero-interleaved kernel, elementwise within `1e-10`. Both use stride 1
/// and size-preserving padding.
pub fn dilate_equivalence_oracle(x: &Tensor, weight: &Tensor, dilation: usize) -> Result<bool> {
    let (o, i, k, _) = weight.dims4("dilate_equivalence_oracle")?;
    let dilated = Conv2dSpec::same(i, o, k, dilation);
    let spread = dilate_kernel(weight, dilation)?;
    let plain = Conv2dSpec {
        kernel_size: dilated.receptive_span(),
        dilation: 1,
        ..dilated
    };

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(weight.clone());
    let sv = tape.constant(spread);
    let a = conv2d(&mut tape, xv, wv, None, &dilated)?;
    let b = conv2d(&mut tape, xv, sv, None, &plain)?;
    let (a, b) = (tape.value(a), tape.value(b));
    Ok(a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-10))
}
