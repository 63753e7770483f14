//! Small convolution and activation kernels with hand-written backward
//! passes, on `(channels, height, width)` tensors.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

/// Unfolds patches into columns: `(cin * k * k, ho * wo)`, zero padding.
pub fn im2col(x: &Array3<f64>, g: ConvGeometry) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let (ho, wo) = (g.output_size(h), g.output_size(w));
    let k = g.kernel;
    let mut cols = Array2::zeros((cin * k * k, ho * wo));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * wo + oj] = x[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize), g: ConvGeometry) -> Array3<f64> {
    let (cin, h, w) = shape;
    let (ho, wo) = (g.output_size(h), g.output_size(w));
    let k = g.kernel;
    let mut x = Array3::zeros(shape);
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((c * k + ki) * k + kj);
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[[c, ii as usize, jj as usize]] += row[oi * wo + oj];
                    }
                }
            }
        }
    }
    x
}

/// Saved state of a convolution forward pass.
pub struct ConvTape {
    pub cols: Array2<f64>,
    pub input_shape: (usize, usize, usize),
}

/// `weight: (cout, cin * k * k)`, `bias: (cout)`.
pub fn conv2d(
    x: &Array3<f64>,
    weight: ArrayView2<f64>,
    bias: &Array1<f64>,
    g: ConvGeometry,
) -> (Array3<f64>, ConvTape) {
    let (_, h, w) = x.dim();
    let (ho, wo) = (g.output_size(h), g.output_size(w));
    let cols = im2col(x, g);
    let mut out = weight.dot(&cols);
    out += &bias.view().insert_axis(Axis(1));
    let out = out
        .into_shape((weight.nrows(), ho, wo))
        .expect("conv output shape");
    (
        out,
        ConvTape {
            cols,
            input_shape: x.dim(),
        },
    )
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    grad_out: &Array3<f64>,
    weight: ArrayView2<f64>,
    tape: &ConvTape,
    g: ConvGeometry,
    need_input_grad: bool,
) -> (Option<Array3<f64>>, Array2<f64>, Array1<f64>) {
    let (cout, ho, wo) = grad_out.dim();
    let go = grad_out
        .view()
        .into_shape((cout, ho * wo))
        .expect("contiguous gradient");
    let grad_w = go.dot(&tape.cols.t());
    let grad_b = go.sum_axis(Axis(1));
    let grad_x = need_input_grad.then(|| {
        let dcols = weight.t().dot(&go);
        col2im(&dcols, tape.input_shape, g)
    });
    (grad_x, grad_w, grad_b)
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` where the activation output was not positive.
pub fn relu_backward(grad: &mut Array3<f64>, activated: &Array3<f64>) {
    grad.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}
