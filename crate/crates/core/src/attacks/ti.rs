//! Translation-invariant gradient smoothing: 2-D convolution of the input
//! gradient with a normalized Gaussian kernel.

use ndarray::Array2;

use super::ImageShape;
use crate::error::{Error, Result};

/// Normalized 2-D Gaussian kernel with σ = k/3. Sums to exactly 1.
pub fn gaussian_kernel(k: usize) -> Array2<f32> {
    let sigma = k as f64 / 3.0;
    let center = (k as f64 - 1.0) / 2.0;
    let mut kernel = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let di = i as f64 - center;
            let dj = j as f64 - center;
            kernel[[i, j]] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let sum: f64 = kernel.iter().sum();
    kernel.mapv(|v| (v / sum) as f32)
}

/// Convolve each row (viewed as an `h x w` image) with the normalized
/// Gaussian kernel of the given size, wrapping at the borders. Circular
/// padding makes the operation exactly sum-preserving and leaves constant
/// fields unchanged; even kernel sizes are handled by asymmetric offsets.
pub fn ti_gradient(grad: &Array2<f32>, geom: ImageShape, kernel_size: usize) -> Result<Array2<f32>> {
    if kernel_size == 0 {
        return Err(Error::Config("kernel size must be >= 1".into()));
    }
    if grad.ncols() != geom.h * geom.w {
        return Err(Error::Shape(format!(
            "gradient row length {} does not match {}x{} geometry",
            grad.ncols(),
            geom.h,
            geom.w
        )));
    }
    if kernel_size == 1 {
        return Ok(grad.clone());
    }
    let (h, w) = (geom.h, geom.w);
    let kernel = gaussian_kernel(kernel_size);
    let off = (kernel_size - 1) / 2;
    let mut out = Array2::<f32>::zeros(grad.raw_dim());
    for (src, mut dst) in grad.rows().into_iter().zip(out.rows_mut()) {
        let src = src.as_slice().expect("contiguous gradient row");
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f32;
                for ki in 0..kernel_size {
                    let si = ((i + ki) as isize - off as isize).rem_euclid(h as isize) as usize;
                    for kj in 0..kernel_size {
                        let sj =
                            ((j + kj) as isize - off as isize).rem_euclid(w as isize) as usize;
                        acc += kernel[[ki, kj]] * src[si * w + sj];
                    }
                }
                dst[i * w + j] = acc;
            }
        }
    }
    Ok(out)
}
