//! Matrix-form 2-D discrete Fourier transform.
//!
//! `X = F_h · x · F_w` with `F_n[j][k] = exp(-2πi·jk/n)`. Cost is O(h·w·(h+w)),
//! which is nothing at the image sizes used here. Not part of the autodiff
//! graph: transforms run on inputs before any forward pass.

use std::f64::consts::PI;

use crate::error::Result;
use crate::tensor::Tensor;

/// Real and imaginary planes of a complex `h x w` array.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub re: Tensor,
    pub im: Tensor,
}

struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
    n: usize,
}

impl Twiddles {
    /// `exp(sign * 2πi·jk/n)`; the exponent is reduced mod n before the trig
    /// call to keep large `jk` products accurate.
    fn new(n: usize, sign: f64) -> Self {
        let mut cos = vec![0.0; n * n];
        let mut sin = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                let angle = sign * 2.0 * PI * ((j * k) % n) as f64 / n as f64;
                cos[j * n + k] = angle.cos();
                sin[j * n + k] = angle.sin();
            }
        }
        Self { cos, sin, n }
    }
}

fn transform(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let th = Twiddles::new(h, sign);
    let tw = Twiddles::new(w, sign);
    debug_assert_eq!((th.n, tw.n), (h, w));

    // Rows: T = x · F_w
    let mut tr = vec![0.0; h * w];
    let mut ti = vec![0.0; h * w];
    for r in 0..h {
        for k in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for c in 0..w {
                let (xr, xi) = (re[r * w + c], im[r * w + c]);
                let (cr, ci) = (tw.cos[c * w + k], tw.sin[c * w + k]);
                sr += xr * cr - xi * ci;
                si += xr * ci + xi * cr;
            }
            tr[r * w + k] = sr;
            ti[r * w + k] = si;
        }
    }
    // Columns: X = F_h · T
    let mut xr = vec![0.0; h * w];
    let mut xi = vec![0.0; h * w];
    for j in 0..h {
        for r in 0..h {
            let (cr, ci) = (th.cos[j * h + r], th.sin[j * h + r]);
            for k in 0..w {
                let (a, b) = (tr[r * w + k], ti[r * w + k]);
                xr[j * w + k] += a * cr - b * ci;
                xi[j * w + k] += a * ci + b * cr;
            }
        }
    }
    (xr, xi)
}

/// Forward 2-D DFT of a real `h x w` image.
pub fn dft2(image: &Tensor) -> Result<ComplexImage> {
    let (h, w) = image.dims2()?;
    let zeros = vec![0.0; h * w];
    let (re, im) = transform(image.data(), &zeros, h, w, -1.0);
    Ok(ComplexImage {
        re: Tensor::from_parts(vec![h, w], re),
        im: Tensor::from_parts(vec![h, w], im),
    })
}

/// Inverse 2-D DFT, normalised by `1/(h·w)`.
pub fn idft2(spectrum: &ComplexImage) -> Result<ComplexImage> {
    let (h, w) = spectrum.re.dims2()?;
    let (mut re, mut im) = transform(spectrum.re.data(), spectrum.im.data(), h, w, 1.0);
    let norm = 1.0 / (h * w) as f64;
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= norm);
    Ok(ComplexImage {
        re: Tensor::from_parts(vec![h, w], re),
        im: Tensor::from_parts(vec![h, w], im),
    })
}

/// Signed frequency for spectrum index `i` of an axis of length `n`, in
/// `[-n/2, n/2)`. This is the coordinate the index lands on after an
/// fftshift, measured from the DC centroid.
pub fn signed_frequency(i: usize, n: usize) -> f64 {
    let half = n / 2;
    let shifted = (i + half) % n;
    shifted as f64 - half as f64
}
