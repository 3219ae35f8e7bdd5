//! Label-preserving image transformations and the three evaluation families.
//!
//! | family   | members                                       | training vertices |
//! |----------|-----------------------------------------------|-------------------|
//! | texture  | identity, low-pass radius 12, 10, 8, 6        | identity, r = 6   |
//! | rotation | 0, 15, 30, 45, 60 degrees clockwise           | 0, 60             |
//! | contrast | x, x/2, x/4, 1-x, (1-x)/2, (1-x)/4            | x, 1-x            |
//!
//! Texture radii are given for 28x28 inputs; [`TransformFamily::for_image_size`]
//! rescales them by `h/28` for other sizes.

use std::fmt;
use std::str::FromStr;

use crate::dft::{dft2, idft2, signed_frequency, ComplexImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    /// Keep spectrum entries within this Euclidean radius of DC.
    FreqCutoff(f64),
    /// Clockwise rotation in degrees.
    Rotate(f64),
    /// `scale * x`, or `scale * (1 - x)` when `negate`.
    PixelMap {
        scale: f64,
        negate: bool,
    },
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Identity => Ok(()),
            Transform::FreqCutoff(r) if r > 0.0 && r.is_finite() => Ok(()),
            Transform::Rotate(d) if (0.0..360.0).contains(&d) => Ok(()),
            Transform::PixelMap { scale, .. } if scale > 0.0 && scale <= 1.0 => Ok(()),
            other => Err(Error::Argument(format!("invalid transform parameters: {other}"))),
        }
    }

    /// Applies the transform to one `h x w` image with pixels in `[0, 1]`.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = image.dims2()?;
        match *self {
            Transform::Identity => Ok(image.clone()),
            Transform::FreqCutoff(radius) => low_pass(image, radius),
            Transform::Rotate(deg) => Ok(rotate_clockwise(image, h, w, deg)),
            Transform::PixelMap { scale, negate } => Ok(if negate {
                image.map(|x| scale * (1.0 - x))
            } else {
                image.map(|x| scale * x)
            }),
        }
    }

    /// Per-image [`apply`](Self::apply) over a `b x h x w` stack.
    pub fn apply_batch(&self, images: &Tensor) -> Result<Tensor> {
        let [b, h, w] = images.shape()[..] else {
            return Err(Error::dim(
                "apply_batch",
                format!("expected b x h x w, got {:?}", images.shape()),
            ));
        };
        if let Transform::Identity = self {
            return Ok(images.clone());
        }
        let mut data = Vec::with_capacity(images.numel());
        for img in images.rows() {
            let t = Tensor::from_parts(vec![h, w], img.to_vec());
            data.extend_from_slice(self.apply(&t)?.data());
        }
        Ok(Tensor::from_parts(vec![b, h, w], data))
    }
}

fn low_pass(image: &Tensor, radius: f64) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    let spectrum = dft2(image)?;
    let mut re = spectrum.re.into_data();
    let mut im = spectrum.im.into_data();
    for u in 0..h {
        let fu = signed_frequency(u, h);
        for v in 0..w {
            let fv = signed_frequency(v, w);
            if (fu * fu + fv * fv).sqrt() > radius {
                re[u * w + v] = 0.0;
                im[u * w + v] = 0.0;
            }
        }
    }
    let back = idft2(&ComplexImage {
        re: Tensor::from_parts(vec![h, w], re),
        im: Tensor::from_parts(vec![h, w], im),
    })?;
    Ok(back.re.map(|v| v.clamp(0.0, 1.0)))
}

/// Samples the source image at the inverse-rotated location of each output
/// pixel; neighbours outside the image count as 0.
fn rotate_clockwise(image: &Tensor, h: usize, w: usize, degrees: f64) -> Tensor {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let src = image.data();
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
            0.0
        } else {
            src[r as usize * w + col as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - cx, r as f64 - cy);
            // With y pointing down, the forward map (x, y) -> (c x - s y, s x + c y)
            // turns clockwise on screen; invert it.
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out[r * w + col] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => write!(f, "identity"),
            Transform::FreqCutoff(r) => write!(f, "freq:{r}"),
            Transform::Rotate(d) => write!(f, "rot:{d}"),
            Transform::PixelMap { scale, negate } => write!(f, "pix:{scale}:{negate}"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unrecognised transform `{s}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        let t = match parts[..] {
            ["identity"] => Transform::Identity,
            ["freq", r] => Transform::FreqCutoff(num(r)?),
            ["rot", d] => Transform::Rotate(num(d)?),
            ["pix", scale, neg] => Transform::PixelMap {
                scale: num(scale)?,
                negate: match neg {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad()),
                },
            },
            _ => return Err(bad()),
        };
        t.validate()?;
        Ok(t)
    }
}

/// An ordered transformation set with its two designated training vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformFamily {
    name: String,
    members: Vec<Transform>,
    vertex_plus: usize,
    vertex_minus: usize,
}

impl TransformFamily {
    pub fn new(
        name: impl Into<String>,
        members: Vec<Transform>,
        vertex_plus: usize,
        vertex_minus: usize,
    ) -> Result<Self> {
        if members.first() != Some(&Transform::Identity) {
            return Err(Error::Argument("a family's first member must be the identity".into()));
        }
        for m in &members {
            m.validate()?;
        }
        if (vertex_plus >= members.len() || vertex_minus >= members.len() || vertex_plus == vertex_minus)
            && (members.len() > 1 || vertex_plus != vertex_minus)
        {
            return Err(Error::Argument("vertex indices must be valid and distinct".into()));
        }
        Ok(Self {
            name: name.into(),
            members,
            vertex_plus,
            vertex_minus,
        })
    }

    /// `{identity}` alone; both vertices point at it.
    pub fn identity_only() -> Self {
        Self {
            name: "identity".into(),
            members: vec![Transform::Identity],
            vertex_plus: 0,
            vertex_minus: 0,
        }
    }

    pub fn texture() -> Self {
        let members = [0.0, 12.0, 10.0, 8.0, 6.0]
            .iter()
            .map(|&r| {
                if r == 0.0 {
                    Transform::Identity
                } else {
                    Transform::FreqCutoff(r)
                }
            })
            .collect();
        Self::new("texture", members, 0, 4).expect("static family")
    }

    pub fn rotation() -> Self {
        let members = [0.0, 15.0, 30.0, 45.0, 60.0]
            .iter()
            .map(|&d| {
                if d == 0.0 {
                    Transform::Identity
                } else {
                    Transform::Rotate(d)
                }
            })
            .collect();
        Self::new("rotation", members, 0, 4).expect("static family")
    }

    pub fn contrast() -> Self {
        let pm = |scale, negate| Transform::PixelMap { scale, negate };
        let members = vec![
            Transform::Identity,
            pm(0.5, false),
            pm(0.25, false),
            pm(1.0, true),
            pm(0.5, true),
            pm(0.25, true),
        ];
        Self::new("contrast", members, 0, 3).expect("static family")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "texture" => Ok(Self::texture()),
            "rotation" => Ok(Self::rotation()),
            "contrast" => Ok(Self::contrast()),
            "identity" => Ok(Self::identity_only()),
            other => Err(Error::Argument(format!("unknown transform family `{other}`"))),
        }
    }

    /// The family adapted to `height`-pixel images: frequency radii scale by
    /// `height / 28`, rounded, and never below 1.
    pub fn for_image_size(&self, height: usize) -> Self {
        let mut out = self.clone();
        for m in &mut out.members {
            if let Transform::FreqCutoff(r) = m {
                *r = (*r * height as f64 / 28.0).round().max(1.0);
            }
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn members(&self) -> &[Transform] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn vertex_plus(&self) -> usize {
        self.vertex_plus
    }

    pub fn vertex_minus(&self) -> usize {
        self.vertex_minus
    }

    /// Member list in config syntax, e.g. `identity,rot:15,...`.
    pub fn spec_string(&self) -> String {
        self.members
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Every member applied to a `b x h x w` stack, in member order.
    pub fn apply_all(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.members.iter().map(|t| t.apply_batch(images)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![size, size], (0..size * size).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = random_image(16, 1);
        assert_eq!(Transform::Identity.apply(&x).unwrap(), x);
    }

    #[test]
    fn negation_is_an_involution() {
        let x = random_image(16, 2);
        let a3 = Transform::PixelMap {
            scale: 1.0,
            negate: true,
        };
        let twice = a3.apply(&a3.apply(&x).unwrap()).unwrap();
        assert!(max_abs_diff(&twice, &x) < 1e-12);
    }

    #[test]
    fn low_pass_is_idempotent() {
        for r in [3.0, 6.0, 12.0] {
            // Mid-range pixels keep the clamp inactive.
            let x = random_image(16, 3).map(|p| 0.25 + 0.5 * p);
            let t = Transform::FreqCutoff(r);
            let once = t.apply(&x).unwrap();
            let twice = t.apply(&once).unwrap();
            assert!(max_abs_diff(&once, &twice) < 1e-6);
        }
    }

    #[test]
    fn radius_six_changes_a_16px_image() {
        let x = random_image(16, 4);
        let y = Transform::FreqCutoff(6.0).apply(&x).unwrap();
        assert!(max_abs_diff(&x, &y) > 1e-3);
    }

    #[test]
    fn low_pass_of_constant_is_constant() {
        let x = Tensor::full(&[16, 16], 0.4);
        let y = Transform::FreqCutoff(1.0).apply(&x).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-12);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let x = random_image(16, 5);
        let y = Transform::Rotate(0.0).apply(&x).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-12);
    }

    #[test]
    fn rotation_moves_a_point_clockwise() {
        // Bright pixel 5 px right of center; 60 degrees clockwise (y down)
        // sends offset (5, 0) to (5 cos 60, 5 sin 60).
        let n = 17;
        let center = 8.0;
        let mut data = vec![0.0; n * n];
        data[8 * n + 13] = 1.0;
        let x = Tensor::new(vec![n, n], data).unwrap();
        let y = Transform::Rotate(60.0).apply(&x).unwrap();
        let best = crate::tensor::argmax(y.data());
        let (r, c) = ((best / n) as f64, (best % n) as f64);
        let (er, ec) = (
            center + 5.0 * 60f64.to_radians().sin(),
            center + 5.0 * 60f64.to_radians().cos(),
        );
        assert!(
            (r - er).abs() <= 1.0 && (c - ec).abs() <= 1.0,
            "({r}, {c}) vs ({er}, {ec})"
        );
    }

    #[test]
    fn ninety_degrees_matches_index_rotation() {
        let x = random_image(6, 6);
        let y = Transform::Rotate(90.0).apply(&x).unwrap();
        // Clockwise quarter turn: out[r][c] = in[n-1-c][r].
        for r in 0..6 {
            for c in 0..6 {
                assert!((y.data()[r * 6 + c] - x.data()[(5 - c) * 6 + r]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let x = random_image(16, 7);
        for fam in [
            TransformFamily::texture().for_image_size(16),
            TransformFamily::rotation(),
            TransformFamily::contrast(),
        ] {
            for t in fam.members() {
                let y = t.apply(&x).unwrap();
                assert!(y.data().iter().all(|p| (0.0..=1.0).contains(p)), "{t}");
            }
        }
    }

    #[test]
    fn family_layouts() {
        let tex = TransformFamily::texture();
        assert_eq!(tex.len(), 5);
        assert_eq!(tex.members()[tex.vertex_minus()], Transform::FreqCutoff(6.0));
        assert_eq!(tex.members()[tex.vertex_plus()], Transform::Identity);
        let rot = TransformFamily::rotation();
        assert_eq!(rot.len(), 5);
        assert_eq!(rot.members()[rot.vertex_minus()], Transform::Rotate(60.0));
        let con = TransformFamily::contrast();
        assert_eq!(con.len(), 6);
        assert_eq!(
            con.members()[con.vertex_minus()],
            Transform::PixelMap {
                scale: 1.0,
                negate: true
            }
        );
    }

    #[test]
    fn contrast_members_by_arithmetic() {
        let con = TransformFamily::contrast();
        let one = Tensor::full(&[1, 1], 1.0);
        let zero = Tensor::full(&[1, 1], 0.0);
        assert_eq!(con.members()[2].apply(&one).unwrap().data(), &[0.25]);
        assert_eq!(con.members()[4].apply(&zero).unwrap().data(), &[0.5]);
    }

    #[test]
    fn texture_radii_rescale() {
        let tex = TransformFamily::texture().for_image_size(16);
        assert_eq!(tex.spec_string(), "identity,freq:7,freq:6,freq:5,freq:3");
        assert_eq!(
            TransformFamily::texture().for_image_size(28),
            TransformFamily::texture()
        );
    }

    #[test]
    fn names_round_trip() {
        for s in ["identity", "freq:12", "rot:45", "pix:0.25:true", "pix:1:false"] {
            let t: Transform = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("rot:400".parse::<Transform>().is_err());
        assert!("pix:2:true".parse::<Transform>().is_err());
        assert!("freq:0".parse::<Transform>().is_err());
        assert!("blur:3".parse::<Transform>().is_err());
    }

    #[test]
    fn batch_apply_preserves_order() {
        let a = random_image(8, 8);
        let b = random_image(8, 9);
        let stack = Tensor::concat_rows(&[&a.reshape(&[1, 8, 8]).unwrap(), &b.reshape(&[1, 8, 8]).unwrap()]).unwrap();
        let t = Transform::Rotate(30.0);
        let out = t.apply_batch(&stack).unwrap();
        assert_eq!(out.row(0), t.apply(&a).unwrap().data());
        assert_eq!(out.row(1), t.apply(&b).unwrap().data());
    }

    #[test]
    fn family_validation() {
        assert!(TransformFamily::new("x", vec![Transform::Rotate(10.0)], 0, 0).is_err());
        assert!(TransformFamily::new("x", vec![Transform::Identity, Transform::Rotate(10.0)], 1, 1).is_err());
        assert!(TransformFamily::new("x", vec![Transform::Identity, Transform::Rotate(10.0)], 0, 2).is_err());
    }
}
