//! Multilayer perceptron classifier: flatten, ReLU hidden layers, linear logits.
//!
//! Parameters live in a [`ParamSet`] as `w0, b0, w1, b1, ...`; weight `wi` has
//! shape `fan_in x fan_out`, so a layer computes `x · wi + bi`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{argmax, one_hot, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"ARLABW01";

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    widths: Vec<usize>,
    params: ParamSet,
    seed: Option<u64>,
}

impl Classifier {
    /// `widths = [input, hidden.., classes]` with at least one hidden layer.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        validate_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
            params.insert(format!("w{i}"), Tensor::new(vec![fan_in, fan_out], w)?)?;
            params.insert(format!("b{i}"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
            seed: Some(seed),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Initialisation seed; `None` for models read from disk.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn flat_input(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.flatten_rows()?;
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::dim(
                "logits",
                format!("input width {d}, model expects {}", self.input_dim()),
            ));
        }
        Ok(x)
    }

    /// Logits for a `b x h x w` (or `b x d`) stack, without a tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.flat_input(images)?;
        for layer in 0..self.layers() {
            let w = self.params.value(2 * layer);
            let b = self.params.value(2 * layer + 1);
            x = x.matmul(w)?.add_row(b)?;
            if layer + 1 < self.layers() {
                x = x.relu();
            }
        }
        Ok(x)
    }

    /// Records the forward pass on `g` using parameter nodes from `bound`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, images: &Tensor) -> Result<NodeId> {
        let mut x = g.leaf(self.flat_input(images)?);
        for layer in 0..self.layers() {
            let z = g.matmul(x, bound.id(2 * layer))?;
            x = g.add_row(z, bound.id(2 * layer + 1))?;
            if layer + 1 < self.layers() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<usize>> {
        self.logits(images)?.argmax_rows()
    }

    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        one_hot(&self.predict_labels(images)?, self.classes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.params.num_scalars() + 8 * self.layers());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.layers() as u32).to_le_bytes());
        for layer in 0..self.layers() {
            let w = self.params.value(2 * layer);
            let b = self.params.value(2 * layer + 1);
            out.extend_from_slice(&(w.shape()[0] as u32).to_le_bytes());
            out.extend_from_slice(&(w.shape()[1] as u32).to_le_bytes());
            for v in w.data().iter().chain(b.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != WEIGHTS_MAGIC {
            return Err(Error::Format("weights file: bad magic".into()));
        }
        let layers = r.u32()? as usize;
        if layers < 2 {
            return Err(Error::Format(format!(
                "weights file: {layers} layer(s), need at least 2"
            )));
        }
        let mut widths = Vec::with_capacity(layers + 1);
        let mut params = ParamSet::new();
        for layer in 0..layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Format("weights file: zero-sized layer".into()));
            }
            match widths.last() {
                None => widths.push(rows),
                Some(&prev) if prev != rows => {
                    return Err(Error::Consistency(format!(
                        "weights file: layer {layer} has {rows} inputs but the previous layer emits {prev}"
                    )))
                }
                Some(_) => {}
            }
            widths.push(cols);
            let w = r.f64s(
                rows.checked_mul(cols)
                    .ok_or_else(|| Error::Format("weights file: layer too large".into()))?,
            )?;
            let b = r.f64s(cols)?;
            params.insert(format!("w{layer}"), Tensor::new(vec![rows, cols], w)?)?;
            params.insert(format!("b{layer}"), Tensor::new(vec![cols], b)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("weights file: trailing bytes".into()));
        }
        Ok(Self {
            widths,
            params,
            seed: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(Error::at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
        Self::from_bytes(&bytes)
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.is_empty() {
        return Err(Error::Argument("layer widths are empty".into()));
    }
    if widths.len() < 3 {
        return Err(Error::Argument(format!(
            "need input, at least one hidden layer and output widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Argument(format!("zero layer width in {widths:?}")));
    }
    if widths[widths.len() - 1] < 2 {
        return Err(Error::Argument("a classifier needs at least 2 outputs".into()));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("weights file: truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("weights file: layer too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

/// Class index per row of a logits matrix, ties low.
pub fn predict_from_logits(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits.data().chunks(k).map(argmax).collect())
}
