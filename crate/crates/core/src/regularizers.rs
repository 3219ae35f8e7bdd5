//! Alignment penalties between logits of originals `u` and of their augmented
//! counterparts `v`. Every penalty is a batch mean and is 0 when perfectly
//! aligned.
//!
//! The critic (`w1-critic`) and the discriminator (`disc`) carry their own
//! parameters in [`AuxParams`]. The model's loss treats them as constants;
//! [`aux_update`] moves them one step against the model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, l1_cost_matrix};
use crate::autodiff::{sigmoid, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CRITIC_CLIP: f64 = 0.01;
pub const DEFAULT_AUX_LR: f64 = 5e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WassersteinMode {
    ExactMatch,
    Critic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlignKind {
    L1,
    SqL2,
    Cosine,
    KLDiv,
    Wasserstein(WassersteinMode),
    Discriminator,
}

impl AlignKind {
    pub const ALL: [AlignKind; 7] = [
        AlignKind::L1,
        AlignKind::SqL2,
        AlignKind::Cosine,
        AlignKind::KLDiv,
        AlignKind::Wasserstein(WassersteinMode::ExactMatch),
        AlignKind::Wasserstein(WassersteinMode::Critic),
        AlignKind::Discriminator,
    ];

    pub fn needs_aux(self) -> bool {
        matches!(
            self,
            AlignKind::Wasserstein(WassersteinMode::Critic) | AlignKind::Discriminator
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AlignKind::L1 => "l1",
            AlignKind::SqL2 => "sql2",
            AlignKind::Cosine => "cos",
            AlignKind::KLDiv => "kl",
            AlignKind::Wasserstein(WassersteinMode::ExactMatch) => "w1-exact",
            AlignKind::Wasserstein(WassersteinMode::Critic) => "w1-critic",
            AlignKind::Discriminator => "disc",
        }
    }
}

impl fmt::Display for AlignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlignKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown alignment kind `{s}`")))
    }
}

impl TryFrom<String> for AlignKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AlignKind> for String {
    fn from(k: AlignKind) -> String {
        k.name().to_string()
    }
}

/// Adversarial parameters for the critic or the discriminator.
///
/// Critic: `c(x) = x · w`, `w` is `k x 1`, each entry kept in `[-clip, clip]`.
/// Discriminator: `d(x) = x · w + b`, output is the logit of "original".
#[derive(Clone, Debug, PartialEq)]
pub struct AuxParams {
    kind: AlignKind,
    params: ParamSet,
    lr: f64,
    clip: f64,
}

impl AuxParams {
    /// `None` for kinds without auxiliaries.
    pub fn for_kind(kind: AlignKind, k: usize, lr: f64, clip: f64, seed: u64) -> Result<Option<Self>> {
        if !kind.needs_aux() {
            return Ok(None);
        }
        if k == 0 {
            return Err(Error::Argument("auxiliary input width must be positive".into()));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("aux_lr", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0C5_11A5);
        let mut params = ParamSet::new();
        match kind {
            AlignKind::Discriminator => {
                let bound = (1.0 / k as f64).sqrt();
                let w = (0..k).map(|_| rng.gen_range(-bound..=bound)).collect();
                params.insert("w", Tensor::new(vec![k, 1], w)?)?;
                params.insert("b", Tensor::zeros(&[1]))?;
            }
            _ => {
                if !(clip > 0.0 && clip.is_finite()) {
                    return Err(Error::config("critic_clip", "must be positive"));
                }
                let w = (0..k).map(|_| rng.gen_range(-clip..=clip)).collect();
                params.insert("w", Tensor::new(vec![k, 1], w)?)?;
            }
        }
        Ok(Some(Self { kind, params, lr, clip }))
    }

    pub fn kind(&self) -> AlignKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    /// Raw scores `c(v)` or `d(v)` for the rows of `x`.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.matmul(self.params.value(0))?;
        match self.kind {
            AlignKind::Discriminator => s.add_row(self.params.value(1)),
            _ => Ok(s),
        }
    }
}

fn check_pair(u: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    if u.shape() != v.shape() {
        return Err(Error::dim("penalty", format!("u {:?} vs v {:?}", u.shape(), v.shape())));
    }
    let (b, k) = u.dims2()?;
    if b < 1 {
        return Err(Error::Argument("penalty needs a nonempty batch".into()));
    }
    Ok((b, k))
}

fn aux_for(kind: AlignKind, aux: Option<&AuxParams>) -> Result<&AuxParams> {
    match aux {
        Some(a) if a.kind == kind => Ok(a),
        Some(a) => Err(Error::Usage(format!("{kind} penalty given {} auxiliaries", a.kind))),
        None => Err(Error::Usage(format!("{kind} penalty needs auxiliary parameters"))),
    }
}

/// Score nodes for `x` under constant auxiliary parameters.
fn aux_scores(g: &mut Graph, x: NodeId, aux: &AuxParams) -> Result<NodeId> {
    let w = g.leaf(aux.params.value(0).clone());
    let s = g.matmul(x, w)?;
    match aux.kind {
        AlignKind::Discriminator => {
            let b = g.leaf(aux.params.value(1).clone());
            g.add_row(s, b)
        }
        _ => Ok(s),
    }
}

/// Records the penalty on `g` and returns its scalar node.
pub fn penalty(g: &mut Graph, kind: AlignKind, u: NodeId, v: NodeId, aux: Option<&AuxParams>) -> Result<NodeId> {
    let (b, k) = check_pair(g.value(u), g.value(v))?;
    match kind {
        AlignKind::L1 => {
            let d = g.sub(u, v)?;
            let a = g.abs(d);
            let r = g.row_sum(a)?;
            Ok(g.mean(r))
        }
        AlignKind::SqL2 => {
            let d = g.sub(u, v)?;
            let s = g.square(d);
            let r = g.row_sum(s)?;
            Ok(g.mean(r))
        }
        AlignKind::Cosine => {
            for (name, x) in [("u", u), ("v", v)] {
                if g.value(x).rows().any(|row| row.iter().all(|&z| z == 0.0)) {
                    return Err(Error::DegenerateInput(format!(
                        "cosine penalty: a row of {name} has zero norm"
                    )));
                }
            }
            let uv = g.mul(u, v)?;
            let dot = g.row_sum(uv)?;
            let uu = g.square(u);
            let uu = g.row_sum(uu)?;
            let nu = g.sqrt(uu)?;
            let vv = g.square(v);
            let vv = g.row_sum(vv)?;
            let nv = g.sqrt(vv)?;
            let norms = g.mul(nu, nv)?;
            let cos = g.div(dot, norms)?;
            let mean_cos = g.mean(cos);
            let neg = g.scale(mean_cos, -1.0);
            let one = g.leaf(Tensor::scalar(1.0));
            g.add(one, neg)
        }
        AlignKind::KLDiv => {
            let lu = g.log_softmax(u)?;
            let lv = g.log_softmax(v)?;
            let p = g.exp(lu);
            let diff = g.sub(lu, lv)?;
            let terms = g.mul(p, diff)?;
            let r = g.row_sum(terms)?;
            Ok(g.mean(r))
        }
        AlignKind::Wasserstein(WassersteinMode::ExactMatch) => {
            let cost = l1_cost_matrix(g.value(u).data(), g.value(v).data(), b, k);
            let matching = hungarian(&cost, b)?;
            let matched = g.gather_rows(v, &matching.cols)?;
            let d = g.sub(u, matched)?;
            let a = g.abs(d);
            let r = g.row_sum(a)?;
            Ok(g.mean(r))
        }
        AlignKind::Wasserstein(WassersteinMode::Critic) => {
            let aux = aux_for(kind, aux)?;
            let cu = aux_scores(g, u, aux)?;
            let cv = aux_scores(g, v, aux)?;
            let mu = g.mean(cu);
            let mv = g.mean(cv);
            g.sub(mu, mv)
        }
        AlignKind::Discriminator => {
            let aux = aux_for(kind, aux)?;
            // Flipped labels: pay when u looks original or v looks augmented.
            let du = aux_scores(g, u, aux)?;
            let dv = aux_scores(g, v, aux)?;
            let su = g.softplus(du);
            let ndv = g.scale(dv, -1.0);
            let sv = g.softplus(ndv);
            let mu = g.mean(su);
            let mv = g.mean(sv);
            g.add(mu, mv)
        }
    }
}

/// Penalty value for plain tensors.
pub fn penalty_value(kind: AlignKind, u: &Tensor, v: &Tensor, aux: Option<&AuxParams>) -> Result<f64> {
    let mut g = Graph::new();
    let (u, v) = (g.leaf(u.clone()), g.leaf(v.clone()));
    let p = penalty(&mut g, kind, u, v, aux)?;
    g.value(p).item()
}

/// `mean c(u) - mean c(v)`, the quantity the critic ascends.
pub fn critic_objective(u: &Tensor, v: &Tensor, aux: &AuxParams) -> Result<f64> {
    check_pair(u, v)?;
    Ok(aux.scores(u)?.mean() - aux.scores(v)?.mean())
}

/// Binary cross-entropy of the discriminator, originals labelled 1.
pub fn discriminator_loss(u: &Tensor, v: &Tensor, aux: &AuxParams) -> Result<f64> {
    check_pair(u, v)?;
    let su = aux.scores(u)?.map(|d| crate::autodiff::softplus(-d)).mean();
    let sv = aux.scores(v)?.map(crate::autodiff::softplus).mean();
    Ok(0.5 * (su + sv))
}

/// Fraction of the `2b` rows the discriminator labels correctly.
pub fn discriminator_accuracy(u: &Tensor, v: &Tensor, aux: &AuxParams) -> Result<f64> {
    check_pair(u, v)?;
    let hits_u = aux.scores(u)?.data().iter().filter(|&&d| sigmoid(d) > 0.5).count();
    let hits_v = aux.scores(v)?.data().iter().filter(|&&d| sigmoid(d) <= 0.5).count();
    Ok((hits_u + hits_v) as f64 / (2 * u.shape()[0]) as f64)
}

/// One step for the auxiliaries on detached `u`, `v`: ascent on the critic
/// objective followed by clipping, or descent on the discriminator's BCE.
pub fn aux_update(kind: AlignKind, u: &Tensor, v: &Tensor, aux: Option<&mut AuxParams>) -> Result<()> {
    if !kind.needs_aux() {
        return Err(Error::Usage(format!("{kind} has no auxiliary parameters to update")));
    }
    let aux = match aux {
        Some(a) if a.kind == kind => a,
        _ => {
            return Err(Error::Usage(format!(
                "{kind} update needs matching auxiliary parameters"
            )))
        }
    };
    check_pair(u, v)?;
    let mut g = Graph::new();
    let bound = aux.params.bind(&mut g);
    let (un, vn) = (g.leaf(u.clone()), g.leaf(v.clone()));
    let score = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
        let s = g.matmul(x, bound.id(0))?;
        if kind == AlignKind::Discriminator {
            g.add_row(s, bound.id(1))
        } else {
            Ok(s)
        }
    };
    let su = score(&mut g, un)?;
    let sv = score(&mut g, vn)?;
    aux.params.zero_grad();
    if kind == AlignKind::Discriminator {
        let neg = g.scale(su, -1.0);
        let lu = g.softplus(neg);
        let lv = g.softplus(sv);
        let mu = g.mean(lu);
        let mv = g.mean(lv);
        let sum = g.add(mu, mv)?;
        let loss = g.scale(sum, 0.5);
        g.backward(loss)?;
        aux.params.accumulate(&g, &bound);
        aux.params.sgd_step(aux.lr);
    } else {
        let mu = g.mean(su);
        let mv = g.mean(sv);
        let obj = g.sub(mu, mv)?;
        g.backward(obj)?;
        aux.params.accumulate(&g, &bound);
        aux.params.ascent_step(aux.lr);
        aux.params.clamp_values(-aux.clip, aux.clip);
    }
    aux.params.zero_grad();
    Ok(())
}
