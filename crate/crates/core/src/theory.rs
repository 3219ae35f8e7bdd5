//! Empirical checks of the efficiency, vertex and confidence assumptions, the
//! Wasserstein/`l1` identity they imply, and the computable terms of the
//! worst-case and vertex robust-error bounds.
//!
//! Nothing here proves a bound: the capacity term is never evaluated and the
//! assumption equating expected and empirical worst-case distributions is
//! taken as given.

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, l1_cost_matrix};
use crate::datasets::LabeledImages;
use crate::error::{Error, Result};
use crate::evaluation::{accuracy_from_logits, family_logits, robust_accuracy_from_logits};
use crate::model::{predict_from_logits, Classifier};
use crate::tensor::{l1_distance, Tensor};
use crate::training::{assemble_rows, select_worst_from_logits};
use crate::transforms::TransformFamily;

/// Witness lists are truncated to this many entries.
pub const MAX_WITNESSES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Witness {
    Sample(usize),
    /// `(sample, member)`.
    SampleMember(usize, usize),
    /// Member pair `(i, j)`, `i < j`.
    Pair(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub assumption: String,
    pub fraction: f64,
    pub witnesses: Vec<Witness>,
    /// Number of violations, including those beyond the witness cap.
    pub violations: usize,
    pub checked: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairwise_matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl AssumptionReport {
    fn from_violations(assumption: &str, checked: usize, violations: Vec<Witness>) -> Self {
        let count = violations.len();
        let fraction = if checked == 0 {
            1.0
        } else {
            (checked - count) as f64 / checked as f64
        };
        Self {
            assumption: assumption.into(),
            fraction,
            witnesses: violations.into_iter().take(MAX_WITNESSES).collect(),
            violations: count,
            checked,
            pairwise_matrix: None,
            note: None,
        }
    }
}

/// Exact empirical `W1` as a total: the minimum over row pairings of
/// `sum_i ||u_i - v_sigma(i)||_1`.
pub fn w1_exact(u: &Tensor, v: &Tensor) -> Result<f64> {
    let (b, k) = u.dims2()?;
    let (bv, kv) = v.dims2()?;
    if b != bv || k != kv {
        return Err(Error::Argument(format!(
            "w1_exact needs equal shapes, got {b}x{k} and {bv}x{kv}"
        )));
    }
    Ok(hungarian(&l1_cost_matrix(u.data(), v.data(), b, k), b)?.cost)
}

/// `sum_i ||u_i - v_i||_1`.
pub fn paired_l1(u: &Tensor, v: &Tensor) -> f64 {
    u.rows().zip(v.rows()).map(|(a, b)| l1_distance(a, b)).sum()
}

/// Violations of efficiency for one member: samples whose transformed logits
/// are strictly closer to another sample's original logits than to their own.
fn efficiency_violations(orig: &Tensor, transformed: &Tensor) -> Vec<usize> {
    let n = orig.shape()[0];
    (0..n)
        .filter(|&i| {
            let t = transformed.row(i);
            let own = l1_distance(t, orig.row(i));
            (0..n).any(|j| j != i && l1_distance(t, orig.row(j)) < own)
        })
        .collect()
}

/// Efficiency over every `(sample, member)` pair.
pub fn check_efficiency(
    model: &Classifier,
    data: &LabeledImages,
    family: &TransformFamily,
) -> Result<AssumptionReport> {
    let orig = model.logits(data.images())?;
    let reps = family_logits(model, data, family)?;
    Ok(efficiency_from_reps(&orig, &reps))
}

pub fn efficiency_from_reps(orig: &Tensor, reps: &[Tensor]) -> AssumptionReport {
    let mut violations = Vec::new();
    for (j, r) in reps.iter().enumerate() {
        violations.extend(
            efficiency_violations(orig, r)
                .into_iter()
                .map(|i| Witness::SampleMember(i, j)),
        );
    }
    violations.sort_by_key(|w| match w {
        Witness::SampleMember(i, j) => (*i, *j),
        _ => (0, 0),
    });
    AssumptionReport::from_violations("efficiency", orig.shape()[0] * reps.len(), violations)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingMember {
    pub member: usize,
    pub transform: String,
    /// Exact matching cost between original and transformed logits.
    pub w1: f64,
    /// Identity-pairing cost.
    pub l1_sum: f64,
    /// `l1_sum - w1`, never negative.
    pub gap: f64,
    pub efficient: bool,
    /// When efficient: whether the two sides agree within `1e-9`.
    pub equality_holds: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub members: Vec<MatchingMember>,
}

pub fn check_matching(model: &Classifier, data: &LabeledImages, family: &TransformFamily) -> Result<MatchingReport> {
    let orig = model.logits(data.images())?;
    let reps = family_logits(model, data, family)?;
    matching_from_reps(&orig, &reps, family)
}

pub fn matching_from_reps(orig: &Tensor, reps: &[Tensor], family: &TransformFamily) -> Result<MatchingReport> {
    let mut members = Vec::with_capacity(reps.len());
    for (j, r) in reps.iter().enumerate() {
        let l1_sum = paired_l1(orig, r);
        // The identity pairing is feasible, so the optimum never exceeds it.
        let w1 = w1_exact(orig, r)?.min(l1_sum);
        let efficient = efficiency_violations(orig, r).is_empty();
        let gap = l1_sum - w1;
        members.push(MatchingMember {
            member: j,
            transform: family.members().get(j).map(ToString::to_string).unwrap_or_default(),
            w1,
            l1_sum,
            gap,
            efficient,
            equality_holds: efficient.then_some(gap < 1e-9),
        });
    }
    Ok(MatchingReport { members })
}

/// Vertex check: the full pairwise `W1` matrix between members' logit
/// distributions and whether the designated pair attains its maximum.
/// `fraction` is the designated pair's value over the maximum.
pub fn check_vertices(model: &Classifier, data: &LabeledImages, family: &TransformFamily) -> Result<AssumptionReport> {
    if family.len() < 2 {
        return Err(Error::Argument("vertex check needs at least 2 members".into()));
    }
    let reps = family_logits(model, data, family)?;
    vertices_from_reps(&reps, family.vertex_plus(), family.vertex_minus())
}

pub fn vertices_from_reps(reps: &[Tensor], plus: usize, minus: usize) -> Result<AssumptionReport> {
    let t = reps.len();
    let mut m = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in i + 1..t {
            let w = w1_exact(&reps[i], &reps[j])?;
            m[i][j] = w;
            m[j][i] = w;
        }
    }
    let designated = m[plus][minus];
    let (mut best, mut arg) = (f64::NEG_INFINITY, (0, 1));
    for (i, row) in m.iter().enumerate() {
        for (j, &w) in row.iter().enumerate().skip(i + 1) {
            if w > best {
                best = w;
                arg = (i, j);
            }
        }
    }
    let fraction = if best > 0.0 { designated / best } else { 1.0 };
    let mut witnesses = Vec::new();
    for (i, row) in m.iter().enumerate() {
        for (j, &w) in row.iter().enumerate().skip(i + 1) {
            if w > designated {
                witnesses.push(Witness::Pair(i, j));
            }
        }
    }
    let violations = witnesses.len();
    Ok(AssumptionReport {
        assumption: "vertices".into(),
        fraction: if violations == 0 { 1.0 } else { fraction.min(1.0) },
        witnesses: witnesses.into_iter().take(MAX_WITNESSES).collect(),
        violations,
        checked: t * (t - 1) / 2,
        pairwise_matrix: Some(m),
        note: Some(format!(
            "designated pair ({plus}, {minus}) = {designated}; maximum at ({}, {}) = {best}",
            arg.0, arg.1
        )),
    })
}

/// Lowest-index member pair `(i < j)` with the largest entry.
pub fn argmax_pair(matrix: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (f64::NEG_INFINITY, (0, 1));
    for (i, row) in matrix.iter().enumerate() {
        for (j, &w) in row.iter().enumerate().skip(i + 1) {
            if w > best.0 {
                best = (w, (i, j));
            }
        }
    }
    best.1
}

/// Confidence checks, three reports:
/// * `confidence-ratio`: `p_y(x) / min_a p_y(a(x)) >= e^flip` with softmax confidences,
///   where `flip` says some member changes a correct prediction;
/// * `confidence-margin-logits`: `|min_a z_y(a(x))| >= 1` on logits;
/// * `confidence-margin-softmax`: the same on softmax outputs.
pub fn check_confidence(
    model: &Classifier,
    data: &LabeledImages,
    family: &TransformFamily,
) -> Result<Vec<AssumptionReport>> {
    let orig = model.logits(data.images())?;
    let reps = family_logits(model, data, family)?;
    confidence_from_reps(&orig, &reps, data.labels())
}

pub fn confidence_from_reps(orig: &Tensor, reps: &[Tensor], labels: &[usize]) -> Result<Vec<AssumptionReport>> {
    let n = labels.len();
    let p0 = orig.softmax()?;
    let pred0 = predict_from_logits(orig)?;
    let soft: Vec<Tensor> = reps.iter().map(Tensor::softmax).collect::<Result<_>>()?;
    let preds: Vec<Vec<usize>> = reps.iter().map(predict_from_logits).collect::<Result<_>>()?;
    let (mut ratio_bad, mut logit_bad, mut soft_bad) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &y) in labels.iter().enumerate() {
        let min_p = soft.iter().map(|p| p.row(i)[y]).fold(f64::INFINITY, f64::min);
        let min_z = reps.iter().map(|z| z.row(i)[y]).fold(f64::INFINITY, f64::min);
        let flip = pred0[i] == y && preds.iter().any(|p| p[i] != y);
        let ratio = p0.row(i)[y] / min_p;
        let rhs = if flip { std::f64::consts::E } else { 1.0 };
        if !(ratio >= rhs || min_p == 0.0) {
            ratio_bad.push(Witness::Sample(i));
        }
        if min_z.abs() < 1.0 {
            logit_bad.push(Witness::Sample(i));
        }
        if min_p.abs() < 1.0 {
            soft_bad.push(Witness::Sample(i));
        }
    }
    let mut s = AssumptionReport::from_violations("confidence-margin-softmax", n, soft_bad);
    s.note = Some("softmax outputs never exceed 1; reported for completeness".into());
    Ok(vec![
        AssumptionReport::from_violations("confidence-ratio", n, ratio_bad),
        AssumptionReport::from_violations("confidence-margin-logits", n, logit_bad),
        s,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    WorstCase,
    Vertex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mode: BoundMode,
    /// `1 - robust accuracy` on the evaluation data.
    pub robust_error: f64,
    /// 0-1 error on the training data.
    pub empirical_risk: f64,
    /// Mean of the 0-1 errors under the two vertices, on training data.
    pub vertex_risk: f64,
    /// `sum_i ||f(x_i) - f(x'_i)||_1` with `x'` the per-sample worst member.
    pub worst_alignment_sum: f64,
    pub worst_alignment_mean: f64,
    /// `sum_i ||f(a+(x_i)) - f(a-(x_i))||_1`.
    pub vertex_alignment_sum: f64,
    pub vertex_alignment_mean: f64,
    /// Risk term plus alignment sum for the chosen mode.
    pub rhs_sum: f64,
    /// Risk term plus alignment mean for the chosen mode.
    pub rhs_mean: f64,
    pub notes: Vec<String>,
}

pub fn bound_terms(
    model: &Classifier,
    train: &LabeledImages,
    eval: &LabeledImages,
    family: &TransformFamily,
    mode: BoundMode,
) -> Result<BoundReport> {
    let eval_reps = family_logits(model, eval, family)?;
    let robust_error = 1.0 - robust_accuracy_from_logits(&eval_reps, eval.labels())?;

    let train_reps = family_logits(model, train, family)?;
    let orig = model.logits(train.images())?;
    let labels = train.labels();
    let empirical_risk = 1.0 - accuracy_from_logits(&orig, labels)?;
    let (plus, minus) = (family.vertex_plus(), family.vertex_minus());
    let vertex_risk = 0.5
        * ((1.0 - accuracy_from_logits(&train_reps[plus], labels)?)
            + (1.0 - accuracy_from_logits(&train_reps[minus], labels)?));

    let choice = select_worst_from_logits(&train_reps, labels)?;
    let views: Vec<&Tensor> = train_reps.iter().collect();
    let worst = assemble_rows(&views, &choice)?;
    let n = train.len() as f64;
    let worst_alignment_sum = paired_l1(&orig, &worst);
    let vertex_alignment_sum = paired_l1(&train_reps[plus], &train_reps[minus]);

    let (risk, align) = match mode {
        BoundMode::WorstCase => (empirical_risk, worst_alignment_sum),
        BoundMode::Vertex => (vertex_risk, vertex_alignment_sum),
    };
    Ok(BoundReport {
        mode,
        robust_error,
        empirical_risk,
        vertex_risk,
        worst_alignment_sum,
        worst_alignment_mean: worst_alignment_sum / n,
        vertex_alignment_sum,
        vertex_alignment_mean: vertex_alignment_sum / n,
        rhs_sum: risk + align,
        rhs_mean: risk + align / n,
        notes: vec![
            "capacity term phi(|Theta|, n, delta) omitted: not computable".into(),
            "expected and empirical worst-case distributions assumed to coincide (not checked)".into(),
        ],
    })
}

/// Every check for one `(model, data, family)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub family: String,
    pub efficiency: AssumptionReport,
    pub matching: MatchingReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub vertices: Option<AssumptionReport>,
    pub confidence: Vec<AssumptionReport>,
    pub bounds: Vec<BoundReport>,
}

impl TheoryReport {
    pub fn assumption_reports(&self) -> impl Iterator<Item = &AssumptionReport> {
        std::iter::once(&self.efficiency)
            .chain(self.vertices.iter())
            .chain(&self.confidence)
    }
}

/// Runs all checks. Bounds use `train` for the empirical terms and `eval`
/// for the robust error.
pub fn run_all(
    model: &Classifier,
    train: &LabeledImages,
    eval: &LabeledImages,
    family: &TransformFamily,
) -> Result<TheoryReport> {
    let orig = model.logits(eval.images())?;
    let reps = family_logits(model, eval, family)?;
    Ok(TheoryReport {
        family: family.name().to_string(),
        efficiency: efficiency_from_reps(&orig, &reps),
        matching: matching_from_reps(&orig, &reps, family)?,
        vertices: if family.len() >= 2 {
            Some(vertices_from_reps(&reps, family.vertex_plus(), family.vertex_minus())?)
        } else {
            None
        },
        confidence: confidence_from_reps(&orig, &reps, eval.labels())?,
        bounds: vec![
            bound_terms(model, train, eval, family, BoundMode::WorstCase)?,
            bound_terms(model, train, eval, family, BoundMode::Vertex)?,
        ],
    })
}
