//! Accuracy, robust accuracy and the KNN invariance score, plus the
//! distribution-level Wasserstein diagnostic.
//!
//! All metrics are deterministic functions of `(model, data, family)`.

mod report;

pub use report::{read_metrics_csv, report_table, write_metrics_csv, MetricsRow, ReportCell, ReportTable, SummaryRow};

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, l1_cost_matrix};
use crate::datasets::LabeledImages;
use crate::error::{Error, Result};
use crate::model::{predict_from_logits, Classifier};
use crate::tensor::{l1_distance, Tensor};
use crate::transforms::TransformFamily;

/// Representation compared by the invariance score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Logits,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub robust_accuracy: f64,
    pub invariance: f64,
    /// `None` for classes without samples.
    pub per_class_invariance: Vec<Option<f64>>,
    pub family: String,
    pub seed: Option<u64>,
}

fn nonempty(data: &LabeledImages) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation data is empty".into()));
    }
    Ok(())
}

/// Logits of every family member applied to all of `data`, in member order.
pub fn family_logits(model: &Classifier, data: &LabeledImages, family: &TransformFamily) -> Result<Vec<Tensor>> {
    if family.is_empty() {
        return Err(Error::Argument("transform family is empty".into()));
    }
    family
        .members()
        .iter()
        .map(|t| model.logits(&t.apply_batch(data.images())?))
        .collect()
}

pub fn accuracy(model: &Classifier, data: &LabeledImages) -> Result<f64> {
    nonempty(data)?;
    accuracy_from_logits(&model.logits(data.images())?, data.labels())
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict_from_logits(logits)?;
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(Error::Argument(
            "logits and labels disagree in length or are empty".into(),
        ));
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of samples classified correctly under every member.
pub fn robust_accuracy(model: &Classifier, data: &LabeledImages, family: &TransformFamily) -> Result<f64> {
    nonempty(data)?;
    robust_accuracy_from_logits(&family_logits(model, data, family)?, data.labels())
}

pub fn robust_accuracy_from_logits(per_member: &[Tensor], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Argument("evaluation data is empty".into()));
    }
    let mut ok = vec![true; labels.len()];
    for logits in per_member {
        for (i, p) in predict_from_logits(logits)?.into_iter().enumerate() {
            ok[i] &= p == labels[i];
        }
    }
    Ok(ok.iter().filter(|&&b| b).count() as f64 / labels.len() as f64)
}

/// Nearest-neighbour overlap score with logit distances.
pub fn invariance_score(model: &Classifier, data: &LabeledImages, family: &TransformFamily) -> Result<f64> {
    Ok(invariance_breakdown(model, data, family, Distance::Logits)?.0)
}

/// Score and per-class scores.
///
/// Per class, the pool holds all `t = |family|` copies of the class's samples,
/// indexed `member * m + sample`. For each original `x` the `t` pool entries
/// nearest to `f(x)` in `l1` are retrieved, ties to the lower pool index, and
/// the share of them that are copies of `x` is its score. Sample scores are
/// averaged per class, then over the classes present.
pub fn invariance_breakdown(
    model: &Classifier,
    data: &LabeledImages,
    family: &TransformFamily,
    distance: Distance,
) -> Result<(f64, Vec<Option<f64>>)> {
    nonempty(data)?;
    let mut reps = family_logits(model, data, family)?;
    let mut queries = model.logits(data.images())?;
    if distance == Distance::Softmax {
        for r in &mut reps {
            *r = r.softmax()?;
        }
        queries = queries.softmax()?;
    }
    invariance_from_reps(&queries, &reps, data.labels(), data.classes())
}

/// [`invariance_breakdown`] on precomputed representations: `queries` are the
/// originals, `reps[j]` the copies under member `j`.
pub fn invariance_from_reps(
    queries: &Tensor,
    reps: &[Tensor],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let t = reps.len();
    if t == 0 {
        return Err(Error::Argument("transform family is empty".into()));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut per_class = Vec::with_capacity(classes);
    for (class, members) in by_class.iter().enumerate() {
        let m = members.len();
        if m == 0 {
            per_class.push(None);
            continue;
        }
        if m < 2 {
            return Err(Error::DegenerateClass { class, count: m });
        }
        let pool: Vec<&[f64]> = reps
            .iter()
            .flat_map(|r| members.iter().map(move |&i| r.row(i)))
            .collect();
        let mut total = 0.0;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
        for (s, &i) in members.iter().enumerate() {
            let q = queries.row(i);
            order.clear();
            order.extend(pool.iter().enumerate().map(|(p, row)| (l1_distance(q, row), p)));
            let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if order.len() > t {
                order.select_nth_unstable_by(t - 1, by_key);
            }
            let hits = order[..t].iter().filter(|&&(_, p)| p % m == s).count();
            total += hits as f64 / t as f64;
        }
        per_class.push(Some(total / m as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
}

/// All three metrics with logit distances.
pub fn evaluate(
    model: &Classifier,
    data: &LabeledImages,
    family: &TransformFamily,
    seed: Option<u64>,
) -> Result<EvalReport> {
    evaluate_with(model, data, family, seed, Distance::Logits)
}

pub fn evaluate_with(
    model: &Classifier,
    data: &LabeledImages,
    family: &TransformFamily,
    seed: Option<u64>,
    distance: Distance,
) -> Result<EvalReport> {
    nonempty(data)?;
    let reps = family_logits(model, data, family)?;
    let plain = model.logits(data.images())?;
    let accuracy = accuracy_from_logits(&plain, data.labels())?;
    let robust_accuracy = robust_accuracy_from_logits(&reps, data.labels())?;
    let (invariance, per_class_invariance) = if distance == Distance::Softmax {
        let soft: Vec<Tensor> = reps.iter().map(Tensor::softmax).collect::<Result<_>>()?;
        invariance_from_reps(&plain.softmax()?, &soft, data.labels(), data.classes())?
    } else {
        invariance_from_reps(&plain, &reps, data.labels(), data.classes())?
    };
    Ok(EvalReport {
        accuracy,
        robust_accuracy,
        invariance,
        per_class_invariance,
        family: family.name().to_string(),
        seed,
    })
}

/// Exact empirical `W1` between two equal-size row sets, as a mean over rows.
pub fn w1_mean(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::Argument(format!(
            "W1 needs equal shapes, got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let (n, k) = u.dims2()?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(hungarian(&l1_cost_matrix(u.data(), v.data(), n, k), n)?.cost / n as f64)
}

/// Largest per-sample-normalised `W1` between the logit distributions of any
/// two members.
pub fn wasserstein_invariance(model: &Classifier, data: &LabeledImages, family: &TransformFamily) -> Result<f64> {
    if family.len() < 2 {
        return Err(Error::Argument(
            "wasserstein invariance needs at least 2 members".into(),
        ));
    }
    nonempty(data)?;
    let reps = family_logits(model, data, family)?;
    let mut best = 0.0f64;
    for a in 0..reps.len() {
        for b in a + 1..reps.len() {
            best = best.max(w1_mean(&reps[a], &reps[b])?);
        }
    }
    Ok(best)
}
