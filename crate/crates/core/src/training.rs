//! Loss assembly and SGD loops for the five training modes, and the
//! lambda-by-seed sweep.
//!
//! With `x+`/`x-` the two training vertices of the family and `x'` the
//! per-sample worst member under the current model:
//!
//! | mode           | loss                                          |
//! |----------------|-----------------------------------------------|
//! | Baseline       | `CE(x)`                                       |
//! | VanillaAug     | `(CE(x+) + CE(x-)) / 2`                       |
//! | AlignedVertex  | VanillaAug `+ lambda * penalty(f(x+), f(x-))` |
//! | VanillaWorst   | `(CE(x) + CE(x')) / 2`                        |
//! | AlignedWorst   | VanillaWorst `+ lambda * penalty(f(x), f(x'))`|

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, NodeId};
use crate::datasets::{BatchPlan, LabeledImages};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, Distance, EvalReport};
use crate::model::Classifier;
use crate::regularizers::{
    aux_update, penalty, AlignKind, AuxParams, WassersteinMode, DEFAULT_AUX_LR, DEFAULT_CRITIC_CLIP,
};
use crate::tensor::{one_hot, Tensor};
use crate::transforms::TransformFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    Baseline,
    VanillaAug,
    AlignedVertex,
    VanillaWorst,
    AlignedWorst,
}

impl TrainMode {
    pub fn is_aligned(self) -> bool {
        matches!(self, TrainMode::AlignedVertex | TrainMode::AlignedWorst)
    }

    pub fn is_worst_case(self) -> bool {
        matches!(self, TrainMode::VanillaWorst | TrainMode::AlignedWorst)
    }
}

/// The method labels used in configs and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    B,
    V,
    L,
    S,
    C,
    K,
    W,
    D,
    Vwa,
    Rva,
    Rwa,
}

impl Method {
    /// Report column order.
    pub const ALL: [Method; 11] = [
        Method::B,
        Method::V,
        Method::L,
        Method::S,
        Method::C,
        Method::K,
        Method::W,
        Method::D,
        Method::Vwa,
        Method::Rva,
        Method::Rwa,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::B => "B",
            Method::V => "V",
            Method::L => "L",
            Method::S => "S",
            Method::C => "C",
            Method::K => "K",
            Method::W => "W",
            Method::D => "D",
            Method::Vwa => "VWA",
            Method::Rva => "RVA",
            Method::Rwa => "RWA",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Method::B => TrainMode::Baseline,
            Method::V => TrainMode::VanillaAug,
            Method::Vwa => TrainMode::VanillaWorst,
            Method::Rwa => TrainMode::AlignedWorst,
            _ => TrainMode::AlignedVertex,
        }
    }

    /// Penalty kind; `W` uses the given Wasserstein mode.
    pub fn kind(self, wasserstein: WassersteinMode) -> Option<AlignKind> {
        match self {
            Method::L => Some(AlignKind::L1),
            Method::S | Method::Rva | Method::Rwa => Some(AlignKind::SqL2),
            Method::C => Some(AlignKind::Cosine),
            Method::K => Some(AlignKind::KLDiv),
            Method::W => Some(AlignKind::Wasserstein(wasserstein)),
            Method::D => Some(AlignKind::Discriminator),
            Method::B | Method::V | Method::Vwa => None,
        }
    }

    pub fn uses_lambda(self) -> bool {
        self.mode().is_aligned()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown method `{s}`")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.label().to_string()
    }
}

/// `initial * decay^(epoch / interval)`; `interval = 0` keeps the rate fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "one")]
    pub decay: f64,
    #[serde(default)]
    pub interval: usize,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            decay: 1.0,
            interval: 0,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.interval) {
            Some(steps) => self.initial * self.decay.powi(steps as i32),
            None => self.initial,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub kind: Option<AlignKind>,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub family: TransformFamily,
    pub hidden: Vec<usize>,
    pub aux_lr: f64,
    pub critic_clip: f64,
}

impl TrainPlan {
    pub fn new(mode: TrainMode, family: TransformFamily) -> Self {
        Self {
            mode,
            kind: None,
            lambda: 0.0,
            epochs: 10,
            lr: LrSchedule::constant(0.1),
            batch_size: 64,
            seed: 0,
            family,
            hidden: vec![64],
            aux_lr: DEFAULT_AUX_LR,
            critic_clip: DEFAULT_CRITIC_CLIP,
        }
    }

    /// Copy of `self` set up for `method`; the lambda is reset to 0 for
    /// methods that ignore it.
    pub fn for_method(&self, method: Method, wasserstein: WassersteinMode) -> Self {
        let mut p = self.clone();
        p.mode = method.mode();
        p.kind = method.kind(wasserstein);
        if !method.uses_lambda() {
            p.lambda = 0.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "lambda",
                format!("must be finite and nonnegative, got {}", self.lambda),
            ));
        }
        if self.lambda > 0.0 && self.kind.is_none() {
            return Err(Error::config(
                "lambda",
                format!("{:?} has no penalty to weight", self.mode),
            ));
        }
        if self.mode.is_aligned() && self.kind.is_none() {
            return Err(Error::config(
                "kind",
                format!("{:?} needs an alignment kind", self.mode),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite() && self.lr.decay > 0.0 && self.lr.decay.is_finite()) {
            return Err(Error::config("lr", "initial rate and decay must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one positive hidden width"));
        }
        if self.family.is_empty() {
            return Err(Error::config("family", "transform family is empty"));
        }
        Ok(())
    }
}

/// Per-sample index of the member with the largest cross-entropy
/// (equivalently the smallest true-class probability); ties go to the lower
/// index. `per_member[j]` holds the logits under member `j`.
pub fn select_worst_from_logits(per_member: &[Tensor], labels: &[usize]) -> Result<Vec<usize>> {
    if per_member.is_empty() {
        return Err(Error::Argument("transform family is empty".into()));
    }
    let mut best = vec![(0usize, f64::NEG_INFINITY); labels.len()];
    for (j, logits) in per_member.iter().enumerate() {
        let logp = logits.log_softmax()?;
        let (b, _) = logp.dims2()?;
        if b != labels.len() {
            return Err(Error::dim(
                "select_worst",
                format!("{b} logit rows for {} labels", labels.len()),
            ));
        }
        for (i, &y) in labels.iter().enumerate() {
            let ce = -logp.row(i)[y];
            if ce > best[i].1 {
                best[i] = (j, ce);
            }
        }
    }
    Ok(best.into_iter().map(|(j, _)| j).collect())
}

pub fn select_worst(
    model: &Classifier,
    images: &Tensor,
    labels: &[usize],
    family: &TransformFamily,
) -> Result<Vec<usize>> {
    let logits: Vec<Tensor> = family
        .members()
        .iter()
        .map(|t| model.logits(&t.apply_batch(images)?))
        .collect::<Result<_>>()?;
    select_worst_from_logits(&logits, labels)
}

/// Row `i` taken from `views[choice[i]]`.
pub fn assemble_rows(views: &[&Tensor], choice: &[usize]) -> Result<Tensor> {
    let first = views.first().ok_or_else(|| Error::Argument("no views".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = choice.len();
    let row_len: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(choice.len() * row_len);
    for (i, &j) in choice.iter().enumerate() {
        data.extend_from_slice(views[j].row(i));
    }
    Tensor::new(shape, data)
}

/// A recorded training objective for one batch.
pub struct StepLoss {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: NodeId,
    /// Unweighted penalty, when the plan has a kind.
    pub penalty: Option<f64>,
    /// Detached `(u, v)` paired logits, for auxiliary updates.
    pub pair: Option<(Tensor, Tensor)>,
}

impl StepLoss {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).data()[0]
    }
}

/// Which members each mode reads.
fn needed_members(plan: &TrainPlan) -> Vec<bool> {
    let mut need = vec![false; plan.family.len()];
    match plan.mode {
        TrainMode::Baseline => {}
        TrainMode::VanillaAug | TrainMode::AlignedVertex => {
            need[plan.family.vertex_plus()] = true;
            need[plan.family.vertex_minus()] = true;
        }
        TrainMode::VanillaWorst | TrainMode::AlignedWorst => need.iter_mut().for_each(|n| *n = true),
    }
    need
}

fn compute_views(plan: &TrainPlan, images: &Tensor) -> Result<Vec<Option<Tensor>>> {
    needed_members(plan)
        .into_iter()
        .zip(plan.family.members())
        .map(|(need, t)| need.then(|| t.apply_batch(images)).transpose())
        .collect()
}

/// The plan's objective on `images`, transforming the batch on the fly.
pub fn step_loss(
    plan: &TrainPlan,
    model: &Classifier,
    images: &Tensor,
    labels: &[usize],
    aux: Option<&AuxParams>,
) -> Result<StepLoss> {
    let views = compute_views(plan, images)?;
    step_loss_with_views(plan, model, images, labels, &views, aux)
}

/// [`step_loss`] with `views[j]` = member `j` applied to `images`, present
/// for every member the mode reads.
pub fn step_loss_with_views(
    plan: &TrainPlan,
    model: &Classifier,
    images: &Tensor,
    labels: &[usize],
    views: &[Option<Tensor>],
    aux: Option<&AuxParams>,
) -> Result<StepLoss> {
    if labels.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if plan.lambda > 0.0 && plan.kind.is_none() {
        return Err(Error::config(
            "lambda",
            format!("{:?} has no penalty to weight", plan.mode),
        ));
    }
    let view = |j: usize| {
        views
            .get(j)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Usage(format!("member {j} view was not provided")))
    };
    let y = one_hot(labels, model.classes())?;
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);

    let (ce, pair_nodes) = match plan.mode {
        TrainMode::Baseline => {
            let z = model.forward(&mut g, &bound, images)?;
            (g.softmax_cross_entropy(z, &y)?, None)
        }
        TrainMode::VanillaAug | TrainMode::AlignedVertex => {
            let zp = model.forward(&mut g, &bound, view(plan.family.vertex_plus())?)?;
            let zm = model.forward(&mut g, &bound, view(plan.family.vertex_minus())?)?;
            let cp = g.softmax_cross_entropy(zp, &y)?;
            let cm = g.softmax_cross_entropy(zm, &y)?;
            let s = g.add(cp, cm)?;
            (g.scale(s, 0.5), Some((zp, zm)))
        }
        TrainMode::VanillaWorst | TrainMode::AlignedWorst => {
            let all: Vec<&Tensor> = (0..plan.family.len()).map(view).collect::<Result<_>>()?;
            let logits: Vec<Tensor> = all.iter().map(|v| model.logits(v)).collect::<Result<_>>()?;
            let choice = select_worst_from_logits(&logits, labels)?;
            let worst = assemble_rows(&all, &choice)?;
            let z = model.forward(&mut g, &bound, images)?;
            let zw = model.forward(&mut g, &bound, &worst)?;
            let c0 = g.softmax_cross_entropy(z, &y)?;
            let cw = g.softmax_cross_entropy(zw, &y)?;
            let s = g.add(c0, cw)?;
            (g.scale(s, 0.5), Some((z, zw)))
        }
    };

    let (mut loss, mut pen, mut pair) = (ce, None, None);
    if let (Some(kind), Some((u, v))) = (plan.kind, pair_nodes) {
        let p = penalty(&mut g, kind, u, v, aux)?;
        pen = Some(g.value(p).data()[0]);
        pair = Some((g.value(u).clone(), g.value(v).clone()));
        // A zero weight leaves the graph's loss untouched.
        if plan.lambda > 0.0 {
            let weighted = g.scale(p, plan.lambda);
            loss = g.add(ce, weighted)?;
        }
    }
    Ok(StepLoss {
        graph: g,
        bound,
        loss,
        penalty: pen,
        pair,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    /// Per-epoch mean of the batch objective.
    pub train_loss: Vec<f64>,
    /// Per-epoch mean of the unweighted penalty; 0 for modes without one.
    pub penalty: Vec<f64>,
    pub model: Classifier,
    pub aux: Option<AuxParams>,
}

fn batch_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// SGD over `plan.epochs` epochs. The model is initialised from `plan.seed`;
/// auxiliaries take one step after every model step.
pub fn train(plan: &TrainPlan, data: &LabeledImages) -> Result<RunHistory> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training data is empty".into()));
    }
    let (h, w) = data.image_size();
    let mut widths = vec![h * w];
    widths.extend(&plan.hidden);
    widths.push(data.classes());
    let mut model = Classifier::init(&widths, plan.seed)?;
    let mut aux = match plan.kind {
        Some(kind) => AuxParams::for_kind(kind, data.classes(), plan.aux_lr, plan.critic_clip, plan.seed)?,
        None => None,
    };
    let full_views = compute_views(plan, data.images())?;

    let mut history_loss = Vec::with_capacity(plan.epochs);
    let mut history_pen = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let lr = plan.lr.at(epoch);
        let (mut loss_sum, mut pen_sum) = (0.0, 0.0);
        for idx in BatchPlan::new(plan.batch_size, batch_seed(plan.seed), epoch)?.index_batches(data.len()) {
            let images = data.images().select_rows(&idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let views: Vec<Option<Tensor>> = full_views
                .iter()
                .map(|v| v.as_ref().map(|t| t.select_rows(&idx)).transpose())
                .collect::<Result<_>>()?;
            let mut step = step_loss_with_views(plan, &model, &images, &labels, &views, aux.as_ref())?;
            let value = step.value();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            let params = model.params_mut();
            params.zero_grad();
            step.graph.backward(step.loss)?;
            params.accumulate(&step.graph, &step.bound);
            params.sgd_step(lr);
            if !params.values().all(Tensor::all_finite) {
                return Err(Error::Divergence { epoch: epoch + 1 });
            }
            if let (Some(kind), Some((u, v))) = (plan.kind, &step.pair) {
                if kind.needs_aux() {
                    aux_update(kind, u, v, aux.as_mut())?;
                }
            }
            loss_sum += value * idx.len() as f64;
            pen_sum += step.penalty.unwrap_or(0.0) * idx.len() as f64;
        }
        history_loss.push(loss_sum / data.len() as f64);
        history_pen.push(pen_sum / data.len() as f64);
    }
    Ok(RunHistory {
        train_loss: history_loss,
        penalty: history_pen,
        model,
        aux,
    })
}

pub fn default_lambda_grid() -> Vec<f64> {
    (-7..=0).map(|e| format!("1e{e}").parse().expect("literal")).collect()
}

pub const DEFAULT_SEEDS: usize = 3;

#[derive(Debug)]
pub struct CellResult {
    pub report: EvalReport,
    pub history: RunHistory,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct SweepCell {
    pub lambda: f64,
    pub seed: u64,
    pub outcome: Result<CellResult>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// Lambda with the best mean robust accuracy over successful seeds;
    /// `None` for modes without a penalty.
    pub selected_lambda: Option<f64>,
    pub accuracy: MeanStd,
    pub robust_accuracy: MeanStd,
    pub invariance: MeanStd,
}

impl SweepTable {
    pub fn selected_cells(&self) -> impl Iterator<Item = &SweepCell> {
        let pick = self.selected_lambda.unwrap_or(0.0);
        self.cells.iter().filter(move |c| c.lambda == pick)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }
}

/// Lambda with the largest mean robustness over its successful cells; ties
/// go to the earlier lambda.
pub fn select_lambda(cells: &[(f64, f64)]) -> Option<f64> {
    let mut lambdas: Vec<f64> = Vec::new();
    for &(l, _) in cells {
        if !lambdas.contains(&l) {
            lambdas.push(l);
        }
    }
    let mut best: Option<(f64, f64)> = None;
    for l in lambdas {
        let vals: Vec<f64> = cells.iter().filter(|c| c.0 == l).map(|c| c.1).collect();
        let m = MeanStd::of(&vals).mean;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((l, m));
        }
    }
    best.map(|(l, _)| l)
}

/// Trains every `(lambda, seed)` cell, evaluates it on `eval` under
/// `eval_family`, and summarises the selected lambda. Failed cells are kept
/// with their error; the sweep fails only if every cell does.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    template: &TrainPlan,
    grid: &[f64],
    seeds: &[u64],
    train_data: &LabeledImages,
    eval_data: &LabeledImages,
    eval_family: &TransformFamily,
    distance: Distance,
    threads: usize,
) -> Result<SweepTable> {
    let cells = sweep_cells(
        template,
        grid,
        seeds,
        train_data,
        eval_data,
        eval_family,
        distance,
        threads,
    )?;
    summarize(cells, template.mode.is_aligned())
}

/// The cells of [`sweep`] without the summary; every cell is returned even
/// when all of them fail. `threads > 1` trains cells on a dedicated pool;
/// results keep cell order.
#[allow(clippy::too_many_arguments)]
pub fn sweep_cells(
    template: &TrainPlan,
    grid: &[f64],
    seeds: &[u64],
    train_data: &LabeledImages,
    eval_data: &LabeledImages,
    eval_family: &TransformFamily,
    distance: Distance,
    threads: usize,
) -> Result<Vec<SweepCell>> {
    if grid.is_empty() {
        return Err(Error::Argument("lambda grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Argument("no seeds".into()));
    }
    let lambdas: Vec<f64> = if template.mode.is_aligned() {
        grid.to_vec()
    } else {
        vec![0.0]
    };
    let jobs: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let run = |&(lambda, seed): &(f64, u64)| {
        let mut plan = template.clone();
        plan.lambda = lambda;
        plan.seed = seed;
        let start = std::time::Instant::now();
        let outcome = train(&plan, train_data).and_then(|history| {
            let report = evaluate_with(&history.model, eval_data, eval_family, Some(seed), distance)?;
            Ok(CellResult {
                report,
                history,
                seconds: start.elapsed().as_secs_f64(),
            })
        });
        if let Err(e) = &outcome {
            log::warn!("cell lambda={lambda:e} seed={seed} failed: {e}");
        }
        SweepCell { lambda, seed, outcome }
    };
    let cells: Vec<SweepCell> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    Ok(cells)
}

fn summarize(cells: Vec<SweepCell>, aligned: bool) -> Result<SweepTable> {
    let ok: Vec<(f64, &CellResult)> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|r| (c.lambda, r)))
        .collect();
    if ok.is_empty() {
        return Err(Error::AllCellsFailed(cells.len()));
    }
    let scored: Vec<(f64, f64)> = ok.iter().map(|(l, r)| (*l, r.report.robust_accuracy)).collect();
    let pick = select_lambda(&scored).expect("nonempty");
    let chosen: Vec<&CellResult> = ok.iter().filter(|(l, _)| *l == pick).map(|(_, r)| *r).collect();
    let stat = |f: fn(&EvalReport) -> f64| MeanStd::of(&chosen.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
    Ok(SweepTable {
        selected_lambda: aligned.then_some(pick),
        accuracy: stat(|r| r.accuracy),
        robust_accuracy: stat(|r| r.robust_accuracy),
        invariance: stat(|r| r.invariance),
        cells,
    })
}
