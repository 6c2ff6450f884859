//! Teacher training, budgeted pruning in three phases, and the Random and
//! Weight-Magnitude baselines.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Graph;
use crate::budget::{self, BudgetState, LayerCost, Metric, Schedule};
use crate::data::Dataset;
use crate::distill::{kd_loss, LogitsCache};
use crate::error::{Error, Result};
use crate::gates;
use crate::netgraph::{self, build_network, cost_report, hard_prune, CostReport, GateMode, Network, NetworkSpec, PrunedGraph};
use crate::optim::{Adam, AdamConfig, ParamSlot};
use crate::tensor::{Rng, Scalar, Tensor};

/// Gate parameter given to channels that must stay fully open (teacher) or
/// are kept by a baseline. Its deterministic gate is exactly 1.
pub const OPEN_LOG_ALPHA: f32 = 10.0;
/// Gate parameter of channels removed by a baseline; deterministic gate 0.
pub const CLOSED_LOG_ALPHA: f32 = -10.0;

const PREDICT_BATCH: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub kd_alpha: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1e-5, kd_alpha: 0.9, temperature: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BudgetConfig {
    pub metric: Metric,
    /// `B / V_F`.
    pub fraction: f64,
    pub schedule: Schedule,
    /// Scale of the bound on the barrier value used as the training
    /// coefficient; see [`coef_clamp`].
    pub max_coef: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Volume,
            fraction: 0.5,
            schedule: Schedule::Sigmoid { d: budget::DEFAULT_SIGMOID_D },
            max_coef: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub epochs_hi: usize,
    pub epochs_lo: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { epochs_hi: 10, epochs_lo: 2, lr_hi: 1e-3, lr_lo: 1e-4, batch_size: 64, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Phase 1: joint training of weights and gates under the moving budget.
    pub epochs: usize,
    /// Phase 2: fine-tuning with frozen gates at `finetune_lr_hi`.
    pub finetune_hi_epochs: usize,
    /// Phase 3: fine-tuning at `finetune_lr_lo`.
    pub finetune_lo_epochs: usize,
    /// Extra phase-1 epochs at `b = B` allowed when the final volume is
    /// still above budget.
    pub max_extra_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub finetune_lr_hi: f64,
    pub finetune_lr_lo: f64,
    pub weight_decay: f64,
    pub init_from_teacher: bool,
    /// Evaluate every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    pub loss: LossConfig,
    pub budget: BudgetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            finetune_hi_epochs: 4,
            finetune_lo_epochs: 2,
            max_extra_epochs: 2,
            batch_size: 64,
            lr: 1e-3,
            gate_lr: 2e-2,
            finetune_lr_hi: 1e-3,
            finetune_lr_lo: 1e-4,
            weight_decay: 5e-4,
            init_from_teacher: false,
            eval_every: 0,
            loss: LossConfig::default(),
            budget: BudgetConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub epochs_hi: usize,
    pub epochs_lo: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { epochs_hi: 3, epochs_lo: 1, lr_hi: 1e-3, lr_lo: 1e-4, batch_size: 64, weight_decay: 5e-4 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        check_epochs(&[("teacher.epochs_hi", self.epochs_hi)])?;
        check_batch(self.batch_size)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_epochs(&[
            ("train.epochs", self.epochs),
            ("train.finetune_hi_epochs", self.finetune_hi_epochs),
            ("train.finetune_lo_epochs", self.finetune_lo_epochs),
        ])?;
        check_batch(self.batch_size)?;
        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.kd_alpha) || !(l.temperature >= 1.0) || !(l.lambda >= 0.0) {
            return Err(Error::Argument(format!("invalid loss settings {l:?}")));
        }
        if !(self.budget.fraction > 0.0 && self.budget.fraction < 1.0) {
            return Err(Error::Argument(format!("budget fraction {} outside (0, 1)", self.budget.fraction)));
        }
        if !(self.budget.max_coef > 0.0) {
            return Err(Error::Argument("budget.max_coef must be positive".into()));
        }
        Ok(())
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        check_epochs(&[("baseline.epochs_hi", self.epochs_hi)])?;
        check_batch(self.batch_size)
    }
}

fn check_epochs(items: &[(&str, usize)]) -> Result<()> {
    match items.iter().find(|(_, e)| *e == 0) {
        Some((k, _)) => Err(Error::Argument(format!("{k} must be at least 1"))),
        None => Ok(()),
    }
}

fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    Ok(())
}

// ---- data -------------------------------------------------------------------

/// A dataset converted to network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `[n, c, h, w]`.
    pub x: Vec<f32>,
    pub labels: Vec<u8>,
    pub shape: [usize; 3],
}

impl Split {
    pub fn new(d: &Dataset) -> Self {
        Self { x: d.to_nchw(), labels: d.labels.clone(), shape: [d.channels, d.height, d.width] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn per(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn check_spec(&self, spec: &NetworkSpec) -> Result<()> {
        let [c, h, w] = self.shape;
        if c != spec.input_channels || h != spec.input_size || w != spec.input_size {
            return Err(Error::Spec(format!(
                "dataset images are {h}x{w}x{c}, network expects {s}x{s}x{}",
                spec.input_channels,
                s = spec.input_size
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= spec.num_classes) {
            return Err(Error::Spec(format!("label {l} but the network has {} classes", spec.num_classes)));
        }
        Ok(())
    }

    fn batch(&self, ids: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.per();
        let mut x = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            x.extend_from_slice(&self.x[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.shape;
        let t = Tensor::new(vec![ids.len(), c, h, w], x).expect("batch shape");
        (t, ids.iter().map(|&i| self.labels[i] as usize).collect())
    }
}

// ---- run log ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    TeacherHi,
    TeacherLo,
    Prune,
    /// Phase-1 continuation at `b = B`.
    Extend,
    FinetuneHi,
    FinetuneLo,
    RetrainHi,
    RetrainLo,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::TeacherHi,
        Phase::TeacherLo,
        Phase::Prune,
        Phase::Extend,
        Phase::FinetuneHi,
        Phase::FinetuneLo,
        Phase::RetrainHi,
        Phase::RetrainLo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::TeacherHi => "teacher_hi",
            Phase::TeacherLo => "teacher_lo",
            Phase::Prune => "prune",
            Phase::Extend => "extend",
            Phase::FinetuneHi => "finetune_hi",
            Phase::FinetuneLo => "finetune_lo",
            Phase::RetrainHi => "retrain_hi",
            Phase::RetrainLo => "retrain_lo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// One optimizer step. Budget columns are present only while gates train.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub epoch: u64,
    pub b: Option<f64>,
    /// Hard-pruned volume and FLOPs of the gates used in this step.
    pub volume: f64,
    pub flops: f64,
    /// Data term: distillation loss, or cross-entropy without a teacher.
    pub loss_d: f64,
    pub loss_hard: f64,
    pub loss_soft: Option<f64>,
    /// Expected cost `L_S`.
    pub sparsity: Option<f64>,
    /// Barrier coefficient actually applied (after the clamp).
    pub barrier: Option<f64>,
    pub loss_bar: Option<f64>,
    pub loss_total: f64,
    /// Eval accuracy, on the last step of evaluated epochs.
    pub eval_acc: Option<f64>,
}

pub const CSV_HEADER: &str =
    "phase,step,epoch,b,volume,flops,loss_d,loss_hard,loss_soft,sparsity,barrier,loss_bar,loss_total,eval_acc";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Steps where the hard volume sat at or above `b`.
    pub violations: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl RunLog {
    fn push(&mut self, r: StepRecord) {
        debug_assert!(self.steps.last().map_or(true, |l| l.step < r.step));
        self.steps.push(r);
    }

    /// Header row plus one row per step, LF line endings. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(128 * (self.steps.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.phase.name(),
                r.step,
                r.epoch,
                opt(r.b),
                r.volume,
                r.flops,
                r.loss_d,
                r.loss_hard,
                opt(r.loss_soft),
                opt(r.sparsity),
                opt(r.barrier),
                opt(r.loss_bar),
                r.loss_total,
                opt(r.eval_acc)
            );
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::integrity(path, format!("line {line}: {msg}"));
        let mut lines = text.split_terminator('\n');
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let mut log = RunLog::default();
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(bad(ln, "expected 14 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, "bad number"));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(ln, "bad integer"));
            log.steps.push(StepRecord {
                phase: Phase::parse(f[0]).ok_or_else(|| bad(ln, "unknown phase"))?,
                step: int(f[1])?,
                epoch: int(f[2])?,
                b: opt(f[3])?,
                volume: num(f[4])?,
                flops: num(f[5])?,
                loss_d: num(f[6])?,
                loss_hard: num(f[7])?,
                loss_soft: opt(f[8])?,
                sparsity: opt(f[9])?,
                barrier: opt(f[10])?,
                loss_bar: opt(f[11])?,
                loss_total: num(f[12])?,
                eval_acc: opt(f[13])?,
            });
        }
        Ok(log)
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.steps.iter().rev().find_map(|r| r.eval_acc)
    }
}

// ---- one optimizer step -----------------------------------------------------

enum Gates<'a> {
    Ones,
    /// Reparameterized samples; the gates train.
    Sampled,
    Fixed(&'a [Vec<f32>]),
}

enum Objective<'a> {
    CrossEntropy,
    Distill { cache: &'a LogitsCache, alpha: f64, temperature: f64 },
}

struct BarTerm<'a> {
    costs: &'a [LayerCost],
    metric: Metric,
    coef: f64,
    lambda: f64,
}

struct StepValues {
    loss_d: f64,
    loss_hard: f64,
    loss_soft: Option<f64>,
    sparsity: Option<f64>,
    loss_bar: Option<f64>,
    total: f64,
}

struct Lrs {
    weights: f64,
    gates: f64,
    weight_decay: f64,
}

#[allow(clippy::too_many_arguments)]
fn gradient_step(
    net: &mut Network,
    adam: &mut Adam,
    split: &Split,
    ids: &[usize],
    gates: &Gates<'_>,
    objective: &Objective<'_>,
    bar: Option<&BarTerm<'_>>,
    lrs: &Lrs,
    noise_rng: &mut Rng,
) -> Result<StepValues> {
    let train_gates = matches!(gates, Gates::Sampled);
    let mut g = Graph::<f32>::new();
    let p = net.bind(&mut g, true, train_gates);
    let (xb, labels) = split.batch(ids);
    let x = g.constant(xb);
    let noise: Vec<Vec<f64>>;
    let mode = match gates {
        Gates::Ones => GateMode::Ones,
        Gates::Fixed(v) => GateMode::Fixed(v),
        Gates::Sampled => {
            noise = net.gates.iter().map(|phi| gates::draw_noise(phi.len(), noise_rng)).collect();
            GateMode::Sampled(&noise)
        }
    };
    let f = netgraph::forward(&mut g, &net.layout, &net.gates, &p, &mut net.bn, x, mode, true)?;
    let (data_term, hard, soft) = match objective {
        Objective::CrossEntropy => {
            let ce = g.cross_entropy_logits(f.logits, &labels)?;
            (ce, ce, None)
        }
        Objective::Distill { cache, alpha, temperature } => {
            let kd = kd_loss(&mut g, f.logits, &labels, &cache.gather(ids), *alpha, *temperature)?;
            (kd.total, kd.hard, Some(kd.soft))
        }
    };
    let mut total = data_term;
    let mut sparsity = None;
    let mut loss_bar = None;
    if let Some(bt) = bar {
        let ls = budget::expected_cost_loss(&mut g, &p.log_alpha, &net.gates, bt.costs, bt.metric)?;
        let lb = budget::bar_loss(&mut g, ls, bt.coef);
        let scaled = g.scale(lb, bt.lambda as f32);
        total = g.add(total, scaled)?;
        sparsity = Some(g.scalar(ls).to_f64());
        loss_bar = Some(g.scalar(lb).to_f64());
    }
    let total_value = g.scalar(total).to_f64();
    if !total_value.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {total_value} at optimizer step {}", adam.steps() + 1)));
    }
    g.backward(total)?;
    let mut grads: Vec<Vec<f32>> =
        p.weights().iter().map(|&v| g.grad(v).expect("trainable weight").data().to_vec()).collect();
    let n_weights = grads.len();
    if train_gates {
        grads.extend(p.log_alpha.iter().map(|&v| g.grad(v).expect("trainable gate").data().to_vec()));
    }
    let values = StepValues {
        loss_d: g.scalar(data_term).to_f64(),
        loss_hard: g.scalar(hard).to_f64(),
        loss_soft: soft.map(|s| g.scalar(s).to_f64()),
        sparsity,
        loss_bar,
        total: total_value,
    };
    drop(g);

    let Network { convs, head_w, head_b, gates: phis, .. } = net;
    let mut targets: Vec<&mut [f32]> = Vec::with_capacity(grads.len());
    for c in convs.iter_mut() {
        targets.push(c.weight.data_mut());
        targets.push(&mut c.gamma);
        targets.push(&mut c.beta);
    }
    targets.push(head_w.data_mut());
    targets.push(head_b);
    if train_gates {
        targets.extend(phis.iter_mut().map(|phi| &mut phi.log_alpha[..]));
    }
    let mut slots: Vec<ParamSlot<'_>> = targets
        .into_iter()
        .zip(&grads)
        .enumerate()
        .map(|(k, (value, grad))| {
            let is_weight = k < n_weights;
            ParamSlot {
                value,
                grad,
                lr: if is_weight { lrs.weights } else { lrs.gates },
                weight_decay: if is_weight { lrs.weight_decay } else { 0.0 },
            }
        })
        .collect();
    adam.step(&mut slots).map_err(|e| match e {
        Error::NonFinite(m) => Error::Divergence(m),
        other => other,
    })?;
    Ok(values)
}

// ---- evaluation -------------------------------------------------------------

/// Top-1 accuracy of row-major logits against `labels`; ties resolve to the
/// lowest class index.
pub fn evaluate_logits(logits: &[f32], labels: &[u8], classes: usize) -> f64 {
    netgraph::accuracy(logits, labels, classes)
}

/// Eval-mode accuracy of a dense network under its inference gates.
pub fn evaluate_dense(net: &Network, split: &Split) -> Result<f64> {
    let z = net.inference_gates();
    let logits = net.predict(&split.x, GateMode::Fixed(&z), PREDICT_BATCH)?;
    Ok(evaluate_logits(&logits, &split.labels, net.spec.num_classes))
}

pub fn evaluate_pruned(g: &PrunedGraph, split: &Split) -> Result<f64> {
    let logits = g.predict(&split.x, PREDICT_BATCH)?;
    Ok(evaluate_logits(&logits, &split.labels, g.spec.num_classes))
}

// ---- epoch loop -------------------------------------------------------------

struct Loop<'a> {
    train: &'a Split,
    eval: Option<&'a Split>,
    batch_size: usize,
    eval_every: usize,
    adam: Adam,
    shuffle_rng: Rng,
    noise_rng: Rng,
    log: RunLog,
    step: u64,
    epoch: u64,
}

impl<'a> Loop<'a> {
    fn new(train: &'a Split, eval: Option<&'a Split>, batch_size: usize, eval_every: usize, rng: &mut Rng) -> Self {
        Self {
            train,
            eval,
            batch_size,
            eval_every,
            adam: Adam::new(AdamConfig::default()),
            shuffle_rng: rng.fork(1),
            noise_rng: rng.fork(2),
            log: RunLog::default(),
            step: 0,
            epoch: 0,
        }
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.batch_size)
    }

    /// Marks the end of an epoch, evaluating when the cadence (or `force`)
    /// asks for it.
    fn end_epoch(&mut self, net: &Network, force: bool) -> Result<()> {
        self.epoch += 1;
        let due = self.eval_every > 0 && self.epoch % self.eval_every as u64 == 0;
        if let (Some(eval), true) = (self.eval, due || force) {
            let acc = evaluate_dense(net, eval)?;
            log::info!("epoch {}: eval accuracy {acc:.4}", self.epoch);
            if let Some(last) = self.log.steps.last_mut() {
                last.eval_acc = Some(acc);
            }
        }
        Ok(())
    }

    /// Plain epochs without gate training (teacher, fine-tuning, retraining).
    fn plain_epochs(
        &mut self,
        net: &mut Network,
        phase: Phase,
        epochs: usize,
        lr: f64,
        weight_decay: f64,
        gates: &Gates<'_>,
        objective: &Objective<'_>,
    ) -> Result<()> {
        let (volume, flops) = match gates {
            Gates::Ones => {
                let costs = net.layout.costs();
                (budget::full_cost(&costs, Metric::Volume), budget::full_cost(&costs, Metric::Flops))
            }
            _ => hard_costs(net)?,
        };
        let lrs = Lrs { weights: lr, gates: 0.0, weight_decay };
        for e in 0..epochs {
            for ids in self.batches() {
                let v = gradient_step(net, &mut self.adam, self.train, &ids, gates, objective, None, &lrs, &mut self.noise_rng)?;
                self.step += 1;
                self.log.push(StepRecord {
                    phase,
                    step: self.step,
                    epoch: self.epoch,
                    b: None,
                    volume,
                    flops,
                    loss_d: v.loss_d,
                    loss_hard: v.loss_hard,
                    loss_soft: v.loss_soft,
                    sparsity: None,
                    barrier: None,
                    loss_bar: None,
                    loss_total: v.total,
                    eval_acc: None,
                });
            }
            self.end_epoch(net, e + 1 == epochs)?;
        }
        Ok(())
    }
}

/// Upper bound on the barrier coefficient: `max_coef * ((full / b)^2 - 1)`.
///
/// Whenever the hard cost sits at or above `b` the barrier is infinite, and
/// an unbounded coefficient pushes every gate past the death threshold at
/// once. The bound is zero at `b = full`, so a margin that has barely moved
/// asks for a small cut, and it grows as `b` shrinks because the surviving
/// gates sit on smaller feature maps and need more pressure to keep up.
pub fn coef_clamp(max_coef: f64, full: f64, b: f64) -> f64 {
    max_coef * ((full / b).powi(2) - 1.0)
}

fn hard_costs(net: &Network) -> Result<(f64, f64)> {
    let costs = net.layout.costs();
    Ok((budget::hard_volume(&net.gates, &costs)?, budget::hard_flops(&net.gates, &costs)?))
}

fn set_open_gates(net: &mut Network) {
    for phi in &mut net.gates {
        phi.log_alpha.iter_mut().for_each(|a| *a = OPEN_LOG_ALPHA);
    }
}

// ---- teacher ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    /// Gates are fully open, so inference gates are exactly one.
    pub net: Network,
    pub cache: LogitsCache,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub log: RunLog,
}

/// Trains the unpruned network (no gates) in two learning-rate stages and
/// caches its eval-mode logits on the training set.
pub fn train_teacher(
    spec: &NetworkSpec,
    train: &Split,
    eval: Option<&Split>,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TeacherOutcome> {
    cfg.validate()?;
    train.check_spec(spec)?;
    let mut rng = Rng::new(seed);
    let mut net = build_network(spec, &mut rng.fork(0))?;
    set_open_gates(&mut net);
    let mut lp = Loop::new(train, eval, cfg.batch_size, 0, &mut rng);
    let ce = Objective::CrossEntropy;
    lp.plain_epochs(&mut net, Phase::TeacherHi, cfg.epochs_hi, cfg.lr_hi, cfg.weight_decay, &Gates::Ones, &ce)?;
    lp.plain_epochs(&mut net, Phase::TeacherLo, cfg.epochs_lo, cfg.lr_lo, cfg.weight_decay, &Gates::Ones, &ce)?;
    let logits = net.predict(&train.x, GateMode::Ones, PREDICT_BATCH)?;
    let cache = LogitsCache::new(train.len(), spec.num_classes, logits)?;
    let train_acc = cache.accuracy(&train.labels);
    let eval_acc = lp.log.last_eval();
    log::info!("teacher: train accuracy {train_acc:.4}, eval accuracy {eval_acc:?}");
    Ok(TeacherOutcome { net, cache, train_acc, eval_acc, log: lp.log })
}

// ---- budgeted pruning -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub net: Network,
    pub pruned: PrunedGraph,
    pub report: CostReport,
    pub log: RunLog,
    /// `B` in the configured metric.
    pub budget: f64,
    pub metric: Metric,
    /// Hard cost in the configured metric.
    pub final_cost: f64,
    pub hard_volume: f64,
    pub hard_flops: f64,
    pub eval_acc: Option<f64>,
    pub extra_epochs: usize,
}

impl PruneOutcome {
    pub fn within_budget(&self) -> bool {
        self.final_cost <= self.budget
    }

    pub fn check_budget(&self) -> Result<()> {
        if self.within_budget() {
            return Ok(());
        }
        Err(Error::Budget(format!("final hard cost {} exceeds budget {}", self.final_cost, self.budget)))
    }
}

/// Three-phase budgeted pruning: joint training of weights and gates while
/// the upper budget margin slides from the full cost down to `B`, then
/// fine-tuning of the weights with frozen gates at two learning rates.
///
/// The outcome is returned even when the hard cost is still above `B` after
/// the allowed phase-1 extension; [`PruneOutcome::check_budget`] turns that
/// into an error.
pub fn bar_train(
    spec: &NetworkSpec,
    train: &Split,
    eval: Option<&Split>,
    cache: &LogitsCache,
    teacher: Option<&Network>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    train.check_spec(spec)?;
    if cache.n_samples != train.len() || cache.n_classes != spec.num_classes {
        return Err(Error::Argument(format!(
            "teacher cache is {}x{}, training split has {} samples and {} classes",
            cache.n_samples,
            cache.n_classes,
            train.len(),
            spec.num_classes
        )));
    }
    let mut rng = Rng::new(seed);
    let mut net = build_network(spec, &mut rng.fork(0))?;
    if cfg.init_from_teacher {
        let t = teacher.ok_or_else(|| Error::Argument("train.init_from_teacher needs a teacher network".into()))?;
        if t.spec != *spec {
            return Err(Error::Spec("teacher architecture differs from the student's".into()));
        }
        net.convs = t.convs.clone();
        net.bn = t.bn.clone();
        net.head_w = t.head_w.clone();
        net.head_b = t.head_b.clone();
    }
    let costs = net.layout.costs();
    let metric = cfg.budget.metric;
    let full = budget::full_cost(&costs, metric);
    let state = BudgetState::from_fraction(full, cfg.budget.fraction, metric, cfg.budget.schedule)?;
    let mut lp = Loop::new(train, eval, cfg.batch_size, cfg.eval_every, &mut rng);
    let kd = Objective::Distill { cache, alpha: cfg.loss.kd_alpha, temperature: cfg.loss.temperature };
    let lrs = Lrs { weights: cfg.lr, gates: cfg.gate_lr, weight_decay: cfg.weight_decay };

    let total_steps = cfg.epochs * lp.steps_per_epoch();
    let mut phase1_step = 0usize;
    let mut extra_epochs = 0;
    let mut epoch_in_phase = 0;
    loop {
        let extending = epoch_in_phase >= cfg.epochs;
        if extending {
            let cost = budget::hard_cost(&net.gates, &costs, metric)?;
            if cost <= state.budget || extra_epochs == cfg.max_extra_epochs {
                break;
            }
            extra_epochs += 1;
            log::warn!("hard cost {cost} above budget {} after phase 1, extending (epoch {extra_epochs})", state.budget);
        }
        for ids in lp.batches() {
            let i = if total_steps <= 1 { 1.0 } else { (phase1_step as f64 / (total_steps - 1) as f64).min(1.0) };
            let st = budget::update_budget(&state, i);
            let (volume, flops) = hard_costs(&net)?;
            let v = if metric == Metric::Volume { volume } else { flops };
            if v >= st.b {
                lp.log.violations += 1;
                log::debug!("step {}: hard cost {v} at or above b = {}", lp.step + 1, st.b);
            }
            let coef = st.barrier(v).min(coef_clamp(cfg.budget.max_coef, full, st.b));
            let bar = BarTerm { costs: &costs, metric, coef, lambda: cfg.loss.lambda };
            let out = gradient_step(&mut net, &mut lp.adam, train, &ids, &Gates::Sampled, &kd, Some(&bar), &lrs, &mut lp.noise_rng)?;
            lp.step += 1;
            phase1_step += 1;
            lp.log.push(StepRecord {
                phase: if extending { Phase::Extend } else { Phase::Prune },
                step: lp.step,
                epoch: lp.epoch,
                b: Some(st.b),
                volume,
                flops,
                loss_d: out.loss_d,
                loss_hard: out.loss_hard,
                loss_soft: out.loss_soft,
                sparsity: out.sparsity,
                barrier: Some(coef),
                loss_bar: out.loss_bar,
                loss_total: out.total,
                eval_acc: None,
            });
        }
        epoch_in_phase += 1;
        lp.end_epoch(&net, false)?;
    }

    let z = net.inference_gates();
    let fixed = Gates::Fixed(&z);
    lp.plain_epochs(&mut net, Phase::FinetuneHi, cfg.finetune_hi_epochs, cfg.finetune_lr_hi, cfg.weight_decay, &fixed, &kd)?;
    lp.plain_epochs(&mut net, Phase::FinetuneLo, cfg.finetune_lo_epochs, cfg.finetune_lr_lo, cfg.weight_decay, &fixed, &kd)?;
    // finetune steps hold b = B
    for r in lp.log.steps.iter_mut().filter(|r| matches!(r.phase, Phase::FinetuneHi | Phase::FinetuneLo)) {
        r.b = Some(state.budget);
    }

    finish(net, lp.log, state.budget, metric, eval, extra_epochs)
}

fn finish(net: Network, log: RunLog, budget: f64, metric: Metric, eval: Option<&Split>, extra_epochs: usize) -> Result<PruneOutcome> {
    let (hard_volume, hard_flops) = hard_costs(&net)?;
    let pruned = hard_prune(&net)?;
    let report = cost_report(&pruned);
    let eval_acc = eval.map(|e| evaluate_pruned(&pruned, e)).transpose()?;
    let final_cost = if metric == Metric::Volume { hard_volume } else { hard_flops };
    let out = PruneOutcome {
        net,
        pruned,
        report,
        log,
        budget,
        metric,
        final_cost,
        hard_volume,
        hard_flops,
        eval_acc,
        extra_epochs,
    };
    Ok(out)
}

// ---- baselines --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    WeightMagnitude,
}

/// Number of channels kept at width factor `factor`.
pub fn uniform_width(channels: usize, factor: usize) -> usize {
    (channels / factor.max(1)).max(1)
}

/// Keeps `keep` of the currently open channels of one conv. WM keeps the
/// filters with the largest absolute weight sum (ties to the lower index).
pub fn select_channels(kind: BaselineKind, weight: &Tensor<f32>, open: &[bool], keep: usize, rng: &mut Rng) -> Vec<bool> {
    let mut candidates: Vec<usize> = (0..open.len()).filter(|&i| open[i]).collect();
    match kind {
        BaselineKind::Random => rng.shuffle(&mut candidates),
        BaselineKind::WeightMagnitude => {
            let per = weight.numel() / open.len();
            let mag = |i: usize| weight.data()[i * per..(i + 1) * per].iter().map(|w| w.abs() as f64).sum::<f64>();
            candidates.sort_by(|&a, &b| mag(b).total_cmp(&mag(a)).then(a.cmp(&b)));
        }
    }
    let mut out = vec![false; open.len()];
    for &i in candidates.iter().take(keep) {
        out[i] = true;
    }
    out
}

#[derive(Clone, Debug)]
pub struct BaselineStage {
    pub factor: usize,
    pub outcome: PruneOutcome,
}

/// Iterative baseline: starting from the teacher, halve every layer's
/// width, retrain, and repeat for each factor in `factors` (ascending).
pub fn baseline_prune(
    kind: BaselineKind,
    teacher: &Network,
    train: &Split,
    eval: Option<&Split>,
    cfg: &BaselineConfig,
    factors: &[usize],
    seed: u64,
) -> Result<Vec<BaselineStage>> {
    cfg.validate()?;
    train.check_spec(&teacher.spec)?;
    if factors.is_empty() || factors.windows(2).any(|w| w[0] >= w[1]) || factors[0] < 1 {
        return Err(Error::Argument(format!("baseline factors must be ascending and positive, got {factors:?}")));
    }
    let mut rng = Rng::new(seed);
    let mut select_rng = rng.fork(3);
    let mut net = teacher.clone();
    set_open_gates(&mut net);
    let full_volume = net.layout.full_volume();
    let mut lp = Loop::new(train, eval, cfg.batch_size, 0, &mut rng);
    let ce = Objective::CrossEntropy;
    let mut stages = Vec::new();
    for &factor in factors {
        for (i, c) in net.layout.convs.iter().enumerate() {
            let open = net.gates[i].alive_mask();
            let keep = uniform_width(c.cout, factor).min(open.iter().filter(|&&a| a).count());
            let kept = select_channels(kind, &net.convs[i].weight, &open, keep, &mut select_rng);
            for (a, k) in net.gates[i].log_alpha.iter_mut().zip(kept) {
                *a = if k { OPEN_LOG_ALPHA } else { CLOSED_LOG_ALPHA };
            }
        }
        let z = net.inference_gates();
        let fixed = Gates::Fixed(&z);
        lp.plain_epochs(&mut net, Phase::RetrainHi, cfg.epochs_hi, cfg.lr_hi, cfg.weight_decay, &fixed, &ce)?;
        lp.plain_epochs(&mut net, Phase::RetrainLo, cfg.epochs_lo, cfg.lr_lo, cfg.weight_decay, &fixed, &ce)?;
        let budget = full_volume / factor as f64;
        let outcome = finish(net.clone(), lp.log.clone(), budget, Metric::Volume, eval, 0)?;
        log::info!("{kind:?} at {factor}x: eval accuracy {:?}", outcome.eval_acc);
        stages.push(BaselineStage { factor, outcome });
    }
    Ok(stages)
}
