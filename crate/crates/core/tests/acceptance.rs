//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The end-to-end criteria (6, 7, 8) train on the 4-class 16x16 synthetic
//! set and take around forty minutes on one core. Set
//! `BARPRUNE_ACCEPTANCE=quick` to run only the fast criteria.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use barprune::autodiff::{BnStats, Graph, StretchParams, Var};
use barprune::budget::{
    self, bar_loss, barrier, expected_cost_loss, transition, update_budget, BudgetState, Metric, Schedule,
};
use barprune::data::{synthesize, Dataset, SyntheticConfig};
use barprune::distill::{kd_loss, LogitsCache};
use barprune::gates::{noise_logit, GateParams, HcConfig};
use barprune::gradcheck::check_gradients;
use barprune::netgraph::{build_network, cost_report, forward, hard_prune, BoundParams, GateMode, NetworkSpec, StageSpec};
use barprune::persist::{self, Checkpoint};
use barprune::report::{sweep_from_csv, sweep_to_csv, PruneReport, SweepRow};
use barprune::trainer::{
    baseline_prune, bar_train, train_teacher, BaselineConfig, BaselineKind, Phase, PruneOutcome, RunLog, Split,
    StepRecord, TeacherConfig, TeacherOutcome, TrainConfig,
};
use barprune::{Error, Result, Rng, Tensor};

const DATA_SEED: u64 = 2024;
const TEACHER_SEED: u64 = 0;
const SEEDS: [u64; 3] = [1, 2, 3];
const FACTORS: [usize; 4] = [2, 4, 8, 16];
const GRAD_TOL: f64 = 1e-4;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Suite {
    failed: Vec<usize>,
}

impl Suite {
    /// Runs one criterion; an `Err` counts as a failure.
    fn run(&mut self, id: usize, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Result<Verdict>) {
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit_s.is_none_or(|l| secs < l);
        let pass = v.pass && in_time;
        let limit = limit_s.map_or_else(String::new, |l| format!(", limit {l}s"));
        println!("criterion {id} {name}: {} [{secs:.1}s{limit}] {}", if pass { "PASS" } else { "FAIL" }, v.detail.trim_end());
        if !pass {
            self.failed.push(id);
        }
    }
}

// ---- 1: barrier ---------------------------------------------------------------

fn criterion_barrier() -> Result<Verdict> {
    let (a, b) = (1.0, 2.0);
    let mut notes = Vec::new();
    let zero_at_a = [1.5, 2.0, 10.0].iter().all(|&bb| barrier(a, a, bb).map(|f| f == 0.0).unwrap_or(false));
    if !zero_at_a {
        notes.push("f(a) != 0".to_string());
    }
    let h = 1e-7;
    let f = |v: f64| barrier(v, a, b);
    let left = (f(a)? - f(a - h)?) / h;
    let right = (f(a + h)? - f(a)?) / h;
    let slope_jump = (right - left).abs();
    if slope_jump >= 1e-6 {
        notes.push(format!("slope jump {slope_jump:e} at a"));
    }
    let hand = f(1.5)?;
    if hand != 0.5 {
        notes.push(format!("f(1.5; 1, 2) = {hand}"));
    }
    let grid: Vec<f64> = (1..=1000).map(|k| f(a + (b - a) * k as f64 / 1001.0)).collect::<Result<_>>()?;
    let increasing = grid.windows(2).all(|w| w[1] > w[0]);
    if !increasing {
        notes.push("not strictly increasing on the grid".into());
    }
    Ok(Verdict::new(notes.is_empty(), format!("slope jump {slope_jump:.1e}, f(1.5)={hand} {}", notes.join("; "))))
}

// ---- 2: schedules -------------------------------------------------------------

fn criterion_schedules() -> Result<Verdict> {
    let mut notes = Vec::new();
    let schedules = [("linear", Schedule::Linear), ("exp", Schedule::Exp { k: 5.0 }), ("sigmoid", Schedule::Sigmoid { d: 10.0 })];
    for (name, s) in schedules {
        if transition(0.0, s) != 0.0 || transition(1.0, s) != 1.0 {
            notes.push(format!("{name} endpoints {} {}", transition(0.0, s), transition(1.0, s)));
        }
        let state = BudgetState::from_fraction(39936.0, 0.25, Metric::Volume, s)?;
        let n = 10_000;
        let bs: Vec<f64> = (0..n).map(|k| update_budget(&state, k as f64 / (n - 1) as f64).b).collect();
        if !bs.windows(2).all(|w| w[1] <= w[0]) {
            notes.push(format!("{name} b(i) increases"));
        }
        if bs[0] != state.v_full || bs[n - 1] != state.budget {
            notes.push(format!("{name} b runs {}..{}", bs[0], bs[n - 1]));
        }
    }
    let mid = transition(0.5, Schedule::Sigmoid { d: 10.0 });
    if (mid - 0.5).abs() > 1e-12 {
        notes.push(format!("sigmoid T(0.5) = {mid}"));
    }
    Ok(Verdict::new(notes.is_empty(), format!("sigmoid T(0.5)-0.5 = {:.1e} {}", mid - 0.5, notes.join("; "))))
}

// ---- 3: Hard Concrete statistics ----------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// CDF derived from `s = sigmoid((logit(u) + log_alpha) / beta)` and the
/// affine stretch, independently of the library.
fn hc_cdf(x: f64, log_alpha: f64) -> f64 {
    let (beta, gamma, zeta) = (2.0 / 3.0, -0.1, 1.1);
    if x >= 1.0 {
        return 1.0;
    }
    let s = (x.max(0.0) - gamma) / (zeta - gamma);
    sigmoid(beta * (s / (1.0 - s)).ln() - log_alpha)
}

fn criterion_hard_concrete() -> Result<Verdict> {
    let hc = HcConfig::new(2.0 / 3.0, -0.1, 1.1)?;
    let mut rng = Rng::new(31);
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n).map(|_| hc.icdf(noise_logit(rng.uniform()), 0.0)).collect();
    xs.sort_by(f64::total_cmp);
    let p0 = hc_cdf(0.0, 0.0);
    let zeros = xs.iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
    let mut ks = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        if x > 0.0 && x < 1.0 {
            let f = hc_cdf(x, 0.0);
            ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
        }
    }
    let pass = ks < 0.01 && (zeros - p0).abs() <= 0.01;
    Ok(Verdict::new(pass, format!("KS {ks:.4}, P(z=0) {zeros:.4} vs analytic {p0:.4}")))
}

// ---- 4: gradients -------------------------------------------------------------

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("consistent shape")
}

/// Scalar `sum(y * w)` with `w` drawn from a fixed seed, so every re-run of
/// a checked closure sees the same projection.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = randn(&shape, &mut Rng::new(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn op_checks(case: u64, rng: &mut Rng) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let n = 1 + rng.below(2);
    let c = 1 + rng.below(3);
    let s = 3 + rng.below(3);
    let x = randn(&[n, c, s, s], rng);
    let y = randn(&[n, c, s, s], rng);
    let mut check = |name: &'static str, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        let r = check_gradients(inputs, |g, v| {
            let o = f(g, v)?;
            project(g, o, case)
        })?;
        out.push((name, r.max_rel_err));
        Ok(())
    };

    let k = [1, 3][rng.below(2)];
    let (stride, pad) = (1 + rng.below(2), rng.below(2).min(k / 2));
    let w = randn(&[1 + rng.below(3), c, k, k], rng);
    check("conv2d", &[x.clone(), w], &|g, v| g.conv2d(v[0], v[1], stride, pad))?;
    let (gamma, beta) = (randn(&[c], rng), randn(&[c], rng));
    let frozen = BnStats { mean: (0..c).map(|_| 0.3 * rng.normal()).collect(), var: (0..c).map(|_| rng.uniform_range(0.5, 2.0)).collect() };
    for (name, training) in [("batchnorm2d/train", true), ("batchnorm2d/eval", false)] {
        let stats = frozen.clone();
        check(name, &[x.clone(), gamma.clone(), beta.clone()], &move |g, v| {
            let mut st = stats.clone();
            g.batchnorm2d(v[0], v[1], v[2], &mut st, training)
        })?;
    }
    check("relu", &[x.clone()], &|g, v| Ok(g.relu(v[0])))?;
    check("add", &[x.clone(), y.clone()], &|g, v| g.add(v[0], v[1]))?;
    check("mul", &[x.clone(), y.clone()], &|g, v| g.mul(v[0], v[1]))?;
    let factor = rng.normal();
    check("scale", &[x.clone()], &move |g, v| Ok(g.scale(v[0], factor)))?;
    check("add_scalar", &[x.clone()], &move |g, v| {
        let a = g.add_scalar(v[0], factor);
        g.mul(a, a)
    })?;
    check("sigmoid", &[x.clone()], &|g, v| Ok(g.sigmoid(v[0])))?;
    check("sum", &[x.clone()], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    })?;
    check("mean", &[x.clone()], &|g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.mean(sq))
    })?;
    check("concat_channels", &[x.clone(), y.clone()], &|g, v| g.concat_channels(&[v[0], v[1]]))?;
    check("channel_mul", &[x.clone(), randn(&[c], rng)], &|g, v| g.channel_mul(v[0], v[1]))?;
    check("global_avg_pool", &[x.clone()], &|g, v| g.global_avg_pool(v[0]))?;
    let (fin, fout) = (2 + rng.below(4), 2 + rng.below(3));
    check("linear", &[randn(&[n, fin], rng), randn(&[fout, fin], rng), randn(&[fout], rng)], &|g, v| g.linear(v[0], v[1], v[2]))?;
    let labels: Vec<usize> = (0..n).map(|_| rng.below(fout)).collect();
    let logits = randn(&[n, fout], rng);
    check("cross_entropy_logits", &[logits.clone()], &move |g, v| g.cross_entropy_logits(v[0], &labels))?;
    let targets: Vec<f64> = {
        let raw: Vec<f64> = (0..n * fout).map(|_| rng.normal().exp()).collect();
        raw.chunks(fout).flat_map(|r| {
            let t: f64 = r.iter().sum();
            r.iter().map(move |v| v / t).collect::<Vec<_>>()
        }).collect()
    };
    let temp = rng.uniform_range(1.0, 5.0);
    check("soft_cross_entropy", &[logits], &move |g, v| g.soft_cross_entropy(v[0], &targets, temp))?;
    let hcp = StretchParams { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 };
    let m = 2 + rng.below(6);
    let noise: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    check("hard_concrete", &[randn(&[m], rng)], &move |g, v| g.hard_concrete(v[0], &noise, hcp))?;
    Ok(out)
}

fn tiny_spec(rng: &mut Rng) -> NetworkSpec {
    let stages = (0..1 + rng.below(2))
        .map(|s| StageSpec { blocks: 1 + rng.below(2), width: 2 + rng.below(2), stride: 1 + s })
        .collect();
    NetworkSpec { input_channels: 1 + rng.below(2), input_size: 4, stem_width: 2 + rng.below(2), kernel: 3, stages, num_classes: 3 }
}

/// `KD + lambda * f * L_S` through a sampled-gate training forward.
fn composite_check(rng: &mut Rng, metric: Metric) -> Result<f64> {
    let spec = tiny_spec(rng);
    let mut net = build_network(&spec, rng)?;
    for phi in net.gates.iter_mut() {
        phi.log_alpha.iter_mut().for_each(|v| *v = rng.uniform_range(-0.5, 0.5) as f32);
    }
    let noise: Vec<Vec<f64>> =
        net.gates.iter().map(|p| (0..p.len()).map(|_| noise_logit(rng.uniform_range(0.3, 0.7))).collect()).collect();
    let n = 3;
    let x: Vec<f64> = (0..n * net.input_len()).map(|_| rng.normal()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
    let teacher: Vec<f32> = (0..n * 3).map(|_| rng.normal() as f32).collect();
    let costs = net.layout.costs();
    let coef = rng.uniform_range(0.1, 3.0);
    let lambda = 1e-2 / budget::full_cost(&costs, metric) * 100.0;
    let gates: Vec<GateParams> = net.gates.clone();
    let r = check_gradients(&net.flat_tensors::<f64>(), |g, v| {
        let p = BoundParams::from_flat(net.convs.len(), v)?;
        let xt = g.constant(Tensor::new(vec![n, spec.input_channels, 4, 4], x.clone())?);
        let mut bn: Vec<BnStats<f64>> = net.layout.convs.iter().map(|c| BnStats::new(c.cout)).collect();
        let f = forward(g, &net.layout, &gates, &p, &mut bn, xt, GateMode::Sampled(&noise), true)?;
        let kd = kd_loss(g, f.logits, &labels, &teacher, 0.9, 4.0)?;
        let ls = expected_cost_loss(g, &p.log_alpha, &gates, &costs, metric)?;
        let bar = bar_loss(g, ls, coef);
        let bar = g.scale(bar, lambda);
        g.add(kd.total, bar)
    })?;
    Ok(r.max_rel_err)
}

fn criterion_gradients() -> Result<Verdict> {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut note = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(err),
        None => worst.push((name, err)),
    };
    let mut rng = Rng::new(404);
    for case in 0..20 {
        for (name, err) in op_checks(case, &mut rng)? {
            note(name, err);
        }
        note("composite/volume", composite_check(&mut rng, Metric::Volume)?);
        note("composite/flops", composite_check(&mut rng, Metric::Flops)?);
    }
    let failing: Vec<String> = worst.iter().filter(|w| !(w.1 < GRAD_TOL)).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(Verdict::new(
        failing.is_empty(),
        format!("{} checks x 20 configs, max rel err {max:.1e} {}", worst.len(), failing.join(", ")),
    ))
}

// ---- 5: mixed connectivity ----------------------------------------------------

fn criterion_mixed_connectivity() -> Result<Verdict> {
    let spec = NetworkSpec::default();
    let x = common::random_images(&spec, 8, &mut Rng::new(55));
    let (mut max_dev, mut dropped, mut clamped, mut regular_ok) = (0.0f64, 0, 0, true);
    for case in 0..100 {
        let net = common::random_network(&spec, 5000 + case)?;
        clamped += common::clamped_residuals(&net);
        let g = hard_prune(&net)?;
        dropped += net.layout.blocks.len() - g.blocks.len()
            + g.blocks.iter().filter(|b| b.delta.is_empty()).count();
        max_dev = max_dev.max(common::pruned_deviation(&net, &x)?);
        let r = cost_report(&g);
        regular_ok &= r.regular_block_volume >= r.volume && r.regular_block_flops >= r.flops;
    }
    let pass = max_dev < 1e-5 && regular_ok && dropped > 0 && clamped > 0;
    Ok(Verdict::new(
        pass,
        format!("100 configs, max |dev| {max_dev:.2e}, {dropped} dead delta branches, {clamped} clamped pooling residuals, regular >= mixed: {regular_ok}"),
    ))
}

// ---- 9: persistence -----------------------------------------------------------

fn expect_integrity<T>(r: Result<T>) -> bool {
    matches!(r, Err(Error::Integrity { .. }))
}

fn flips_detected(bytes: &[u8], rng: &mut Rng, parse: impl Fn(&[u8]) -> bool) -> bool {
    (0..64).all(|_| {
        let mut b = bytes.to_vec();
        let i = rng.below(b.len());
        b[i] ^= 1 << rng.below(8);
        parse(&b)
    }) && (1..bytes.len()).step_by(bytes.len() / 16 + 1).all(|cut| parse(&bytes[..cut]))
}

fn criterion_persistence() -> Result<Verdict> {
    let p = Path::new("mem");
    let mut notes = Vec::new();
    let mut rng = Rng::new(99);

    let ds = synthesize(&SyntheticConfig { samples: 40, size: 8, ..SyntheticConfig::default() }, &mut rng)?;
    let (ib, lb) = (ds.images_bytes(), ds.labels_bytes());
    let back = Dataset::from_bytes(&ib, &lb, p, p)?;
    if back.images_bytes() != ib || back.labels_bytes() != lb {
        notes.push("dataset bytes differ".to_string());
    }
    let mut bad = ib.clone();
    bad[3] ^= 0x04;
    let ds_corrupt = expect_integrity(Dataset::from_bytes(&bad, &lb, p, p))
        && expect_integrity(Dataset::from_bytes(&ib[..ib.len() - 1], &lb, p, p))
        && expect_integrity(Dataset::from_bytes(&ib, &lb[..lb.len() - 2], p, p));

    let net = common::random_network(&NetworkSpec::default(), 77)?;
    let dense = persist::network_to_checkpoint(&net).to_bytes();
    let dense_back = persist::network_to_checkpoint(&persist::network_from_checkpoint(&Checkpoint::from_bytes(&dense, p)?)?).to_bytes();
    let pruned = persist::pruned_to_checkpoint(&hard_prune(&net)?).to_bytes();
    let pruned_back = persist::pruned_to_checkpoint(&persist::pruned_from_checkpoint(&Checkpoint::from_bytes(&pruned, p)?)?).to_bytes();
    if dense_back != dense || pruned_back != pruned {
        notes.push("checkpoint bytes differ".into());
    }

    let cache = LogitsCache::new(7, 4, (0..28).map(|_| rng.normal() as f32).collect())?;
    let cb = persist::cache_to_bytes(&cache);
    if persist::cache_to_bytes(&persist::cache_from_bytes(&cb, p)?) != cb {
        notes.push("cache bytes differ".into());
    }

    let log = RunLog {
        steps: vec![
            StepRecord {
                phase: Phase::Prune,
                step: 1,
                epoch: 0,
                b: Some(39936.0),
                volume: 39936.0,
                flops: 1.0e7 / 3.0,
                loss_d: 1.0 / 3.0,
                loss_hard: 1.386_294_361_119_890_6,
                loss_soft: Some(1e-300),
                sparsity: Some(2.0f64.sqrt()),
                barrier: Some(30.0),
                loss_bar: Some(0.1 + 0.2),
                loss_total: f64::MIN_POSITIVE,
                eval_acc: None,
            },
            StepRecord {
                phase: Phase::FinetuneLo,
                step: 2,
                epoch: 1,
                b: None,
                volume: 2496.0,
                flops: 0.0,
                loss_d: -0.0,
                loss_hard: 7.0,
                loss_soft: None,
                sparsity: None,
                barrier: None,
                loss_bar: None,
                loss_total: 7.0,
                eval_acc: Some(0.912),
            },
        ],
        violations: 1,
    };
    let csv = log.to_csv();
    if RunLog::from_csv(&csv, p)?.to_csv() != csv {
        notes.push("run CSV differs".into());
    }
    let g = hard_prune(&net)?;
    let report = PruneReport {
        method: "bar".into(),
        metric: Metric::Volume,
        budget_fraction: 0.25,
        budget: 9984.0,
        costs: cost_report(&g),
        eval_accuracy: Some(2.0 / 3.0),
        violations: 12,
        extra_epochs: 1,
    };
    let text = report.to_text();
    if PruneReport::from_text(&text, p)?.to_text() != text {
        notes.push("report text differs".into());
    }
    let rows = vec![SweepRow {
        method: "wm".into(),
        factor: 8,
        budget: 4992.0,
        status: "ok".into(),
        volume: Some(4900.0),
        volume_factor: Some(39936.0 / 4900.0),
        flop_factor: Some(1.0 / 0.07),
        accuracy: None,
    }];
    let sweep = sweep_to_csv(&rows);
    if sweep_to_csv(&sweep_from_csv(&sweep, p)?) != sweep {
        notes.push("sweep CSV differs".into());
    }

    let ck_corrupt = flips_detected(&dense, &mut rng, |b| expect_integrity(Checkpoint::from_bytes(b, p)))
        && flips_detected(&pruned, &mut rng, |b| expect_integrity(Checkpoint::from_bytes(b, p)))
        && flips_detected(&cb, &mut rng, |b| expect_integrity(persist::cache_from_bytes(b, p)));
    if !ck_corrupt || !ds_corrupt {
        notes.push(format!("corruption undetected (checkpoint/cache {ck_corrupt}, dataset {ds_corrupt})"));
    }
    Ok(Verdict::new(
        notes.is_empty(),
        format!("dataset, dense and pruned checkpoints, cache, run CSV, report, sweep CSV; 64 bit flips + truncations per binary {}", notes.join("; ")),
    ))
}

// ---- 6, 7, 8: end to end ------------------------------------------------------

struct Run {
    seed: u64,
    factor: usize,
    outcome: PruneOutcome,
    secs: f64,
}

struct Desk {
    train: Split,
    eval: Split,
    teacher: TeacherOutcome,
    teacher_secs: f64,
}

fn desk() -> Result<Desk> {
    let mut rng = Rng::new(DATA_SEED);
    let cfg = SyntheticConfig::default();
    let train = synthesize(&cfg, &mut rng.fork(1))?;
    let eval = synthesize(&SyntheticConfig { samples: 500, ..cfg }, &mut rng.fork(2))?;
    let (train, eval) = (Split::new(&train), Split::new(&eval));
    let start = Instant::now();
    let teacher = train_teacher(&NetworkSpec::default(), &train, Some(&eval), &TeacherConfig::default(), TEACHER_SEED)?;
    Ok(Desk { train, eval, teacher, teacher_secs: start.elapsed().as_secs_f64() })
}

impl Desk {
    fn bar(&self, seed: u64, factor: f64, tweak: impl FnOnce(&mut TrainConfig)) -> Result<(PruneOutcome, f64)> {
        let mut cfg = TrainConfig { eval_every: 100, ..TrainConfig::default() };
        cfg.budget.fraction = 1.0 / factor;
        tweak(&mut cfg);
        let start = Instant::now();
        let t = &self.teacher;
        let o = bar_train(&NetworkSpec::default(), &self.train, Some(&self.eval), &t.cache, Some(&t.net), &cfg, seed)?;
        Ok((o, start.elapsed().as_secs_f64()))
    }
}

fn acc(o: &PruneOutcome) -> f64 {
    o.eval_acc.expect("eval split given")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_budget(desk: &Desk, runs: &mut Vec<Run>) -> Result<Verdict> {
    let start = Instant::now();
    for seed in SEEDS {
        for factor in FACTORS {
            let (outcome, secs) = desk.bar(seed, factor as f64, |_| {})?;
            let r = &outcome.report;
            println!(
                "  bar seed {seed} {factor:>2}x: volume {} / budget {} ({}), volume factor {:.2}, flop factor {:.2}, acc {:.3}, {secs:.0}s",
                r.volume,
                outcome.budget,
                if outcome.within_budget() { "ok" } else { "OVER" },
                r.volume_factor,
                r.flop_factor,
                acc(&outcome)
            );
            runs.push(Run { seed, factor, outcome, secs });
        }
    }
    let total = start.elapsed().as_secs_f64();
    let ok = runs.iter().filter(|r| r.outcome.hard_volume <= r.outcome.budget).count();
    let pass = ok == runs.len() && total < 1800.0;
    Ok(Verdict::new(
        pass,
        format!("{ok}/{} runs within budget, runs took {:.1} min (teacher {:.0}s extra)", runs.len(), total / 60.0, desk.teacher_secs),
    ))
}

fn criterion_costs(desk: &Desk, runs: &[Run]) -> Result<Verdict> {
    let mut exact = 0;
    for r in runs {
        let recomputed = cost_report(&hard_prune(&r.outcome.net)?);
        if r.outcome.hard_volume == recomputed.volume && recomputed.volume == r.outcome.report.volume {
            exact += 1;
        }
        debug_assert!(r.outcome.report.flop_factor.is_finite());
    }
    let factors: Vec<String> = runs.iter().map(|r| format!("{}x/s{}:{:.2}", r.factor, r.seed, r.outcome.report.flop_factor)).collect();
    let (whole, _) = desk.bar(SEEDS[0], 1.0 / 0.999, |_| {})?;
    let vf = whole.report.volume_factor;
    let pass = exact == runs.len() && (vf - 1.0).abs() <= 0.01 && whole.within_budget();
    Ok(Verdict::new(
        pass,
        format!("hard volume exact on {exact}/{} runs; 0.999 budget gives volume factor {vf:.4}; flop factors {}", runs.len(), factors.join(" ")),
    ))
}

fn criterion_directional(desk: &Desk, runs: &[Run]) -> Result<Verdict> {
    let bar_at = |factor: usize| mean(runs.iter().filter(|r| r.factor == factor).map(|r| acc(&r.outcome)));
    let teacher_acc = desk.teacher.eval_acc.expect("eval split given");

    let (mut random4, mut random8, mut no_kd, mut linear) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let base_cfg = BaselineConfig::default();
    for seed in SEEDS {
        let t = &desk.teacher;
        let stages = baseline_prune(BaselineKind::Random, &t.net, &desk.train, Some(&desk.eval), &base_cfg, &[2, 4, 8], seed)?;
        for s in &stages {
            match s.factor {
                4 => random4.push(acc(&s.outcome)),
                8 => random8.push(acc(&s.outcome)),
                _ => {}
            }
        }
        no_kd.push(acc(&desk.bar(seed, 2.0, |c| c.loss.kd_alpha = 0.0)?.0));
        linear.push(acc(&desk.bar(seed, 16.0, |c| c.budget.schedule = Schedule::Linear)?.0));
        println!(
            "  seed {seed}: random 4x {:.3}, random 8x {:.3}, bar 2x without kd {:.3}, bar 16x linear {:.3}",
            random4.last().unwrap(),
            random8.last().unwrap(),
            no_kd.last().unwrap(),
            linear.last().unwrap()
        );
    }
    let claims = [
        ("bar 4x vs random 4x", bar_at(4), mean(random4)),
        ("bar 8x vs random 8x", bar_at(8), mean(random8)),
        ("bar 2x kd vs without kd", bar_at(2), mean(no_kd)),
        ("bar 16x sigmoid vs linear", bar_at(16), mean(linear)),
    ];
    let wins = claims.iter().filter(|c| c.1 > c.2).count();
    let gap = teacher_acc - bar_at(2);
    let pass = gap <= 0.05 && wins >= 3;
    let lines: Vec<String> = claims
        .iter()
        .map(|(n, a, b)| format!("{n}: {a:.3} vs {b:.3} ({})", if a > b { "win" } else { "loss" }))
        .collect();
    Ok(Verdict::new(
        pass,
        format!("teacher {teacher_acc:.3}, bar 2x {:.3} (gap {gap:.3}); {wins}/4 wins; {}", bar_at(2), lines.join("; ")),
    ))
}

fn main() -> ExitCode {
    let quick = std::env::var("BARPRUNE_ACCEPTANCE").is_ok_and(|v| v == "quick");
    let mut suite = Suite { failed: Vec::new() };
    suite.run(1, "barrier correctness", Some(1.0), criterion_barrier);
    suite.run(2, "schedule correctness", Some(1.0), criterion_schedules);
    suite.run(3, "hard concrete statistics", Some(5.0), criterion_hard_concrete);
    suite.run(4, "gradient suite", Some(120.0), criterion_gradients);
    suite.run(5, "mixed-connectivity equivalence", Some(120.0), criterion_mixed_connectivity);
    if quick {
        for (id, name) in [(6, "budget enforcement"), (7, "directional accuracy"), (8, "cost accounting")] {
            println!("criterion {id} {name}: SKIP (BARPRUNE_ACCEPTANCE=quick)");
        }
    } else {
        match desk() {
            Ok(d) => {
                println!(
                    "  teacher: train acc {:.3}, eval acc {:.3}, {:.0}s",
                    d.teacher.train_acc,
                    d.teacher.eval_acc.unwrap_or(f64::NAN),
                    d.teacher_secs
                );
                let mut runs = Vec::new();
                suite.run(6, "budget enforcement", None, || criterion_budget(&d, &mut runs));
                let runs_ok = runs.len() == SEEDS.len() * FACTORS.len();
                suite.run(8, "cost accounting", None, || {
                    if !runs_ok {
                        return Ok(Verdict::new(false, "criterion 6 runs incomplete"));
                    }
                    criterion_costs(&d, &runs)
                });
                suite.run(7, "directional accuracy", None, || {
                    if !runs_ok {
                        return Ok(Verdict::new(false, "criterion 6 runs incomplete"));
                    }
                    criterion_directional(&d, &runs)
                });
                let _ = runs.iter().map(|r| r.secs).sum::<f64>();
            }
            Err(e) => {
                for (id, name) in [(6, "budget enforcement"), (7, "directional accuracy"), (8, "cost accounting")] {
                    suite.run(id, name, None, || Err(Error::Argument(format!("teacher training failed: {e}"))));
                }
            }
        }
    }
    suite.run(9, "persistence", None, criterion_persistence);
    if suite.failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {:?}", suite.failed);
        ExitCode::FAILURE
    }
}
