//! Prints one PASS/FAIL line per acceptance criterion.
//!
//! The process exits 0 regardless so the workspace suite stays green while a
//! criterion is red; set `ERA_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use era_cli::checkpoint::{save_era, Checkpoint};
use era_cli::config::RawConfig;
use era_cli::experiment::{ablate, prepare, run_ce, student, Suite};
use era_core::distill::{distill, era_objective, BranchFeed, EraModel, TeacherTopology, Topology};
use era_core::gradsuite::{run_suite, CheckKind, SuiteConfig};
use era_core::inference::{predict, InferenceMode};
use era_core::losses::{cross_entropy_logits, feature_mse, kl_distillation, LossWeights, Schedule};
use era_core::nn::{Graph, Mode};
use era_core::seed;
use era_core::Tensor;
use rand::Rng;

const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_SEEDS: usize = 100;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const TELESCOPE_INSTANCES: u64 = 1000;
const TELESCOPE_TOL: f64 = 1e-10;
const DEGENERACY_BATCHES: u64 = 100;
const MODE_TOL: f64 = 1e-12;
const EFFICACY_SEEDS: u64 = 5;
const EFFICACY_BUDGET: Duration = Duration::from_secs(300);

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn uniform(seed: u64, label: &str, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut rng = seed::rng(seed, label);
    let data = (0..rows * cols)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_topology(seed: u64) -> Topology {
    let mut rng = seed::rng(seed, "acceptance.topology");
    let c_t = rng.random_range(1..8);
    Topology {
        teacher: TeacherTopology {
            input_dim: rng.random_range(1..6),
            num_classes: rng.random_range(2..5),
            widths: vec![rng.random_range(1..8), c_t],
        },
        student_widths: vec![rng.random_range(1..6)],
        branches: rng.random_range(0..6),
        blocks_per_branch: rng.random_range(1..4),
        branch_width: rng.random_range(0..5),
        branch_feed: if rng.random::<bool>() {
            BranchFeed::Parallel
        } else {
            BranchFeed::Cascaded
        },
    }
}

fn jittered(topo: Topology, seed: u64) -> EraModel {
    let mut m = EraModel::new(topo, seed).unwrap();
    m.store.jitter(seed ^ 0x5eed, 0.3);
    m
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let outcomes = run_suite(&SuiteConfig {
        seeds: GRADIENT_SEEDS,
        tol: GRADIENT_TOL,
        ..SuiteConfig::default()
    })
    .unwrap();
    let elapsed = start.elapsed();
    let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    let losses = outcomes
        .iter()
        .filter(|o| o.kind == CheckKind::Loss)
        .count();
    let layers = outcomes
        .iter()
        .filter(|o| o.kind == CheckKind::Layer)
        .count();
    let covered = [
        "logit_distillation",
        "feature_mse",
        "branch_feature_loss",
        "branch_classification_loss",
        "total_objective",
    ]
    .iter()
    .all(|n| outcomes.iter().any(|o| o.name == *n));
    Verdict {
        name: "gradient suite",
        pass: failed.is_empty() && covered && elapsed < GRADIENT_BUDGET,
        detail: format!(
            "{} checks ({losses} losses, {layers} layers) x {GRADIENT_SEEDS} seeds, max rel error {worst:.2e}, {:.1}s, failed {failed:?}",
            outcomes.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn telescoping() -> Verdict {
    let mut worst = 0.0f64;
    let mut exact = true;
    for i in 0..TELESCOPE_INSTANCES {
        let topo = random_topology(i);
        let k = topo.branches;
        let input = topo.teacher.input_dim;
        let mut model = jittered(topo, i);
        let x = uniform(i, "telescope.x", 2 + (i % 5) as usize, input, 2.0);
        let net = model.net.clone();
        let mut g = Graph::new(&mut model.store);
        let xv = g.input(x).unwrap();
        let st = net
            .cascade_forward(&mut g, xv, Mode::Train, true)
            .unwrap()
            .snapshot(&g.tape);
        let mut fold = st.projected[0].clone();
        let mut recursive = st.f_t.clone();
        for j in 1..=k {
            for (f, p) in fold.data_mut().iter_mut().zip(st.projected[j].data()) {
                *f += p;
            }
            let mut direct = st.f_t.clone();
            for (d, a) in direct
                .data_mut()
                .iter_mut()
                .zip(st.approximations[j - 1].data())
            {
                *d -= a;
            }
            // Each target is the previous one minus what its branch explained.
            for (r, p) in recursive
                .data_mut()
                .iter_mut()
                .zip(st.projected[j - 1].data())
            {
                *r -= p;
            }
            worst = worst
                .max(direct.max_abs_diff(&recursive))
                .max(direct.max_abs_diff(&st.targets[j]));
        }
        exact &= fold.bit_eq(&st.approximations[k]) && st.targets[0].bit_eq(&st.f_t);
    }
    Verdict {
        name: "telescoping oracle",
        pass: exact && worst <= TELESCOPE_TOL,
        detail: format!(
            "{TELESCOPE_INSTANCES} instances, max |direct - recursive| {worst:.2e}, f_K equals the projection sum bit for bit: {exact}"
        ),
    }
}

fn degeneracy() -> Verdict {
    let mut mismatches = 0;
    for b in 0..DEGENERACY_BATCHES {
        let mut topo = random_topology(b + 50_000);
        topo.branches = 0;
        let (input, classes) = (topo.teacher.input_dim, topo.teacher.num_classes);
        let mut model = jittered(topo, b);
        let w = LossWeights {
            branches: 0,
            ..LossWeights::default()
        };
        let rows = 2 + (b % 7) as usize;
        let x = uniform(b, "degeneracy.x", rows, input, 3.0);
        let y: Vec<usize> = (0..rows).map(|i| (i * 7 + b as usize) % classes).collect();
        let net = model.net.clone();
        let mut g = Graph::new(&mut model.store);
        let xv = g.input(x).unwrap();
        let o = era_objective(&mut g, &net, xv, &y, &w, Mode::Train, true, 0.0).unwrap();
        let gs = net.head_s.forward(&mut g, o.state.f_s).unwrap();
        let gt = net.head_t.forward(&mut g, o.state.f_t).unwrap();
        let p0 = net.projections[0].forward(&mut g, o.state.f_s).unwrap();
        let t = &mut g.tape;
        let ce = cross_entropy_logits(t, gs, &y).unwrap();
        let kl = kl_distillation(t, gt, gs, w.temperature).unwrap();
        let fd = feature_mse(t, o.state.f_t, p0).unwrap();
        let want = w.alpha * t.value(ce).item()
            + w.beta * t.value(kl).item()
            + w.gamma * t.value(fd).item();
        if g.value(o.total).item().to_bits() != want.to_bits() {
            mismatches += 1;
        }
    }
    Verdict {
        name: "degeneracy oracle",
        pass: mismatches == 0,
        detail: format!("K = 0 objective vs composed CE + T^2 KL + MSE on {DEGENERACY_BATCHES} batches, {mismatches} bit mismatches"),
    }
}

fn zero_init() -> Verdict {
    let mut failures = 0;
    let n = 200;
    for i in 0..n {
        let topo = random_topology(i + 90_000);
        let (k, input) = (topo.branches, topo.teacher.input_dim);
        let mut model = EraModel::new(topo, i).unwrap();
        let x = uniform(i, "zero.x", 4, input, 2.0);
        let direct = {
            let net = &model.net;
            let mut g = Graph::read_only(&model.store);
            let xv = g.input(x.clone()).unwrap();
            let f_s = net.student.forward(&mut g, xv, Mode::Eval).unwrap();
            let p0 = net.projections[0].forward(&mut g, f_s).unwrap();
            let logits = net.head_t.forward(&mut g, p0).unwrap();
            let p = g.tape.softmax(logits, 1.0).unwrap();
            g.value(p).clone()
        };
        let t0 = predict(&model, &x, 0).unwrap().p_t;
        let net = model.net.clone();
        let mut g = Graph::new(&mut model.store);
        let xv = g.input(x).unwrap();
        let st = net
            .cascade_forward(&mut g, xv, Mode::Train, true)
            .unwrap()
            .snapshot(&g.tape);
        let flat = (0..=k).all(|j| st.approximations[j].bit_eq(&st.projected[0]));
        if !flat || !t0.bit_eq(&direct) {
            failures += 1;
        }
    }
    Verdict {
        name: "zero-init contract",
        pass: failures == 0,
        detail: format!(
            "{n} fresh models, {failures} where an approximation left P_0 f_s or T(j=0) differed"
        ),
    }
}

fn mode_identities() -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..200u64 {
        let topo = random_topology(i + 120_000);
        let (k, input) = (topo.branches, topo.teacher.input_dim);
        let model = jittered(topo, i);
        let x = uniform(i, "modes.x", 6, input, 10f64.powi((i % 4) as i32));
        for j in 0..=k {
            let p = predict(&model, &x, j).unwrap();
            worst = worst
                .max(
                    p.select(InferenceMode::ST, 1.0)
                        .max_abs_diff(&p.select(InferenceMode::S, 0.3)),
                )
                .max(
                    p.select(InferenceMode::ST, 0.0)
                        .max_abs_diff(&p.select(InferenceMode::T, 0.3)),
                );
        }
    }
    Verdict {
        name: "mode identities",
        pass: worst <= MODE_TOL,
        detail: format!("200 models, every truncation, max |ST(1)-S|, |ST(0)-T| = {worst:.2e}"),
    }
}

struct EfficacyRun {
    era_s: f64,
    era_t: f64,
    ce_s: f64,
    initial_error: f64,
    final_error: f64,
    teacher_frozen: bool,
    model: EraModel,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn efficacy_runs() -> (Vec<EfficacyRun>, Duration) {
    let s = RawConfig::default().resolve().unwrap();
    let start = Instant::now();
    let mut runs = Vec::new();
    for offset in 0..EFFICACY_SEEDS {
        let p = prepare(&s, offset).unwrap();
        let ce = run_ce(&p, &s).unwrap();
        let cfg = s.train_config(offset);
        let mut model = student(&p, s.topology(), &cfg).unwrap();
        let ids = model.teacher_param_ids();
        let before: Vec<Tensor> = ids
            .iter()
            .map(|&id| model.store.value(id).clone())
            .collect();
        let log = distill(&mut model, &p.train, &p.test, &cfg).unwrap();
        let teacher_frozen = ids
            .iter()
            .zip(&before)
            .all(|(&id, t)| model.store.value(id).bit_eq(t));
        let last = log.last().unwrap();
        runs.push(EfficacyRun {
            era_s: last.acc_s,
            era_t: last.acc_t,
            ce_s: ce.last().unwrap().acc_s,
            initial_error: log[0].approx_error,
            final_error: last.approx_error,
            teacher_frozen,
            model,
        });
    }
    (runs, start.elapsed())
}

fn freeze(runs: &[EfficacyRun]) -> Verdict {
    let frozen = runs.iter().filter(|r| r.teacher_frozen).count();
    Verdict {
        name: "freeze contract",
        pass: frozen == runs.len(),
        detail: format!(
            "teacher parameters bit-identical after {frozen}/{} full reference runs",
            runs.len()
        ),
    }
}

fn efficacy(runs: &[EfficacyRun], elapsed: Duration) -> Verdict {
    let era = median(runs.iter().map(|r| r.era_s).collect());
    let ce = median(runs.iter().map(|r| r.ce_s).collect());
    let t_ge_s = runs.iter().filter(|r| r.era_t >= r.era_s).count();
    let shrank = runs
        .iter()
        .filter(|r| r.final_error < r.initial_error)
        .count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "S {:.3} T {:.3} CE {:.3} err {:.2}->{:.2}",
                r.era_s, r.era_t, r.ce_s, r.initial_error, r.final_error
            )
        })
        .collect();
    Verdict {
        name: "distillation efficacy",
        pass: era >= ce && t_ge_s >= 4 && shrank == runs.len() && elapsed < EFFICACY_BUDGET,
        detail: format!(
            "median S {era:.4} vs CE {ce:.4}, T >= S in {t_ge_s}/{n}, approx error shrank in {shrank}/{n}, {:.1}s [{}]",
            elapsed.as_secs_f64(),
            per_seed.join("; "),
            n = runs.len()
        ),
    }
}

fn schedule_ablation() -> Verdict {
    let s = RawConfig::default().resolve().unwrap();
    let rows = ablate(&s, Suite::Schedule, |_| {}).unwrap();
    // Teacher-path accuracy; a diverged run scores below any finished one.
    let acc = |sched: Schedule, seed: u64| {
        rows.iter()
            .find(|r| r.setting == sched.as_str() && r.seed == seed)
            .and_then(|r| r.scores)
            .map_or(f64::NEG_INFINITY, |sc| sc.acc_t)
    };
    let seeds = 0..s.ablate_seeds;
    let n = s.ablate_seeds as usize;
    let count = |f: &dyn Fn(u64) -> bool| seeds.clone().filter(|&sd| f(sd)).count();
    let exp = |sd| acc(Schedule::ExpDecay, sd);
    let beats_constant = count(&|sd| exp(sd) >= acc(Schedule::Constant, sd));
    let increasing = count(&|sd| {
        [Schedule::IncreasingLinear, Schedule::IncreasingExp]
            .into_iter()
            .all(|k| acc(k, sd) < exp(sd))
    });
    let biased = count(&|sd| acc(Schedule::BiasedFirst, sd) < exp(sd));
    let aborted = rows
        .iter()
        .filter(|r| r.scores.is_none())
        .map(|r| format!("{}@{}", r.setting, r.seed))
        .collect::<Vec<_>>();
    Verdict {
        name: "schedule ablation",
        pass: beats_constant >= 4 && increasing == n && biased == n,
        detail: format!(
            "T-mode: exp_decay >= constant in {beats_constant}/{n}, increasing schedules abort or trail in {increasing}/{n}, biased_first trails in {biased}/{n}; NaN-abort: {}",
            aborted.join(" ")
        ),
    }
}

fn cli(root: &Path, run: &str, args: &[&str]) -> i32 {
    let mut full = vec!["era".to_string()];
    full.extend(args.iter().map(|a| a.to_string()));
    full.extend([
        "--output_dir".into(),
        root.display().to_string(),
        "--run_id".into(),
        run.into(),
    ]);
    era_cli::run(full)
}

fn determinism(root: &Path) -> Verdict {
    let mut codes = Vec::new();
    for run in ["first", "second"] {
        codes.push(cli(root, run, &["train-teacher"]));
        codes.push(cli(root, run, &["distill"]));
    }
    let files = [
        "teacher.ckpt",
        "teacher_metrics.jsonl",
        "era.ckpt",
        "era_metrics.jsonl",
    ];
    let differing: Vec<_> = files
        .iter()
        .filter(|f| {
            fs::read(root.join("first").join(f)).ok() != fs::read(root.join("second").join(f)).ok()
        })
        .collect();
    Verdict {
        name: "determinism",
        pass: codes.iter().all(|&c| c == 0) && differing.is_empty(),
        detail: format!(
            "two reference runs via the CLI, exit codes {codes:?}, differing files {differing:?}"
        ),
    }
}

fn checkpoint_round_trip(model: &EraModel, root: &Path) -> Verdict {
    let text = save_era(model, 100, 0).encode();
    let loaded = Checkpoint::parse(&text).unwrap().era().unwrap();
    let probe = uniform(7, "probe", 64, model.topology.teacher.input_dim, 3.0);
    let mut same = true;
    for j in 0..=model.branches() {
        let (a, b) = (
            predict(model, &probe, j).unwrap(),
            predict(&loaded, &probe, j).unwrap(),
        );
        same &= a.p_s.bit_eq(&b.p_s) && a.p_t.bit_eq(&b.p_t);
    }
    let stable = save_era(&loaded, 100, 0).encode() == text;
    let file = root.join("first").join("era.ckpt");
    let on_disk = fs::read_to_string(&file).unwrap_or_default();
    let file_stable = Checkpoint::parse(&on_disk)
        .map(|c| c.encode() == on_disk)
        .unwrap_or(false);
    Verdict {
        name: "checkpoint round-trip",
        pass: same && stable && file_stable,
        detail: format!(
            "predictions bit-equal at every truncation: {same}; save-load-save identical in memory: {stable}, on disk: {file_stable}"
        ),
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut verdicts = vec![
        gradient_suite(),
        telescoping(),
        degeneracy(),
        zero_init(),
        mode_identities(),
    ];
    let (runs, elapsed) = efficacy_runs();
    verdicts.push(freeze(&runs));
    verdicts.push(efficacy(&runs, elapsed));
    verdicts.push(schedule_ablation());
    verdicts.push(determinism(dir.path()));
    verdicts.push(checkpoint_round_trip(&runs[0].model, dir.path()));
    for v in &verdicts {
        println!(
            "{} {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    let strict = std::env::var("ERA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < verdicts.len() {
        std::process::exit(1);
    }
}
