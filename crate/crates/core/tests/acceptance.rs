//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedhe::config::{ConfigError, ExperimentConfig};
use fedhe::data::Sample;
use fedhe::nn::{
    cross_entropy, logit_loss, Activation, Mode, Model, ModelSpec, Parameters, Tensor,
};
use fedhe::orchestrator::{fedavg_aggregate, run, Experiment, RunError};
use fedhe::protocol::{
    comm_cost, reduced_rate, AverageLogits, ClassLogitAccumulator, ClassLogits, CostParams,
    LogitUpdate, Method, ServerLogitStore, StoreMode,
};
use fedhe::trainer::batch_objective;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn one_decimal(rate: f64) -> f64 {
    (rate * 1000.0).round() / 10.0
}

fn costs(classes: u64, input_dim: u64, param_count: u64, n_public: u64) -> CostParams {
    CostParams {
        class_count: classes,
        input_dim,
        param_count,
        n_public,
    }
}

fn synthetic_config(
    method: &str,
    clients: usize,
    rounds: u64,
    classes: usize,
    extra: &str,
) -> ExperimentConfig {
    let specs = [
        "hidden = [12]\ndropout = 0.2",
        "hidden = [8, 8]\nactivation = \"tanh\"",
        "hidden = [16]",
        "hidden = [6, 10]\ndropout = 0.1",
    ];
    // FedAvg needs one shared architecture; every other method mixes them.
    let spec_of = |k: usize| {
        if method == "fedavg" {
            specs[0]
        } else {
            specs[k % specs.len()]
        }
    };
    let blocks: String = (0..clients)
        .map(|k| format!("[[client]]\n{}\n\n", spec_of(k)))
        .collect();
    let text = format!(
        "method = \"{method}\"\nclients = {clients}\nseed = 11\nrounds = {rounds}\neval_every = 4.0\nbatch_size = 8\nlr = 0.01\n{extra}\n\
         [dataset]\nkind = \"synthetic\"\nclasses = {classes}\ninput_dim = 5\ntrain_per_class = 30\ntest_per_class = 10\n\n{blocks}"
    );
    ExperimentConfig::parse(&text, &[]).expect("acceptance config parses")
}

fn criterion_1() -> Outcome {
    let fedavg = 324_672;
    let he = comm_cost(Method::FedHe, &costs(10, 784, fedavg, 10));
    ensure(he == 110, || format!("FedHe cost {he} != 110"))?;
    let he_rate = reduced_rate(he, fedavg).unwrap();
    ensure(he_rate > 0.999, || {
        format!("FedHe reduction {he_rate} <= 99.9%")
    })?;
    for n in [1, 10, 50, 100] {
        let md = comm_cost(Method::FedMd, &costs(10, 784, fedavg, n));
        ensure(md == n * 794, || format!("FedMD cost {md} != {n}x794"))?;
    }
    let md_rate = one_decimal(
        reduced_rate(
            comm_cost(Method::FedMd, &costs(10, 784, fedavg, 10)),
            fedavg,
        )
        .unwrap(),
    );
    ensure(md_rate == 97.6, || {
        format!("FedMD reduction {md_rate}% != 97.6%")
    })?;
    ensure(
        comm_cost(Method::FedAvg, &costs(10, 784, fedavg, 10)) == fedavg,
        || "FedAvg cost".into(),
    )?;

    // The ledger of an actual 10-class run charges the same 110 floats per upload.
    let out = run(&synthetic_config("fedhe", 3, 9, 10, "")).map_err(|e| e.to_string())?;
    for k in 0..3 {
        let per_round =
            out.ledger.tabulated_client_total(k) as f64 / out.rounds_per_client[k] as f64;
        ensure(per_round == 110.0, || {
            format!("client {k} ledger {per_round} floats per round")
        })?;
    }
    ensure(out.ledger.tabulated_total() == 9 * 110, || {
        "cumulative ledger != rounds x 110".into()
    })?;
    Ok(format!(
        "FedHe 110 ({:.3}% reduction), FedMD n x 794 at 97.6%",
        he_rate * 100.0
    ))
}

fn criterion_2() -> Outcome {
    let fedavg = 326_976;
    for n in [1, 10, 50] {
        let md = comm_cost(Method::FedMd, &costs(10, 3072, fedavg, n));
        ensure(md == n * 3082, || format!("FedMD cost {md} != {n}x3082"))?;
    }
    let rate = one_decimal(
        reduced_rate(
            comm_cost(Method::FedMd, &costs(10, 3072, fedavg, 10)),
            fedavg,
        )
        .unwrap(),
    );
    ensure(rate == 90.6, || format!("FedMD reduction {rate}% != 90.6%"))?;
    let he = comm_cost(Method::FedHe, &costs(10, 3072, fedavg, 10));
    ensure(
        he == 110 && reduced_rate(he, fedavg).unwrap() > 0.999,
        || "FedHe CIFAR cost".into(),
    )?;
    Ok("FedMD n x 3082 at 90.6%, FedHe 110".into())
}

/// Which objective a gradient check exercises.
#[derive(Clone, Copy, Debug)]
enum Objective {
    CrossEntropy,
    LogitMatch,
    Combined,
}

fn objective_value(
    model: &Model,
    samples: &[Sample],
    targets: &AverageLogits,
    kind: Objective,
    alpha: f64,
) -> f64 {
    let refs: Vec<&Sample> = samples.iter().collect();
    match kind {
        Objective::CrossEntropy => {
            let t = model.forward(&samples[0].x, Mode::Eval).unwrap();
            cross_entropy(&t, samples[0].y).unwrap().loss
        }
        Objective::LogitMatch => {
            let t = model.forward(&samples[0].x, Mode::Eval).unwrap();
            logit_loss(t.logits(), targets.get(samples[0].y).unwrap())
                .unwrap()
                .loss
        }
        Objective::Combined => {
            let o = batch_objective(model, &refs, Some(targets), alpha, Mode::Eval).unwrap();
            o.losses.private + alpha * o.losses.logit
        }
    }
}

fn analytic(
    model: &Model,
    samples: &[Sample],
    targets: &AverageLogits,
    kind: Objective,
    alpha: f64,
) -> Parameters {
    let refs: Vec<&Sample> = samples.iter().collect();
    match kind {
        Objective::CrossEntropy => {
            let t = model.forward(&samples[0].x, Mode::Eval).unwrap();
            model
                .backward(&t, &cross_entropy(&t, samples[0].y).unwrap().grad)
                .unwrap()
        }
        Objective::LogitMatch => {
            let t = model.forward(&samples[0].x, Mode::Eval).unwrap();
            let g = logit_loss(t.logits(), targets.get(samples[0].y).unwrap())
                .unwrap()
                .grad;
            model.backward(&t, &g).unwrap()
        }
        Objective::Combined => {
            batch_objective(model, &refs, Some(targets), alpha, Mode::Eval)
                .unwrap()
                .gradients
        }
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for trial in 0..100 {
        let kind = [
            Objective::CrossEntropy,
            Objective::LogitMatch,
            Objective::Combined,
        ][trial % 3];
        let input = rng.random_range(2..6);
        let classes = rng.random_range(2..6);
        let mut widths = vec![input];
        for _ in 0..rng.random_range(1..3) {
            widths.push(rng.random_range(2..7));
        }
        widths.push(classes);
        let activation = if trial % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let spec = ModelSpec::new(widths, activation, 0.0).unwrap();
        // Fully random parameters, biases included: with zero biases a dead
        // layer pins the next pre-activation exactly on the ReLU kink.
        let mut params = Parameters::zeros_for(&spec);
        params
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let mut model = Model::from_parameters(spec, params).unwrap();
        let samples: Vec<Sample> = (0..3)
            .map(|id| Sample {
                id,
                x: Tensor::vector((0..input).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap(),
                y: rng.random_range(0..classes),
            })
            .collect();
        let per_class = (0..classes)
            .map(|c| {
                let present = c == samples[0].y || rng.random_bool(0.7);
                present.then(|| (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect())
            })
            .collect();
        let targets = AverageLogits::new(classes, per_class).unwrap();
        let alpha = rng.random_range(0.1..2.0);

        let grad: Vec<f64> = analytic(&model, &samples, &targets, kind, alpha)
            .iter()
            .copied()
            .collect();
        let base = model.parameters().clone();
        for (i, &g) in grad.iter().enumerate() {
            let mut shifted = base.clone();
            *shifted.iter_mut().nth(i).unwrap() += h;
            model.set_parameters(shifted).unwrap();
            let up = objective_value(&model, &samples, &targets, kind, alpha);
            let mut shifted = base.clone();
            *shifted.iter_mut().nth(i).unwrap() -= h;
            model.set_parameters(shifted).unwrap();
            let down = objective_value(&model, &samples, &targets, kind, alpha);
            let numeric = (up - down) / (2.0 * h);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-4);
            if rel > 1e-4 {
                return Err(format!("trial {trial} ({kind:?}, {activation:?}) param {i}: analytic {g} vs numeric {numeric}"));
            }
            worst = worst.max(rel);
            checked += 1;
        }
        model.set_parameters(base).unwrap();
    }
    Ok(format!(
        "100 triples, {checked} partials, worst relative error {worst:.2e}"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7072_6f74);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let classes = rng.random_range(1..=10);
        let clients = rng.random_range(1..=10);

        // Client side: sum / (count + 1) per class, zero when unseen.
        let n = rng.random_range(0..=100);
        let batch: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                (
                    (0..classes)
                        .map(|_| rng.random_range(-10.0..10.0))
                        .collect(),
                    rng.random_range(0..classes),
                )
            })
            .collect();
        let mut acc = ClassLogitAccumulator::new(classes);
        let split = n / 2;
        for part in [&batch[..split], &batch[split..]] {
            acc.accumulate(part.iter().map(|(l, y)| (l.as_slice(), *y)))
                .map_err(|e| e.to_string())?;
        }
        let up = acc.finalize(0).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(up.entries.len() == classes, || {
            "every class is transmitted".into()
        })?;
        for e in &up.entries {
            let rows: Vec<&Vec<f64>> = batch
                .iter()
                .filter(|(_, y)| *y == e.class)
                .map(|(l, _)| l)
                .collect();
            ensure(e.count == rows.len() as u64, || "count mismatch".into())?;
            for j in 0..classes {
                let expect = rows.iter().map(|r| r[j]).sum::<f64>() / (rows.len() as f64 + 1.0);
                let err = (e.logits[j] - expect).abs();
                worst = worst.max(err);
                ensure(err <= 1e-12, || {
                    format!("trial {trial}: accumulator off by {err}")
                })?;
                if rows.is_empty() {
                    ensure(e.logits[j] == 0.0, || "unseen class is not zero".into())?;
                }
            }
        }

        // Server side: brute-force mean over each client's latest upload.
        let uploads = rng.random_range(1..=100usize.min(3 * clients));
        let updates: Vec<LogitUpdate> = (0..uploads)
            .map(|_| LogitUpdate {
                client: rng.random_range(0..clients),
                class_count: classes,
                entries: (0..classes)
                    .filter_map(|class| {
                        if !rng.random_bool(0.8) {
                            return None;
                        }
                        Some(ClassLogits {
                            class,
                            count: 1,
                            logits: (0..classes)
                                .map(|_| rng.random_range(-10.0..10.0))
                                .collect(),
                        })
                    })
                    .collect(),
            })
            .collect();
        let mut store = ServerLogitStore::new(classes, StoreMode::Latest);
        for u in &updates {
            store.receive(u).map_err(|e| e.to_string())?;
        }
        let avg = store.average();
        for class in 0..classes {
            let latest: Vec<&Vec<f64>> = (0..clients)
                .filter_map(|k| {
                    updates
                        .iter()
                        .rev()
                        .filter(|u| u.client == k)
                        .find_map(|u| {
                            u.entries
                                .iter()
                                .find(|e| e.class == class)
                                .map(|e| &e.logits)
                        })
                })
                .collect();
            match avg.get(class) {
                None => ensure(latest.is_empty(), || {
                    format!("trial {trial}: class {class} missing")
                })?,
                Some(got) => {
                    ensure(!latest.is_empty(), || {
                        "average for a class nobody sent".into()
                    })?;
                    for j in 0..classes {
                        let expect = latest.iter().map(|r| r[j]).sum::<f64>() / latest.len() as f64;
                        let err = (got[j] - expect).abs();
                        worst = worst.max(err);
                        ensure(err <= 1e-12, || {
                            format!("trial {trial}: store off by {err}")
                        })?;
                    }
                }
            }
        }

        // Arrival order: deliver each client's final upload in reverse.
        let mut finals: Vec<&LogitUpdate> = Vec::new();
        for u in &updates {
            finals.retain(|f| f.client != u.client);
            finals.push(u);
        }
        let mut replay = ServerLogitStore::new(classes, StoreMode::Latest);
        for u in finals.iter().rev() {
            replay.receive(u).map_err(|e| e.to_string())?;
        }
        // Only classes carried by each client's final upload are comparable.
        let mut direct = ServerLogitStore::new(classes, StoreMode::Latest);
        for u in &finals {
            direct.receive(u).map_err(|e| e.to_string())?;
        }
        ensure(replay.average() == direct.average(), || {
            format!("trial {trial}: order changed the average")
        })?;
    }
    Ok(format!(
        "200 randomized instances, worst deviation {worst:.1e}"
    ))
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

fn criterion_5() -> Outcome {
    let dir = mnist_dir();
    let (images, labels) = (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    if !images.is_file() || !labels.is_file() {
        return Err(format!(
            "MNIST subset not found under {}; run scripts/fetch_mnist_subset.py",
            dir.display()
        ));
    }
    let specs = [
        "hidden = [128, 256]\ndropout = 0.2",
        "hidden = [256, 256]\ndropout = 0.3",
        "hidden = [256, 512]\ndropout = 0.4",
        "hidden = [64, 128, 256]\ndropout = 0.2",
        "hidden = [128, 128, 128]\ndropout = 0.3",
    ];
    let blocks: String = specs
        .iter()
        .map(|s| format!("[[client]]\n{s}\n\n"))
        .collect();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 1..=3u64 {
        let mut accs = [0.0; 2];
        for (i, method) in ["fedhe", "private"].iter().enumerate() {
            let text = format!(
                "method = \"{method}\"\nclients = 5\nseed = {seed}\nrounds = 300\neval_every = 20.0\n\n\
                 [dataset]\nkind = \"idx\"\nimages = {images:?}\nlabels = {labels:?}\ntest_count = 2000\n\n{blocks}"
            );
            let cfg = ExperimentConfig::parse(&text, &[]).map_err(|e| e.to_string())?;
            let out = run(&cfg).map_err(|e| e.to_string())?;
            if i == 0 && out.server_events != 300 {
                return Err(format!("FedHe ran {} server events", out.server_events));
            }
            accs[i] = out.final_row().mean_accuracy;
        }
        let [he, private] = accs;
        if he >= private {
            wins += 1;
        }
        lines.push(format!(
            "s{seed} {:.2}% vs {:.2}%",
            he * 100.0,
            private * 100.0
        ));
        if he < private - 0.01 {
            return Err(format!(
                "seed {seed}: FedHe {he:.4} more than 1pp below Private {private:.4}"
            ));
        }
    }
    let detail = format!(
        "FedHe vs Private: {}; FedHe >= Private in {wins}/3 seeds",
        lines.join(", ")
    );
    ensure(wins >= 2, || detail.clone())?;
    Ok(detail)
}

fn criterion_6() -> Outcome {
    let private = run(&synthetic_config("private", 3, 60, 4, "")).map_err(|e| e.to_string())?;
    let silent = run(&synthetic_config(
        "fedhe",
        3,
        60,
        4,
        "alpha = 0.0\nlogit_exchange = false",
    ))
    .map_err(|e| e.to_string())?;
    ensure(silent.metrics_csv() == private.metrics_csv(), || {
        "FedHe (alpha=0, no exchange) CSV differs from Private".into()
    })?;

    // With uploads still flowing, only the communication columns may differ.
    let talking =
        run(&synthetic_config("fedhe", 3, 60, 4, "alpha = 0.0")).map_err(|e| e.to_string())?;
    let strip = |csv: String| -> Vec<String> {
        csv.lines()
            .map(|l| {
                l.split(',')
                    .take(2 + 3 + 1 + 3)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect()
    };
    ensure(
        strip(talking.metrics_csv()) == strip(private.metrics_csv()),
        || "alpha=0 trajectory differs from Private".into(),
    )?;
    ensure(talking.ledger.total() > 0, || {
        "exchange produced no traffic".into()
    })?;
    Ok(format!(
        "{} metric rows byte-equal; with exchange on, accuracy/loss columns still equal",
        private.rows.len()
    ))
}

fn criterion_7() -> Outcome {
    let spec = ModelSpec::new(vec![2, 2, 1], Activation::Relu, 0.0).unwrap();
    let sizes = [1usize, 3, 4];
    let values = [
        [0.5, -1.0, 2.0, 4.0, 0.25, -0.75, 8.0, 1.5, -2.0],
        [1.0; 9],
        [-0.5, 3.0, 0.0, 2.0, -1.25, 0.75, 0.5, -4.0, 6.0],
    ];
    let params: Vec<Parameters> = values
        .iter()
        .map(|v| {
            let mut p = Parameters::zeros_for(&spec);
            p.iter_mut().zip(v).for_each(|(d, s)| *d = *s);
            p
        })
        .collect();
    let weighted: Vec<(&Parameters, usize)> = params.iter().zip(sizes).collect();
    let got: Vec<f64> = fedavg_aggregate(&weighted)
        .map_err(|e| e.to_string())?
        .iter()
        .copied()
        .collect();
    let total: usize = sizes.iter().sum();
    for i in 0..9 {
        let closed: f64 = (0..3)
            .map(|k| sizes[k] as f64 / total as f64 * values[k][i])
            .sum();
        ensure(got[i] == closed, || {
            format!("coordinate {i}: {} != {closed}", got[i])
        })?;
    }

    // Mixed specs are rejected both when the config is parsed and when an
    // already-built config is run.
    let mut mixed = synthetic_config("private", 2, 3, 3, "");
    let text = mixed
        .to_toml()
        .replace("method = \"private\"", "method = \"fedavg\"");
    match ExperimentConfig::parse(&text, &[]) {
        Err(ConfigError::Invalid { field, .. }) => {
            ensure(field == "client", || format!("rejected on field {field}"))?
        }
        other => return Err(format!("heterogeneous FedAvg config parsed: {other:?}")),
    }
    mixed.method = Method::FedAvg;
    match run(&mixed) {
        Err(e @ RunError::Config(_)) => ensure(e.to_string().contains("client"), || e.to_string())?,
        other => {
            return Err(format!(
                "heterogeneous FedAvg was not a config error: {other:?}"
            ))
        }
    }
    let mut same = mixed.clone();
    same.client_specs = vec![same.client_specs[0].clone(); 2];
    let out = Experiment::prepare(&same)
        .and_then(|x| x.run_fedavg())
        .map_err(|e| e.to_string())?;
    ensure(out.server_events == 3, || {
        "homogeneous FedAvg did not run".into()
    })?;
    Ok(
        "aggregate equals sum of (|D_k|/N) w_k exactly; mixed specs rejected as config error"
            .into(),
    )
}

fn criterion_8() -> Outcome {
    let cfg = synthetic_config("fedhe", 2, 303, 3, "speeds = [1.0, 100.0]");
    let out = run(&cfg).map_err(|e| e.to_string())?;
    let [fast, slow] = [out.rounds_per_client[0], out.rounds_per_client[1]];
    ensure(slow >= 1, || "slow client never finished".into())?;
    let ratio = fast as f64 / slow as f64;
    ensure(ratio >= 90.0, || format!("fast/slow = {fast}/{slow}"))?;
    ensure(out.server_events == 303, || {
        format!("stopped after {} events", out.server_events)
    })?;
    Ok(format!(
        "fast {fast} vs slow {slow} rounds ({ratio:.0}:1), terminated at t={}",
        out.final_time
    ))
}

fn criterion_9() -> Outcome {
    for method in ["fedhe", "private", "fedavg", "fedmd"] {
        let cfg = synthetic_config(method, 3, 12, 4, "");
        let a = run(&cfg).map_err(|e| e.to_string())?;
        let b = run(&cfg).map_err(|e| e.to_string())?;
        ensure(a.metrics_csv() == b.metrics_csv(), || {
            format!("{method} metrics differ between runs")
        })?;
        ensure(a.logits_csv() == b.logits_csv(), || {
            format!("{method} logits differ between runs")
        })?;
    }
    Ok("fedhe, private, fedavg, fedmd reruns byte-identical".into())
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("communication cost table (MNIST)", criterion_1),
        ("communication cost table (CIFAR)", criterion_2),
        ("gradient check", criterion_3),
        ("protocol oracles", criterion_4),
        ("MNIST subset: FedHe vs Private", criterion_5),
        ("alpha = 0 matches Private", criterion_6),
        ("FedAvg aggregation and homogeneity", criterion_7),
        ("straggler asynchrony", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
