//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits nonzero if any failed. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 4 5`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use coalfake::annotator::{CostLedger, CostRates, PromptMode};
use coalfake::corpus::{synth_corpus_detailed, SynthSpec};
use coalfake::domainspace::{self, membership, ClusterOptions, DomainSpace};
use coalfake::model::{gradient_check, ModelConfig};
use coalfake::pipeline::{Pipeline, RunConfig, RunState, Status};
use coalfake::sampler::{
    allocate, cluster_weights, cold_start_select, entropy_select, weights_from_sizes, Allocation, PoolItem, Strategy,
    DEFAULT_EPSILON,
};
use coalfake::util::{cosine, derive_rng};
use coalfake::verifier::{self, class_thresholds, confident_joint, estimate_q, ProbeConfig};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- 1

/// Brute-force confident learning, written independently of the library.
fn brute_cl(probs: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<f64>, Vec<Vec<u64>>, Vec<Vec<f64>>) {
    let thresholds: Vec<f64> = (0..k)
        .map(|j| {
            let own: Vec<f64> = probs.iter().zip(labels).filter(|(_, &l)| l == j).map(|(p, _)| p[j]).collect();
            own.iter().sum::<f64>() / own.len() as f64
        })
        .collect();
    let mut c = vec![vec![0u64; k]; k];
    for (p, &l) in probs.iter().zip(labels) {
        let above: Vec<usize> = (0..k).filter(|&j| p[j] >= thresholds[j]).collect();
        // Highest probability; among equals the lowest index.
        let pick = above
            .iter()
            .copied()
            .max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(b.cmp(&a)));
        if let Some(j) = pick {
            c[l][j] += 1;
        }
    }
    let counts: Vec<f64> = (0..k).map(|j| labels.iter().filter(|&&l| l == j).count() as f64).collect();
    let mut cal = vec![vec![0.0; k]; k];
    for i in 0..k {
        let row: f64 = c[i].iter().map(|&v| v as f64).sum();
        for j in 0..k {
            cal[i][j] = if row == 0.0 {
                if i == j {
                    counts[i]
                } else {
                    0.0
                }
            } else {
                c[i][j] as f64 * counts[i] / row
            };
        }
    }
    let total: f64 = cal.iter().flatten().sum();
    let q = cal.iter().map(|r| r.iter().map(|v| v / total).collect()).collect();
    (thresholds, c, q)
}

fn cl_fixture(n: usize, k: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = derive_rng(seed, "acceptance/cl", 0);
    loop {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        if (0..k).any(|j| !labels.contains(&j)) {
            continue;
        }
        // Coarse grid values so that ties and exact threshold hits occur.
        let probs = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1..=20) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        return (probs, labels);
    }
}

fn criterion_1() -> Outcome {
    let mut fixtures = vec![(
        vec![
            vec![0.9, 0.1],
            vec![0.6, 0.4],
            vec![0.3, 0.7],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
            vec![0.7, 0.3],
        ],
        vec![0, 0, 0, 1, 1, 1],
    )];
    for (i, &(n, k)) in [(10, 2), (25, 3), (50, 2), (50, 3), (37, 3), (12, 2)].iter().enumerate() {
        fixtures.push(cl_fixture(n, k, i as u64));
    }
    let mut worst_q = 0.0f64;
    for (probs, labels) in &fixtures {
        let k = probs[0].len();
        let (bt, bc, bq) = brute_cl(probs, labels, k);
        let t = class_thresholds(probs, labels, k).unwrap();
        let c = confident_joint(probs, labels, &t);
        let counts: Vec<usize> = (0..k).map(|j| labels.iter().filter(|&&l| l == j).count()).collect();
        let q = estimate_q(&c, &counts);
        if t.iter().zip(&bt).any(|(a, b)| (a - b).abs() > 1e-12) {
            return outcome(false, format!("thresholds {t:?} vs brute force {bt:?}"));
        }
        if c != bc {
            return outcome(false, format!("confident joint {c:?} vs brute force {bc:?}"));
        }
        for (a, b) in q.iter().flatten().zip(bq.iter().flatten()) {
            worst_q = worst_q.max((a - b).abs());
        }
        let sum: f64 = q.iter().flatten().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return outcome(false, format!("sum of Q-hat is {sum}"));
        }
    }
    outcome(
        worst_q <= 1e-9,
        format!("{} fixtures, counts exact, max |dQ| = {worst_q:.1e}", fixtures.len()),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let synth = synth_corpus_detailed(&SynthSpec::uniform(3, 600, 0.2, seed)).unwrap();
        let ids: Vec<&str> = synth.records.iter().map(|r| r.id.as_str()).collect();
        let texts: Vec<&str> = synth.records.iter().map(|r| r.text.as_str()).collect();
        let noisy: Vec<usize> = synth.records.iter().map(|r| r.gold_label.unwrap().index()).collect();
        let injected: Vec<&str> = synth
            .records
            .iter()
            .zip(&synth.clean_labels)
            .filter(|(r, c)| r.gold_label != Some(**c))
            .map(|(r, _)| r.id.as_str())
            .collect();
        let (report, _) = verifier::verify(&ids, &texts, &noisy, 2, &ProbeConfig::default(), 0.2, seed).unwrap();
        let hits = report.flagged.iter().filter(|id| injected.contains(&id.as_str())).count();
        let precision = hits as f64 / report.flagged.len().max(1) as f64;
        let ratio = report.flagged.len() as f64 / injected.len() as f64;
        pass &= precision >= 0.6 && (0.9..=1.1).contains(&ratio);
        details.push(format!(
            "seed {seed}: precision {precision:.3}, flagged {} vs injected {}",
            report.flagged.len(),
            injected.len()
        ));
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let config = ModelConfig::default();
    let full = gradient_check(&config, None, 7).unwrap();
    let mut worst_term = 0.0f64;
    for term in 0..6 {
        let mut w = [0.0; 6];
        w[term] = 1.0;
        worst_term = worst_term.max(gradient_check(&config, Some(w), 7).unwrap());
    }
    outcome(
        full < 1e-4 && worst_term < 1e-4,
        format!("full loss {full:.2e}, worst single term {worst_term:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

fn binary_entropy_oracle(p: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.ln() };
    h(p) + h(1.0 - p)
}

/// Repeatedly takes the best remaining item of each cluster.
fn brute_select(
    members: &[Vec<usize>],
    m: &[usize],
    ids: &[String],
    better: impl Fn(usize, usize) -> bool,
) -> Vec<String> {
    let mut out = Vec::new();
    for (j, group) in members.iter().enumerate() {
        let mut left = group.clone();
        for _ in 0..m[j] {
            let mut best = 0;
            for pos in 1..left.len() {
                let (a, b) = (left[pos], left[best]);
                if better(a, b) || (!better(b, a) && ids[a] < ids[b]) {
                    best = pos;
                }
            }
            out.push(ids[left.remove(best)].clone());
        }
    }
    out
}

fn criterion_4() -> Outcome {
    let mut rng = derive_rng(11, "acceptance/sampler", 0);
    let centers = [[4.0, 0.0, 0.5], [0.0, 4.0, 0.5], [0.0, 0.5, 4.0], [3.0, 3.0, 0.0]];
    let sizes = [200, 150, 100, 50];
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for (c, &n) in centers.iter().zip(&sizes) {
        for _ in 0..n {
            ids.push(format!("p{:04}", ids.len()));
            points.push(c.iter().map(|v| v + rng.random_range(-0.8..0.8)).collect::<Vec<f64>>());
        }
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng);
    let ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
    let points: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let opts = ClusterOptions {
        k_min: 2,
        k_max: 6,
        ..ClusterOptions::default()
    };
    let space = domainspace::fit(&ids, &points, &opts, 3).unwrap();
    let pool: Vec<PoolItem> = ids.iter().zip(&points).map(|(id, e)| PoolItem { id, embedding: e }).collect();
    let probs: BTreeMap<String, f64> = ids.iter().map(|id| (id.clone(), rng.random_range(0..=20) as f64 / 20.0)).collect();
    let mut members = vec![Vec::new(); space.k];
    for (i, id) in ids.iter().enumerate() {
        members[space.cluster_of(id, &points[i])].push(i);
    }

    for budget in [40, 120, 333] {
        let w = cluster_weights(&space, &pool, DEFAULT_EPSILON).unwrap();
        let caps: Vec<usize> = members.iter().map(Vec::len).collect();
        let alloc = allocate(budget, &w, &caps).unwrap();
        if alloc.per_cluster.iter().sum::<usize>() != budget {
            return outcome(false, format!("allocation {:?} does not sum to {budget}", alloc.per_cluster));
        }
        let dist = |i: usize, j: usize| 1.0 - cosine(&points[i], &space.centroids[j]).unwrap();
        let cluster_of = |i: usize| space.cluster_of(&ids[i], &points[i]);
        let cold = cold_start_select(&space, &pool, &alloc).unwrap();
        let oracle = brute_select(&members, &alloc.per_cluster, &ids, |a, b| {
            dist(a, cluster_of(a)) < dist(b, cluster_of(b))
        });
        if cold.selected_ids != oracle {
            return outcome(false, format!("cold start differs from brute force at budget {budget}"));
        }
        let ent = entropy_select(&space, &pool, &alloc, &probs).unwrap();
        let h = |i: usize| binary_entropy_oracle(probs[&ids[i]]);
        let oracle = brute_select(&members, &alloc.per_cluster, &ids, |a, b| h(a) > h(b));
        if ent.selected_ids != oracle {
            return outcome(false, format!("entropy selection differs from brute force at budget {budget}"));
        }
    }

    // Repair rule on random instances.
    for _ in 0..500 {
        let k = rng.random_range(1..7);
        let caps: Vec<usize> = (0..k).map(|_| rng.random_range(0..40)).collect();
        let total: usize = caps.iter().sum();
        if total == 0 {
            continue;
        }
        let budget = rng.random_range(0..=total);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let Allocation { per_cluster, .. } = allocate(budget, &w, &caps).unwrap();
        if per_cluster.iter().sum::<usize>() != budget || per_cluster.iter().zip(&caps).any(|(m, c)| m > c) {
            return outcome(false, format!("allocation {per_cluster:?} for budget {budget}, caps {caps:?}"));
        }
    }

    let w = weights_from_sizes(&[90, 10], DEFAULT_EPSILON).unwrap();
    let pass = (w[0] - 0.1).abs() < 1e-6 && (w[1] - 0.9).abs() < 1e-6;
    outcome(
        pass,
        format!(
            "k = {}, 500-point pool, selections match brute force, 500 allocations exact, sizes (90,10) -> ({:.4}, {:.4})",
            space.k, w[0], w[1]
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = derive_rng(5, "acceptance/membership", 0);
    let space = |centroids: Vec<Vec<f64>>| DomainSpace {
        k: centroids.len(),
        centroids,
        assignments: BTreeMap::new(),
        silhouette: 0.0,
    };
    let random = space((0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = membership(&x, &random).unwrap();
        worst = worst.max((m.probs.iter().sum::<f64>() - 1.0).abs());
    }
    let sym = space(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let u = membership(&[2.0, 2.0, 2.0], &sym).unwrap();
    let uniform = u.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12);
    let two = space(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let m = membership(&[3.0, 0.0], &two).unwrap();
    let worked = (m.probs[0] - 0.7311).abs() < 1e-4 && (m.probs[1] - 0.2689).abs() < 1e-4;
    outcome(
        worst <= 1e-9 && uniform && worked,
        format!(
            "max |sum - 1| = {worst:.1e}, symmetric uniform: {uniform}, k = 2 example ({:.4}, {:.4})",
            m.probs[0], m.probs[1]
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut a = CostLedger::new(CostRates::default());
    a.record_llm(1_000_000, 0);
    let mut b = CostLedger::new(CostRates::default());
    b.record_llm(1_000_000, 1_000_000);
    let mut h = CostLedger::new(CostRates::default());
    h.record_human(120);
    let (a, b, h) = (a.cost().total_usd, b.cost().total_usd, h.cost().human_usd);
    outcome(
        a == 3.0 && b == 9.0 && h == 0.33,
        format!("1M prompt ${a}, 1M+1M ${b}, 120-token item ${h}"),
    )
}

// ---------------------------------------------------------------- pipeline runs

fn finished(config: RunConfig) -> RunState {
    let p = Pipeline::new(config).unwrap();
    let mut s = p.init_state();
    p.run(&mut s, None).unwrap();
    s
}

fn f1_curve(s: &RunState) -> Vec<f64> {
    s.rounds.iter().map(|r| r.metrics.macro_f1).collect()
}

/// Runs shared by criteria 6, 7 and 10, keyed by (label, seed).
struct Runs(BTreeMap<(String, u64), RunState>);

impl Runs {
    fn get(&mut self, label: &str, seed: u64, config: impl FnOnce() -> RunConfig) -> &RunState {
        self.0.entry((label.to_string(), seed)).or_insert_with(|| finished(config()))
    }

    /// Mean over seeds of the mean macro-F1 over rounds.
    fn mean_over_rounds(&mut self, label: &str, config: impl Fn(u64) -> RunConfig) -> f64 {
        mean(&SEEDS.map(|seed| mean(&f1_curve(self.get(label, seed, || config(seed))))))
    }
}

fn benchmark(strategy: Strategy, rho: f64) -> impl Fn(u64) -> RunConfig {
    move |seed| {
        let mut c = RunConfig::synth_benchmark(seed);
        c.sampling.strategy = strategy;
        c.annotator.rho = rho;
        c
    }
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    let scores: Vec<(Strategy, f64)> = Strategy::ALL
        .into_iter()
        .map(|s| {
            let label = if s == Strategy::DomainAware { "rho0.2".to_string() } else { s.as_str().to_string() };
            (s, runs.mean_over_rounds(&label, benchmark(s, 0.2)))
        })
        .collect();
    let score = |wanted: Strategy| scores.iter().find(|(s, _)| *s == wanted).unwrap().1;
    let da = score(Strategy::DomainAware);
    let pass = da >= score(Strategy::Random) + 0.02 && scores.iter().all(|&(_, v)| v <= da);
    let detail = scores
        .iter()
        .map(|(s, v)| format!("{} {v:.4}", s.as_str()))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("mean macro-F1 over rounds and seeds: {detail}"))
}

fn criterion_7(runs: &mut Runs) -> Outcome {
    let rhos = [0.0, 0.2, 1.0];
    let mut f1 = Vec::new();
    let mut cost = Vec::new();
    for rho in rhos {
        let label = format!("rho{rho}");
        f1.push(runs.mean_over_rounds(&label, benchmark(Strategy::DomainAware, rho)));
        cost.push(mean(&SEEDS.map(|seed| {
            runs.get(&label, seed, || benchmark(Strategy::DomainAware, rho)(seed))
                .ledger
                .cost()
                .total_usd
        })));
    }
    let pass = f1[1] - f1[0] >= -0.005
        && f1[2] - f1[1] >= -0.005
        && f1[2] - f1[0] >= 0.01
        && cost[0] < cost[1]
        && cost[1] < cost[2];
    outcome(
        pass,
        format!(
            "rho 0/0.2/1: macro-F1 {:.4}/{:.4}/{:.4}, cost ${:.2}/${:.2}/${:.2}",
            f1[0], f1[1], f1[2], cost[0], cost[1], cost[2]
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let mut c = RunConfig::synth_benchmark(seed);
        c.llm.knn_accuracy = Some(0.95);
        let p = Pipeline::new(c).unwrap();
        let plain = p.detect_metrics(PromptMode::Plain).unwrap().macro_f1;
        let knn = p.detect_metrics(PromptMode::Knn).unwrap().macro_f1;
        pass &= knn > plain;
        parts.push(format!("seed {seed}: knn {knn:.4} vs plain {plain:.4}"));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let config = benchmark(Strategy::DomainAware, 0.2);
    let trained = mean(&SEEDS.map(|seed| *f1_curve(runs.get("rho0.2", seed, || config(seed))).last().unwrap()));
    let detector = mean(&SEEDS.map(|seed| {
        let c = config(seed);
        let mode = c.annotator.mode;
        Pipeline::new(c).unwrap().detect_metrics(mode).unwrap().macro_f1
    }));
    outcome(
        trained >= detector + 0.03,
        format!("final-round pipeline {trained:.4} vs detector {detector:.4} (mean of seeds 1-3)"),
    )
}

fn criterion_11() -> Outcome {
    let config = RunConfig::synth_benchmark(1);
    let a = finished(config.clone()).metrics_json();
    let b = finished(config.clone()).metrics_json();
    let identical = a == b;

    // Interrupt in the middle of round 3, persist, and continue elsewhere.
    let p = Pipeline::new(config.clone()).unwrap();
    let mut s = p.init_state();
    while !(s.round == 2 && s.status == Status::Annotating) {
        p.advance(&mut s).unwrap();
    }
    let bytes = s.to_file_bytes();
    drop(p);
    let p = Pipeline::new(config).unwrap();
    let mut resumed = RunState::from_file_bytes(&bytes).unwrap();
    p.check_state(&resumed).unwrap();
    let same_status = resumed.status == Status::Annotating && resumed.pending == s.pending;
    p.run(&mut resumed, None).unwrap();
    let resumed_equal = resumed.metrics_json() == a;
    outcome(
        identical && same_status && resumed_equal,
        format!("repeat runs byte-identical: {identical}; resumed mid-round metrics identical: {resumed_equal}"),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut runs = Runs(BTreeMap::new());
    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !run(n) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} {name} ({:.1} s): {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "confident-learning oracle equivalence", &mut criterion_1);
    report(2, "noise-flagging efficacy", &mut criterion_2);
    report(3, "gradient correctness", &mut criterion_3);
    report(4, "sampler exactness", &mut criterion_4);
    report(5, "domain embedding", &mut criterion_5);
    report(6, "strategy ordering", &mut || criterion_6(&mut runs));
    report(7, "co-annotation dose-response", &mut || criterion_7(&mut runs));
    report(8, "cost arithmetic", &mut criterion_8);
    report(9, "prompt-mode ordering", &mut criterion_9);
    report(10, "annotator beats detector", &mut || criterion_10(&mut runs));
    report(11, "reproducibility and resume", &mut criterion_11);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
