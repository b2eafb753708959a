//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.
//!
//! Library-level criteria compare against oracles written here from
//! scratch; the benchmark and persistence criteria drive the `snclr`
//! binary end to end on one worker thread.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use snclr::io::{read_dataset, read_metrics, write_dataset};
use snclr::model::{init_model, StackConfig};
use snclr::neighbor_store::NeighborStore;
use snclr::numerics::{Tape, Tensor};
use snclr::objective::{batch_loss, clr_loss, snclr_loss, LossConfig, NeighborMode, SnclrInputs, ViewValues};
use snclr::pipeline::StepRecord;
use snclr::positiveness::positiveness;
use snclr::rng::rng_for;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn snclr_bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snclr"))
        .current_dir(dir)
        .env("SNCLR_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "snclr failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

// ---- oracles ---------------------------------------------------------------

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    unit(a).iter().zip(unit(b)).map(|(x, y)| x * y).sum()
}

/// `−log(e^{s₊/τ} / Σ e^{s/τ})` by log-sum-exp over explicit cosines.
fn clr_oracle(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let mut logits = vec![cos(anchor, positive) / tau];
    logits.extend(negatives.iter().map(|n| cos(anchor, n) / tau));
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[0]
}

fn gaussian_vec(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| {
            // Box-Muller
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

// ---- criteria --------------------------------------------------------------

fn gradcheck_twenty_seeds() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let o = snclr_bin(dir.path(), &["--seed", "0", "gradcheck", "--count", "20"]);
    let elapsed = t.elapsed();
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with("seed ")).collect();
    let mut worst = 0.0f64;
    let mut params = 0usize;
    for l in &lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        params = params.max(f[3].parse().unwrap());
        worst = worst.max(f[7].parse().unwrap());
    }
    let pass = o.status.success()
        && lines.len() == 20
        && lines.iter().all(|l| l.ends_with("PASS"))
        && worst <= 1e-4
        && params <= 2000
        && elapsed < Duration::from_secs(60);
    verdict(
        pass,
        format!("20 seeds, N=8 K=4, {params} params, max rel error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn degeneration_identity() -> Verdict {
    let mut rng = rng_for(2024, &[]);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(2..=24);
        let tau = rng.random_range(0.05..1.0);
        let z1 = gaussian_vec(&mut rng, d);
        let y2 = gaussian_vec(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..n - 1).map(|_| gaussian_vec(&mut rng, d)).collect();
        let empty: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n - 1];
        let inp = SnclrInputs {
            z1: &z1,
            y2: &y2,
            pos_neighbors: &[],
            weights: &[],
            negatives: &negs,
            neg_neighbors: &empty,
        };
        for mode in [NeighborMode::Both, NeighborMode::PositiveOnly, NeighborMode::NegativeOnly, NeighborMode::None] {
            let s = snclr_loss(&inp, tau, n, mode).unwrap();
            let c = clr_loss(&z1, &y2, &negs, tau).unwrap();
            worst = worst.max((s - c / n as f64).abs());
            worst = worst.max((s - clr_oracle(&z1, &y2, &negs, tau) / n as f64).abs());
        }
    }
    verdict(worst <= 1e-10, format!("1000 instances x 4 modes, max |diff| {worst:.2e}"))
}

fn neighbor_search_exactness() -> Verdict {
    let mut rng = rng_for(77, &[]);
    let dim = 64;
    let mut mismatches = 0usize;
    let mut queries = 0usize;
    let mut max_fill = 0usize;
    for trial in 0..100 {
        let cap = if trial % 10 == 0 { 10_000 } else { rng.random_range(1..=10_000) };
        let total = rng.random_range(0..=cap + cap / 2) + if trial % 10 == 0 { cap } else { 0 };
        let mut store = NeighborStore::new(cap, dim).unwrap();
        // (age, raw row, unit row) of every insertion
        let mut log: Vec<(u64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(total);
        let mut pushed = 0;
        while pushed < total {
            let b = rng.random_range(1..=256).min(total - pushed).min(cap);
            let mut rows = Vec::with_capacity(b);
            for _ in 0..b {
                // occasional exact duplicates make score ties
                let v = if !log.is_empty() && rng.random_bool(0.05) {
                    log[rng.random_range(0..log.len())].1.clone()
                } else {
                    gaussian_vec(&mut rng, dim)
                };
                rows.push(v);
            }
            store.push_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
            for v in rows {
                let u = unit(&v);
                log.push((log.len() as u64, v, u));
            }
            pushed += b;
        }
        let live = &log[log.len().saturating_sub(cap)..];
        max_fill = max_fill.max(live.len());
        let k = rng.random_range(1..=32);
        let mut qs = Vec::new();
        for _ in 0..8 {
            if !live.is_empty() && rng.random_bool(0.5) {
                qs.push(live[rng.random_range(0..live.len())].1.clone());
            } else {
                qs.push(gaussian_vec(&mut rng, dim));
            }
        }
        let hits = store.batched_top_k(&Tensor::from_rows(&qs).unwrap(), k).unwrap();
        for (q, got) in qs.iter().zip(&hits) {
            let qn = unit(q);
            let mut all: Vec<(f64, u64)> = live
                .iter()
                .map(|(age, _, v)| (qn.iter().zip(v).map(|(a, b)| a * b).sum::<f64>(), *age))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = all.iter().take(k).map(|p| p.1).collect();
            let have: Vec<u64> = got.iter().map(|h| h.age).collect();
            queries += 1;
            if want != have {
                mismatches += 1;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("100 stores (max fill {max_fill}, dim {dim}), {queries} queries, {mismatches} mismatches"),
    )
}

fn fifo_law() -> Verdict {
    let mut rng = rng_for(4242, &[]);
    let mut failures = 0usize;
    for _ in 0..10_000 {
        let cap = rng.random_range(1..=24);
        let dim = rng.random_range(1..=4);
        let mut store = NeighborStore::new(cap, dim).unwrap();
        let mut inserted: Vec<Vec<f64>> = Vec::new();
        for _ in 0..rng.random_range(0..=8) {
            let b = rng.random_range(1..=cap);
            let rows: Vec<Vec<f64>> = (0..b).map(|_| gaussian_vec(&mut rng, dim)).collect();
            store.push_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
            inserted.extend(rows);
        }
        let newest = &inserted[inserted.len().saturating_sub(cap)..];
        let first_age = (inserted.len() - newest.len()) as u64;
        let slots = store.slots_by_age();
        let good = slots.len() == newest.len()
            && slots.iter().zip(newest).enumerate().all(|(i, (&s, v))| {
                store.age(s) == first_age + i as u64
                    && store.entry(s).iter().zip(unit(v)).all(|(a, b)| (a - b).abs() <= 1e-12)
            });
        if !good {
            failures += 1;
        }
    }
    verdict(failures == 0, format!("10000 random push sequences, {failures} violations"))
}

fn ema_closed_form() -> Verdict {
    let cfg = StackConfig::default();
    let mut state = init_model(&cfg, 5).unwrap().with_ema(0.99).unwrap();
    // constant online branch, different from the momentum start
    state.online = init_model(&cfg, 6).unwrap().online;
    for b in state.online.buffers.values_mut() {
        for x in b.data_mut() {
            *x += 0.5;
        }
    }
    let m0 = state.momentum.clone();
    let c: f64 = 0.99;
    let mut worst = 0.0f64;
    for t in 1..=100 {
        state.ema_update().unwrap();
        let ct = c.powi(t);
        for (name, m) in state.momentum.params.iter().chain(&state.momentum.buffers) {
            let start = m0.params.get(name).or(m0.buffers.get(name)).unwrap();
            let o = state.online.params.get(name).or(state.online.buffers.get(name)).unwrap();
            for ((mt, s), ov) in m.data().iter().zip(start.data()).zip(o.data()) {
                worst = worst.max((mt - (ct * s + (1.0 - ct) * ov)).abs());
            }
        }
    }
    verdict(worst <= 1e-12, format!("t = 1..100, c = 0.99, max |diff| {worst:.2e}"))
}

fn positiveness_contract() -> Verdict {
    let mut rng = rng_for(99, &[]);
    let mut violations = 0usize;
    for _ in 0..1000 {
        let k = rng.random_range(1..=30);
        let d = rng.random_range(2..=64);
        let y1 = gaussian_vec(&mut rng, d);
        let nbs: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, d)).collect();
        let w = positiveness(&y1, &nbs).weights;
        let cs: Vec<f64> = nbs.iter().map(|n| cos(&y1, n)).collect();
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let in_range = w.iter().all(|&x| x > 0.0 && x <= 1.0);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| cs[b].total_cmp(&cs[a]));
        let monotone = order.windows(2).all(|p| w[p[0]] >= w[p[1]]);
        if !(in_range && (max - 1.0).abs() <= 1e-6 && monotone) {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("1000 anchors, K in 1..=30, {violations} violations"))
}

fn negative_count() -> Verdict {
    let mut rng = rng_for(7, &[]);
    let d = 6;
    let mut cases = 0usize;
    let mut wrong = 0usize;
    for n in [2usize, 3, 5, 8, 16] {
        for k in [0usize, 1, 2, 5, 30] {
            for fill in [0usize, 3, 40] {
                let mut store = NeighborStore::new(64, d).unwrap();
                if fill > 0 {
                    let rows: Vec<Vec<f64>> = (0..fill).map(|_| gaussian_vec(&mut rng, d)).collect();
                    store.push_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
                }
                let rand_t = |rng: &mut _| {
                    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
                    Tensor::from_rows(&rows).unwrap()
                };
                let views = [
                    ViewValues { online_projection: rand_t(&mut rng), momentum_projection: rand_t(&mut rng) },
                    ViewValues { online_projection: rand_t(&mut rng), momentum_projection: rand_t(&mut rng) },
                ];
                for mode in [NeighborMode::Both, NeighborMode::NegativeOnly] {
                    let cfg = LossConfig { k, neighbor_mode: mode, warmup_epochs: Some(0), ..LossConfig::default() };
                    let mut tape = Tape::new();
                    let z = [tape.constant(rand_t(&mut rng)), tape.constant(rand_t(&mut rng))];
                    let (_, out) = batch_loss(&mut tape, z, &views, &store, &cfg, 0).unwrap();
                    let k_eff = k.min(fill);
                    cases += 1;
                    if out.k_effective != k_eff || out.negative_terms != (n - 1) * (k_eff + 1) {
                        wrong += 1;
                    }
                }
            }
        }
    }
    verdict(wrong == 0, format!("{cases} (N, K, fill, mode) cases, {wrong} wrong counts"))
}

// ---- end-to-end benchmark --------------------------------------------------

const SEEDS: u64 = 5;
const MODES: [&str; 4] = ["both", "none", "positive_only", "negative_only"];

struct Bench {
    /// `[seed][mode]` kNN accuracy, modes in `MODES` order.
    acc: Vec<[f64; 4]>,
    random: Vec<f64>,
    /// `(first epoch, final)` purity per seed and mode.
    purity: Vec<[(f64, f64); 4]>,
    elapsed: Duration,
}

fn accuracy(dir: &Path, ck: &Path) -> f64 {
    let out = ok(snclr_bin(
        dir,
        &["probe", "--checkpoint", ck.to_str().unwrap(), "--dataset", "train.snds", "--test", "test.snds", "--k", "20"],
    ));
    serde_json::from_str::<serde_json::Value>(out.trim()).unwrap()["accuracy"].as_f64().unwrap()
}

fn pretrain(dir: &Path, name: &str, config: &str) -> PathBuf {
    let cfg = dir.join(format!("{name}.toml"));
    fs::write(&cfg, config).unwrap();
    let out = dir.join(name);
    ok(snclr_bin(
        dir,
        &["pretrain", "--config", cfg.to_str().unwrap(), "--dataset", "train.snds", "--out", out.to_str().unwrap()],
    ));
    out
}

fn purity_trace(run: &Path) -> (f64, f64) {
    let recs: Vec<StepRecord> = read_metrics(&run.join("metrics.jsonl")).unwrap();
    let p: Vec<f64> = recs.iter().filter_map(|r| r.neighbor_purity).collect();
    (p[0], *p.last().unwrap())
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let t = Instant::now();
        let mut b = Bench { acc: Vec::new(), random: Vec::new(), purity: Vec::new(), elapsed: Duration::ZERO };
        for seed in 0..SEEDS {
            let tmp = tempfile::tempdir().unwrap();
            let dir = tmp.path();
            let s = seed.to_string();
            ok(snclr_bin(
                dir,
                &["--seed", &s, "gen-synth", "--out", "all.snds", "--classes", "5", "--per-class", "400", "--dim", "32", "--spread", "0.35"],
            ));
            let (train, test) = read_dataset(&dir.join("all.snds")).unwrap().split_every(5);
            write_dataset(&dir.join("train.snds"), &train).unwrap();
            write_dataset(&dir.join("test.snds"), &test).unwrap();

            let init = pretrain(dir, "init", &format!("[train]\nseed = {seed}\nepochs = 0\n"));
            b.random.push(accuracy(dir, &init.join("final.snck")));
            let mut acc = [0.0; 4];
            let mut pur = [(0.0, 0.0); 4];
            for (i, mode) in MODES.iter().enumerate() {
                let run = pretrain(dir, mode, &format!("[train]\nseed = {seed}\n\n[train.loss]\nneighbor_mode = \"{mode}\"\n"));
                acc[i] = accuracy(dir, &run.join("final.snck"));
                pur[i] = purity_trace(&run);
            }
            println!(
                "    seed {seed}: random {:.4}  both {:.4}  none {:.4}  positive_only {:.4}  negative_only {:.4}",
                b.random[seed as usize], acc[0], acc[1], acc[2], acc[3]
            );
            b.acc.push(acc);
            b.purity.push(pur);
        }
        b.elapsed = t.elapsed();
        b
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_benchmark() -> Verdict {
    let b = bench();
    let random = mean(b.random.iter().copied());
    let both = mean(b.acc.iter().map(|a| a[0]));
    let none = mean(b.acc.iter().map(|a| a[1]));
    let purity_up = b.purity.iter().flatten().all(|(first, last)| last >= first);
    let (p0, p1) = (mean(b.purity.iter().map(|p| p[0].0)), mean(b.purity.iter().map(|p| p[0].1)));
    let gain = 100.0 * (both - random);
    let pass = gain >= 15.0 && both >= none && purity_up && b.elapsed < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "5 seeds: learned {both:.4} vs random {random:.4} (+{gain:.1} pts), both {both:.4} >= none {none:.4}, \
             purity {p0:.3} -> {p1:.3} (rises in every run: {purity_up}), {:.0}s",
            b.elapsed.as_secs_f64()
        ),
    )
}

fn ablation_ordering() -> Verdict {
    let b = bench();
    let m: Vec<f64> = (0..4).map(|i| mean(b.acc.iter().map(|a| a[i]))).collect();
    let pass = m[0] >= m[2] - 0.01 && m[0] >= m[3] - 0.01;
    verdict(
        pass,
        format!("both {:.4}, positive_only {:.4}, negative_only {:.4}, none {:.4}", m[0], m[2], m[3], m[1]),
    )
}

fn resume_is_bit_identical() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(snclr_bin(dir, &["--seed", "3", "gen-synth", "--out", "train.snds", "--per-class", "200"]));
    let cfg = "[train]\nepochs = 6\ncheckpoint_every = 3\n\n[train.loss]\nwarmup_epochs = 1\n";
    let full = pretrain(dir, "full", cfg);
    let resumed = dir.join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    // the first half of the metrics stream, as an interrupted run leaves it
    let head: Vec<String> = fs::read_to_string(full.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    let half = head.len() / 2;
    fs::write(resumed.join("metrics.jsonl"), head[..half].join("\n") + "\n").unwrap();
    ok(snclr_bin(
        dir,
        &[
            "pretrain",
            "--resume",
            full.join("epoch-0003.snck").to_str().unwrap(),
            "--dataset",
            "train.snds",
            "--out",
            resumed.to_str().unwrap(),
        ],
    ));
    let strip = |p: &Path| -> Vec<StepRecord> {
        read_metrics(&p.join("metrics.jsonl"))
            .unwrap()
            .into_iter()
            .map(|r| StepRecord { wall_ms: 0.0, ..r })
            .collect()
    };
    let (a, b) = (strip(&full), strip(&resumed));
    let bits = |v: &[StepRecord]| v.iter().map(|r| (r.loss.to_bits(), r.lr.to_bits(), r.neighbor_purity.map(f64::to_bits))).collect::<Vec<_>>();
    let same_metrics = a == b && bits(&a) == bits(&b);
    let same_ck = fs::read(full.join("final.snck")).unwrap() == fs::read(resumed.join("final.snck")).unwrap();
    verdict(
        same_metrics && same_ck && a.len() == head.len(),
        format!("{} records, resumed at step {half}: metrics identical {same_metrics}, final checkpoint identical {same_ck}", a.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient check of the full batch loss", gradcheck_twenty_seeds),
        ("K = 0 loss equals the vanilla loss / N", degeneration_identity),
        ("batched top-K equals exhaustive argsort", neighbor_search_exactness),
        ("store keeps exactly the newest entries", fifo_law),
        ("EMA matches its closed form", ema_closed_form),
        ("positiveness weights in (0,1], max 1, cosine order", positiveness_contract),
        ("negative terms equal (N-1)(K_eff+1)", negative_count),
        ("desk benchmark: learned > random, both >= none, purity rises", desk_benchmark),
        ("neighbor-mode ablation ordering", ablation_ordering),
        ("checkpoint resume replays the run bit-identically", resume_is_bit_identical),
    ];
    println!("acceptance: {} criteria", criteria.len());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!(
            "{:>2}. {}  {name}: {} [{:.1}s]",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
