//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{random_bits, random_labels, random_params, random_tensor, rng};
use mvhash::data::{self, mvhf, synth, Mvhf, Payload, SplitSizes, SynthConfig};
use mvhash::loss::{affinity, affinity_value};
use mvhash::model::{self, Fusion, ModelConfig};
use mvhash::nd::{Tape, Tensor, Var};
use mvhash::retrieval::{self, hamming, pack, BinaryCodes, CodeBank, Cutoff};
use mvhash::train::{self, metrics_csv, Checkpoint, TrainConfig, Trainer};
use rand::Rng;

const FD_EPS: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-5;
/// Denominator floor for the relative error, so that entries whose true
/// gradient is numerically zero are compared absolutely.
const FD_REL_FLOOR: f64 = 1e-6;
const FORWARD_TOL: f64 = 1e-12;
const MAP_TOL: f64 = 1e-12;
const HAMMING_PAIRS: usize = 100_000;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, Duration, fn() -> Result<Outcome, String>);

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_fidelity() -> Result<Outcome, String> {
    let cfg = ModelConfig::new(vec![12, 8], 8, 4, 3);
    let params = random_params(&cfg, 7);
    let mut r = rng(8);
    let views = vec![random_tensor(&mut r, 4, 12, 1.0), random_tensor(&mut r, 4, 8, 1.0)];
    let labels = random_labels(&mut r, 4, 3, 0.5).to_tensor();
    let mu = 1.0;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let inputs: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
    let (total, _) = train::objective(&mut tape, &bound, &cfg, &inputs, &labels, mu, true).map_err(err)?;
    let grads = tape.backward(total).map_err(err)?;
    let analytic: Vec<Tensor> = bound.values().into_iter().map(|v| grads.get(*v)).collect();

    let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    for (pi, name) in names.iter().enumerate() {
        for e in 0..analytic[pi].data().len() {
            let at = |delta: f64| {
                let mut p = params.clone();
                p.values_mut()[pi].data_mut()[e] += delta;
                common::total_loss(&p, &cfg, &views, &labels, mu)
            };
            let numeric = (at(FD_EPS) - at(-FD_EPS)) / (2.0 * FD_EPS);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, format!("{name}[{e}]"));
            }
            checked += 1;
        }
    }
    outcome(
        worst.0 < FD_REL_TOL,
        format!("{checked} entries, max relative error {:.2e} at {}", worst.0, worst.1),
    )
}

fn random_config(r: &mut impl Rng) -> ModelConfig {
    let m = r.random_range(1..=3);
    let dims = (0..m).map(|_| r.random_range(1..=9)).collect();
    let mut cfg = ModelConfig::new(dims, r.random_range(1..=6), r.random_range(1..=9), r.random_range(1..=5));
    let ab = &mut cfg.ablation;
    ab.use_gate = r.random_bool(0.7);
    ab.use_dilation = r.random_bool(0.7);
    ab.shared_gate = r.random_bool(0.3);
    if r.random_bool(0.3) {
        ab.fusion = Fusion::Concat;
        ab.use_adaptive = false;
    } else {
        ab.use_adaptive = r.random_bool(0.7);
    }
    if m > 1 && r.random_bool(0.4) {
        let mut on: Vec<usize> = (0..m).filter(|_| r.random_bool(0.6)).collect();
        if on.is_empty() {
            on.push(m - 1);
        }
        on.reverse();
        ab.views_enabled = Some(on);
    }
    cfg
}

fn forward_oracle() -> Result<Outcome, String> {
    let mut r = rng(20);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let cfg = random_config(&mut r);
        let params = random_params(&cfg, 100 + case);
        let s = r.random_range(1..=6);
        let views: Vec<Tensor> = cfg.view_dims.iter().map(|&d| random_tensor(&mut r, s, d, 2.0)).collect();
        let trace = model::infer(&params, &cfg, &views).map_err(err)?;
        let (h, y) = common::forward(&params, &cfg, &views);
        for (got, want) in [(&trace.hash, &h), (&trace.logits, &y)] {
            for i in 0..got.rows() {
                for j in 0..got.cols() {
                    worst = worst.max((got.get(i, j) - want[i][j]).abs());
                }
            }
        }
    }
    outcome(worst < FORWARD_TOL, format!("20 configurations, max abs difference {worst:.2e}"))
}

fn affinity_law() -> Result<Outcome, String> {
    let mut problems = Vec::new();
    if affinity_value(0.0) != 0.0 {
        problems.push("phi(0) != 0".to_string());
    }
    for d in 0..10 {
        if !(affinity_value(d as f64) < affinity_value(d as f64 + 1.0)) {
            problems.push(format!("phi not increasing at {d}"));
        }
    }
    let in_range = |v: f64| (0.0..1.0).contains(&v);
    let mut pairs = 0usize;
    for c in 1..=6usize {
        let rows = 1usize << c;
        let y = Tensor::from_fn(rows, c, |i, j| ((i >> j) & 1) as f64);
        let phi = affinity(&y).map_err(err)?;
        pairs += rows * rows;
        if let Some(v) = phi.data().iter().find(|&&v| !in_range(v)) {
            problems.push(format!("C={c}: phi = {v}"));
        }
    }
    let mut r = rng(50);
    for c in 1..=50usize {
        let p = r.random_range(0.05..0.95);
        let mut y = random_labels(&mut r, 64, c, p).to_tensor();
        y.row_mut(0).fill(1.0);
        y.row_mut(1).fill(1.0);
        y.row_mut(2).fill(0.0);
        let phi = affinity(&y).map_err(err)?;
        pairs += 64 * 64;
        if let Some(v) = phi.data().iter().find(|&&v| !in_range(v)) {
            problems.push(format!("C={c}: phi = {v}"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{pairs} label pairs in [0, 1), strictly increasing on 0..=10")
        } else {
            problems.join("; ")
        },
    )
}

fn retrieval_oracle() -> Result<Outcome, String> {
    let mut r = rng(128);
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    for k in [16usize, 32, 64, 128] {
        let classes = 6;
        let bank_bits: Vec<Vec<i8>> = (0..1000).map(|_| random_bits(&mut r, k)).collect();
        let query_bits: Vec<Vec<i8>> = (0..100).map(|_| random_bits(&mut r, k)).collect();
        let bank_labels = random_labels(&mut r, 1000, classes, 0.15);
        let query_labels = random_labels(&mut r, 100, classes, 0.15);
        let flat = |v: &[Vec<i8>]| BinaryCodes::new(v.len(), k, v.concat()).map_err(err);
        let bank = CodeBank::from_codes(&flat(&bank_bits)?, bank_labels.clone()).map_err(err)?;
        let queries = CodeBank::from_codes(&flat(&query_bits)?, query_labels.clone()).map_err(err)?;
        let report = retrieval::evaluate(&queries, &bank, Cutoff::All, 4).map_err(err)?;
        let oracle: f64 = query_bits
            .iter()
            .enumerate()
            .map(|(q, bits)| common::average_precision(bits, &bank_bits, query_labels.row(q), &bank_labels))
            .sum::<f64>()
            / 100.0;
        worst = worst.max((report.map - oracle).abs());

        for _ in 0..HAMMING_PAIRS / 4 {
            let a = random_bits(&mut r, k);
            let b = random_bits(&mut r, k);
            let ip: i64 = a.iter().zip(&b).map(|(&x, &y)| (x * y) as i64).sum();
            let pa = pack(&BinaryCodes::new(1, k, a).map_err(err)?);
            let pb = pack(&BinaryCodes::new(1, k, b).map_err(err)?);
            if hamming(pa.row(0), pb.row(0)) as i64 * 2 != k as i64 - ip {
                mismatches += 1;
            }
        }
    }
    outcome(
        worst <= MAP_TOL && mismatches == 0,
        format!("max |mAP - oracle| {worst:.2e}; Hamming identity mismatches {mismatches}/{HAMMING_PAIRS}"),
    )
}

/// Separable scenario; mu = 10 is the grid-search pick (see README).
fn convergence_run(seed: u64) -> Result<(f64, f64, f64), String> {
    let mut sc = SynthConfig::uniform(512, 2, 32, 4, 0.2, seed);
    sc.dims = vec![32, 24];
    sc.separation = 3.0;
    let ds = synth(&sc)
        .and_then(|d| d.with_split(SplitSizes { train: 512, retrieval: 0, query: 0 }, seed))
        .map_err(err)?;
    let model = ModelConfig::new(ds.view_dims(), 32, 16, 4);
    let cfg = TrainConfig { epochs: 80, mu: 10.0, seed, eval_every: 0, ..Default::default() };
    let mut t = Trainer::new(&ds, model, cfg).map_err(err)?;
    let recs = t.run().map_err(err)?;
    let bank = t.bank(&ds.split.train).map_err(err)?;
    let map = retrieval::evaluate(&bank, &bank, Cutoff::All, 1).map_err(err)?.map;
    Ok((recs[0].l_total, recs[recs.len() - 1].l_total, map))
}

fn convergence() -> Result<Outcome, String> {
    let mut ok = 0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let (first, last, map) = convergence_run(seed)?;
        let ratio = last / first;
        if ratio < 0.10 && map >= 0.95 {
            ok += 1;
        }
        parts.push(format!("s{seed}: ratio {ratio:.3} mAP {map:.3}"));
    }
    outcome(ok == 5, format!("{ok}/5 seeds; {}", parts.join(", ")))
}

fn ablation_map(seed: u64, variant: usize) -> Result<f64, String> {
    let mut sc = SynthConfig::uniform(1200, 2, 32, 6, 0.5, seed);
    sc.dims = vec![48, 32];
    sc.spread = 2.0;
    sc.noise_correlation = 0.8;
    let ds = synth(&sc)
        .and_then(|d| d.with_split(SplitSizes { train: 600, retrieval: 500, query: 100 }, seed))
        .map_err(err)?;
    let mut model = ModelConfig::new(ds.view_dims(), 32, 16, 6);
    match variant {
        0 => {}
        1 => {
            model.ablation.fusion = Fusion::Concat;
            model.ablation.use_adaptive = false;
        }
        v => model.ablation.views_enabled = Some(vec![v - 2]),
    }
    let cfg = TrainConfig { epochs: 40, seed, eval_every: 40, ..Default::default() };
    let mut t = Trainer::new(&ds, model, cfg).map_err(err)?;
    let recs = t.run().map_err(err)?;
    recs.last().and_then(|r| r.map).ok_or_else(|| "no mAP recorded".into())
}

fn ablation_ordering() -> Result<Outcome, String> {
    let mut maps = vec![Vec::new(); 4];
    for seed in 0..5 {
        for (v, m) in maps.iter_mut().enumerate() {
            m.push(ablation_map(seed, v)?);
        }
    }
    let med: Vec<f64> = maps.into_iter().map(median).collect();
    let single = med[2].max(med[3]);
    outcome(
        med[0] >= med[1] && med[0] >= single && med[1] >= single,
        format!(
            "median mAP full {:.3}, concat {:.3}, view0 {:.3}, view1 {:.3}",
            med[0], med[1], med[2], med[3]
        ),
    )
}

fn determinism_and_resume() -> Result<Outcome, String> {
    let mut sc = SynthConfig::uniform(200, 2, 10, 3, 0.3, 5);
    sc.dims = vec![10, 6];
    let ds = synth(&sc)
        .and_then(|d| d.with_split(SplitSizes { train: 120, retrieval: 60, query: 20 }, 5))
        .map_err(err)?;
    let model = ModelConfig::new(ds.view_dims(), 8, 12, 3);
    let cfg = TrainConfig { epochs: 10, batch_size: 32, eval_every: 5, seed: 9, ..Default::default() };

    let straight = |cfg: &TrainConfig| -> Result<(String, Vec<u8>), String> {
        let mut t = Trainer::new(&ds, model.clone(), cfg.clone()).map_err(err)?;
        let recs = t.run().map_err(err)?;
        Ok((metrics_csv(&recs), t.checkpoint().to_bytes().map_err(err)?))
    };
    let (csv_a, ck_a) = straight(&cfg)?;
    let (csv_b, ck_b) = straight(&cfg)?;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("half.ckpt");
    let mut first = Trainer::new(&ds, model.clone(), TrainConfig { epochs: 5, ..cfg.clone() }).map_err(err)?;
    let mut recs = first.run().map_err(err)?;
    first.checkpoint().write(&path).map_err(err)?;
    let ck = Checkpoint::read(&path).map_err(err)?;
    let mut second = Trainer::resume(&ds, ck, cfg.clone()).map_err(err)?;
    recs.extend(second.run().map_err(err)?);
    let csv_c = metrics_csv(&recs);
    let ck_c = second.checkpoint().to_bytes().map_err(err)?;

    let same_seed = csv_a == csv_b && ck_a == ck_b;
    let resumed = csv_a == csv_c && ck_a == ck_c;
    outcome(
        same_seed && resumed,
        format!("repeat run identical: {same_seed}; 5 + checkpoint + 5 equals 10: {resumed}"),
    )
}

fn format_round_trips() -> Result<Outcome, String> {
    let mut failures = Vec::new();
    let mut r = rng(3);

    let files = [
        Mvhf::matrix(3, 5, Payload::F32((0..15).map(|_| r.random::<f32>() - 0.5).collect())),
        Mvhf::matrix(4, 3, Payload::F64((0..12).map(|_| r.random::<f64>() * 1e300).collect())),
        Mvhf::matrix(2, 7, Payload::U8((0..14).map(|_| r.random()).collect())),
        Mvhf::matrix(0, 4, Payload::F64(Vec::new())),
    ];
    for (i, f) in files.iter().enumerate() {
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).map_err(err)?;
        let back = Mvhf::read_from(bytes.as_slice()).map_err(err)?;
        let mut again = Vec::new();
        back.write_to(&mut again).map_err(err)?;
        if &back != f || again != bytes || &bytes[..4] != mvhf::MAGIC {
            failures.push(format!("mvhf #{i}"));
        }
    }

    for k in [1usize, 7, 16, 63, 64, 65, 100, 129] {
        let n = 37;
        let codes = BinaryCodes::new(n, k, (0..n).flat_map(|_| random_bits(&mut r, k)).collect()).map_err(err)?;
        let bank = CodeBank::from_codes(&codes, random_labels(&mut r, n, 5, 0.3)).map_err(err)?;
        let dir = tempfile::tempdir().map_err(err)?;
        let path = dir.path().join("bank.mvhf");
        bank.write(&path).map_err(err)?;
        let back = CodeBank::read(&path).map_err(err)?;
        let bytes = std::fs::read(&path).map_err(err)?;
        back.write(&path).map_err(err)?;
        if back != bank || back.codes.unpack() != codes || std::fs::read(&path).map_err(err)? != bytes {
            failures.push(format!("bank k={k}"));
        }
    }

    let mut sc = SynthConfig::uniform(60, 2, 5, 3, 0.2, 1);
    sc.dims = vec![5, 9];
    let ds = synth(&sc)
        .and_then(|d| d.with_split(SplitSizes { train: 40, retrieval: 15, query: 5 }, 1))
        .map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let manifest = data::save(&ds, dir.path()).map_err(err)?;
    if data::load(&manifest).map_err(err)? != ds {
        failures.push("manifest dataset".into());
    }

    let model = ModelConfig::new(ds.view_dims(), 6, 13, 3);
    let cfg = TrainConfig { epochs: 2, batch_size: 16, eval_every: 0, ..Default::default() };
    let mut t = Trainer::new(&ds, model, cfg).map_err(err)?;
    t.run().map_err(err)?;
    let ck = t.checkpoint();
    let path = dir.path().join("model.ckpt");
    ck.write(&path).map_err(err)?;
    let back = Checkpoint::read(&path).map_err(err)?;
    if back != ck || back.to_bytes().map_err(err)? != std::fs::read(&path).map_err(err)? {
        failures.push("checkpoint".into());
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "MVHF f32/f64/u8/empty, banks k in {1,7,16,63,64,65,100,129}, dataset, checkpoint".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient fidelity", Duration::from_secs(10), gradient_fidelity),
        ("forward oracle equivalence", Duration::from_secs(5), forward_oracle),
        ("affinity law", Duration::from_secs(10), affinity_law),
        ("retrieval oracle", Duration::from_secs(10), retrieval_oracle),
        ("convergence", Duration::from_secs(120), convergence),
        ("ablation ordering", Duration::from_secs(900), ablation_ordering),
        ("determinism and resume", Duration::from_secs(60), determinism_and_resume),
        ("format round-trips", Duration::from_secs(60), format_round_trips),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && took <= budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name} ({:.2}s, budget {}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
