use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use mvhash::data::{self, mvhf, MultiViewDataset, SplitPart, SplitSizes, SynthConfig};
use mvhash::model::{Fusion, ModelConfig};
use mvhash::retrieval::{self, hamming, pack, rank, CodeBank, PackedCodes};
use mvhash::train::{self, Checkpoint, EpochRecord, TrainConfig, Trainer};
use mvhash::Error;
use serde_json::json;

use crate::args::{AblateArgs, Command, EncodeArgs, EvalArgs, IndexArgs, QueryArgs, SynthArgs, TrainArgs, TrainFlags};
use crate::plot;

pub const THREADS_ENV: &str = "MVHASH_THREADS";

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, cmd),
        Command::Train(a) => train(a, cmd),
        Command::Encode(a) => encode(a, cmd),
        Command::Index(a) => index(a, cmd),
        Command::Query(a) => query(a, cmd),
        Command::Eval(a) => eval(a, cmd),
        Command::Ablate(a) => ablate(a, cmd),
    }
}

/// Worker count for evaluation and ablation: `MVHASH_THREADS` if set,
/// otherwise the machine's parallelism.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn record(cmd: &Command) -> Result<String> {
    let value = json!({
        "tool": "mvhash",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cmd.name(),
        "seed": cmd.seed(),
        "args": cmd,
        "formats": {
            "mvhf_matrix": mvhf::VERSION_MATRIX,
            "mvhf_codes": mvhf::VERSION_CODES,
            "checkpoint": train::CHECKPOINT_VERSION,
        },
    });
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `<file>.run.json` beside a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    path.with_file_name(name)
}

fn split_rows(ds: &MultiViewDataset, part: SplitPart) -> Result<&[usize]> {
    let rows = ds.split.part(part);
    if rows.is_empty() {
        return Err(Error::Config(format!("split {part:?} is empty")).into());
    }
    Ok(rows)
}

fn per_view<T: Copy>(values: &[T], views: usize, what: &str) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; views]),
        n if n == views => Ok(values.to_vec()),
        n => Err(Error::Config(format!("{n} {what} values for {views} views")).into()),
    }
}

fn synth(a: &SynthArgs, cmd: &Command) -> Result<()> {
    let n = a.n;
    let train = a.train.unwrap_or(n * 6 / 10);
    let retrieval = a.retrieval.unwrap_or(n * 3 / 10);
    let query = a.query.unwrap_or(n.saturating_sub(train + retrieval));
    let cfg = SynthConfig {
        n_samples: n,
        dims: per_view(&a.dims, a.views, "--dims")?,
        n_classes: a.classes,
        labels_per_sample: data::LabelsPerSample { min: a.labels_min, max: a.labels_max },
        noise_fraction: per_view(&a.noise, a.views, "--noise")?,
        noise_correlation: a.correlation,
        separation: a.separation,
        spread: a.spread,
        seed: a.seed,
    };
    let ds = data::synth(&cfg)?.with_split(SplitSizes { train, retrieval, query }, a.seed)?;
    create_dir(&a.out)?;
    let manifest = data::save(&ds, &a.out)?;
    write(&a.out.join("run.json"), record(cmd)?)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_config(f: &TrainFlags, eval_threads: usize) -> TrainConfig {
    TrainConfig {
        epochs: f.epochs,
        batch_size: f.batch,
        learning_rate: f.lr,
        optimizer: f.optimizer(),
        mu: f.mu,
        seed: f.seed,
        eval_every: f.eval_every,
        map_cutoff: f.map_cutoff,
        include_diagonal: !f.no_diagonal,
        clip_norm: f.clip_norm,
        eval_threads,
        record_time: f.record_time,
    }
}

fn train(a: &TrainArgs, cmd: &Command) -> Result<()> {
    let ds = data::load(&a.manifest)?;
    let cfg = train_config(&a.train, threads()?);
    let metrics_path = a.out.join("metrics.csv");
    let (mut trainer, mut records) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.model.k != a.bits {
                return Err(Error::Config(format!(
                    "checkpoint has {} bits, --bits is {}",
                    ck.model.k, a.bits
                ))
                .into());
            }
            let done = ck.epoch;
            // Keep the curve of the run being continued when it lives here.
            let prior = match fs::read_to_string(&metrics_path) {
                Ok(text) => train::parse_metrics_csv(&text)?
                    .into_iter()
                    .filter(|r| r.epoch <= done)
                    .collect(),
                Err(_) => Vec::new(),
            };
            (Trainer::resume(&ds, ck, cfg)?, prior)
        }
        None => {
            let mut model = ModelConfig::new(ds.view_dims(), a.model.dim, a.bits, ds.labels.classes());
            model.ablation = a.model.ablation();
            (Trainer::new(&ds, model, cfg)?, Vec::new())
        }
    };
    create_dir(&a.out)?;
    write(&a.out.join("run.json"), record(cmd)?)?;

    let mut fresh: Vec<EpochRecord> = Vec::new();
    let result = trainer.run_with(|r| {
        fresh.push(r.clone());
        let map = r.map.map(|m| format!(" map {m:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {:>4} l_sim {:.6} l_clf {:.6} l_total {:.6}{map}",
            r.epoch, r.l_sim, r.l_clf, r.l_total
        );
    });
    // Written before propagating an abort so the curve up to it survives.
    records.extend(fresh);
    write(&metrics_path, train::metrics_csv(&records))?;
    if a.svg {
        write(&a.out.join("curves.svg"), plot::curves_svg(&records))?;
    }
    result?;
    trainer.checkpoint().write(&a.out.join("model.ckpt"))?;
    if let Some(last) = records.last() {
        println!(
            "trained {} epochs; final l_total {}{}",
            last.epoch,
            last.l_total,
            last.map.map(|m| format!(", mAP {m}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn encode(a: &EncodeArgs, cmd: &Command) -> Result<()> {
    let ck = Checkpoint::read(&a.checkpoint)?;
    let ds = data::load(&a.manifest)?;
    let rows = split_rows(&ds, a.split)?;
    let codes = train::encode(&ck, &ds, rows)?;
    pack(&codes).write(&a.out)?;
    write(&sidecar(&a.out), record(cmd)?)?;
    println!("{} codes of {} bits", codes.rows(), codes.k());
    Ok(())
}

fn index(a: &IndexArgs, cmd: &Command) -> Result<()> {
    let codes = PackedCodes::read(&a.codes)?;
    let ds = data::load(&a.manifest)?;
    let rows = split_rows(&ds, a.split)?;
    if codes.len() != rows.len() {
        return Err(Error::Validation(format!(
            "{} holds {} codes but split {:?} has {} samples",
            a.codes.display(),
            codes.len(),
            a.split,
            rows.len()
        ))
        .into());
    }
    let bank = CodeBank::new(codes, ds.labels.select_rows(rows))?;
    bank.write(&a.out)?;
    write(&sidecar(&a.out), record(cmd)?)?;
    println!("bank of {} codes, {} bits", bank.len(), bank.k());
    Ok(())
}

fn check_bits(queries: usize, bank: usize) -> Result<()> {
    if queries != bank {
        return Err(Error::Validation(format!("query codes have {queries} bits, bank has {bank}")).into());
    }
    Ok(())
}

fn query(a: &QueryArgs, cmd: &Command) -> Result<()> {
    let bank = CodeBank::read(&a.bank)?;
    let queries = PackedCodes::read(&a.queries)?;
    check_bits(queries.k(), bank.k())?;
    let ids: Vec<usize> = a.ids.clone().unwrap_or_else(|| (0..queries.len()).collect());
    if let Some(&bad) = ids.iter().find(|&&i| i >= queries.len()) {
        return Err(Error::Validation(format!("query id {bad} out of range 0..{}", queries.len())).into());
    }
    let mut out = String::from("query,rank,index,distance\n");
    for &q in &ids {
        let ranking = rank(queries.row(q), bank.k(), &bank.codes)?;
        for (r, &i) in ranking.iter().take(a.top).enumerate() {
            let d = hamming(queries.row(q), bank.codes.row(i));
            writeln!(out, "{q},{},{i},{d}", r + 1).unwrap();
        }
    }
    match &a.out {
        Some(path) => {
            write(path, &out)?;
            write(&sidecar(path), record(cmd)?)?;
        }
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn eval(a: &EvalArgs, cmd: &Command) -> Result<()> {
    let queries = CodeBank::read(&a.queries)?;
    let bank = CodeBank::read(&a.bank)?;
    check_bits(queries.k(), bank.k())?;
    let report = retrieval::evaluate(&queries, &bank, a.map_cutoff, threads()?)?;
    write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    write(&a.out.with_extension("precision.csv"), report.precision_csv())?;
    write(&sidecar(&a.out), record(cmd)?)?;
    if !report.queries_without_relevant.is_empty() {
        eprintln!(
            "warning: {} queries have no relevant item and score 0",
            report.queries_without_relevant.len()
        );
    }
    println!("mAP {}", report.map);
    Ok(())
}

/// Variant names in table order, with the change each makes to the full
/// model.
pub const VARIANTS: [&str; 7] = [
    "ACMVH-text",
    "ACMVH-vision",
    "ACMVH-concat",
    "ACMVH-adaptive",
    "ACMVH-confidence",
    "ACMVH-dilation",
    "ACMVH",
];

/// Indices of the visual and textual views: by name when the names say so,
/// otherwise the first view is visual and the second textual.
fn vision_text(ds: &MultiViewDataset) -> Result<(usize, usize)> {
    if ds.n_views() < 2 {
        return Err(Error::Config(format!(
            "ablation needs at least 2 views, dataset has {}",
            ds.n_views()
        ))
        .into());
    }
    let find = |keys: &[&str]| {
        ds.views
            .iter()
            .position(|v| keys.iter().any(|k| v.name.to_lowercase().contains(k)))
    };
    let vision = find(&["vis", "image", "img", "vgg"]).unwrap_or(0);
    let text = find(&["text", "txt", "tag", "bow"])
        .filter(|&t| t != vision)
        .unwrap_or(if vision == 0 { 1 } else { 0 });
    Ok((vision, text))
}

pub fn variant_config(base: &ModelConfig, variant: usize, vision: usize, text: usize) -> ModelConfig {
    let mut m = base.clone();
    let ab = &mut m.ablation;
    match variant {
        0 => ab.views_enabled = Some(vec![text]),
        1 => ab.views_enabled = Some(vec![vision]),
        2 => {
            ab.fusion = Fusion::Concat;
            ab.use_adaptive = false;
        }
        3 => ab.use_adaptive = false,
        4 => ab.use_gate = false,
        5 => ab.use_dilation = false,
        _ => {}
    }
    m
}

fn ablate(a: &AblateArgs, cmd: &Command) -> Result<()> {
    let ds = data::load(&a.manifest)?;
    let (vision, text) = vision_text(&ds)?;
    split_rows(&ds, SplitPart::Query)?;
    split_rows(&ds, SplitPart::Retrieval)?;
    if a.bits.is_empty() {
        return Err(Error::Config("--bits needs at least one code length".into()).into());
    }
    let jobs: Vec<(usize, usize)> = (0..a.bits.len())
        .flat_map(|b| (0..VARIANTS.len()).map(move |v| (b, v)))
        .collect();
    let workers = threads()?.min(jobs.len());
    let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = {
                    let mut n = next.lock().unwrap();
                    let j = *n;
                    *n += 1;
                    j
                };
                let Some(&(b, v)) = jobs.get(j) else { break };
                let outcome = (|| -> Result<f64> {
                    let base = ModelConfig::new(ds.view_dims(), a.dim, a.bits[b], ds.labels.classes());
                    let model = variant_config(&base, v, vision, text);
                    let mut cfg = train_config(&a.train, 1);
                    cfg.seed = a.train.seed + v as u64;
                    cfg.eval_every = 0;
                    let mut t = Trainer::new(&ds, model, cfg)?;
                    t.run()?;
                    let map = t.evaluate_split()?.expect("splits checked above");
                    eprintln!("{} @ {} bits: mAP {map:.4}", VARIANTS[v], a.bits[b]);
                    Ok(map)
                })();
                results.lock().unwrap()[j] = Some(outcome);
            });
        }
    });
    let mut maps = vec![vec![0.0; a.bits.len()]; VARIANTS.len()];
    for (j, r) in results.into_inner().unwrap().into_iter().enumerate() {
        let (b, v) = jobs[j];
        maps[v][b] = r.expect("every job ran")?;
    }

    create_dir(&a.out)?;
    let mut csv = String::from("variant");
    for k in &a.bits {
        write!(csv, ",{k}").unwrap();
    }
    csv.push('\n');
    for (v, row) in maps.iter().enumerate() {
        csv.push_str(VARIANTS[v]);
        for m in row {
            write!(csv, ",{m}").unwrap();
        }
        csv.push('\n');
    }
    let table = text_table(&a.bits, &maps);
    write(&a.out.join("ablation.csv"), &csv)?;
    write(&a.out.join("ablation.txt"), &table)?;
    write(&a.out.join("run.json"), record(cmd)?)?;
    print!("{table}");
    Ok(())
}

fn text_table(bits: &[usize], maps: &[Vec<f64>]) -> String {
    let name_w = VARIANTS.iter().map(|v| v.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<name_w$}", "Method");
    for k in bits {
        write!(out, "  {:>8}", format!("{k} bits")).unwrap();
    }
    out.push('\n');
    for (v, row) in maps.iter().enumerate() {
        write!(out, "{:<name_w$}", VARIANTS[v]).unwrap();
        for m in row {
            write!(out, "  {m:>8.4}").unwrap();
        }
        out.push('\n');
    }
    out
}
