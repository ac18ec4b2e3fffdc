//! Implementations of the six subcommands.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use cavm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use cavm_core::config::ModelConfig;
use cavm_core::error::{Error, Result};
use cavm_core::metrics::{dilate_mask, evaluate, render_table, RegionReport, TUMOR_DILATION_RADIUS};
use cavm_core::params::ParamStore;
use cavm_core::phantom::{generate_phantom, read_sample, write_sample, VolumeSample};
use cavm_core::rng::SplitMix64;
use cavm_core::train::{
    init_full_model, predict_no_ar, pretrain_tokenizers, synthesize, train_autoregression,
    StepRecord,
};

use crate::imgio::{write_image, write_pgm};
use crate::runcfg::{config_hash, RunConfigFile};

#[derive(serde::Serialize, serde::Deserialize)]
struct SplitManifest {
    count: usize,
    seeds: Vec<u64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DataManifest {
    size: usize,
    seed_start: u64,
    splits: std::collections::BTreeMap<String, SplitManifest>,
}

pub fn gen_data(out: &Path, train: usize, val: usize, test: usize, size: usize, seed0: u64) -> Result<()> {
    let mut manifest = DataManifest {
        size,
        seed_start: seed0,
        splits: Default::default(),
    };
    let mut seed = seed0;
    for (split, count) in [("train", train), ("val", val), ("test", test)] {
        let dir = out.join(split);
        std::fs::create_dir_all(&dir)?;
        let mut seeds = Vec::with_capacity(count);
        for _ in 0..count {
            let sample: VolumeSample<f32> = generate_phantom(seed, size)?;
            write_sample(&sample, &dir.join(format!("{seed}.cavm")))?;
            seeds.push(seed);
            seed += 1;
        }
        manifest.splits.insert(split.to_string(), SplitManifest { count, seeds });
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(out.join("manifest.json"), json)?;
    println!(
        "wrote {} samples ({size}x{size}) under {}",
        train + val + test,
        out.display()
    );
    Ok(())
}

pub fn load_split(data: &Path, split: &str) -> Result<Vec<VolumeSample<f32>>> {
    let dir = data.join(split);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cavm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .cavm samples under {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_sample(p)).collect()
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile::default()),
    }
}

/// Tag training errors with the step they surfaced at so a numeric fault
/// exits with actionable context.
fn with_step_context(err: Error, phase: u8, step: u64) -> Error {
    match err {
        Error::NumericFault { context } => Error::NumericFault {
            context: format!("phase {phase} step {step}: {context}"),
        },
        other => other,
    }
}

struct LogWriter {
    file: std::fs::File,
}

impl LogWriter {
    fn create(ckpt_out: &Path) -> Result<Self> {
        let path = ckpt_out.with_extension("log.jsonl");
        Ok(LogWriter { file: std::fs::File::create(path)? })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

pub fn train_tokenizer(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    steps_override: Option<u64>,
) -> Result<()> {
    let file = load_run_config(config)?;
    let cfg = file.model_config()?;
    let plan = file.plan(steps_override);
    let dataset = load_split(data, "train")?;
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut rng = SplitMix64::new(cfg.seed);
    init_full_model(&mut store, &mut rng, &cfg)?;

    let mut log = LogWriter::create(out)?;
    let mut last_step = 0u64;
    let mut last_loss = f64::NAN;
    pretrain_tokenizers(
        &dataset,
        &cfg,
        &mut store,
        plan.steps_phase1,
        plan.checkpoint_interval,
        |r| {
            last_step = r.step;
            last_loss = r.loss_total;
            log.write(r)
        },
        |step, s| save_checkpoint(out, &cfg, step, s, None),
    )
    .map_err(|e| with_step_context(e, 1, last_step))?;
    save_checkpoint(out, &cfg, plan.steps_phase1, &store, None)?;
    println!(
        "phase 1 done: {} steps, final loss {last_loss:.6}, checkpoint {}",
        plan.steps_phase1,
        out.display()
    );
    Ok(())
}

/// The loaded weights must exactly match the layout the resolved config
/// defines (names and shapes).
fn check_store_matches(cfg: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    let mut expected: ParamStore<f32> = ParamStore::new();
    let mut rng = SplitMix64::new(0);
    init_full_model(&mut expected, &mut rng, cfg)?;
    if expected.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint/config mismatch: {} tensors vs {} expected",
            store.len(),
            expected.len()
        )));
    }
    for (name, t) in expected.iter() {
        let got = store
            .get(name)
            .map_err(|_| Error::Config(format!("checkpoint/config mismatch: missing '{name}'")))?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!(
                "checkpoint/config mismatch: '{name}' is {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn train_ar(
    config: Option<&Path>,
    data: &Path,
    init: &Path,
    out: &Path,
    steps_override: Option<u64>,
) -> Result<()> {
    let file = load_run_config(config)?;
    let cfg = file.model_config()?;
    let plan = file.plan(steps_override);
    let dataset = load_split(data, "train")?;
    let ck: Checkpoint<f32> = load_checkpoint(init)?;
    let mut store = ck.store;
    check_store_matches(&cfg, &store)?;

    let mut log = LogWriter::create(out)?;
    let mut last_step = 0u64;
    let mut last_loss = f64::NAN;
    train_autoregression(
        &dataset,
        &cfg,
        &mut store,
        plan.steps_phase2,
        plan.checkpoint_interval,
        |r| {
            last_step = r.step;
            last_loss = r.loss_total;
            log.write(r)
        },
        |step, s| save_checkpoint(out, &cfg, step, s, None),
    )
    .map_err(|e| with_step_context(e, 2, last_step))?;
    save_checkpoint(out, &cfg, plan.steps_phase2, &store, None)?;
    println!(
        "phase 2 done: {} steps, final loss {last_loss:.6}, checkpoint {}",
        plan.steps_phase2,
        out.display()
    );
    Ok(())
}

fn dose_name(d: f64) -> &'static str {
    if d < 0.5 {
        "y_ld"
    } else if d < 0.99 {
        "y_hd"
    } else {
        "y_sd"
    }
}

pub fn synthesize_cmd(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    steps: Option<usize>,
    pgm: bool,
) -> Result<()> {
    let ck: Checkpoint<f32> = load_checkpoint(ckpt)?;
    let mut cfg = ck.config;
    if let Some(s) = steps {
        cfg.ar.num_steps = s;
        cfg.validate()?;
    }
    let sample: VolumeSample<f32> = read_sample(input)?;
    let sample = sample.normalized()?;
    let x = sample.x()?;
    std::fs::create_dir_all(out)?;
    let (images, _) = synthesize(&x, &ck.store, &cfg)?;
    let schedule = cfg.ar.dose_schedule();
    // report-only monotonicity check: mean intensity over the enhancing rim
    let rim = dilate_mask(&sample.x_tm, TUMOR_DILATION_RADIUS)?;
    let rim_idx: Vec<usize> = rim
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| i)
        .collect();
    for (img, &d) in images.iter().zip(&schedule) {
        let name = dose_name(d);
        write_image(&out.join(format!("{name}.cavm")), img)?;
        if pgm {
            write_pgm(&out.join(format!("{name}.pgm")), img)?;
        }
        let mean: f32 = rim_idx.iter().map(|&i| img.data()[i]).sum::<f32>() / rim_idx.len() as f32;
        println!("{name}: dose {d:.3}, mean rim intensity {mean:.4}");
    }
    println!("wrote {} image(s) to {}", images.len(), out.display());
    Ok(())
}

enum EvalMode {
    Ar,
    NoAr,
    CopyInput,
}

fn eval_model(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    test: &[VolumeSample<f32>],
    mode: &EvalMode,
) -> Result<RegionReport> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut masks = Vec::new();
    for sample in test {
        let n = sample.normalized()?;
        let x = n.x()?;
        let pred = match mode {
            EvalMode::Ar => synthesize(&x, store, cfg)?.0.pop().expect("at least one step"),
            EvalMode::NoAr => predict_no_ar(&x, store, cfg)?,
            EvalMode::CopyInput => n.t1()?,
        };
        preds.push(pred);
        targets.push(n.y_sd.clone());
        masks.push(n.x_tm.clone());
    }
    evaluate(&preds, &targets, &masks)
}

fn provenance_line(cfg: &ModelConfig, n: usize) -> String {
    format!("# config_hash={} seed={} samples={n}\n", config_hash(cfg), cfg.seed)
}

pub fn evaluate_cmd(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let ck: Checkpoint<f32> = load_checkpoint(ckpt)?;
    let test = load_split(data, "test")?;
    let model = eval_model(&ck.store, &ck.config, &test, &EvalMode::Ar)?;
    let baseline = eval_model(&ck.store, &ck.config, &test, &EvalMode::CopyInput)?;

    let mut report = provenance_line(&ck.config, test.len());
    report.push_str(&model.to_records("cavm"));
    report.push_str(&baseline.to_records("copy-input"));
    report.push('\n');
    report.push_str(&render_table(&[
        ("CAVM".to_string(), model),
        ("Copy-input baseline".to_string(), baseline),
    ]));
    std::fs::write(out, &report)?;
    print!("{report}");
    Ok(())
}

pub fn ablate_cmd(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    pretrain_steps: Option<u64>,
    ar_steps: Option<u64>,
) -> Result<()> {
    let file = load_run_config(config)?;
    let base_cfg = file.model_config()?;
    let p1 = pretrain_steps.or(file.steps_phase1).unwrap_or(crate::runcfg::DEFAULT_STEPS_PHASE1);
    let p2 = ar_steps.or(file.steps_phase2).unwrap_or(crate::runcfg::DEFAULT_STEPS_PHASE2);
    let train = load_split(data, "train")?;
    let test = load_split(data, "test")?;

    // one shared phase-1 pretraining for every variant
    let mut pretrained: ParamStore<f32> = ParamStore::new();
    let mut rng = SplitMix64::new(base_cfg.seed);
    init_full_model(&mut pretrained, &mut rng, &base_cfg)?;
    println!("pretraining tokenizers ({p1} steps, shared across variants)");
    pretrain_tokenizers(&train, &base_cfg, &mut pretrained, p1, 0, |_| Ok(()), |_, _| Ok(()))?;

    let mut rows: Vec<(String, RegionReport)> = Vec::new();
    let variants: [(&str, Option<usize>); 4] = [
        ("One Step", Some(1)),
        ("Two Steps", Some(2)),
        ("w/o Dose-variant Autoregression", None),
        ("CAVM", Some(3)),
    ];
    for (label, num_steps) in variants {
        let report = match num_steps {
            Some(k) => {
                let mut cfg = base_cfg;
                cfg.ar.num_steps = k;
                let mut store = pretrained.clone();
                println!("training variant '{label}' ({p2} steps)");
                train_autoregression(&train, &cfg, &mut store, p2, 0, |_| Ok(()), |_, _| Ok(()))?;
                eval_model(&store, &cfg, &test, &EvalMode::Ar)?
            }
            None => eval_model(&pretrained, &base_cfg, &test, &EvalMode::NoAr)?,
        };
        rows.push((label.to_string(), report));
    }

    let mut text = provenance_line(&base_cfg, test.len());
    for (label, report) in &rows {
        text.push_str(&report.to_records(label));
    }
    text.push('\n');
    text.push_str(&render_table(&rows));
    std::fs::write(out, &text)?;
    print!("{text}");
    Ok(())
}
