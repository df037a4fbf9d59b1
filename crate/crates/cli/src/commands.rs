use std::path::{Path, PathBuf};

use moelab::distill::{distill_train, DistillConfig};
use moelab::error::{Error, Result};
use moelab::eval::io::{read_tasks, write_jsonl};
use moelab::eval::{
    fewshot_eval, finetune_classifier, perplexity, EvalConfig, FinetuneConfig, PromptTask,
};
use moelab::flops::{
    gpu_days, param_count, speedup_factor, tco2e, train_flops, CostSpec, Observation, DENSE_TFLOPS,
    MOE_TFLOPS, ZFLOP,
};
use moelab::model::{ModelConfig, Transformer};
use moelab::optim::Adam;
use moelab::pipeline::{
    build_report, load_documents, load_model, load_tokenizer, observations_from_run,
    observations_from_summaries, read_header, read_observations_csv, train, Checkpoint, Objective,
    Observations, Precision, RngState, RunConfig, Tokenizer,
};
use moelab::tensor::{DType, Scalar};
use serde::Serialize;

use crate::{
    Cli, Command, DistillArgs, EvalPplArgs, EvalPromptArgs, FinetuneArgs, FlopsArgs, ReportArgs,
    RunArgs, SpeedupArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::EvalPpl(a) => cmd_eval_ppl(a),
        Command::EvalPrompt(a) => cmd_eval_prompt(cli, a),
        Command::Finetune(a) => cmd_finetune(cli, a),
        Command::Distill(a) => cmd_distill(cli, a),
        Command::Flops(a) => cmd_flops(a),
        Command::Speedup(a) => cmd_speedup(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

/// Defaults, then the config file, then command flags, then global flags.
fn run_config(cli: &Cli, args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &args.corpus {
        cfg.corpus = c.clone();
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = args.experts {
        cfg.model.experts = e;
    }
    if let Some(m) = args.max_steps {
        cfg.max_steps = Some(m);
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = run_config(cli, &a.run)?;
    let summary = match cfg.precision {
        Precision::Single => {
            train::<f32>(&cfg, Objective::LanguageModel, a.resume.as_deref())?.summary
        }
        Precision::Double => {
            train::<f64>(&cfg, Objective::LanguageModel, a.resume.as_deref())?.summary
        }
    };
    print_json(&summary)
}

/// A checkpoint's run config and tokenizer.
fn checkpoint_context(path: &Path) -> Result<(DType, RunConfig, Tokenizer)> {
    let header = read_header(path)?;
    let cfg = RunConfig::from_kv(&header.config, path)?;
    let tok = load_tokenizer(&cfg)?;
    Ok((header.dtype, cfg, tok))
}

fn cmd_eval_ppl(a: &EvalPplArgs) -> Result<()> {
    let (dtype, _, tok) = checkpoint_context(&a.checkpoint)?;
    let docs = tokenize_each(&load_documents(&a.corpus)?, &tok);
    let report = match dtype {
        DType::F32 => eval_ppl::<f32>(a, &docs, &tok)?,
        DType::F64 => eval_ppl::<f64>(a, &docs, &tok)?,
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn tokenize_each(docs: &[String], tok: &Tokenizer) -> Vec<Vec<u32>> {
    docs.iter().map(|d| tok.encode_str(d)).collect()
}

fn eval_ppl<T: Scalar>(
    a: &EvalPplArgs,
    docs: &[Vec<u32>],
    tok: &Tokenizer,
) -> Result<moelab::eval::PerplexityReport> {
    let model = load_model::<T>(&a.checkpoint)?;
    let block = a.block_size.unwrap_or(model.config().seq_len + 1);
    perplexity(&model, docs, &tok.separator(), block)
}

fn load_prompt_tasks(path: &Path, tok: &Tokenizer) -> Result<(Vec<String>, Vec<PromptTask>)> {
    let encode = |s: &str| tok.encode_str(s);
    let mut ids = Vec::new();
    let mut tasks = Vec::new();
    for (id, rec) in read_tasks(path)? {
        tasks.push(rec.to_task(&encode)?);
        ids.push(id);
    }
    if tasks.is_empty() {
        return Err(Error::config(format!(
            "{} contains no tasks",
            path.display()
        )));
    }
    Ok((ids, tasks))
}

fn cmd_eval_prompt(cli: &Cli, a: &EvalPromptArgs) -> Result<()> {
    let (dtype, _, tok) = checkpoint_context(&a.checkpoint)?;
    let (ids, tasks) = load_prompt_tasks(&a.tasks, &tok)?;
    let report = match dtype {
        DType::F32 => {
            let model = load_model::<f32>(&a.checkpoint)?;
            fewshot(cli, a, &model, &ids, &tasks, &tok)?
        }
        DType::F64 => {
            let model = load_model::<f64>(&a.checkpoint)?;
            fewshot(cli, a, &model, &ids, &tasks, &tok)?
        }
    };
    if let Some(out) = &a.out {
        write_jsonl(out, &report.results)?;
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        tasks: usize,
        k_shots: usize,
        mean_accuracy: f64,
        per_run: &'a [f64],
    }
    print_json(&Summary {
        tasks: tasks.len(),
        k_shots: a.k_shots,
        mean_accuracy: report.mean_accuracy,
        per_run: &report.per_run,
    })
}

fn fewshot<T: Scalar>(
    cli: &Cli,
    a: &EvalPromptArgs,
    model: &Transformer<T>,
    ids: &[String],
    tasks: &[PromptTask],
    tok: &Tokenizer,
) -> Result<moelab::eval::FewShotReport> {
    let cfg = EvalConfig {
        block_size: model.config().seq_len,
        k_shots: a.k_shots,
        n_runs: if a.k_shots == 0 { 1 } else { a.runs },
        seed: cli.seed.unwrap_or(0),
    };
    fewshot_eval(tasks, ids, model, &cfg, &tok.separator())
}

fn cmd_finetune(cli: &Cli, a: &FinetuneArgs) -> Result<()> {
    let (dtype, cfg, tok) = checkpoint_context(&a.checkpoint)?;
    let (_, train_tasks) = load_prompt_tasks(&a.train, &tok)?;
    let val_tasks = match &a.validation {
        Some(p) => Some(load_prompt_tasks(p, &tok)?.1),
        None => None,
    };
    let ft = FinetuneConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: cli.seed.unwrap_or(cfg.seed),
        adam: cfg.adam,
        ..FinetuneConfig::default()
    };
    create_dir(&a.out)?;
    let report = match dtype {
        DType::F32 => finetune::<f32>(a, &cfg, &train_tasks, val_tasks.as_deref(), &ft)?,
        DType::F64 => finetune::<f64>(a, &cfg, &train_tasks, val_tasks.as_deref(), &ft)?,
    };
    write_json(&a.out.join("finetune.json"), &report)?;
    print_json(&report)
}

fn finetune<T: Scalar>(
    a: &FinetuneArgs,
    cfg: &RunConfig,
    data: &[PromptTask],
    validation: Option<&[PromptTask]>,
    ft: &FinetuneConfig,
) -> Result<moelab::eval::FinetuneReport> {
    let mut model = load_model::<T>(&a.checkpoint)?;
    let report = finetune_classifier(&mut model, data, validation, ft)?;
    let params = model.params().clone();
    let optimizer = Adam::new(cfg.adam, &params);
    let rng = RngState {
        seed: ft.seed,
        stream: 0,
        word_pos: 0,
    };
    Checkpoint {
        config: cfg.to_kv(),
        tokens_seen: 0,
        step: 0,
        rng,
        params,
        optimizer,
    }
    .save(&a.out.join("checkpoint.bin"))?;
    Ok(report)
}

fn cmd_distill(cli: &Cli, a: &DistillArgs) -> Result<()> {
    let mut student = run_config(cli, &a.run)?;
    // The student is dense unless the flags say otherwise.
    if a.run.experts.is_none() && !sets_key(&a.run.overrides, "experts") {
        student.model.experts = 0;
    }
    let cfg = DistillConfig {
        ce_weight: a.ce_weight,
        soft_weight: a.soft_weight,
        temperature: a.temperature,
    };
    let header = read_header(&a.teacher)?;
    let report = match (student.precision, header.dtype) {
        (Precision::Single, DType::F32) => {
            distill_train(&load_model::<f32>(&a.teacher)?, &student, &cfg)?
        }
        (Precision::Double, DType::F64) => {
            distill_train(&load_model::<f64>(&a.teacher)?, &student, &cfg)?
        }
        (p, d) => {
            return Err(Error::config(format!(
                "teacher checkpoint stores {d:?} values but the student runs in {p} precision"
            )))
        }
    };
    print_json(&report)
}

fn sets_key(overrides: &[String], key: &str) -> bool {
    overrides
        .iter()
        .any(|kv| kv.split('=').next().map(str::trim) == Some(key))
}

fn cmd_flops(a: &FlopsArgs) -> Result<()> {
    let spec = CostSpec {
        tokens: a.tokens,
        layers: a.layers,
        hidden: a.hidden,
        seq_len: a.seq_len,
        vocab: a.vocab,
        moe: a.moe,
        experts: if a.moe { a.experts } else { 0 },
    };
    spec.validate()?;
    let zflops = train_flops(&spec) / ZFLOP;
    let tput = if a.moe { MOE_TFLOPS } else { DENSE_TFLOPS };
    let days = gpu_days(zflops, tput)?;
    let model = ModelConfig {
        layers: a.layers as usize,
        hidden: a.hidden as usize,
        heads: 1,
        vocab: a.vocab as usize,
        seq_len: a.seq_len as usize,
        experts: spec.experts as usize,
        ..ModelConfig::default()
    };
    let params = param_count(&model);
    if a.json {
        #[derive(Serialize)]
        struct Flops {
            zflops: f64,
            params: u64,
            gpu_days: f64,
            tco2e: f64,
        }
        return print_json(&Flops {
            zflops,
            params,
            gpu_days: days,
            tco2e: tco2e(days),
        });
    }
    println!("{zflops:.4} ZFLOPs");
    println!("params    {params}");
    println!("gpu_days  {days:.1}");
    println!("tco2e     {:.2}", tco2e(days));
    Ok(())
}

fn parse_observation(s: &str) -> Result<Observation> {
    let parsed = s
        .split_once(':')
        .and_then(|(p, z)| Some((p.trim().parse().ok()?, z.trim().parse().ok()?)));
    match parsed {
        Some((perf, zflops)) if zflops > 0.0 => Ok(Observation::new(perf, zflops)),
        _ => Err(Error::config(format!(
            "expected PERF:ZFLOPS with positive cost, got {s:?}"
        ))),
    }
}

fn orientation(higher_is_better: bool) -> moelab::flops::Orientation {
    if higher_is_better {
        moelab::flops::Orientation::HigherIsBetter
    } else {
        moelab::flops::Orientation::LowerIsBetter
    }
}

fn cmd_speedup(_cli: &Cli, a: &SpeedupArgs) -> Result<()> {
    let mut obs = match &a.observations {
        Some(p) => read_observations_csv(p)?,
        None => Observations::default(),
    };
    for s in &a.dense {
        obs.dense.push(parse_observation(s)?);
    }
    for s in &a.moe {
        obs.moe.push(parse_observation(s)?);
    }
    let s = speedup_factor(
        a.target,
        &obs.dense,
        &obs.moe,
        orientation(a.orientation.higher_is_better),
    )?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    println!("speedup factor {:.4}", s.factor);
    println!("dense_zflops   {}", s.dense_zflops);
    println!("moe_zflops     {}", s.moe_zflops);
    Ok(())
}

fn cmd_report(_cli: &Cli, a: &ReportArgs) -> Result<()> {
    let mut obs = match &a.observations {
        Some(p) => read_observations_csv(p)?,
        None => Observations::default(),
    };
    let paths: Vec<&Path> = a.summaries.iter().map(PathBuf::as_path).collect();
    let from_runs = observations_from_summaries(&paths)?;
    obs.dense.extend(from_runs.dense);
    obs.moe.extend(from_runs.moe);
    for dir in &a.runs {
        let o = observations_from_run(dir)?;
        obs.dense.extend(o.dense);
        obs.moe.extend(o.moe);
    }
    let report = build_report(&obs, orientation(a.orientation.higher_is_better))?;
    create_dir(&a.out)?;
    let speedup = a.out.join("speedup.csv");
    std::fs::write(&speedup, &report.speedup_csv).map_err(|e| Error::io(&speedup, e))?;
    let scaling = a.out.join("scaling.csv");
    std::fs::write(&scaling, &report.scaling_csv).map_err(|e| Error::io(&scaling, e))?;
    print!("{}", report.speedup_csv);
    Ok(())
}
