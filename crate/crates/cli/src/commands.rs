use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use compseg_core::pipeline::{initialize, with_gt_priors, Fixture, Prediction, Segmenter};
use compseg_core::segmentation::{read_pgm, write_pgm};
use compseg_core::synth::write_dataset;
use compseg_core::training::train;
use compseg_core::{evaluate, refine_priors_em, EvalRecord, RunConfig};

use crate::artifacts::*;
use crate::{Cli, Command, RunArgs, SegmentArgs};

pub fn run(cli: Cli) -> Result<ExitCode> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the worker pool")?;
    if let Command::Config { small: true } = cli.command {
        let cfg = RunConfig::small();
        let cfg = cli.seed.map_or(cfg.clone(), |s| cfg.with_seed(s));
        println!("{}", cfg.resolved_json());
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    cfg.validate()?;
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Config { .. } => {
            println!("{}", cfg.resolved_json());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out } => synth(&cfg, &out),
        Command::Init(a) => init(&cfg, &a),
        Command::Refine { run, refit_coeffs } => refine(&cfg, &run, refit_coeffs),
        Command::Train(a) => train_stage(&cfg, &a),
        Command::Segment(a) => segment(&cfg, &a, false),
        Command::Ablate(a) => segment(&cfg, &a, true),
        Command::Eval { data, pred, csv, force } => eval(&cfg, &data, &pred, csv.as_deref(), force),
    }
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.resolved_json() + "\n")?;
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    write_config(cfg, out)?;
    let fx = Fixture::build(cfg)?;
    fx.world.write(out.join("world.json"))?;
    let hash = cfg.hash();
    write_dataset(out, "train", &fx.train, &fx.backgrounds, cfg.lattice, &hash)?.write(out.join(TRAIN_MANIFEST))?;
    write_dataset(out, "bench", &fx.bench, &[], cfg.lattice, &hash)?.write(out.join(BENCH_MANIFEST))?;
    println!(
        "wrote {} training scenes, {} backgrounds and {} benchmark scenes to {}",
        fx.train.len(),
        fx.backgrounds.len(),
        fx.bench.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn init(cfg: &RunConfig, a: &RunArgs) -> Result<ExitCode> {
    write_config(cfg, &a.run)?;
    let data = load_train(&a.data, cfg)?;
    let (models, state) = initialize(&data.examples, &data.class_ids, &data.backgrounds, cfg)?;
    let (model_path, state_path) = stage_paths(&a.run, "init");
    write_model(&models, &cfg.hash(), None, &model_path)?;
    write_state(&state, &state_path)?;
    println!(
        "initialized {} classes x {} mixtures over {} kernels -> {}",
        models.classes.len(),
        models.mixtures(),
        models.kernels(),
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_stage(cfg: &RunConfig, run: &Path, stage: &str, examples: usize) -> Result<(compseg_core::ModelSet, compseg_core::TrainingState, String)> {
    let (model_path, state_path) = stage_paths(run, stage);
    let (models, hash) = read_model(&model_path, cfg)?;
    let state = read_state(&state_path)?;
    ensure!(
        state.assignments.len() == examples,
        "{} covers {} images but the training set has {examples}",
        state_path.display(),
        state.assignments.len()
    );
    Ok((models, state, hash))
}

fn refine(cfg: &RunConfig, a: &RunArgs, refit_coeffs: Option<bool>) -> Result<ExitCode> {
    let data = load_train(&a.data, cfg)?;
    let (mut models, mut state, hash) = load_stage(cfg, &a.run, "init", data.examples.len())?;
    let mut options = cfg.em_options();
    if let Some(r) = refit_coeffs {
        options.refit_coeffs = r;
    }
    let history = refine_priors_em(&data.examples, &mut models, &mut state, &options)?;
    let (model_path, state_path) = stage_paths(&a.run, "refined");
    write_model(&models, &hash, None, &model_path)?;
    write_state(&state, &state_path)?;
    std::fs::write(a.run.join("em.csv"), history.to_csv())?;
    let j = history.objectives();
    println!(
        "EM: {} iterations, objective {:.3} -> {:.3}{}",
        history.iterations.len(),
        j[0],
        j[j.len() - 1],
        if history.converged { ", converged" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

fn train_stage(cfg: &RunConfig, a: &RunArgs) -> Result<ExitCode> {
    let data = load_train(&a.data, cfg)?;
    let (models, mut state, hash) = load_stage(cfg, &a.run, "refined", data.examples.len())?;
    let options = cfg.em_options();
    let examples = &data.examples;
    let (trained, _, history) = train(examples, &models, &cfg.train, |_, m| {
        refine_priors_em(examples, m, &mut state, &options).map(|_| ())
    })?;
    let (model_path, state_path) = stage_paths(&a.run, "trained");
    write_model(&trained, &hash, Some(cfg.train.epochs), &model_path)?;
    write_state(&state, &state_path)?;
    std::fs::write(a.run.join("loss.csv"), history.to_csv())?;
    let t = history.totals();
    println!("trained {} epochs, total loss {:.4} -> {:.4}", cfg.train.epochs, t[0], t[t.len() - 1]);
    Ok(ExitCode::SUCCESS)
}

fn segment(cfg: &RunConfig, a: &SegmentArgs, ablation: bool) -> Result<ExitCode> {
    if ablation && !a.no_prior && !a.gt_prior {
        bail!("ablate needs --no-prior or --gt-prior");
    }
    let (mut models, hash) = read_model(&a.model, cfg)?;
    let (prior, omega) = if a.no_prior {
        let omega = a.omega.unwrap_or(cfg.omega);
        ensure!(omega > 0.0 && omega < 1.0, "--omega must lie in (0, 1), got {omega}");
        models = models.with_constant_prior(omega);
        ("no-prior", Some(omega))
    } else if a.gt_prior {
        let data = load_train(&a.data, cfg)?;
        let state = read_state(&a.state)?;
        ensure!(
            state.assignments.len() == data.examples.len(),
            "{} covers {} images but the training set has {}",
            a.state.display(),
            state.assignments.len(),
            data.examples.len()
        );
        models = with_gt_priors(&models, &data.examples, &state.assignments, &data.labels)?;
        ("gt-prior", None)
    } else {
        ("learned", None)
    };
    let (_, items) = load_bench(&a.data, cfg)?;
    let segmenter = Segmenter::new(models, cfg);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let supervision = a.supervision;
    items.par_iter().try_for_each(|item| -> Result<()> {
        let p: Prediction = segmenter
            .segment(&item.map, &item.modal, Some(&item.amodal), supervision)
            .with_context(|| format!("record {}", item.id))?;
        write_pgm(&p.labels, a.out.join(format!("{}.pgm", item.id)))?;
        let sidecar = Sidecar {
            id: item.id.clone(),
            config_hash: hash.clone(),
            supervision,
            prior: prior.to_string(),
            omega,
            class_id: p.alignment.class_id,
            mixture: p.alignment.mixture,
            d: [p.alignment.d.0, p.alignment.d.1],
            score: p.alignment.score,
            image_to_rep: [p.image_to_rep.0, p.image_to_rep.1],
            amodal_box: p.amodal_box.as_array(),
            clipped: p.clipped,
        };
        write_json(&sidecar, &a.out.join(format!("{}.json", item.id)))
    })?;
    println!("segmented {} records ({prior}, {supervision:?}) -> {}", items.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Exit status 2 when any benchmark record lacks a prediction.
fn eval(cfg: &RunConfig, data: &Path, pred: &Path, csv: Option<&Path>, force: bool) -> Result<ExitCode> {
    let (manifest, items) = load_bench(data, cfg)?;
    let loaded: Vec<Option<(compseg_core::LabelGrid, Sidecar)>> = items
        .par_iter()
        .map(|item| {
            let pgm = pred.join(format!("{}.pgm", item.id));
            if !pgm.exists() {
                return Ok(None);
            }
            let labels = read_pgm(&pgm).with_context(|| format!("reading {}", pgm.display()))?;
            let sidecar = Sidecar::read(&pred.join(format!("{}.json", item.id)))?;
            Ok(Some((labels, sidecar)))
        })
        .collect::<Result<_>>()?;
    let mut predictions = BTreeMap::new();
    for (item, entry) in items.iter().zip(loaded) {
        let Some((labels, sidecar)) = entry else { continue };
        if sidecar.config_hash != manifest.config_hash {
            let msg = format!(
                "{}: prediction config {} differs from benchmark config {}",
                item.id, sidecar.config_hash, manifest.config_hash
            );
            if !force {
                bail!("{msg} (use --force to evaluate anyway)");
            }
            log::warn!("{msg}");
        }
        predictions.insert(item.id.clone(), labels);
    }
    let records: Vec<EvalRecord> = items
        .iter()
        .map(|i| EvalRecord {
            id: i.id.clone(),
            fg_level: i.fg_level,
            bg_level: i.bg_level,
            gt: i.gt.clone(),
        })
        .collect();
    let report = evaluate(&records, &predictions)?;
    print!("{}", report.to_table());
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if !report.missing.is_empty() {
        eprintln!("missing predictions for {} records:", report.missing.len());
        for id in &report.missing {
            eprintln!("  {id}");
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
