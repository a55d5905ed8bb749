use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use gbunet::checkpoint::{checkpoint_id, read_manifest, Checkpoint, TensorKind, TOOL_VERSION};
use gbunet::data::{write_record, SynthProfile, RECORD_EXTENSION};
use gbunet::eval::{dump_name, predict_all, report, write_dump};
use gbunet::gate::{gate_builders, GateMap, GateRequest};
use gbunet::gradsuite::{run_suite, SuiteOptions};
use gbunet::model::{build_model, prepare_with, variants, ModelConfig};
use gbunet::parallel::par_map;
use gbunet::train::{resume_gated_pipeline, train_epochs, EpochLog, TrainState};
use gbunet::{Error, Result};
use serde_json::json;

use crate::settings::{data_dir, grouped, load_config, load_records, set, trained_model_config};
use crate::{EvalArgs, GatemapArgs, GradcheckArgs, InspectArgs, SynthArgs, TrainArgs};

const REFERENCE_PARAMS: usize = 26_821_113;

/// Reads an input file; a missing file is a usage error.
fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("{} not found", path.display())),
        _ => e.into(),
    })
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = read_input(path)?;
    let ck = Checkpoint::from_bytes(&bytes, path)?;
    Ok((ck, checkpoint_id(&bytes)))
}

fn stamp(map: &mut GateMap, config: &ModelConfig) {
    map.provenance.config_hash.get_or_insert_with(|| config.hash());
    map.provenance.tool_version.get_or_insert_with(|| TOOL_VERSION.into());
}

pub fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let mut profile = match &a.profile {
        Some(p) => {
            let text = String::from_utf8_lossy(&read_input(p)?).into_owned();
            serde_json::from_str::<SynthProfile>(&text)
                .map_err(|e| Error::Config(format!("profile {}: {e}", p.display())))?
        }
        None => SynthProfile::default(),
    };
    set("profile.seed", &mut profile.seed, a.seed);
    profile.validate()?;
    fs::create_dir_all(&a.out)?;

    let nights: Vec<usize> = (0..profile.nights).collect();
    let files = par_map(&nights, a.jobs, |&i| -> Result<serde_json::Value> {
        let r = profile.generate_night(i)?;
        let name = format!("night_{i:04}.{RECORD_EXTENSION}");
        let path = a.out.join(&name);
        write_record(&r, &path)?;
        Ok(json!({
            "file": name,
            "subject_id": r.subject_id,
            "dataset_id": r.dataset_id,
            "gender": r.gender,
            "duration_s": r.duration_s,
            "bytes": fs::metadata(&path)?.len(),
        }))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let manifest = json!({
        "tool_version": TOOL_VERSION,
        "profile_hash": profile.hash(),
        "group_offsets": profile.groups,
        "profile": profile,
        "files": files,
    });
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} records and {} to {}", files.len(), path.display(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    set("model.variant", &mut cfg.model.variant, a.variant.clone());
    set("train.epochs", &mut cfg.train.epochs, a.epochs);
    set("train.lr", &mut cfg.train.lr, a.lr);
    set("train.seed", &mut cfg.train.seed, a.seed);
    cfg.validate()?;
    if a.checkpoint_every == Some(0) {
        return Err(Error::Config("--checkpoint-every must be positive".into()));
    }
    let dir = data_dir(a.data.as_deref(), &cfg)?;
    let records = load_records(&dir, &cfg, a.split)?;
    let samples = prepare_with(&records, &cfg.model, cfg.data.normalize)?;

    let resume = match &a.resume {
        Some(p) => {
            let (ck, _) = load_checkpoint(p)?;
            let state = ck
                .train_state()
                .ok_or_else(|| Error::Config(format!("{} carries no optimizer state", p.display())))?;
            log::info!("resuming {} at epoch {}", p.display(), state.epoch);
            Some(state)
        }
        None => None,
    };

    let log_path = a.out.with_extension("log.jsonl");
    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log_file = BufWriter::new(log_file);
    let mut last: Option<EpochLog> = None;
    let mut observer = |entry: &EpochLog, state: &TrainState| -> Result<()> {
        writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
        log_file.flush()?;
        if a.checkpoint_every.is_some_and(|k| entry.epoch.is_multiple_of(k)) {
            let p = a.out.with_extension(format!("e{:04}.gbu", entry.epoch));
            Checkpoint::from_state(state).save(&p)?;
            log::info!("saved {}", p.display());
        }
        last = Some(entry.clone());
        Ok(())
    };

    let start = Instant::now();
    let mut state = if cfg.model.variant == "gated" {
        resume_gated_pipeline(resume, &cfg.model, &samples, &cfg.train, &cfg.gate, 1, &mut observer)?.state
    } else {
        let model_cfg = trained_model_config(&cfg);
        let mut state = match resume {
            Some(s) => {
                let (expected, found) = (model_cfg.hash(), s.params.config.hash());
                if expected != found {
                    return Err(Error::HashMismatch { expected, found });
                }
                s
            }
            None => TrainState::new(build_model(&model_cfg, cfg.train.seed)?, &cfg.train),
        };
        train_epochs(&mut state, &samples, None, &cfg.train, cfg.train.epochs, &model_cfg.variant, &mut observer)?;
        state
    };

    let config = state.params.config.clone();
    if let Some(map) = state.gate_map.as_mut() {
        stamp(map, &config);
        let p = a.out.with_extension("gatemap.json");
        map.save(&p)?;
        log::info!("gate map {:?} written to {}", map.table(), p.display());
    }
    Checkpoint::from_state(&state).save(&a.out)?;
    let summary = last.map_or_else(|| "no epochs run".to_string(), |e| format!("epoch {} loss {:.5}", e.epoch, e.loss));
    println!(
        "trained {} ({summary}) in {:.1}s; checkpoint {} config_hash {}",
        config.variant,
        start.elapsed().as_secs_f64(),
        a.out.display(),
        config.hash()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gatemap(a: &GatemapArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    set("gate.n_heads", &mut cfg.gate.n_heads, a.n_heads.map(Some));
    set("gate.mode", &mut cfg.gate.mode, a.mode.clone());
    cfg.validate()?;
    let (ck, _) = load_checkpoint(&a.ckpt)?;
    let backbone = &ck.params;
    let dir = data_dir(a.data.as_deref(), &cfg)?;
    let records = load_records(&dir, &cfg, a.split)?;
    let samples = prepare_with(&records, &backbone.config, cfg.data.normalize)?;
    let n_heads = cfg.gate.n_heads.unwrap_or(cfg.model.n_gate_heads);
    let mut map = gate_builders().get(&cfg.gate.mode)?.build(&GateRequest {
        v_states: backbone.config.v_states,
        u_states: backbone.config.u_classes,
        n_heads,
        manual: cfg.gate.manual_table.as_ref(),
        backbone: Some(backbone),
        samples: &samples,
        jobs: 1,
    })?;
    stamp(&mut map, &backbone.config);
    map.save(&a.out)?;
    println!("gate map ({}, {} heads): {:?} -> {}", map.provenance.method, n_heads, map.table(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let given = a.config.config.is_some();
    let mut cfg = load_config(&a.config)?;
    set("model.variant", &mut cfg.model.variant, a.variant.clone());
    let (ck, id) = load_checkpoint(&a.ckpt)?;
    let params = &ck.params;
    if given {
        let (expected, found) = (trained_model_config(&cfg).hash(), params.config.hash());
        if expected != found {
            return Err(Error::HashMismatch { expected, found });
        }
    }
    set("eval.group_var", &mut cfg.eval.group_var, a.group_by.clone().map(Some));
    set("eval.aggregation", &mut cfg.eval.aggregation, a.aggregation.map(Into::into));

    let map = match &a.gate_map {
        Some(p) => {
            let text = String::from_utf8_lossy(&read_input(p)?).into_owned();
            Some(GateMap::from_json(&serde_json::from_str(&text)?)?)
        }
        None => ck.gate_map.clone(),
    };
    if params.config.variant == "gated" && map.is_none() {
        return Err(Error::Config("gated checkpoint without a gate map; pass --gate-map".into()));
    }

    let dir = data_dir(a.data.as_deref(), &cfg)?;
    let records = load_records(&dir, &cfg, a.split)?;
    let samples = prepare_with(&records, &params.config, cfg.data.normalize)?;
    let predictions = predict_all(params, map.as_ref(), &samples, a.jobs)?;
    let rep = report(params, &samples, &predictions, &cfg.eval, Some(id))?;
    rep.save(&a.report)?;
    if let Some(d) = &a.dump {
        fs::create_dir_all(d)?;
        let hash = params.config.hash();
        for (i, (s, p)) in samples.iter().zip(&predictions).enumerate() {
            write_dump(s, p, &hash, d.join(dump_name(i, s)))?;
        }
        log::info!("{} dumps in {}", samples.len(), d.display());
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} nights, {} segments ({} flat): corr {} mae {} rmse {}; report {}",
        rep.overall.nights,
        rep.segment_count,
        rep.excluded_segments,
        fmt(rep.overall.corr),
        fmt(rep.overall.mae),
        fmt(rep.overall.rmse),
        a.report.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let opts = SuiteOptions { seed: a.seed, kernels_only: a.kernels_only, ..Default::default() };
    let start = Instant::now();
    let rep = run_suite(&opts)?;
    for c in &rep.cases {
        println!(
            "{} {:<24} {} max rel error {:.2e} (tol {:.0e}, {} coords)",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.precision,
            c.max_rel_error,
            c.tolerance,
            c.checked
        );
    }
    if let Some(p) = &a.report {
        let doc = json!({ "tool_version": TOOL_VERSION, "seed": a.seed, "cases": rep.cases });
        fs::write(p, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    if rep.passed() {
        println!("gradient suite passed: {} cases in {elapsed:.1}s", rep.cases.len());
        return Ok(ExitCode::SUCCESS);
    }
    let mut failed: Vec<_> = rep.failures().collect();
    failed.sort_by(|x, y| y.max_rel_error.total_cmp(&x.max_rel_error));
    eprintln!("{} of {} cases failed; worst offenders:", failed.len(), rep.cases.len());
    for c in failed.iter().take(10) {
        eprintln!(
            "  {} ({}): {:.3e} at {}",
            c.name,
            c.precision,
            c.max_rel_error,
            c.worst.as_deref().unwrap_or("-")
        );
    }
    Ok(ExitCode::from(1))
}

pub fn inspect(a: &InspectArgs) -> Result<ExitCode> {
    let mut out = String::new();
    let (config, params, inventory) = match &a.ckpt {
        Some(p) => {
            let (ck, id) = load_checkpoint(p)?;
            let manifest = read_manifest(p)?;
            out += &format!("checkpoint {} (id {id})\n", p.display());
            out += &format!("format {} written by {}\n", manifest.format, manifest.tool_version);
            out += &format!("epoch {}, optimizer state {}\n", ck.epoch, if ck.adam.is_some() { "present" } else { "absent" });
            if let Some(map) = &ck.gate_map {
                out += &format!("gate map ({}): {:?}\n", map.provenance.method, map.table());
            }
            let inventory: Vec<(&str, String, Vec<usize>)> = manifest
                .tensors
                .iter()
                .filter_map(|t| match t.kind {
                    TensorKind::Param => Some(("param", t.name.clone(), t.shape.clone())),
                    TensorKind::Buffer => Some(("buffer", t.name.clone(), t.shape.clone())),
                    _ => None,
                })
                .collect();
            (ck.params.config.clone(), ck.params.param_count(), inventory)
        }
        None => {
            let mut cfg = load_config(&a.config)?;
            set("model.variant", &mut cfg.model.variant, a.variant.clone());
            cfg.validate()?;
            let config = trained_model_config(&cfg);
            let arch = variants().get(&config.variant)?.architecture(&config)?;
            let inventory = arch
                .param_specs()
                .into_iter()
                .map(|s| ("param", s.name, s.shape))
                .chain(arch.buffer_specs().into_iter().map(|s| ("buffer", s.name, s.shape)))
                .collect();
            (config, arch.param_count(), inventory)
        }
    };
    out += &format!("variant {}, config_hash {}\n", config.variant, config.hash());
    out += &format!(
        "parameters {} (reference full-scale model: {})\n",
        grouped(params),
        grouped(REFERENCE_PARAMS)
    );
    out += &format!("config {}\n", serde_json::to_string_pretty(&config)?);
    out += &format!("tensors ({}):\n", inventory.len());
    for (kind, name, shape) in inventory {
        out += &format!("  {kind:<6} {name} {shape:?}\n");
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}
