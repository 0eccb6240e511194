mod options;
mod runs;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use inloc_core::diagnostics::{gradcheck_suite, FD_STEP, FD_TOLERANCE};
use inloc_core::domain::DomainKey;
use inloc_core::eval::{forgetting_report, EvalReport, Snapshot};
use inloc_core::experiments::{adapt_with_probe, config_echo, domain_batch, run_pipeline};
use inloc_core::incremental::{AdaptationConfig, DomainBatch, EventKind, Learner};
use inloc_core::mlvae::{Architecture, MlvaeModel};
use inloc_core::simgen::{
    generate_scenario, load_scenario, save_scenario, Scenario, ScenarioConfig, SplitKind,
};

use options::*;
use runs::*;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Onboard(a) => onboard(a),
        Command::Adapt(a) => adapt(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Run(a) => run(a),
    }
    .map(|ok| {
        if ok {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }
    })
}

fn generate(a: GenerateArgs) -> Result<bool> {
    let mut cfg = ScenarioConfig::new(a.seed, a.preset.preset());
    cfg.n_epochs = a.epochs;
    if let Some(n) = a.devices {
        if n == 0 || n > cfg.roster.len() {
            bail!("--devices must be in 1..={}", cfg.roster.len());
        }
        cfg.roster.truncate(n);
    }
    if let Some(n) = a.samples_per_rp {
        cfg = cfg.with_samples_per_rp(n);
    }
    if !(a.drift_scale >= 0.0 && a.drift_scale.is_finite()) {
        bail!("--drift-scale must be a finite non-negative number");
    }
    cfg.drift.scale = a.drift_scale;
    let scenario = generate_scenario(&cfg)?;
    let sm = save_scenario(&a.out, &scenario)?;
    let mut m = RunManifest::new("generate");
    m.data = Some(DataRef::of(&a.out, &scenario));
    m.outputs = sm.files.iter().map(|f| f.path.clone()).collect();
    m.outputs
        .extend(["coords.csv".to_string(), "scenario.json".to_string()]);
    write_json(&a.out.join(MANIFEST), &m)?;
    println!(
        "{}: {} RPs, {} APs, {} devices, {} epochs, {} records",
        scenario.layout.id,
        scenario.layout.n_rps(),
        scenario.layout.n_aps(),
        cfg.roster.len(),
        cfg.n_epochs,
        scenario
            .splits
            .iter()
            .map(|s| s.records.len())
            .sum::<usize>()
    );
    Ok(true)
}

fn load_data(dir: &Path) -> Result<Scenario> {
    load_scenario(dir).with_context(|| format!("loading scenario from {}", dir.display()))
}

fn child_manifest(
    command: &str,
    data: &Path,
    scenario: &Scenario,
    parent: Option<&Path>,
) -> RunManifest {
    let mut m = RunManifest::new(command);
    m.data = Some(DataRef::of(data, scenario));
    m.parent = parent.map(absolute);
    m
}

fn resume(from: &Path, train: &TrainArgs, scenario: &Scenario) -> Result<Learner> {
    let parent = read_manifest(from)?;
    if let Some(d) = &parent.data {
        if d.scenario_seed != scenario.config.seed || d.building != scenario.layout.id {
            bail!(
                "{} was trained on {} (seed {}), not {} (seed {})",
                from.display(),
                d.building,
                d.scenario_seed,
                scenario.layout.id,
                scenario.config.seed
            );
        }
    }
    let mut learner = load_learner(from)?;
    learner.config = train.apply(learner.config.clone())?;
    Ok(learner)
}

fn pretrain(a: PretrainArgs) -> Result<bool> {
    let scenario = load_data(&a.data)?;
    let cfg = a.train.apply(AdaptationConfig::default())?;
    let arch = Architecture::standard(scenario.layout.n_aps(), scenario.layout.n_rps());
    let mut learner = Learner::new(arch, cfg)?;
    let key = DomainKey::new(scenario.base_device().id.clone(), 0);
    let r = learner.pretrain_offline(&domain_batch(&scenario, SplitKind::Train, &key)?)?;
    create_out(&a.out)?;
    write_json(&a.out.join("pretrain.json"), &r)?;
    let mut m = child_manifest("pretrain", &a.data, &scenario, None);
    m.event = Some(RunEvent {
        kind: EventKind::Pretrain,
        key: key.clone(),
    });
    m.outputs.push("pretrain.json".into());
    save_run(&a.out, &learner, m)?;
    println!(
        "pretrained on {key}: final loss {:.4}, training accuracy {:.1}%",
        r.curve.last().map_or(f64::NAN, |l| l.total),
        100.0 * r.train_accuracy
    );
    Ok(true)
}

fn onboard(a: OnboardArgs) -> Result<bool> {
    let scenario = load_data(&a.data)?;
    let mut learner = resume(&a.from, &a.train, &scenario)?;
    let key = DomainKey::new(a.device.clone(), a.epoch);
    let r = learner.onboard_device(&domain_batch(&scenario, SplitKind::Onboard, &key)?)?;
    create_out(&a.out)?;
    write_json(&a.out.join("onboard.json"), &r)?;
    let mut m = child_manifest("onboard", &a.data, &scenario, Some(&a.from));
    m.event = Some(RunEvent {
        kind: EventKind::Onboard,
        key: key.clone(),
    });
    m.outputs.push("onboard.json".into());
    save_run(&a.out, &learner, m)?;
    println!(
        "onboarded {key}: training accuracy {:.1}%, {} prototypes stored",
        100.0 * r.train_accuracy,
        r.prototypes_stored
    );
    Ok(true)
}

fn adapt(a: AdaptArgs) -> Result<bool> {
    let scenario = load_data(&a.data)?;
    let mut learner = resume(&a.from, &a.train, &scenario)?;
    let key = DomainKey::new(a.device.clone(), a.epoch);
    let batch = domain_batch(&scenario, SplitKind::Adapt, &key)?;
    let record = match domain_batch(&scenario, SplitKind::Test, &key) {
        Ok(probe) => {
            let (report, stats) =
                adapt_with_probe(&mut learner, &batch, &probe, &scenario.coordinates())?;
            AdaptationRecord {
                report,
                pseudo_labels: Some(stats),
            }
        }
        Err(_) => AdaptationRecord {
            report: learner.adapt_unsupervised(&batch)?,
            pseudo_labels: None,
        },
    };
    create_out(&a.out)?;
    write_json(&a.out.join(ADAPTATION), &record)?;
    let mut m = child_manifest("adapt", &a.data, &scenario, Some(&a.from));
    m.event = Some(RunEvent {
        kind: EventKind::Adapt,
        key: key.clone(),
    });
    m.outputs.push(ADAPTATION.into());
    save_run(&a.out, &learner, m)?;
    print!(
        "adapted {key}: {} pseudo labels ({:.1}% rejected), total loss {:.4}",
        record.report.pseudo_labels,
        100.0 * record.report.rejected_fraction,
        record.report.total_loss
    );
    if let Some(p) = &record.pseudo_labels {
        print!(
            ", pseudo-label error {:.3} m -> {:.3} m",
            p.before_stage1, p.after_stage1
        );
    }
    println!();
    Ok(true)
}

fn test_batches(scenario: &Scenario) -> Result<BTreeMap<DomainKey, DomainBatch>> {
    scenario
        .splits
        .iter()
        .filter(|s| s.kind == SplitKind::Test)
        .map(|s| {
            Ok((
                s.key.clone(),
                domain_batch(scenario, SplitKind::Test, &s.key)?,
            ))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<bool> {
    let scenario = load_data(&a.data)?;
    let chain = lineage(&a.from)?;
    let final_learner = load_learner(&a.from)?;
    let coords = scenario.coordinates();
    let tests = test_batches(&scenario)?;

    let mut models: Vec<(String, DomainKey, MlvaeModel)> = Vec::new();
    let mut pseudo = Vec::new();
    for anc in &chain {
        let Some(ev) = &anc.manifest.event else {
            bail!("{} records no lifecycle event", anc.dir.display());
        };
        let kind = format!("{:?}", ev.kind).to_lowercase();
        models.push((
            format!("{kind} {}", ev.key),
            ev.key.clone(),
            load_learner(&anc.dir)?.model,
        ));
        if ev.kind == EventKind::Adapt {
            let rec: AdaptationRecord = read_json(&anc.dir.join(ADAPTATION))?;
            pseudo.extend(rec.pseudo_labels);
        }
    }
    let snaps: Vec<Snapshot<'_>> = models
        .iter()
        .map(|(label, key, model)| Snapshot {
            label: label.clone(),
            introduced: key.clone(),
            model,
        })
        .collect();
    let forgetting = forgetting_report(&snaps, &tests, &coords)?;
    let report = EvalReport {
        title: format!(
            "Evaluation of {} (scenario seed {})",
            scenario.layout.id, scenario.config.seed
        ),
        seeds: [
            ("scenario".to_string(), scenario.config.seed),
            ("model".to_string(), final_learner.config.seed),
        ]
        .into_iter()
        .collect(),
        config: config_echo(&final_learner.config),
        domains: EvalReport::evaluate(&final_learner.model, &tests, &coords)?,
        pseudo_labels: pseudo,
        forgetting: Some(forgetting),
    };
    create_out(&a.out)?;
    write_json(&a.out.join(EVALUATION), &report)?;
    let mut m = child_manifest("evaluate", &a.data, &scenario, Some(&a.from));
    m.config = Some(final_learner.config.clone());
    m.outputs.push(EVALUATION.into());
    write_json(&a.out.join(MANIFEST), &m)?;
    if let Some(o) = report.overall() {
        println!(
            "evaluated {} domains: mean error {:.3} m, worst {:.3} m",
            report.domains.len(),
            o.mean,
            o.max
        );
    }
    Ok(true)
}

fn write_reports(dir: &Path, report: &EvalReport) -> Result<()> {
    create_out(dir)?;
    std::fs::write(dir.join("report.txt"), report.render_text())
        .with_context(|| format!("writing {}", dir.join("report.txt").display()))?;
    std::fs::write(dir.join("report.tsv"), report.render_tsv())
        .with_context(|| format!("writing {}", dir.join("report.tsv").display()))
}

fn report(a: ReportArgs) -> Result<bool> {
    let report: EvalReport = read_json(&a.from.join(EVALUATION))?;
    let out = a.out.unwrap_or_else(|| a.from.clone());
    write_reports(&out, &report)?;
    let manifest_path = out.join(MANIFEST);
    let mut m = if manifest_path.exists() {
        read_manifest(&out)?
    } else {
        let mut m = RunManifest::new("report");
        m.parent = Some(absolute(&a.from));
        m
    };
    for f in ["report.txt", "report.tsv"] {
        if !m.outputs.iter().any(|o| o == f) {
            m.outputs.push(f.to_string());
        }
    }
    write_json(&manifest_path, &m)?;
    println!(
        "wrote {} and {}",
        out.join("report.txt").display(),
        out.join("report.tsv").display()
    );
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let checks = gradcheck_suite(a.seed)?;
    let mut ok = true;
    for c in &checks {
        let r = &c.report;
        ok &= r.passed;
        println!(
            "{:<7} {} max rel err {:.3e} over {} params (h = {FD_STEP:e}, tol = {FD_TOLERANCE:e}){}",
            c.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked,
            r.worst_param
                .as_ref()
                .filter(|_| !r.passed)
                .map(|p| format!(", worst {}[{}]", p.block, p.index))
                .unwrap_or_default()
        );
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    if let Some(out) = &a.out {
        create_out(out)?;
        write_json(&out.join("gradcheck.json"), &checks)?;
        let mut m = RunManifest::new("gradcheck");
        m.outputs.push("gradcheck.json".into());
        m.config = None;
        write_json(&out.join(MANIFEST), &m)?;
    }
    Ok(ok)
}

fn run(a: RunArgs) -> Result<bool> {
    let scenario = load_data(&a.data)?;
    let cfg = a.train.apply(AdaptationConfig::default())?;
    let res = run_pipeline(&scenario, &cfg)?;
    create_out(&a.out)?;
    write_json(&a.out.join(EVALUATION), &res.report)?;
    write_reports(&a.out, &res.report)?;
    let mut m = child_manifest("run", &a.data, &scenario, None);
    m.outputs.extend([
        EVALUATION.to_string(),
        "report.txt".into(),
        "report.tsv".into(),
    ]);
    save_run(&a.out, &res.learner, m)?;
    if let Some(o) = res.report.overall() {
        println!(
            "run complete: {} domains, mean error {:.3} m, worst {:.3} m",
            res.report.domains.len(),
            o.mean,
            o.max
        );
    }
    Ok(true)
}
