use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use npp_core::data::{derive_seed, load_idx, make_probe_set, remove_class, LabeledDataset, MnistPaths, ProbeSpec, Split};
use npp_core::eval::{accuracy, class_metrics, compare, forgetting_rate, timed, MiaSamples, NamedModel, RunConfigEcho};
use npp_core::format::{load_model, save_model};
use npp_core::lrp::{heatmap_file_name, propagate_full, write_heatmap_pgm};
use npp_core::path::NeuronSet;
use npp_core::perturb::{analyze as analyze_probes, perturb as perturb_set, unlearn as run_unlearn, AnalysisConfig, PerturbMode, UnlearnConfig};
use npp_core::train::{train as fit, TrainConfig};
use npp_core::{Architecture, Model, PropagationRule};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    AnalysisArgs, AnalyzeArgs, AttributeArgs, DataArgs, EvaluateArgs, PerturbArgs, ProbeArgs, SweepArgs, TrainArgs,
    UnlearnArgs,
};
use crate::exit::config;

fn mnist(data: &DataArgs) -> Result<MnistPaths> {
    let dir = data
        .data
        .as_ref()
        .ok_or_else(|| config("no dataset directory: pass --data or set NPP_DATA_DIR"))?;
    let paths = MnistPaths::in_dir(dir);
    if !paths.exist() {
        return Err(config(format!(
            "--data {}: directory must contain train-images-idx3-ubyte, train-labels-idx1-ubyte, \
             t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte",
            dir.display()
        )));
    }
    Ok(paths)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    seeds: BTreeMap<&'a str, u64>,
}

/// Writes the parsed arguments and every derived seed next to the outputs.
fn echo<A: Serialize>(path: &Path, command: &str, args: &A, seeds: BTreeMap<&str, u64>) -> Result<()> {
    write_json(
        path,
        &Echo {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            seeds,
        },
    )
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parse_rule(name: &str) -> Result<PropagationRule> {
    name.parse().map_err(|e| config(format!("--rule {name}: {e}")))
}

fn parse_mode(name: &str) -> Result<PerturbMode> {
    name.parse().map_err(|e| config(format!("--mode {name}: {e}")))
}

fn check_fraction(mp: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mp) {
        return Err(config(format!("--mp {mp}: must be within [0, 1]")));
    }
    Ok(())
}

fn probe_set(args: &ProbeArgs, test: &LabeledDataset, model: &Model, seed: u64) -> Result<LabeledDataset> {
    if args.class >= model.class_count() {
        return Err(config(format!(
            "--class {}: model has {} classes",
            args.class,
            model.class_count()
        )));
    }
    match (&args.probe_images, &args.probe_labels) {
        (Some(images), Some(labels)) => Ok(load_idx(images, labels, model.class_count(), Split::Probe)?),
        _ => {
            let spec = ProbeSpec {
                target_class: args.class,
                sample_count: args.probe_n,
                seed,
            };
            Ok(make_probe_set(test, &spec, &model.metadata().training_fingerprint)?)
        }
    }
}

fn analysis_config(args: &AnalysisArgs, class: usize) -> Result<AnalysisConfig> {
    Ok(AnalysisConfig {
        target_class: class,
        rule: parse_rule(&args.rule)?,
        layer: args.layer,
        k: args.k,
    })
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let paths = mnist(&args.data)?;
    let arch: Architecture = args
        .arch
        .parse()
        .map_err(|e| config(format!("--arch {}: {e}", args.arch)))?;
    let mut data = paths.load_train()?;
    if let Some(class) = args.exclude_class {
        data = remove_class(&data, class).map_err(|e| config(format!("--exclude-class {class}: {e}")))?;
    }
    if let Some(n) = args.limit {
        data = data.take(n);
    }
    let input_shape = data
        .samples()
        .first()
        .ok_or_else(|| config("training set is empty"))?
        .input
        .shape()
        .to_vec();
    let seeds = BTreeMap::from([
        ("init", derive_seed(args.seed, "init")),
        ("train", derive_seed(args.seed, "train")),
    ]);
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        seed: seeds["train"],
    };
    config.validate().map_err(|e| crate::exit::config(e.to_string()))?;

    let model = Model::build(&arch, &input_shape, data.class_count(), seeds["init"])?;
    let mut meta = model.metadata().clone();
    meta.name = model_name(&args.out);
    let (model, t) = timed(|| fit(&model.with_metadata(meta), &data, &config));
    let model = model?;
    info!("trained in {t:.1}s");

    save_model(&model, &args.out)?;
    let sources = vec![
        paths.train_images.display().to_string(),
        paths.train_labels.display().to_string(),
    ];
    write_json(&sibling(&args.out, "manifest.json"), &data.manifest(sources))?;
    echo(&sibling(&args.out, "config.json"), "train", args, seeds)?;

    let test_acc = accuracy(&model, &paths.load_test()?)?;
    println!("test accuracy {test_acc:.4}");
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let paths = mnist(&args.data)?;
    let test = paths.load_test()?;
    let seeds = BTreeMap::from([("probe", derive_seed(args.seed, "probe"))]);
    let probe = probe_set(&args.probe, &test, &model, seeds["probe"])?;
    let config = analysis_config(&args.analysis, args.probe.class)?;
    let (set, t) = timed(|| analyze_probes(&model, &probe, &config));
    let set = set?;

    create_dir(&args.out_dir)?;
    fs::write(args.out_dir.join("neuron_set.json"), set.to_json()?)
        .with_context(|| format!("writing neuron set into {}", args.out_dir.display()))?;
    write_json(
        &args.out_dir.join("probe.manifest.json"),
        &probe.manifest(vec![format!("{}", test.split())]),
    )?;
    echo(&args.out_dir.join("config.json"), "analyze", args, seeds)?;
    println!(
        "layer {} width {}: z = {} distinct neurons over {} probes ({t:.2}s)",
        set.layer_index,
        set.width,
        set.z(),
        set.probe_count
    );
    Ok(())
}

pub fn perturb(args: &PerturbArgs) -> Result<()> {
    check_fraction(args.mp)?;
    let mode = parse_mode(&args.mode)?;
    let model = load_model(&args.model)?;
    let text = fs::read_to_string(&args.neuron_set)
        .with_context(|| format!("reading {}", args.neuron_set.display()))?;
    let set = NeuronSet::from_json(&text)?;
    let out = perturb_set(&model, &set, args.mp, mode)?;

    create_dir(&args.out_dir)?;
    save_model(&out.model, args.out_dir.join("model.nppm"))?;
    fs::write(args.out_dir.join("mask.json"), out.mask.to_json()?)
        .with_context(|| format!("writing mask into {}", args.out_dir.display()))?;
    echo(&args.out_dir.join("config.json"), "perturb", args, BTreeMap::new())?;
    println!(
        "perturbed {} of {} neurons in layer {}",
        out.selection.positions.len(),
        set.width,
        set.layer_index
    );
    Ok(())
}

pub fn unlearn(args: &UnlearnArgs) -> Result<()> {
    check_fraction(args.mp)?;
    let mode = parse_mode(&args.mode)?;
    let analysis = analysis_config(&args.analysis, args.probe.class)?;
    let model = load_model(&args.model)?;
    let paths = mnist(&args.data)?;
    let test = paths.load_test()?;
    let seeds = BTreeMap::from([
        ("probe", derive_seed(args.seed, "probe")),
        ("mia", derive_seed(args.seed, "mia")),
    ]);
    let probe = probe_set(&args.probe, &test, &model, seeds["probe"])?;
    let config = UnlearnConfig {
        analysis,
        m_p: args.mp,
        mode,
    };
    let (outcome, t) = timed(|| run_unlearn(&model, &probe, &config));
    let outcome = outcome?;
    info!("unlearned in {t:.2}s");

    create_dir(&args.out_dir)?;
    save_model(&outcome.model, args.out_dir.join("model.nppm"))?;
    fs::write(args.out_dir.join("mask.json"), outcome.mask.to_json()?)?;
    fs::write(args.out_dir.join("neuron_set.json"), outcome.neuron_set.to_json()?)?;

    let train_set = paths.load_train()?;
    let mia = MiaSamples::from_splits(&train_set, &test, args.probe.class, args.mia.mia_n, seeds["mia"])?;
    let rows = [
        NamedModel {
            name: "original".into(),
            model: &model,
            t_seconds: 0.0,
            config: RunConfigEcho::default(),
        },
        NamedModel {
            name: "unlearned".into(),
            model: &outcome.model,
            t_seconds: t,
            config: RunConfigEcho {
                rule: Some(analysis.rule.name()),
                k: Some(analysis.k),
                m_p: Some(args.mp),
                layer: Some(outcome.neuron_set.layer_index),
                mode: Some(mode.to_string()),
                seed: Some(args.seed),
            },
        },
    ];
    let report = compare(&rows, &test, args.probe.class, &mia.inputs())?;
    fs::write(args.out_dir.join("report.json"), report.to_json()?)?;
    echo(&args.out_dir.join("config.json"), "unlearn", args, seeds)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let paths = mnist(&args.data)?;
    let models = args
        .models
        .iter()
        .map(|p| load_model(p).map(|m| (model_name(p), m)))
        .collect::<Result<Vec<_>, _>>()?;
    let test = paths.load_test()?;
    let train_set = paths.load_train()?;
    let seeds = BTreeMap::from([("mia", derive_seed(args.seed, "mia"))]);
    let mia = MiaSamples::from_splits(&train_set, &test, args.class, args.mia.mia_n, seeds["mia"])?;
    let rows: Vec<NamedModel<'_>> = models
        .iter()
        .map(|(name, model)| NamedModel {
            name: name.clone(),
            model,
            t_seconds: 0.0,
            config: RunConfigEcho::default(),
        })
        .collect();
    let report = compare(&rows, &test, args.class, &mia.inputs())?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&args.out, report.to_json()?).with_context(|| format!("writing {}", args.out.display()))?;
    echo(&sibling(&args.out, "config.json"), "evaluate", args, seeds)?;
    print!("{}", report.to_text());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    rule: String,
    k: usize,
    mp: f64,
    #[serde(rename = "A_g")]
    a_g: f64,
    #[serde(rename = "A_t")]
    a_t: f64,
    #[serde(rename = "Fr")]
    fr: f64,
    #[serde(rename = "T_seconds")]
    t_seconds: f64,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let rules = args.rules.iter().map(|r| parse_rule(r)).collect::<Result<Vec<_>>>()?;
    for &mp in &args.mps {
        check_fraction(mp)?;
    }
    if args.ks.is_empty() || args.mps.is_empty() || rules.is_empty() {
        return Err(config("--rules, --k and --mp each need at least one value"));
    }
    let model = load_model(&args.model)?;
    let paths = mnist(&args.data)?;
    let test = paths.load_test()?;
    let train_set = paths.load_train()?;
    let seeds = BTreeMap::from([
        ("probe", derive_seed(args.seed, "probe")),
        ("mia", derive_seed(args.seed, "mia")),
    ]);
    let probe = probe_set(&args.probe, &test, &model, seeds["probe"])?;
    let mia = MiaSamples::from_splits(&train_set, &test, args.probe.class, args.mia.mia_n, seeds["mia"])?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| config(format!("--jobs: {e}")))?;
    let combos: Vec<(PropagationRule, usize)> = rules
        .iter()
        .flat_map(|&r| args.ks.iter().map(move |&k| (r, k)))
        .collect();
    let out_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    create_dir(&out_dir)?;
    let stem = model_name(&args.out);

    let rows: Vec<Vec<SweepRow>> = pool.install(|| {
        combos
            .par_iter()
            .map(|&(rule, k)| -> Result<Vec<SweepRow>> {
                let config = AnalysisConfig {
                    target_class: args.probe.class,
                    rule,
                    layer: args.layer,
                    k,
                };
                let (set, t_analyze) = timed(|| analyze_probes(&model, &probe, &config));
                let set = set?;
                let name = format!("{stem}-{}-k{k}.neuron_set.json", rule.name());
                fs::write(out_dir.join(name), set.to_json()?)?;
                args.mps
                    .iter()
                    .map(|&mp| {
                        let (out, t_perturb) = timed(|| perturb_set(&model, &set, mp, mode));
                        let out = out?;
                        let metrics = class_metrics(&out.model, &test, args.probe.class)?;
                        let fr = forgetting_rate(&out.model, &mia.inputs())?;
                        info!("{} k={k} mp={mp}: A_t {:.3} A_g {:.3} Fr {fr:.3}", rule.name(), metrics.a_t, metrics.a_g);
                        Ok(SweepRow {
                            rule: rule.name(),
                            k,
                            mp,
                            a_g: metrics.a_g,
                            a_t: metrics.a_t,
                            fr,
                            t_seconds: t_analyze + t_perturb,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;

    let mut writer = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    for row in rows.iter().flatten() {
        writer.serialize(row)?;
    }
    writer.flush()?;
    echo(&sibling(&args.out, "config.json"), "sweep", args, seeds)?;
    println!("{} rows written to {}", rows.iter().map(Vec::len).sum::<usize>(), args.out.display());
    Ok(())
}

pub fn attribute(args: &AttributeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let rules = args.rules.iter().map(|r| parse_rule(r)).collect::<Result<Vec<_>>>()?;
    let test = mnist(&args.data)?.load_test()?;
    if let Some(&bad) = args.indices.iter().find(|&&i| i >= test.len()) {
        return Err(config(format!("--index {bad}: test split has {} samples", test.len())));
    }
    if let Some(c) = args.class.filter(|&c| c >= model.class_count()) {
        return Err(config(format!("--class {c}: model has {} classes", model.class_count())));
    }
    create_dir(&args.out_dir)?;
    let mut written = 0;
    for &i in &args.indices {
        let sample = &test.samples()[i];
        let target = args.class.unwrap_or(sample.label);
        for rule in &rules {
            let stack = propagate_full(&model, &sample.input, rule, target)?;
            let path = args.out_dir.join(heatmap_file_name(&format!("test-{i}"), rule));
            write_heatmap_pgm(&stack.input, &path)?;
            written += 1;
        }
    }
    echo(&args.out_dir.join("config.json"), "attribute", args, BTreeMap::new())?;
    println!("{written} heatmaps written to {}", args.out_dir.display());
    Ok(())
}
