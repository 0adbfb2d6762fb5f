use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use odigen_core::dataset::{
    classifier_views, cap_per_class, downsample, filter_min_class_size, load_corpus, load_pair_cache, make_pairs,
    save_pair_cache, split, synth_corpus, CorpusItem, OdiCorpus, PairCache, PairSample, SplitTag, SynthSpec,
    CLASSIFIER_VIEW_LONGITUDES,
};
use odigen_core::evalkit::{
    continuity_metrics, fid_images, mean_continuity, recognition_rate_odi, recognition_rate_views, Classifier,
    ClassifierTarget, ContinuityReport, RecognitionSetup,
};
use odigen_core::gan::{generate, GenerateOptions};
use odigen_core::geometry::{embed_snapshot, extract_snapshot, CameraPose, SnapshotGeometry};
use odigen_core::image::{EquirectImage, Image};
use odigen_core::nn::OneHotLabel;
use odigen_core::seed;
use odigen_core::trainer::{
    accuracy, default_depth, fit, fit_classifier, load_checkpoint, load_classifier, save_checkpoint, save_classifier,
    Checkpoint, ClassifierConfig, LossHistory, TrainConfig, Variant,
};
use serde_json::json;

use crate::args::RunConfig;
use crate::CliError;

type Res<T = ()> = Result<T, CliError>;

pub fn dispatch(cfg: &RunConfig) -> Res {
    let out = cfg.required_path("out")?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    match cfg.command.as_str() {
        "synth-data" => synth_data(cfg, &out),
        "prepare" => prepare(cfg, &out),
        "train" => train(cfg, &out),
        "train-classifier" => train_classifier(cfg, &out),
        "generate" => generate_cmd(cfg, &out),
        "reproject" => reproject(cfg, &out),
        "evaluate" => evaluate(cfg, &out),
        other => Err(CliError::usage(format!("unknown subcommand {other}"))),
    }
}

fn write_json(out: &Path, name: &str, value: &serde_json::Value) -> Res {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::other(e.to_string()))?;
    fs::write(out.join(name), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn panorama_size(cfg: &RunConfig) -> Res<(usize, usize)> {
    let w: usize = cfg.get("size")?;
    if w < 4 || !w.is_multiple_of(2) {
        return Err(CliError::usage(format!("--size must be an even width >= 4, got {w}")));
    }
    Ok((w, w / 2))
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Res {
    let (width, height) = panorama_size(cfg)?;
    let spec = SynthSpec { classes: cfg.get("classes")?, width, height, seed_base: cfg.get("seed")? };
    let corpus = synth_corpus(spec, cfg.get("count")?)?;
    for it in &corpus.items {
        let path = out.join(format!("{}.png", it.source));
        fs::create_dir_all(path.parent().expect("source has a class directory"))?;
        it.image.save_png(path)?;
    }
    log::info!("wrote {} panoramas in {} classes to {}", corpus.len(), corpus.class_count(), out.display());
    Ok(())
}

fn prepare(cfg: &RunConfig, out: &Path) -> Res {
    let (width, height) = panorama_size(cfg)?;
    let (corpus, report) = load_corpus(cfg.input("corpus")?)?;
    for (path, why) in &report.rejected {
        log::warn!("skipped {}: {why}", path.display());
    }
    let corpus = filter_min_class_size(&corpus, cfg.get("min-class-size")?);
    if corpus.class_count() < 1 {
        return Err(CliError::other("no class has enough images"));
    }
    let corpus = downsample(&corpus, width)?;
    let split_seed: u64 = cfg.get("split-seed")?;
    let (mut train, test) = split(&corpus, cfg.get("split-fraction")?, split_seed)?;
    if let Some(cap) = cfg.optional::<usize>("cap")? {
        train = cap_per_class(&train, cap, split_seed)?;
    }
    let geometry = SnapshotGeometry::scaled_for_width(width);
    let mut entries = Vec::new();
    for (tag, part) in [(SplitTag::Train, &train), (SplitTag::Test, &test)] {
        entries.extend(make_pairs(part, CameraPose::front(), geometry)?.into_iter().map(|p| (tag, p)));
    }
    let cache = PairCache { class_names: corpus.class_names.clone(), geometry, width, height, entries };
    save_pair_cache(out, &cache)?;
    log::info!("{} training and {} test pairs, {} classes", train.len(), test.len(), corpus.class_count());
    Ok(())
}

fn write_history(path: &Path, h: &LossHistory) -> Res {
    let mut s = String::from("iteration\tloss_d\tloss_g_gan\tloss_g_l1\n");
    for (i, l) in h.steps.iter().enumerate() {
        s.push_str(&format!("{i}\t{}\t{}\t{}\n", l.loss_d, l.loss_g_gan, l.loss_g_l1));
    }
    fs::write(path, s)?;
    Ok(())
}

fn checkpoint_name(ckpt: &Checkpoint) -> String {
    match ckpt.class_filter {
        Some(c) => format!("generator_{}", ckpt.class_names[c]),
        None => "generator".to_string(),
    }
}

fn train(cfg: &RunConfig, out: &Path) -> Res {
    let cache = load_pair_cache(cfg.input("pairs")?)?;
    let pairs = cache.split(SplitTag::Train);
    let mut tc = TrainConfig::new(cache.width, cache.height);
    tc.variant = Variant::parse(cfg.str("variant"))
        .ok_or_else(|| CliError::usage("--variant must be conditioned, independent or specific"))?;
    tc.base_channels = cfg.get("channels")?;
    tc.pad = cfg.switch("pad")?;
    tc.iterations = cfg.get("iters")?;
    tc.batch_size = cfg.get("batch")?;
    tc.learning_rate = cfg.get("lr")?;
    tc.lambda = cfg.get("lambda")?;
    tc.depth = match cfg.str("depth") {
        "auto" => default_depth(cache.height),
        _ => cfg.get("depth")?,
    };
    tc.seed = cfg.get("seed")?;
    let results = fit(&pairs, &cache.class_names, &tc)?;
    for r in &results {
        let name = checkpoint_name(&r.checkpoint);
        save_checkpoint(&r.checkpoint, out.join(format!("{name}.ckpt")))?;
        write_history(&out.join(format!("{name}_losses.tsv")), &r.history)?;
        let n = r.history.steps.len();
        let tail = n.saturating_sub(20);
        log::info!("{name}: mean L1 over last {} iterations {:.4}", n - tail, r.history.mean_l1(tail..n));
    }
    Ok(())
}

/// Panoramas of a split as a corpus, for view extraction.
fn as_corpus(pairs: &[PairSample], class_names: &[String]) -> OdiCorpus {
    let items = pairs
        .iter()
        .map(|p| CorpusItem { image: p.y.clone(), class: p.label.index(), source: p.source.clone() })
        .collect();
    OdiCorpus { items, class_names: class_names.to_vec() }
}

fn train_classifier(cfg: &RunConfig, out: &Path) -> Res {
    let cache = load_pair_cache(cfg.input("pairs")?)?;
    let target = ClassifierTarget::parse(cfg.str("target")).ok_or_else(|| CliError::usage("--target must be odi or snapshot"))?;
    let (train, test) = (cache.split(SplitTag::Train), cache.split(SplitTag::Test));
    let labelled = |ps: &[PairSample], snap: bool| -> Vec<(Image, usize)> {
        ps.iter().map(|p| (if snap { p.snapshot.clone() } else { (*p.y).clone() }, p.label.index())).collect()
    };
    let (samples, held_out) = match target {
        ClassifierTarget::Odi => (labelled(&train, false), labelled(&test, false)),
        ClassifierTarget::Snapshot => (
            classifier_views(&as_corpus(&train, &cache.class_names), &CLASSIFIER_VIEW_LONGITUDES, 0.0, cache.geometry)?,
            labelled(&test, true),
        ),
    };
    let cc = ClassifierConfig {
        iterations: cfg.get("iters")?,
        batch_size: cfg.get("batch")?,
        learning_rate: cfg.get("lr")?,
        base_channels: cfg.get("channels")?,
        seed: cfg.get("seed")?,
        target,
    };
    let net = fit_classifier(&samples, &cache.class_names, &cc)?;
    save_classifier(&net, out.join("classifier.ckpt"))?;
    let train_acc = accuracy(&net, &samples)?;
    let test_acc = if held_out.is_empty() { None } else { Some(accuracy(&net, &held_out)?) };
    write_json(
        out,
        "report.json",
        &json!({
            "target": target.as_str(),
            "train_samples": samples.len(),
            "train_accuracy": train_acc,
            "test_samples": held_out.len(),
            "test_accuracy": test_acc,
        }),
    )
}

/// A single checkpoint file, or a directory holding `generator.ckpt` or
/// per-class `generator_<class>.ckpt` files.
fn checkpoint_files(path: &Path) -> Res<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.starts_with("generator") && name.ends_with(".ckpt")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::missing(&path.join("generator.ckpt")));
    }
    Ok(files)
}

fn load_generators(path: &Path) -> Res<Vec<Checkpoint>> {
    checkpoint_files(path)?.iter().map(|f| load_checkpoint(f).map_err(CliError::from)).collect()
}

/// The checkpoint to use for a class: the shared one, or the class's own.
fn pick(ckpts: &[Checkpoint], class: usize) -> Res<&Checkpoint> {
    ckpts
        .iter()
        .find(|c| c.class_filter.is_none_or(|f| f == class))
        .ok_or_else(|| CliError::other(format!("no generator for class {}", ckpts[0].class_names[class])))
}

fn load_optional_classifier(cfg: &RunConfig, key: &str) -> Res<Option<Classifier>> {
    match cfg.str(key) {
        "none" | "ideal" => Ok(None),
        _ => Ok(Some(Classifier::Trained(load_classifier(cfg.input(key)?)?))),
    }
}

fn generate_cmd(cfg: &RunConfig, out: &Path) -> Res {
    let ckpts = load_generators(&cfg.input("checkpoint")?)?;
    let names = ckpts[0].class_names.clone();
    let snapshot = Image::load_png(cfg.input("input")?)?;
    let (label, probs) = match cfg.str("class-from") {
        "classifier" => {
            let clf = load_optional_classifier(cfg, "classifier")?
                .ok_or_else(|| CliError::usage("--class-from classifier needs --classifier"))?;
            if clf.class_names() != names.as_slice() {
                return Err(CliError::other("classifier and generator disagree on the class list"));
            }
            let p = clf.classify(&snapshot, None)?;
            (p.class, p.probs)
        }
        s => {
            let name = s.strip_prefix("ideal:").ok_or_else(|| CliError::usage("--class-from must be classifier or ideal:<name>"))?;
            let class = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| CliError::usage(format!("unknown class `{name}`; known: {}", names.join(", "))))?;
            (class, OneHotLabel::new(class, names.len())?.to_vec())
        }
    };
    let ckpt = pick(&ckpts, label)?;
    let (w, h) = (ckpt.config.width, ckpt.config.height);
    let geom = SnapshotGeometry::scaled_for_width(w);
    let pose = CameraPose::from_degrees(cfg.get("lon")?, cfg.get("lat")?)?;
    let embedded = embed_snapshot(&snapshot, pose, geom, w, h)?;
    let options = GenerateOptions { paste_snapshot: cfg.switch("paste")? };
    let base: u64 = cfg.get("seed")?;
    let reps: usize = cfg.get("reps")?;
    let onehot = OneHotLabel::new(label, names.len())?;
    let mut files = Vec::new();
    for r in 0..reps {
        let odi = generate(&ckpt.state.generator, &embedded, onehot, seed::derive(base, "generate", r as u64), options)?;
        let name = format!("odi_{r:03}.png");
        odi.save_png(out.join(&name))?;
        files.push(name);
    }
    write_json(out, "generation.json", &json!({ "class": names[label], "probabilities": probs, "files": files }))
}

fn reproject(cfg: &RunConfig, out: &Path) -> Res {
    let odi = EquirectImage::load_png(cfg.input("input")?)?;
    let pose = CameraPose::from_degrees(cfg.get("lon")?, cfg.get("lat")?)?;
    let view = extract_snapshot(&odi, pose, SnapshotGeometry::scaled_for_width(odi.width()))?;
    view.save_png(out.join("view.png"))?;
    Ok(())
}

fn png_inputs(path: &Path) -> Res<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::other(format!("no PNG files in {}", path.display())));
    }
    Ok(files)
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Res {
    let method = cfg.str("method").to_string();
    if method == "continuity" {
        let mut per_image = BTreeMap::new();
        let mut reports: Vec<ContinuityReport> = Vec::new();
        for f in png_inputs(&cfg.input("input")?)? {
            let r = continuity_metrics(&Image::load_png(&f)?);
            per_image.insert(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), r);
            reports.push(r);
        }
        let mean = mean_continuity(&reports)?;
        return write_json(out, "report.json", &json!({ "method": method, "mean": mean, "per_image": per_image }));
    }
    if !matches!(method.as_str(), "odi" | "views" | "fid") {
        return Err(CliError::usage("--method must be odi, views, fid or continuity"));
    }
    let ckpts = load_generators(&cfg.input("checkpoint")?)?;
    let [ckpt] = ckpts.as_slice() else {
        return Err(CliError::usage("evaluation needs a single conditioned or independent generator checkpoint"));
    };
    let cache = load_pair_cache(cfg.input("pairs")?)?;
    let test = cache.split(SplitTag::Test);
    let scorer = load_classifier(cfg.input("classifier")?)?;
    let wanted = if method == "views" { ClassifierTarget::Snapshot } else { ClassifierTarget::Odi };
    if scorer.target != wanted {
        return Err(CliError::usage(format!("--method {method} needs a classifier trained with --target {}", wanted.as_str())));
    }
    let evaluator = Classifier::Trained(scorer);
    let conditioning = load_optional_classifier(cfg, "conditioning")?
        .unwrap_or_else(|| Classifier::Ideal { class_names: cache.class_names.clone() });
    if evaluator.class_names() != ckpt.class_names.as_slice() || conditioning.class_names() != ckpt.class_names.as_slice() {
        return Err(CliError::other("classifiers and generator disagree on the class list"));
    }
    let setup = RecognitionSetup {
        conditioning: &conditioning,
        evaluator: &evaluator,
        repetitions: cfg.get("reps")?,
        seed: cfg.get("seed")?,
        options: GenerateOptions { paste_snapshot: cfg.switch("paste")? },
    };
    let g = &ckpt.state.generator;
    let report = match method.as_str() {
        "odi" => serde_json::to_value(recognition_rate_odi(g, &test, &setup)?),
        "views" => serde_json::to_value(recognition_rate_views(g, &test, &setup, cfg.get("views")?, cache.geometry)?),
        _ => {
            let Classifier::Trained(features) = &evaluator else { unreachable!() };
            let real: Vec<Image> = test.iter().map(|p| (*p.y).clone()).collect();
            let mut fake = Vec::new();
            for p in &test {
                let label = conditioning.classify(&p.snapshot, Some(p.label.index()))?;
                let onehot = OneHotLabel::new(label.class, cache.class_names.len())?;
                for r in 0..setup.repetitions {
                    let noise = seed::derive(seed::derive(setup.seed, &p.source, r as u64), "fid", 0);
                    fake.push(generate(g, &p.x, onehot, noise, setup.options)?.into_inner());
                }
            }
            serde_json::to_value(fid_images(features, &real, &fake)?)
        }
    }
    .map_err(|e| CliError::other(e.to_string()))?;
    write_json(out, "report.json", &json!({ "method": method, "report": report }))
}
