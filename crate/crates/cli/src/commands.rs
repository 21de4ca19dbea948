use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use mitodet::classifier::{write_classifier_history, Classifier};
use mitodet::config::{parse_override, RunConfig, RunRecord};
use mitodet::data_io::{read_annotations_file, write_synthetic, Split};
use mitodet::eval::{match_detections, EvalReport};
use mitodet::image::{Image, RasterSource};
use mitodet::pipeline::{
    read_detections, render_overlay, run_wsi, sweep_thresholds, write_detections, write_sweep_csv, CandidateClassifier, CandidateProposer, ConstantClassifier,
    DetectionRow, ProposalCache, Stage, Thresholds, WsiResult, OVERLAY_GREEN,
};
use mitodet::proposer::{write_proposer_history, Proposer};
use mitodet::tiling::{crop_annotations, make_grid};
use mitodet::workflow::{oracle_proposer, train_classifier_stage, train_proposer_stage, Dataset};
use mitodet::{Error, Result};

use crate::args::{Cli, Command, EvaluateArgs, InferArgs, SweepArgs, SynthArgs, TileArgs, TrainClassifierArgs, TrainProposerArgs};

/// Resolves the configuration from defaults, `--config`, `--set`, `--seed`
/// and `--workers`, in that order.
pub fn resolve_config(cli: &Cli, extra: &[(String, String)]) -> Result<RunConfig> {
    let g = &cli.global;
    let mut pairs = match &g.config {
        Some(p) => RunConfig::load_pairs(p)?,
        None => Vec::new(),
    };
    for s in &g.set {
        pairs.push(parse_override(s)?);
    }
    pairs.extend(extra.iter().cloned());
    if let Some(seed) = g.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(w) = g.workers {
        pairs.push(("pipeline.workers".into(), w.to_string()));
    }
    RunConfig::from_pairs(&pairs)
}

/// Subcommand flags that are shorthands for configuration keys.
fn config_flags(cmd: &Command) -> Vec<(String, String)> {
    match cmd {
        Command::Synth(SynthArgs { n: Some(n), .. }) => vec![("synth.n_images".into(), n.to_string())],
        Command::Evaluate(EvaluateArgs { rule: Some(r), .. }) => vec![("data.match_rule".into(), r.clone())],
        _ => Vec::new(),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli, &config_flags(&cli.command))?;
    match &cli.command {
        Command::Synth(a) => synth(a, &cfg),
        Command::Tile(a) => tile(a, &cfg),
        Command::TrainProposer(a) => train_proposer_cmd(a, &cfg),
        Command::TrainClassifier(a) => train_classifier_cmd(a, &cfg),
        Command::Infer(a) => infer(a, &cfg),
        Command::Evaluate(a) => evaluate(a, &cfg),
        Command::Sweep(a) => sweep(a, &cfg),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn create_file(p: &Path) -> Result<fs::File> {
    fs::File::create(p).map_err(|e| Error::io(p, e))
}

fn write_run_json(out: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<()> {
    RunRecord::new(command, cfg, inputs).write(out)
}

fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    create_dir(&a.out)?;
    let m = write_synthetic(&cfg.synth, &a.out)?;
    write_run_json(&a.out, "synth", cfg, &[])?;
    let sizes: Vec<String> = Split::ALL.iter().map(|&s| format!("{}={}", s.name(), m.ids_in(s).len())).collect();
    println!("wrote {} images, {} annotations ({}) to {}", m.images.len(), m.annotations.len(), sizes.join(" "), a.out.display());
    Ok(())
}

fn tile(a: &TileArgs, cfg: &RunConfig) -> Result<()> {
    let jobs: Vec<(String, PathBuf, Vec<(f64, f64)>)> = if let Some(data) = &a.data {
        let ds = Dataset::open(data, cfg.seed)?;
        ds.manifest.images.iter().map(|e| Ok((e.id.clone(), ds.image_path(&e.id)?, ds.centers(&e.id)))).collect::<Result<_>>()?
    } else {
        let path = a.image.clone().expect("clap requires --data or --image");
        let id = stem(&path)?;
        let centers = match &a.annotations {
            Some(csv) => read_annotations_file(csv)?.into_iter().filter(|x| x.image_id == id).map(|x| (x.cx, x.cy)).collect(),
            None => Vec::new(),
        };
        vec![(id, path, centers)]
    };
    let pdir = a.out.join("patches");
    create_dir(&pdir)?;
    let mut patches = csv::Writer::from_writer(create_file(&a.out.join("patches.csv"))?);
    patches.write_record(["image_id", "patch_id", "file", "origin_x", "origin_y", "size", "valid_w", "valid_h"])?;
    let mut anns = csv::Writer::from_writer(create_file(&a.out.join("patch_annotations.csv"))?);
    anns.write_record(["image_id", "patch_id", "file", "cx", "cy", "x", "y", "w", "h", "truncated"])?;
    let (mut n_patches, mut n_anns) = (0, 0);
    for (id, path, centers) in &jobs {
        let img = Image::load(path)?;
        let grid = make_grid(img.width(), img.height(), cfg.pipeline.patch_size, cfg.pipeline.overlap)?;
        let placed = crop_annotations(&grid, centers, cfg.data.box_size)?;
        for p in &grid.patches {
            let file = p.file_name(id);
            img.crop(p.origin_x as isize, p.origin_y as isize, p.size, p.size).save_png(&pdir.join(&file))?;
            patches.write_record([id.clone(), p.id.to_string(), file.clone(), p.origin_x.to_string(), p.origin_y.to_string(), p.size.to_string(), p.valid_w.to_string(), p.valid_h.to_string()])?;
            for pa in placed.get(&p.id).into_iter().flatten() {
                let b = &pa.bbox;
                anns.write_record([id.clone(), p.id.to_string(), file.clone(), pa.cx.to_string(), pa.cy.to_string(), b.x.to_string(), b.y.to_string(), b.w.to_string(), b.h.to_string(), pa.truncated.to_string()])?;
                n_anns += 1;
            }
        }
        n_patches += grid.len();
    }
    patches.flush().map_err(|e| Error::io(&a.out, e))?;
    anns.flush().map_err(|e| Error::io(&a.out, e))?;
    let inputs: Vec<(&str, &Path)> = a.data.iter().map(|p| ("data", p.as_path())).chain(a.image.iter().map(|p| ("image", p.as_path()))).chain(a.annotations.iter().map(|p| ("annotations", p.as_path()))).collect();
    write_run_json(&a.out, "tile", cfg, &inputs)?;
    println!("wrote {n_patches} patches and {n_anns} patch annotations from {} images to {}", jobs.len(), a.out.display());
    Ok(())
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_string).ok_or_else(|| Error::InvalidInput(format!("cannot take an image id from {}", path.display())))
}

fn train_proposer_cmd(a: &TrainProposerArgs, cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::open(&a.data, cfg.seed)?;
    create_dir(&a.out)?;
    let (model, history) = train_proposer_stage(&ds, cfg)?;
    model.save(&a.out.join("proposer.safetensors"))?;
    write_proposer_history(&history, create_file(&a.out.join("proposer_history.csv"))?)?;
    write_run_json(&a.out, "train-proposer", cfg, &[("data", &a.data)])?;
    let best = history.iter().map(|e| e.val_f1).fold(f64::NAN, f64::max);
    println!("trained proposer for {} epochs (best val F1 {best:.3}); saved {}", history.len(), a.out.join("proposer.safetensors").display());
    Ok(())
}

/// A proposer checkpoint path or `oracle:<annotations.csv>`.
fn load_proposer(spec: &str, cfg: &RunConfig) -> Result<Box<dyn CandidateProposer>> {
    match spec.strip_prefix("oracle:") {
        Some(csv) => Ok(Box::new(oracle_proposer(Path::new(csv), cfg.data.box_size)?)),
        None => Ok(Box::new(Proposer::load(Path::new(spec))?)),
    }
}

/// A classifier checkpoint path, `none` or `oracle`.
fn load_classifier(spec: &str) -> Result<Option<Box<dyn CandidateClassifier>>> {
    match spec {
        "none" => Ok(None),
        "oracle" => Ok(Some(Box::new(ConstantClassifier::new(1.0)))),
        path => Ok(Some(Box::new(Classifier::load(Path::new(path))?))),
    }
}

fn train_classifier_cmd(a: &TrainClassifierArgs, cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::open(&a.data, cfg.seed)?;
    let proposer = load_proposer(&a.proposer, cfg)?;
    create_dir(&a.out)?;
    let (model, history) = train_classifier_stage(&ds, proposer.as_ref(), cfg)?;
    model.save(&a.out.join("classifier.safetensors"))?;
    write_classifier_history(&history, create_file(&a.out.join("classifier_history.csv"))?)?;
    write_run_json(&a.out, "train-classifier", cfg, &[("data", &a.data), ("proposer", Path::new(&a.proposer))])?;
    let best = history.iter().map(|e| e.val_f1).fold(f64::NAN, f64::max);
    println!("trained classifier for {} epochs (best val F1 {best:.3}); saved {}", history.len(), a.out.join("classifier.safetensors").display());
    Ok(())
}

fn infer(a: &InferArgs, cfg: &RunConfig) -> Result<()> {
    let proposer = load_proposer(&a.proposer, cfg)?;
    let classifier = load_classifier(&a.classifier)?;
    let classifier = classifier.as_deref();
    let (ddir, cdir, odir) = (a.out.join("detections"), a.out.join("caches"), a.out.join("overlays"));
    create_dir(&ddir)?;
    create_dir(&cdir)?;
    if a.overlay {
        create_dir(&odir)?;
    }
    let mut stats = csv::Writer::from_writer(create_file(&a.out.join("stats.csv"))?);
    stats.write_record(["image_id", "patches", "proposals", "rejected", "survivors", "final_detections"])?;
    let mut all = csv::WriterBuilder::new().has_headers(false).from_writer(create_file(&a.out.join("detections.csv"))?);
    all.write_record(["image_id", "x", "y", "w", "h", "score", "stage"])?;

    let mut handle = |src: &RasterSource| -> Result<WsiResult> {
        let id = mitodet::image::ImageSource::id(src).to_string();
        let res = run_wsi(src, proposer.as_ref(), classifier, &cfg.pipeline)?;
        write_detections(&id, &res.outputs, create_file(&ddir.join(format!("{id}.csv")))?)?;
        for d in &res.outputs.detections {
            all.serialize(DetectionRow::new(&id, d, Stage::Final))?;
        }
        res.cache.write_json(&cdir.join(format!("{id}.json")))?;
        let s = res.stats();
        stats.write_record([id.clone(), s.patches.to_string(), s.proposals.to_string(), s.rejected.to_string(), s.survivors.to_string(), s.final_detections.to_string()])?;
        if a.overlay {
            render_overlay(src.image(), &res.outputs.detections, OVERLAY_GREEN).save_png(&odir.join(format!("{id}.png")))?;
        }
        log::info!("{id}: {} patches, {} proposals, {} rejected, {} final", s.patches, s.proposals, s.rejected, s.final_detections);
        Ok(res)
    };

    let mut total = 0;
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(data) = &a.data {
        let ds = Dataset::open(data, cfg.seed)?;
        let ids: Vec<String> = if a.split == "all" {
            ds.manifest.images.iter().map(|e| e.id.clone()).collect()
        } else {
            ds.ids(a.split.parse::<Split>()?).to_vec()
        };
        for id in &ids {
            total += handle(&ds.source(id)?)?.detections().len();
        }
        inputs.push(("data", data));
        println!("processed {} images of split {}: {total} detections", ids.len(), a.split);
    } else {
        let path = a.image.as_ref().expect("clap requires --data or --image");
        let id = match &a.id {
            Some(id) => id.clone(),
            None => stem(path)?,
        };
        total += handle(&RasterSource::open(id, path)?)?.detections().len();
        inputs.push(("image", path));
        println!("processed 1 image: {total} detections");
    }
    stats.flush().map_err(|e| Error::io(&a.out, e))?;
    all.flush().map_err(|e| Error::io(&a.out, e))?;
    inputs.push(("proposer", Path::new(&a.proposer)));
    inputs.push(("classifier", Path::new(&a.classifier)));
    write_run_json(&a.out, "infer", cfg, &inputs)
}

/// Detection CSVs under `path`: the file itself or every `*.csv` in the directory.
fn detection_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn ground_truth(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut gts: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for a in read_annotations_file(path)? {
        gts.entry(a.image_id).or_default().push((a.cx, a.cy));
    }
    Ok(gts)
}

fn evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    let gts = ground_truth(&a.gt)?;
    let mut dets: BTreeMap<String, Vec<mitodet::geometry::Detection>> = gts.keys().map(|k| (k.clone(), Vec::new())).collect();
    for f in detection_files(&a.dets)? {
        log::debug!("reading {}", f.display());
        let rows = read_detections(create_reader(&f)?)?;
        for (i, r) in rows.into_iter().filter(|r| r.stage == Stage::Final).enumerate() {
            let d = r.to_detection(i)?;
            dets.entry(r.image_id).or_default().push(d);
        }
    }
    let none = Vec::new();
    let report = EvalReport::from_results(dets.iter().map(|(id, d)| (id.clone(), match_detections(d, gts.get(id).unwrap_or(&none), cfg.data.match_rule))).collect());
    let m = report.metrics();
    println!("P={:.3} R={:.3} F1={:.3}", m.precision, m.recall, m.f1);
    print!("{}", report.table(&format!("rule {}", cfg.data.match_rule)));
    if let Some(out) = &a.out {
        create_dir(out)?;
        report.write_csv(create_file(&out.join("report.csv"))?)?;
        write_run_json(out, "evaluate", cfg, &[("dets", &a.dets), ("gt", &a.gt)])?;
    }
    Ok(())
}

fn create_reader(p: &Path) -> Result<fs::File> {
    fs::File::open(p).map_err(|e| Error::io(p, e))
}

fn sweep(a: &SweepArgs, cfg: &RunConfig) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.caches)
        .map_err(|e| Error::io(&a.caches, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let caches = files.iter().map(|f| ProposalCache::read_json(f)).collect::<Result<Vec<_>>>()?;
    let gts: HashMap<String, Vec<(f64, f64)>> = ground_truth(&a.gt)?.into_iter().collect();
    let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let (confs, classes, merges) = (or(&a.conf, cfg.pipeline.conf_threshold), or(&a.classifier, cfg.pipeline.classifier_threshold), or(&a.merge, cfg.pipeline.merge_iou));
    let mut grid = Vec::new();
    for &conf in &confs {
        for &classifier in &classes {
            for &merge_iou in &merges {
                grid.push(Thresholds { conf, classifier, merge_iou });
            }
        }
    }
    let rows = sweep_thresholds(&caches, &grid, &gts, cfg.data.match_rule)?;
    create_dir(&a.out)?;
    write_sweep_csv(&rows, create_file(&a.out.join("sweep.csv"))?)?;
    write_run_json(&a.out, "sweep", cfg, &[("caches", &a.caches), ("gt", &a.gt)])?;
    let mut stdout = Vec::new();
    write_sweep_csv(&rows, &mut stdout)?;
    print!("{}", String::from_utf8_lossy(&stdout));
    Ok(())
}
