//! Annotation CSVs, dataset manifests, image-level splits and the synthetic
//! corpus generator.

mod synth;

pub use synth::{generate_synthetic, image_id, Distractor, DistractorKind, SynthConfig, SynthImage};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::DetSample;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;
use crate::tiling::make_grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub cx: f64,
    pub cy: f64,
    pub label: String,
}

impl Annotation {
    pub const MITOSIS: &'static str = "mitosis";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Path relative to the images root.
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
    /// Split name to image ids.
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetManifest {
    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }

    pub fn ids_in(&self, split: Split) -> &[String] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn annotations_for(&self, id: &str) -> Vec<&Annotation> {
        self.annotations.iter().filter(|a| a.image_id == id).collect()
    }

    pub fn centers_for(&self, id: &str) -> Vec<(f64, f64)> {
        self.annotations.iter().filter(|a| a.image_id == id).map(|a| (a.cx, a.cy)).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Deserialize)]
struct AnnotationRow {
    image_id: String,
    cx: f64,
    cy: f64,
    label: String,
}

/// Parses an `image_id,cx,cy,label` CSV. Malformed rows are reported with
/// their line numbers; exact duplicates are dropped with a warning.
pub fn read_annotations<R: Read>(input: R) -> Result<Vec<Annotation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != ["image_id", "cx", "cy", "label"] {
        return Err(Error::Data(format!("annotation header must be image_id,cx,cy,label, got {}", header.join(","))));
    }
    let mut out: Vec<Annotation> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut errors = Vec::new();
    for (i, row) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let line = i + 2;
        match row {
            Ok(r) if r.cx.is_finite() && r.cy.is_finite() && !r.image_id.is_empty() => {
                let key = (r.image_id.clone(), r.cx.to_bits(), r.cy.to_bits(), r.label.clone());
                if !seen.insert(key) {
                    log::warn!("annotation line {line}: duplicate row dropped");
                    continue;
                }
                out.push(Annotation { image_id: r.image_id, cx: r.cx, cy: r.cy, label: r.label });
            }
            Ok(_) => errors.push(format!("line {line}: empty id or non-finite coordinate")),
            Err(e) => errors.push(format!("line {line}: {e}")),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Data(format!("malformed annotations: {}", errors.join("; "))));
    }
    Ok(out)
}

pub fn read_annotations_file(path: &Path) -> Result<Vec<Annotation>> {
    read_annotations(fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_annotations<W: Write>(anns: &[Annotation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "cx", "cy", "label"])?;
    for a in anns {
        w.write_record([a.image_id.clone(), a.cx.to_string(), a.cy.to_string(), a.label.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<annotations>", e))?;
    Ok(())
}

pub fn write_annotations_file(anns: &[Annotation], path: &Path) -> Result<()> {
    write_annotations(anns, fs::File::create(path).map_err(|e| Error::io(path, e))?)
}

/// Builds a manifest from an annotation CSV and a directory of PNG images
/// named `<image_id>.png`. Images without annotations are kept.
pub fn load_manifest(annotations: &Path, images_root: &Path) -> Result<DatasetManifest> {
    let anns = read_annotations_file(annotations)?;
    let mut images = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(images_root)
        .map_err(|e| Error::io(images_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    entries.sort();
    for p in entries {
        let id = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::Data(format!("bad image name {}", p.display())))?.to_string();
        let (w, h) = image::image_dimensions(&p)?;
        let rel = p.strip_prefix(images_root).unwrap_or(&p).to_path_buf();
        images.push(ImageEntry { id, path: rel, width: w as usize, height: h as usize });
    }
    let known: BTreeMap<&str, &ImageEntry> = images.iter().map(|e| (e.id.as_str(), e)).collect();
    let missing: BTreeSet<&str> = anns.iter().map(|a| a.image_id.as_str()).filter(|id| !known.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("annotations reference missing images: {}", missing.into_iter().collect::<Vec<_>>().join(", "))));
    }
    let bad: Vec<String> = anns
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let e = known[a.image_id.as_str()];
            !(a.cx >= 0.0 && a.cy >= 0.0 && a.cx < e.width as f64 && a.cy < e.height as f64)
        })
        .map(|(i, a)| format!("row {} ({}, {}) outside {}", i + 2, a.cx, a.cy, a.image_id))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Data(format!("annotation centers out of bounds: {}", bad.join("; "))));
    }
    Ok(DatasetManifest { images, annotations: anns, splits: BTreeMap::new() })
}

/// Image-level split at 7:1:2, stratified by annotation-count tercile.
pub fn split(manifest: &DatasetManifest, seed: u64) -> DatasetManifest {
    let n = manifest.images.len();
    let fractions = [0.7, 0.1, 0.2];
    let mut targets = [(0.7 * n as f64).round() as usize, (0.1 * n as f64).round() as usize, 0];
    targets[1] = targets[1].min(n - targets[0]);
    targets[2] = n - targets[0] - targets[1];

    let mut counted: Vec<(usize, &str)> = manifest.images.iter().map(|e| (manifest.annotations.iter().filter(|a| a.image_id == e.id).count(), e.id.as_str())).collect();
    counted.sort();
    let strata: Vec<Vec<&str>> = (0..3).map(|t| counted[t * n / 3..(t + 1) * n / 3].iter().map(|&(_, id)| id).collect()).collect();

    // Largest-remainder apportionment of the global targets over the strata.
    let mut quota = [[0usize; 3]; 3];
    let mut rems = Vec::new();
    for (s, ids) in strata.iter().enumerate() {
        for k in 0..3 {
            let ideal = fractions[k] * ids.len() as f64;
            quota[s][k] = ideal.floor() as usize;
            rems.push((ideal - ideal.floor(), s, k));
        }
    }
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let left_s = |q: &[[usize; 3]; 3], s: usize| strata[s].len() - q[s].iter().sum::<usize>();
    let left_k = |q: &[[usize; 3]; 3], k: usize| targets[k] - (0..3).map(|s| q[s][k]).sum::<usize>();
    for pass in 0..2 {
        for &(_, s, k) in &rems {
            while left_s(&quota, s) > 0 && left_k(&quota, k) > 0 {
                quota[s][k] += 1;
                if pass == 0 {
                    break;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: BTreeMap<Split, Vec<String>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for (s, ids) in strata.iter().enumerate() {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter();
        for (k, sp) in Split::ALL.iter().enumerate() {
            splits.get_mut(sp).expect("all splits").extend(it.by_ref().take(quota[s][k]).map(str::to_string));
        }
    }
    for v in splits.values_mut() {
        v.sort();
    }
    DatasetManifest { splits, ..manifest.clone() }
}

/// Writes a generated corpus as `images/<id>.png`, `annotations.csv` and a
/// split `manifest.json` under `out`.
pub fn write_synthetic(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let corpus = generate_synthetic(cfg)?;
    corpus.par_iter().try_for_each(|s| s.image.save_png(&images_dir.join(format!("{}.png", s.id))))?;
    let anns: Vec<Annotation> = corpus.iter().flat_map(|s| s.annotations.iter().cloned()).collect();
    write_annotations_file(&anns, &out.join("annotations.csv"))?;
    let images = corpus.iter().map(|s| ImageEntry { id: s.id.clone(), path: PathBuf::from(format!("{}.png", s.id)), width: cfg.size, height: cfg.size }).collect();
    let manifest = split(&DatasetManifest { images, annotations: anns, splits: BTreeMap::new() }, cfg.seed);
    manifest.write_json(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Detector training samples for every patch of the standard grid. Targets
/// are the annotations whose center lies in the patch, as `box_size` boxes
/// clipped to the patch.
pub fn patch_samples(image: &Image, centers: &[(f64, f64)], patch_size: usize, overlap: f64, box_size: f64) -> Result<Vec<DetSample>> {
    let grid = make_grid(image.width(), image.height(), patch_size, overlap)?;
    let mut out = Vec::with_capacity(grid.len());
    for p in &grid.patches {
        let (ox, oy) = (p.origin_x as f64, p.origin_y as f64);
        let inner = p.interior();
        let boxes = centers
            .iter()
            .filter(|&&(cx, cy)| cx >= inner.x && cx < inner.x2() && cy >= inner.y && cy < inner.y2())
            .filter_map(|&(cx, cy)| BBox::centered(cx - ox, cy - oy, box_size).ok()?.clip(p.valid_w as f64, p.valid_h as f64))
            .collect();
        out.push(DetSample { image: image.crop(p.origin_x as isize, p.origin_y as isize, patch_size, patch_size), boxes });
    }
    Ok(out)
}
