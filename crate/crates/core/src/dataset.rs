//! Corpus ingestion, synthetic panoramas, training pairs, splits and the
//! on-disk pair cache.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::geometry::{embed_snapshot, extract_snapshot, CameraPose, EmbeddedPair, SnapshotGeometry};
use crate::image::{EquirectImage, Image, Mask, SnapshotImage};
use crate::nn::OneHotLabel;
use crate::seed;

/// Classifier training views: longitudes in degrees at latitude 0.
pub const CLASSIFIER_VIEW_LONGITUDES: [f64; 6] = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0];

/// Default minimum number of images for a class to be kept.
pub const DEFAULT_MIN_CLASS_SIZE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub image: EquirectImage,
    pub class: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OdiCorpus {
    pub items: Vec<CorpusItem>,
    pub class_names: Vec<String>,
}

impl OdiCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Item indices of every class, in corpus order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count()];
        for (i, it) in self.items.iter().enumerate() {
            out[it.class].push(i);
        }
        out
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        self.indices_by_class().iter().map(Vec::len).collect()
    }

    fn subset(&self, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self {
            items: indices.into_iter().map(|i| self.items[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }
}

/// Files rejected and classes skipped while loading a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub rejected: Vec<(PathBuf, String)>,
    pub skipped_classes: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<class>/*.png`. Class ids follow alphabetical order of the
/// non-empty class directories.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<(OdiCorpus, LoadReport)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut report = LoadReport::default();
    let mut corpus = OdiCorpus::default();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut images = Vec::new();
        for file in sorted_entries(&dir)? {
            let is_png = file.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            match EquirectImage::load_png(&file) {
                Ok(img) => images.push((img, file)),
                Err(e) => report.rejected.push((file, e.to_string())),
            }
        }
        if images.is_empty() {
            log::warn!("class directory {} has no usable images; skipped", dir.display());
            report.skipped_classes.push(name);
            continue;
        }
        let class = corpus.class_names.len();
        corpus.class_names.push(name.clone());
        for (image, file) in images {
            let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            corpus.items.push(CorpusItem { image, class, source: format!("{name}/{stem}") });
        }
    }
    Ok((corpus, report))
}

/// Drops classes with fewer than `min_size` images and renumbers the rest.
pub fn filter_min_class_size(corpus: &OdiCorpus, min_size: usize) -> OdiCorpus {
    let sizes = corpus.class_sizes();
    let mut remap = vec![None; corpus.class_count()];
    let mut names = Vec::new();
    for (c, size) in sizes.iter().enumerate() {
        if *size >= min_size {
            remap[c] = Some(names.len());
            names.push(corpus.class_names[c].clone());
        } else {
            log::warn!("class {} has {size} images (< {min_size}); excluded", corpus.class_names[c]);
        }
    }
    let items = corpus
        .items
        .iter()
        .filter_map(|it| remap[it.class].map(|class| CorpusItem { class, ..it.clone() }))
        .collect();
    OdiCorpus { items, class_names: names }
}

/// Area-weighted contributions of source indices to each output index.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Box-filter (area average) resampling to a smaller size.
pub fn downsample_image(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 || width > img.width() || height > img.height() {
        return Err(invalid(format!(
            "cannot downsample {}x{} to {width}x{height}",
            img.width(),
            img.height()
        )));
    }
    let wx = area_weights(img.width(), width);
    let wy = area_weights(img.height(), height);
    let c = img.channels();
    Ok(Image::from_fn(width, height, c, |x, y, px| {
        let mut acc = vec![0.0f64; c];
        for (sy, fy) in &wy[y] {
            for (sx, fx) in &wx[x] {
                for (a, v) in acc.iter_mut().zip(img.pixel(*sx, *sy)) {
                    *a += fy * fx * f64::from(*v);
                }
            }
        }
        for (p, a) in px.iter_mut().zip(acc) {
            *p = a as f32;
        }
    }))
}

/// Resizes every panorama to `target_width x target_width/2`.
pub fn downsample(corpus: &OdiCorpus, target_width: usize) -> Result<OdiCorpus> {
    if target_width < 2 || !target_width.is_multiple_of(2) {
        return Err(invalid(format!("target width {target_width} must be even and >= 2")));
    }
    let items = corpus
        .items
        .iter()
        .map(|it| {
            let image = if it.image.width() == target_width {
                it.image.clone()
            } else {
                EquirectImage::new(downsample_image(&it.image, target_width, target_width / 2)?)?
            };
            Ok(CorpusItem { image, ..it.clone() })
        })
        .collect::<Result<_>>()?;
    Ok(OdiCorpus { items, class_names: corpus.class_names.clone() })
}

/// Desk-scale synthetic corpus description.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    pub seed_base: u64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// A smooth sky/ground panorama whose look depends on the class.
///
/// Classes differ in hue, in the integer number of ridges along the horizon
/// and in the horizon height. Columns are sampled at pixel centres and all
/// longitude terms are either functions of `cos(mθ)` (mirror-symmetric about
/// the seam) or vanish there, so the first and last columns agree.
pub fn synth_panorama(class: usize, seed: u64, width: usize, height: usize) -> Result<EquirectImage> {
    if width != 2 * height || height == 0 {
        return Err(invalid(format!("synthetic panorama must be 2:1, got {width}x{height}")));
    }
    let mut r = seed::derived_rng(seed, "synth", class as u64);
    let hue = class as f64 * 0.618_034 + r.random_range(-0.02..0.02);
    let cycles = 2.0 + class as f64;
    let horizon = 0.5 + 0.1 * ((class % 3) as f64 - 1.0);
    let ridge = r.random_range(0.04..0.09) * if r.random::<bool>() { 1.0 } else { -1.0 };
    let bump = r.random_range(0.0..0.06);
    let bump_freq = r.random_range(1..=2) as f64;
    let bump_phase = r.random_range(0.0..2.0 * PI);
    let bright = r.random_range(0.85..1.0);
    let sky = hsv(hue, 0.35, 0.95 * bright);
    let ground = hsv(hue + 0.05, 0.7, 0.55 * bright);
    let img = Image::from_fn(width, height, 3, |x, y, px| {
        let theta = 2.0 * PI * (x as f64 + 0.5) / width as f64 - PI;
        let t = (y as f64 + 0.5) / height as f64;
        let window = ((1.0 + theta.cos()) / 2.0).powi(3);
        let line = horizon + ridge * (cycles * theta).cos() + bump * (bump_freq * theta + bump_phase).sin() * window;
        let sky_w = 1.0 / (1.0 + ((t - line) / 0.04).exp());
        let sky_shade = 1.0 - 0.25 * (1.0 - t / line.max(0.05)).clamp(0.0, 1.0);
        let ground_shade = 1.0 + 0.15 * (2.0 * cycles * theta).cos() * t;
        for c in 0..3 {
            let v = sky_w * sky[c] * sky_shade + (1.0 - sky_w) * ground[c] * ground_shade;
            px[c] = v.clamp(0.0, 1.0) as f32;
        }
    });
    EquirectImage::new(img)
}

/// `count` panoramas per class, named `class_00`, `class_01`, ...
pub fn synth_corpus(spec: SynthSpec, count: usize) -> Result<OdiCorpus> {
    let mut corpus = OdiCorpus {
        items: Vec::with_capacity(spec.classes * count),
        class_names: (0..spec.classes).map(|c| format!("class_{c:02}")).collect(),
    };
    for class in 0..spec.classes {
        for i in 0..count {
            let image = synth_panorama(class, spec.seed_base.wrapping_add(i as u64), spec.width, spec.height)?;
            corpus.items.push(CorpusItem { image, class, source: format!("class_{class:02}/{i:04}") });
        }
    }
    Ok(corpus)
}

/// One training example: the embedded snapshot `x`, the panorama `y` it was
/// taken from, and the class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub x: EmbeddedPair,
    pub y: EquirectImage,
    pub label: OneHotLabel,
    pub snapshot: SnapshotImage,
    pub source: String,
}

pub fn make_pair(item: &CorpusItem, classes: usize, pose: CameraPose, geom: SnapshotGeometry) -> Result<PairSample> {
    let snapshot = extract_snapshot(&item.image, pose, geom)?;
    let x = embed_snapshot(&snapshot, pose, geom, item.image.width(), item.image.height())?;
    Ok(PairSample {
        x,
        y: item.image.clone(),
        label: OneHotLabel::new(item.class, classes)?,
        snapshot,
        source: item.source.clone(),
    })
}

pub fn make_pairs(corpus: &OdiCorpus, pose: CameraPose, geom: SnapshotGeometry) -> Result<Vec<PairSample>> {
    corpus.items.iter().map(|it| make_pair(it, corpus.class_count(), pose, geom)).collect()
}

/// Stratified split: each class is shuffled and the first
/// `ceil(fraction · n)` go to training (at least one image stays in test for
/// classes of two or more).
pub fn split(corpus: &OdiCorpus, train_fraction: f64, seed: u64) -> Result<(OdiCorpus, OdiCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction {train_fraction} must be in (0, 1)")));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in corpus.indices_by_class().into_iter().enumerate() {
        if idx.len() < 2 {
            log::info!("class {} has {} image(s); all assigned to training", corpus.class_names[class], idx.len());
            train.extend(idx);
            continue;
        }
        idx.shuffle(&mut seed::derived_rng(seed, "split", class as u64));
        let n_train = ((train_fraction * idx.len() as f64 - 1e-9).ceil() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[n_train..]);
        idx.truncate(n_train);
        train.extend(idx);
    }
    Ok((corpus.subset(train), corpus.subset(test)))
}

/// Seeded subsample of each class to at most `max_n` images.
pub fn cap_per_class(corpus: &OdiCorpus, max_n: usize, seed: u64) -> Result<OdiCorpus> {
    if max_n == 0 {
        return Err(invalid("per-class cap must be at least 1"));
    }
    let classes: Vec<usize> = corpus.items.iter().map(|it| it.class).collect();
    Ok(corpus.subset(crate::trainer::capped_indices(&classes, max_n, seed)))
}

/// Snapshots at the given longitudes (degrees, latitude 0), each labelled
/// with its panorama's class.
pub fn classifier_views(
    corpus: &OdiCorpus,
    longitudes: &[f64],
    latitude: f64,
    geom: SnapshotGeometry,
) -> Result<Vec<(SnapshotImage, usize)>> {
    let poses: Vec<CameraPose> =
        longitudes.iter().map(|lon| CameraPose::from_degrees(*lon, latitude)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(corpus.len() * poses.len());
    for it in &corpus.items {
        for pose in &poses {
            out.push((extract_snapshot(&it.image, *pose, geom)?, it.class));
        }
    }
    Ok(out)
}

/// Which side of the split a cached pair belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

/// Pairs loaded from (or written to) a cache directory.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCache {
    pub class_names: Vec<String>,
    pub geometry: SnapshotGeometry,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<(SplitTag, PairSample)>,
}

impl PairCache {
    pub fn split(&self, tag: SplitTag) -> Vec<PairSample> {
        self.entries.iter().filter(|(t, _)| *t == tag).map(|(_, p)| p.clone()).collect()
    }
}

const MANIFEST: &str = "manifest.txt";

/// Writes `<id>_canvas.png`, `<id>_mask.png`, `<id>_target.png` per pair and
/// a `manifest.txt` with one `id<TAB>class<TAB>split` line per sample.
pub fn save_pair_cache(dir: impl AsRef<Path>, cache: &PairCache) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let g = cache.geometry;
    let mut manifest = String::new();
    writeln!(manifest, "# odigen pair cache v1").unwrap();
    writeln!(manifest, "# size {} {}", cache.width, cache.height).unwrap();
    writeln!(manifest, "# geometry {} {} {}", g.w1, g.h1, g.l).unwrap();
    writeln!(manifest, "# classes {}", cache.class_names.join(" ")).unwrap();
    for (i, (tag, p)) in cache.entries.iter().enumerate() {
        let id = format!("sample_{i:05}");
        p.x.canvas.save_png(dir.join(format!("{id}_canvas.png")))?;
        p.x.mask.save_png(dir.join(format!("{id}_mask.png")))?;
        p.y.save_png(dir.join(format!("{id}_target.png")))?;
        writeln!(manifest, "{id}\t{}\t{}", cache.class_names[p.label.index()], tag.as_str()).unwrap();
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn manifest_error(line: usize, detail: impl Into<String>) -> Error {
    invalid(format!("{MANIFEST} line {line}: {}", detail.into()))
}

pub fn load_pair_cache(dir: impl AsRef<Path>) -> Result<PairCache> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::NotFound(path));
    }
    let text = fs::read_to_string(&path)?;
    let mut header: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# ") {
            let mut parts = rest.split_whitespace().map(String::from);
            if let Some(k) = parts.next() {
                header.insert(k, parts.collect());
            }
        } else if !line.trim().is_empty() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(manifest_error(ln + 1, "expected id, class and split"));
            }
            rows.push((ln + 1, f[0].to_string(), f[1].to_string(), f[2].to_string()));
        }
    }
    let field = |k: &str, n: usize| -> Result<Vec<String>> {
        header.get(k).filter(|v| v.len() >= n).cloned().ok_or_else(|| manifest_error(0, format!("missing `{k}` header")))
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| manifest_error(0, format!("bad number `{s}`")));
    let size = field("size", 2)?;
    let (width, height) = (num(&size[0])? as usize, num(&size[1])? as usize);
    let g = field("geometry", 3)?;
    let geometry = SnapshotGeometry::new(num(&g[0])? as usize, num(&g[1])? as usize, num(&g[2])?)?;
    let class_names = field("classes", 1)?;
    let mut entries = Vec::with_capacity(rows.len());
    for (ln, id, class, tag) in rows {
        let index = class_names.iter().position(|c| *c == class).ok_or_else(|| manifest_error(ln, "unknown class"))?;
        let tag = match tag.as_str() {
            "train" => SplitTag::Train,
            "test" => SplitTag::Test,
            _ => return Err(manifest_error(ln, "split must be train or test")),
        };
        let canvas = EquirectImage::load_png(dir.join(format!("{id}_canvas.png")))?;
        let mask = Mask::load_png(dir.join(format!("{id}_mask.png")))?;
        let y = EquirectImage::load_png(dir.join(format!("{id}_target.png")))?;
        let snapshot = extract_snapshot(&y, CameraPose::front(), geometry)?;
        entries.push((
            tag,
            PairSample {
                x: EmbeddedPair { canvas, mask },
                y,
                label: OneHotLabel::new(index, class_names.len())?,
                snapshot,
                source: id,
            },
        ));
    }
    Ok(PairCache { class_names, geometry, width, height, entries })
}
