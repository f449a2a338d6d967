//! Real/fake training pairs for the realism critic.
//!
//! Real samples receive subtle edits, fake samples extreme ones, using the
//! per-class parameter ranges in [`RangeTable::standard`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edit_ops::{compose_edits, EditOp, EditParams, EditPermutation, EditRecipe};
use crate::error::{ForgeError, Result};
use crate::image::{ImageGrid, RegionMask};
use crate::rng::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 1.0,
            Label::Fake => 0.0,
        }
    }
}

/// Row of the range table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleClass {
    Real,
    Fake,
    FakeFace,
}

impl SampleClass {
    /// Real samples share one row regardless of faces; only fakes have a face row.
    pub fn for_label(label: Label, contains_face: bool) -> Self {
        match (label, contains_face) {
            (Label::Real, _) => SampleClass::Real,
            (Label::Fake, false) => SampleClass::Fake,
            (Label::Fake, true) => SampleClass::FakeFace,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Allowed values for one class. An operator with no intervals is disallowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRanges {
    pub exposure: Vec<Interval>,
    pub saturation: Vec<Interval>,
    pub color_curve: Vec<Interval>,
    pub white_balance: Vec<Interval>,
    /// Inclusive bounds on the number of edits.
    pub count: (usize, usize),
}

impl ClassRanges {
    pub fn intervals(&self, op: EditOp) -> &[Interval] {
        match op {
            EditOp::Exposure => &self.exposure,
            EditOp::Saturation => &self.saturation,
            EditOp::ColorCurve => &self.color_curve,
            EditOp::WhiteBalance => &self.white_balance,
        }
    }

    pub fn allows(&self, op: EditOp) -> bool {
        !self.intervals(op).is_empty()
    }

    pub fn allowed_ops(&self) -> Vec<EditOp> {
        EditOp::ALL.into_iter().filter(|op| self.allows(*op)).collect()
    }

    pub fn contains(&self, op: EditOp, v: f64) -> bool {
        self.intervals(op).iter().any(|i| i.contains(v))
    }

    /// Uniform draw over the union of intervals, each weighted by its length.
    fn sample_value(&self, op: EditOp, rng: &mut impl Rng) -> f64 {
        let ivs = self.intervals(op);
        let total: f64 = ivs.iter().map(Interval::len).sum();
        if total <= 0.0 {
            return ivs[0].lo;
        }
        let mut u = rng.gen::<f64>() * total;
        for iv in ivs {
            if u <= iv.len() {
                return iv.lo + u;
            }
            u -= iv.len();
        }
        ivs.last().expect("non-empty").hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    pub real: ClassRanges,
    pub fake: ClassRanges,
    pub fake_face: ClassRanges,
}

impl RangeTable {
    /// Subtle edits are real; extreme ones fake, with narrower fake ranges on faces.
    pub fn standard() -> Self {
        let iv = Interval::new;
        let mild = vec![iv(0.85, 1.15)];
        RangeTable {
            real: ClassRanges {
                exposure: mild.clone(),
                saturation: mild.clone(),
                color_curve: mild,
                white_balance: vec![],
                count: (1, 3),
            },
            fake: ClassRanges {
                exposure: vec![iv(0.5, 0.75), iv(1.5, 2.0)],
                saturation: vec![iv(0.0, 0.5), iv(1.5, 2.0)],
                color_curve: vec![iv(0.5, 2.0)],
                white_balance: vec![iv(0.9, 1.0)],
                count: (2, 4),
            },
            fake_face: ClassRanges {
                exposure: vec![iv(0.5, 0.75), iv(1.25, 1.5)],
                saturation: vec![iv(0.5, 0.75), iv(1.25, 1.5)],
                color_curve: vec![iv(0.5, 2.0)],
                white_balance: vec![],
                count: (2, 3),
            },
        }
    }

    pub fn class(&self, class: SampleClass) -> &ClassRanges {
        match class {
            SampleClass::Real => &self.real,
            SampleClass::Fake => &self.fake,
            SampleClass::FakeFace => &self.fake_face,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for class in [SampleClass::Real, SampleClass::Fake, SampleClass::FakeFace] {
            let r = self.class(class);
            let (lo, hi) = r.count;
            if lo == 0 || lo > hi {
                return Err(ForgeError::Config(format!("{class:?}: bad edit count range")));
            }
            for op in EditOp::ALL {
                for iv in r.intervals(op) {
                    if !(iv.lo <= iv.hi) || op.validate(iv.lo).is_err() || op.validate(iv.hi).is_err()
                    {
                        return Err(ForgeError::Config(format!(
                            "{class:?}: interval [{}, {}] invalid for {op}",
                            iv.lo, iv.hi
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("range table serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Checks that a plan could have come from the given class.
    pub fn complies(&self, class: SampleClass, perm: &EditPermutation, params: &EditParams) -> bool {
        let r = self.class(class);
        let n = params.count();
        n == perm.len()
            && n >= r.count.0
            && n <= r.count.1
            && perm.order().iter().all(|op| params.get(*op).is_some())
            && params.present().all(|(op, v)| r.contains(op, v))
    }
}

/// Draws an edit count, an ordered operator subset and values for one sample.
pub fn sample_plan(
    rng_seed: u64,
    label: Label,
    contains_face: bool,
    table: &RangeTable,
) -> Result<(EditPermutation, EditParams)> {
    let ranges = table.class(SampleClass::for_label(label, contains_face));
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (lo, hi) = ranges.count;
    if lo > hi {
        return Err(ForgeError::Config("edit count range is empty".into()));
    }
    let count = rng.gen_range(lo..=hi);
    let mut ops = ranges.allowed_ops();
    if count > ops.len() {
        return Err(ForgeError::Config(format!(
            "{count} edits requested but only {} operators are allowed",
            ops.len()
        )));
    }
    ops.shuffle(&mut rng);
    ops.truncate(count);
    let mut params = EditParams::default();
    for &op in &ops {
        params.set(op, Some(ranges.sample_value(op, &mut rng)));
    }
    Ok((EditPermutation::new(ops)?, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub contains_face: bool,
}

#[derive(Deserialize)]
struct MetaLine {
    image: String,
    #[serde(default)]
    mask: Option<String>,
    #[serde(default)]
    contains_face: bool,
}

/// A directory of `images/`, `masks/` and `meta.jsonl`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    /// Reads `meta.jsonl`; images present under `images/` but never named in
    /// the metadata are added without a mask.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let resolve = |name: &str, sub: &str| {
            if name.contains('/') {
                root.join(name)
            } else {
                root.join(sub).join(name)
            }
        };
        let mut entries = Vec::new();
        let meta = root.join("meta.jsonl");
        if meta.exists() {
            let reader = BufReader::new(fs::File::open(&meta)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let m: MetaLine = serde_json::from_str(&line).map_err(|e| {
                    ForgeError::Input(format!("{}:{}: {e}", meta.display(), lineno + 1))
                })?;
                entries.push(CorpusEntry {
                    image: resolve(&m.image, "images"),
                    mask: m.mask.as_deref().map(|s| resolve(s, "masks")),
                    contains_face: m.contains_face,
                });
            }
        }
        let images_dir = root.join("images");
        if images_dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&images_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .collect();
            files.sort();
            for f in files {
                if !entries.iter().any(|e| e.image == f) {
                    entries.push(CorpusEntry {
                        image: f,
                        mask: None,
                        contains_face: false,
                    });
                }
            }
        }
        if entries.is_empty() {
            return Err(ForgeError::Input(format!("corpus {} is empty", root.display())));
        }
        Ok(Self { root, entries })
    }

    /// Distinct base images in first-appearance order.
    pub fn images(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.image) {
                out.push(e.image.clone());
            }
        }
        out
    }

    /// Splits by base image so no image appears on both sides.
    pub fn split(&self, train_images: usize) -> (Corpus, Corpus) {
        let images = self.images();
        let train: Vec<&PathBuf> = images.iter().take(train_images).collect();
        let (a, b): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .cloned()
            .partition(|e| train.contains(&&e.image));
        (
            Corpus {
                root: self.root.clone(),
                entries: a,
            },
            Corpus {
                root: self.root.clone(),
                entries: b,
            },
        )
    }
}

/// Random ellipse or rectangle covering 2-30% of the frame.
pub fn synthetic_mask(height: usize, width: usize, rng: &mut impl Rng) -> RegionMask {
    let total = (height * width) as f64;
    for _ in 0..64 {
        let target = rng.gen_range(0.03..0.27) * total;
        let aspect = rng.gen_range(0.5..2.0);
        let ellipse = rng.gen_bool(0.5);
        let area = if ellipse { target * 4.0 / std::f64::consts::PI } else { target };
        let w = (area * aspect).sqrt().min(width as f64 - 1.0).max(2.0);
        let h = (area / w).min(height as f64 - 1.0).max(2.0);
        let cx = rng.gen_range(w / 2.0..=width as f64 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=height as f64 - h / 2.0);
        let inside = |y: usize, x: usize| {
            let dx = (x as f64 + 0.5 - cx) / (w / 2.0);
            let dy = (y as f64 + 0.5 - cy) / (h / 2.0);
            if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            }
        };
        if let Ok(m) = RegionMask::from_fn(height, width, false, |y, x| f64::from(u8::from(inside(y, x)))) {
            let frac = m.area_fraction();
            if (0.02..=0.30).contains(&frac) {
                return m;
            }
        }
    }
    // Unreachable for sides >= 8 in practice; a centred block is always in range.
    let (bh, bw) = (height / 3, width / 3);
    RegionMask::from_fn(height, width, false, |y, x| {
        f64::from(u8::from(y >= bh && y < 2 * bh && x >= bw && x < 2 * bw))
    })
    .expect("centred block is non-empty")
}

/// An image with one editable region, as consumed by the editing network.
#[derive(Clone, Debug)]
pub struct RegionItem {
    pub source: PathBuf,
    pub image: ImageGrid,
    pub mask: RegionMask,
}

const STREAM_REGION: u64 = 0x5245_4749;

impl Corpus {
    /// One item per entry; entries without a mask get a synthetic one drawn
    /// from `(seed, entry index)`. Unreadable entries are skipped with a warning.
    pub fn region_items(&self, seed: u64) -> Result<Vec<RegionItem>> {
        let mut images: HashMap<PathBuf, ImageGrid> = HashMap::new();
        let mut out = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            let item = (|| -> Result<RegionItem> {
                let image = match images.get(&entry.image) {
                    Some(img) => img.clone(),
                    None => {
                        let img = ImageGrid::load(&entry.image)?;
                        images.insert(entry.image.clone(), img.clone());
                        img
                    }
                };
                let mask = match &entry.mask {
                    Some(p) => RegionMask::load(p, entry.contains_face)?,
                    None => {
                        let mut rng = rng_for(seed, STREAM_REGION, i as u64);
                        synthetic_mask(image.height(), image.width(), &mut rng).with_contains_face(entry.contains_face)
                    }
                };
                mask.ensure_matches(&image)?;
                Ok(RegionItem { source: entry.image.clone(), image, mask })
            })();
            match item {
                Ok(item) => out.push(item),
                Err(e) => log::warn!("skipping corpus entry {}: {e}", entry.image.display()),
            }
        }
        if out.is_empty() {
            return Err(ForgeError::Input("corpus has no readable entries".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub index: usize,
    pub source: PathBuf,
    pub base: ImageGrid,
    pub mask: RegionMask,
    pub edited: ImageGrid,
    pub label: Label,
    pub perm: EditPermutation,
    pub params: EditParams,
    pub rng_seed: u64,
}

const STREAM_SAMPLE: u64 = 0x5A4D_504C;
const MAX_ATTEMPTS: u64 = 16;

/// Balanced real/fake sample stream over a corpus.
///
/// Sample `i` is real for even `i` and fake for odd `i`; all of its
/// randomness derives from `(rng_seed, i)`, so any subrange can be
/// regenerated independently.
pub struct DatasetStream<'a> {
    corpus: &'a Corpus,
    table: RangeTable,
    seed: u64,
    total: usize,
    next: usize,
    images: HashMap<PathBuf, ImageGrid>,
    masks: HashMap<PathBuf, RegionMask>,
}

pub fn generate_dataset(corpus: &Corpus, count_per_class: usize, rng_seed: u64) -> Result<DatasetStream<'_>> {
    generate_dataset_with(corpus, count_per_class, rng_seed, RangeTable::standard())
}

pub fn generate_dataset_with(
    corpus: &Corpus,
    count_per_class: usize,
    rng_seed: u64,
    table: RangeTable,
) -> Result<DatasetStream<'_>> {
    if corpus.entries.is_empty() {
        return Err(ForgeError::Input("corpus is empty".into()));
    }
    table.validate()?;
    Ok(DatasetStream {
        corpus,
        table,
        seed: rng_seed,
        total: 2 * count_per_class,
        next: 0,
        images: HashMap::new(),
        masks: HashMap::new(),
    })
}

impl DatasetStream<'_> {
    fn image(&mut self, path: &Path) -> Result<ImageGrid> {
        if let Some(img) = self.images.get(path) {
            return Ok(img.clone());
        }
        let img = ImageGrid::load(path)?;
        self.images.insert(path.to_path_buf(), img.clone());
        Ok(img)
    }

    fn mask(&mut self, path: &Path, face: bool) -> Result<RegionMask> {
        if let Some(m) = self.masks.get(path) {
            return Ok(m.clone());
        }
        let m = RegionMask::load(path, face)?;
        self.masks.insert(path.to_path_buf(), m.clone());
        Ok(m)
    }

    fn build(&mut self, index: usize, attempt: u64) -> Result<TrainingSample> {
        let label = if index.is_multiple_of(2) { Label::Real } else { Label::Fake };
        let mut rng = rng_for(self.seed, STREAM_SAMPLE, ((index as u64) << 8) | attempt);
        let entry = self.corpus.entries[rng.gen_range(0..self.corpus.entries.len())].clone();
        let base = self.image(&entry.image)?;
        let mask = match &entry.mask {
            Some(p) => self.mask(p, entry.contains_face)?,
            None => synthetic_mask(base.height(), base.width(), &mut rng).with_contains_face(entry.contains_face),
        };
        mask.ensure_matches(&base)?;
        let plan_seed = rng.gen::<u64>();
        let (perm, params) = sample_plan(plan_seed, label, mask.contains_face(), &self.table)?;
        let edited = compose_edits(&base, &params, &perm, &mask)?;
        Ok(TrainingSample {
            index,
            source: entry.image,
            base,
            mask,
            edited,
            label,
            perm,
            params,
            rng_seed: plan_seed,
        })
    }
}

impl Iterator for DatasetStream<'_> {
    type Item = Result<TrainingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let mut last_err = None;
        for attempt in 0..MAX_ATTEMPTS {
            match self.build(index, attempt) {
                Ok(s) => return Some(Ok(s)),
                Err(e @ (ForgeError::Load { .. } | ForgeError::Image(_) | ForgeError::Shape(_) | ForgeError::Precondition(_) | ForgeError::Io(_))) => {
                    log::warn!("sample {index}: skipping unreadable corpus item: {e}");
                    last_err = Some(e);
                }
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Err(ForgeError::Input(format!(
            "sample {index}: no readable corpus item after {MAX_ATTEMPTS} attempts (last: {})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: Label,
    pub source_image: String,
    pub mask_file: String,
    pub edited_file: String,
    pub contains_face: bool,
    pub recipe: EditRecipe,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub count_per_class: usize,
    pub real: usize,
    pub fake: usize,
    pub range_table_sha256: String,
    pub shards: Vec<String>,
}

/// Writes a sharded dataset directory and its `manifest.json`.
pub fn write_dataset(
    corpus: &Corpus,
    count_per_class: usize,
    rng_seed: u64,
    out_dir: impl AsRef<Path>,
    shard_size: usize,
    mut progress: impl FnMut(usize, usize),
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let shard_size = shard_size.max(1);
    fs::create_dir_all(out_dir)?;
    let table = RangeTable::standard();
    let mut manifest = DatasetManifest {
        version: 1,
        seed: rng_seed,
        count_per_class,
        real: 0,
        fake: 0,
        range_table_sha256: table.sha256(),
        shards: Vec::new(),
    };
    let total = 2 * count_per_class;
    let mut writer: Option<fs::File> = None;
    for sample in generate_dataset_with(corpus, count_per_class, rng_seed, table)? {
        let s = sample?;
        let shard = format!("shard_{:04}", s.index / shard_size);
        let shard_dir = out_dir.join(&shard);
        if s.index % shard_size == 0 {
            fs::create_dir_all(&shard_dir)?;
            writer = Some(fs::File::create(shard_dir.join("samples.jsonl"))?);
            manifest.shards.push(shard.clone());
        }
        let edited_file = format!("{shard}/edited_{:06}.png", s.index);
        let mask_file = format!("{shard}/mask_{:06}.png", s.index);
        s.edited.save(out_dir.join(&edited_file))?;
        s.mask.save(out_dir.join(&mask_file))?;
        let source_image = s
            .source
            .strip_prefix(&corpus.root)
            .unwrap_or(&s.source)
            .to_string_lossy()
            .into_owned();
        let record = SampleRecord {
            index: s.index,
            label: s.label,
            source_image,
            mask_file,
            edited_file,
            contains_face: s.mask.contains_face(),
            recipe: EditRecipe {
                perm: s.perm,
                params: s.params,
            },
            rng_seed: s.rng_seed,
        };
        let w = writer.as_mut().expect("shard opened at its first index");
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
        match s.label {
            Label::Real => manifest.real += 1,
            Label::Fake => manifest.fake += 1,
        }
        progress(s.index + 1, total);
    }
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Derived seed for the `k`-th plan of a fuzz/enumeration run.
pub fn plan_seed(seed: u64, k: u64) -> u64 {
    derive_seed(seed, 0x504C_414E, k)
}
