//! End-to-end generation: size matching, dual inversion, injected sampling,
//! and resumable batch export of `{styled image, source mask}` pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alpha::{compute_alpha, AlphaEstimate, AlphaSampling};
use crate::attention::{select_injection_layers, InjectionPlan, LayerId, RecordRoles};
use crate::diffusion::Backbone;
use crate::error::{Error, Result};
use crate::imaging::{
    list_images, load_image, load_mask, rescale_image, rescale_mask, resize_image, save_image, save_mask, BitDepth, Image,
    InstanceMask, Interpolation,
};
use crate::inversion::{invert, run_with_injection, InversionOptions};
use crate::scalar::Scalar;
use crate::size_match::{
    compute_size_ratio_with, prepare_target, CommandDetector, Detector, NaiveDetector, RatioDirection, SizeRatio,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_COMBINATIONS: usize = 4000;
pub const DEFAULT_INJECTION_LAYERS: usize = 6;

/// How the score multiplier is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlphaMode {
    #[default]
    Adaptive,
    Fixed(f64),
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Adaptive => f.write_str("adaptive"),
            AlphaMode::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "adaptive" {
            return Ok(AlphaMode::Adaptive);
        }
        let v = s
            .strip_prefix("fixed:")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("alpha mode must be `adaptive` or `fixed:<value>`, got {s:?}")))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("fixed alpha must be positive, got {v}")));
        }
        Ok(AlphaMode::Fixed(v))
    }
}

impl TryFrom<String> for AlphaMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AlphaMode> for String {
    fn from(m: AlphaMode) -> String {
        m.to_string()
    }
}

/// Pipeline switches used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// When off, targets are not rescaled and `r_used` is 1.
    pub use_size_match: bool,
    pub alpha_mode: AlphaMode,
    /// When off, no diffusion runs: each record is the source image and
    /// mask rescaled by `1 / r`, so source cells take the target size.
    pub style_transfer: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_size_match: true,
            alpha_mode: AlphaMode::Adaptive,
            style_transfer: true,
        }
    }
}

/// Detector named in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorSpec {
    Naive(NaiveDetector),
    Command(CommandDetector),
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Naive(NaiveDetector::default())
    }
}

impl DetectorSpec {
    pub fn build<T: Scalar>(&self) -> Box<dyn Detector<T>> {
        match self {
            DetectorSpec::Naive(d) => Box::new(*d),
            DetectorSpec::Command(d) => Box::new(d.clone()),
        }
    }
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}
fn default_combinations() -> usize {
    DEFAULT_COMBINATIONS
}
fn default_layers() -> usize {
    DEFAULT_INJECTION_LAYERS
}
fn default_alpha_pairs() -> usize {
    AlphaSampling::default().n_pairs
}

/// Everything needed to produce one styled dataset for a source/target pair.
///
/// Relative paths are resolved against the manifest's directory. A path
/// naming a directory stands for the image files inside it, sorted by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub pair_id: String,
    pub src_images: Vec<PathBuf>,
    pub src_masks: Vec<PathBuf>,
    pub tgt_images: Vec<PathBuf>,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default = "default_combinations")]
    pub n_combinations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the backbone's working size.
    #[serde(default)]
    pub working_size: Option<(usize, usize)>,
    #[serde(default = "default_layers")]
    pub injection_layers: usize,
    #[serde(default = "default_alpha_pairs")]
    pub alpha_pairs: usize,
    #[serde(default)]
    pub replay_source_queries: bool,
    #[serde(default)]
    pub ratio_direction: RatioDirection,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub detector_id: Option<String>,
    #[serde(default)]
    pub size_ratio: Option<SizeRatio>,
    #[serde(default)]
    pub alpha: Option<AlphaEstimate>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn expand(paths: &[PathBuf], base: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        let p = if p.is_absolute() { p.clone() } else { base.join(p) };
        if p.is_dir() {
            out.extend(list_images(&p)?);
        } else if p.exists() {
            out.push(p);
        } else {
            return Err(Error::MissingFile(p));
        }
    }
    Ok(out)
}

/// Manifest with every path expanded and checked.
#[derive(Debug, Clone)]
pub struct ResolvedInputs {
    pub src_images: Vec<PathBuf>,
    pub src_masks: Vec<PathBuf>,
    pub tgt_images: Vec<PathBuf>,
}

impl PairManifest {
    pub fn new(pair_id: impl Into<String>, src_images: Vec<PathBuf>, src_masks: Vec<PathBuf>, tgt_images: Vec<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            pair_id: pair_id.into(),
            src_images,
            src_masks,
            tgt_images,
            detector: DetectorSpec::default(),
            n_combinations: DEFAULT_COMBINATIONS,
            seed: 0,
            working_size: None,
            injection_layers: DEFAULT_INJECTION_LAYERS,
            alpha_pairs: default_alpha_pairs(),
            replay_source_queries: false,
            ratio_direction: RatioDirection::default(),
            ablation: Ablation::default(),
            detector_id: None,
            size_ratio: None,
            alpha: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::Write {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("version {} is not supported (expected {MANIFEST_VERSION})", self.version));
        }
        if self.pair_id.is_empty() || self.pair_id.contains(['/', '\\']) {
            return bad(format!("pair_id {:?} must be a non-empty file-name-safe string", self.pair_id));
        }
        if self.n_combinations == 0 {
            return bad("n_combinations must be at least 1".into());
        }
        if self.injection_layers == 0 || self.alpha_pairs == 0 {
            return bad("injection_layers and alpha_pairs must be positive".into());
        }
        if matches!(self.working_size, Some((0, _)) | Some((_, 0))) {
            return bad("working_size must be positive".into());
        }
        if let AlphaMode::Fixed(v) = self.ablation.alpha_mode {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("fixed alpha must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Expands directories and checks that images and masks line up.
    pub fn resolve_inputs(&self) -> Result<ResolvedInputs> {
        let src_images = expand(&self.src_images, &self.base_dir)?;
        let src_masks = expand(&self.src_masks, &self.base_dir)?;
        let tgt_images = expand(&self.tgt_images, &self.base_dir)?;
        if src_images.is_empty() || tgt_images.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "pair {}: {} source and {} target images",
                self.pair_id,
                src_images.len(),
                tgt_images.len()
            )));
        }
        if src_images.len() != src_masks.len() {
            return Err(Error::Manifest(format!(
                "{} source images but {} source masks",
                src_images.len(),
                src_masks.len()
            )));
        }
        Ok(ResolvedInputs {
            src_images,
            src_masks,
            tgt_images,
        })
    }

    pub fn working_size_for<T: Scalar, B: Backbone<T> + ?Sized>(&self, backbone: &B) -> (usize, usize) {
        self.working_size.unwrap_or_else(|| backbone.working_size())
    }

    /// `r` the pipeline will apply, honouring the size-match switch.
    pub fn r_used(&self) -> Result<f64> {
        if !self.ablation.use_size_match {
            return Ok(1.0);
        }
        self.size_ratio
            .map(|s| s.r)
            .ok_or_else(|| Error::Manifest(format!("pair {}: size ratio not computed yet", self.pair_id)))
    }

    /// Alpha the pipeline will apply, honouring the alpha mode.
    pub fn alpha_used(&self) -> Result<f64> {
        match self.ablation.alpha_mode {
            AlphaMode::Fixed(v) => Ok(v),
            AlphaMode::Adaptive => self
                .alpha
                .as_ref()
                .map(|a| a.alpha)
                .ok_or_else(|| Error::Manifest(format!("pair {}: alpha not computed yet", self.pair_id))),
        }
    }

    /// One line in the column order of a per-pair summary table.
    pub fn summary_line(&self) -> String {
        let r = self.r_used().map(fmt_num).unwrap_or_else(|_| "?".into());
        let a = self.alpha_used().map(fmt_num).unwrap_or_else(|_| "?".into());
        format!("pair={} r={r} alpha={a}", self.pair_id)
    }
}

/// Shortest of one decimal or the value rounded to three decimals.
pub fn fmt_num(v: f64) -> String {
    let one = format!("{v:.1}");
    if (one.parse::<f64>().unwrap_or(f64::NAN) - v).abs() < 5e-4 {
        one
    } else {
        format!("{v:.3}")
    }
}

pub fn load_images<T: Scalar>(paths: &[PathBuf]) -> Result<Vec<Image<T>>> {
    paths.iter().map(load_image).collect()
}

pub fn load_masks(paths: &[PathBuf]) -> Result<Vec<InstanceMask>> {
    paths.iter().map(load_mask).collect()
}

/// Runs the detector on the targets and fills in `size_ratio`.
pub fn resolve_size_ratio<T: Scalar>(manifest: &mut PairManifest) -> Result<SizeRatio> {
    let inputs = manifest.resolve_inputs()?;
    let detector = manifest.detector.build::<T>();
    let src_masks = load_masks(&inputs.src_masks)?;
    let tgt_masks = inputs
        .tgt_images
        .iter()
        .map(|p| detector.detect(&load_image::<T>(p)?))
        .collect::<Result<Vec<_>>>()?;
    let ratio = compute_size_ratio_with(&src_masks, &tgt_masks, manifest.ratio_direction)?;
    manifest.detector_id = Some(detector.id());
    manifest.size_ratio = Some(ratio);
    Ok(ratio)
}

fn to_working<T: Scalar>(image: &Image<T>, size: (usize, usize)) -> Result<Image<T>> {
    if image.dims() == size {
        Ok(image.clone())
    } else {
        resize_image(image, size.0, size.1, Interpolation::Bilinear)
    }
}

/// Estimates alpha on size-matched samples and fills in `alpha`.
pub fn resolve_alpha<T: Scalar, B: Backbone<T> + ?Sized>(manifest: &mut PairManifest, backbone: &B) -> Result<AlphaEstimate> {
    let inputs = manifest.resolve_inputs()?;
    let size = manifest.working_size_for(backbone);
    let r = manifest.r_used()?;
    let layers = select_injection_layers(&backbone.attention_layers(), manifest.injection_layers)?;
    let sampling = AlphaSampling {
        n_pairs: manifest.alpha_pairs,
        seed: manifest.seed,
    };
    let picks = crate::alpha::sample_alpha_pairs(inputs.src_images.len(), inputs.tgt_images.len(), sampling);
    let src_idx: BTreeSet<usize> = picks.iter().map(|p| p.0).collect();
    let tgt_idx: BTreeSet<usize> = picks.iter().map(|p| p.1).collect();
    // Only sampled images are loaded; the rest stay as placeholders.
    let placeholder = Image::filled(size.0, size.1, 1, T::zero())?;
    let mut src = vec![placeholder.clone(); inputs.src_images.len()];
    for &i in &src_idx {
        src[i] = to_working(&load_image::<T>(&inputs.src_images[i])?, size)?;
    }
    let mut tgt = vec![placeholder; inputs.tgt_images.len()];
    for &j in &tgt_idx {
        tgt[j] = prepare_target(&load_image::<T>(&inputs.tgt_images[j])?, r, size)?;
    }
    let sched = backbone.schedule().clone();
    let est = compute_alpha(backbone, &src, &tgt, &sched, &layers, sampling)?;
    manifest.alpha = Some(est.clone());
    Ok(est)
}

/// Settings of one generation job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig<T> {
    pub alpha: T,
    pub layers: Vec<LayerId>,
    pub replay_source_queries: bool,
    pub working_size: (usize, usize),
}

/// Styles `x_src` after `x_tgt`. The target must already be prepared
/// (size-matched, at the working size); the result has the source's size.
///
/// Failures carry the name of the stage that raised them.
pub fn stylize_pair<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    x_src: &Image<T>,
    x_tgt: &Image<T>,
    m_src: &InstanceMask,
    job: &JobConfig<T>,
) -> Result<Image<T>> {
    if m_src.dims() != x_src.dims() {
        return Err(Error::stage(
            "load",
            Error::ShapeMismatch(format!("source image {:?} vs mask {:?}", x_src.dims(), m_src.dims())),
        ));
    }
    let sched = backbone.schedule().clone();
    let layer_set: BTreeSet<LayerId> = job.layers.iter().cloned().collect();
    let src_work = to_working(x_src, job.working_size).map_err(|e| Error::stage("resize_source", e))?;
    let src = invert(
        backbone,
        &src_work,
        &sched,
        InversionOptions {
            record: if job.replay_source_queries {
                RecordRoles::QUERIES
            } else {
                RecordRoles::NONE
            },
            layers: Some(&layer_set),
            keep_trajectory: false,
        },
    )
    .map_err(|e| Error::stage("invert_source", e))?;
    let tgt = invert(
        backbone,
        x_tgt,
        &sched,
        InversionOptions {
            record: RecordRoles::KEYS_VALUES,
            layers: Some(&layer_set),
            keep_trajectory: false,
        },
    )
    .map_err(|e| Error::stage("invert_target", e))?;
    let plan = InjectionPlan {
        layers: job.layers.clone(),
        alpha: job.alpha,
        source_cache: src.cache,
        target_cache: tgt.cache,
        replay_source_queries: job.replay_source_queries,
    };
    let z = run_with_injection(backbone, &src.z_t, &plan, &sched).map_err(|e| Error::stage("generate", e))?;
    let out = backbone.decode(&z).map_err(|e| Error::stage("decode", e))?;
    let (h, w) = x_src.dims();
    if out.dims() == (h, w) {
        Ok(out)
    } else {
        resize_image(&out, h, w, Interpolation::Bilinear).map_err(|e| Error::stage("resize_output", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Ok,
    Failed,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyledRecord {
    pub index: usize,
    pub status: RecordStatus,
    pub styled_image_path: PathBuf,
    /// The mask written next to the styled image.
    pub mask_path: PathBuf,
    /// The annotation it was copied from.
    pub source_mask_path: PathBuf,
    pub source_image_path: PathBuf,
    pub target_image_path: PathBuf,
    pub src_index: usize,
    pub tgt_index: usize,
    pub alpha_used: f64,
    pub r_used: f64,
    pub seed: u64,
    pub ablation: Ablation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetReport {
    pub pair_dir: PathBuf,
    /// Final state of every record, by index.
    pub records: Vec<StyledRecord>,
    pub generated: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Source index cycles through the sources; target index is drawn
/// uniformly with replacement from the manifest seed.
pub fn sample_combinations(n: usize, n_src: usize, n_tgt: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|k| (k % n_src, rng.random_range(0..n_tgt))).collect()
}

pub const JOURNAL_FILE: &str = "records.jsonl";

pub fn pair_dir(out_root: &Path, pair_id: &str) -> PathBuf {
    out_root.join(format!("pair_{pair_id}"))
}

/// Latest journal entry per record index.
pub fn read_journal(path: &Path) -> Result<BTreeMap<usize, StyledRecord>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StyledRecord>(&line) {
            Ok(r) => {
                out.insert(r.index, r);
            }
            // A torn final line from an interrupted run is ignored.
            Err(e) => log::warn!("{}:{}: skipping unreadable journal line ({e})", path.display(), n + 1),
        }
    }
    Ok(out)
}

/// Whether a journaled record was produced with the current settings.
fn same_job(a: &StyledRecord, b: &StyledRecord) -> bool {
    a.styled_image_path == b.styled_image_path
        && a.source_image_path == b.source_image_path
        && a.target_image_path == b.target_image_path
        && a.alpha_used == b.alpha_used
        && a.r_used == b.r_used
        && a.ablation == b.ablation
}

fn is_complete(r: &StyledRecord) -> bool {
    r.status == RecordStatus::Ok && r.styled_image_path.exists() && r.mask_path.exists()
}

/// Produces `n_combinations` styled records under `<out_root>/pair_<id>/`.
///
/// The manifest must carry `r` and alpha unless the ablation switches make
/// them unnecessary. Records already complete on disk are skipped; a
/// failing record is journaled with its stage and the batch continues.
pub fn generate_dataset<T: Scalar, B: Backbone<T> + ?Sized>(
    manifest: &PairManifest,
    backbone: &B,
    out_root: &Path,
    opts: &BatchOptions,
) -> Result<DatasetReport> {
    manifest.validate()?;
    let inputs = manifest.resolve_inputs()?;
    let r = manifest.r_used()?;
    let style = manifest.ablation.style_transfer;
    let alpha = if style { manifest.alpha_used()? } else { 1.0 };
    let size = manifest.working_size_for(backbone);
    let layers = select_injection_layers(&backbone.attention_layers(), manifest.injection_layers)?;
    let job = JobConfig {
        alpha: T::of(alpha),
        layers,
        replay_source_queries: manifest.replay_source_queries,
        working_size: size,
    };
    let dir = pair_dir(out_root, &manifest.pair_id);
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let journal_path = dir.join(JOURNAL_FILE);
    let previous = read_journal(&journal_path)?;
    let combos = sample_combinations(
        manifest.n_combinations,
        inputs.src_images.len(),
        inputs.tgt_images.len(),
        manifest.seed,
    );
    let record_for = |k: usize| {
        let (i, j) = combos[k];
        StyledRecord {
            index: k,
            status: RecordStatus::Ok,
            styled_image_path: dir.join("images").join(format!("{k:05}.tif")),
            mask_path: dir.join("masks").join(format!("{k:05}.tif")),
            source_mask_path: inputs.src_masks[i].clone(),
            source_image_path: inputs.src_images[i].clone(),
            target_image_path: inputs.tgt_images[j].clone(),
            src_index: i,
            tgt_index: j,
            alpha_used: alpha,
            r_used: r,
            seed: manifest.seed.wrapping_add(k as u64),
            ablation: manifest.ablation,
            stage: None,
            error: None,
        }
    };
    let todo: Vec<usize> = (0..combos.len())
        .filter(|&k| {
            previous
                .get(&k)
                .is_none_or(|p| !(is_complete(p) && same_job(p, &record_for(k))))
        })
        .collect();
    let skipped = combos.len() - todo.len();

    let journal = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(|e| Error::io(&journal_path, e))?,
    );
    let results: Mutex<Vec<StyledRecord>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let run_one = |k: usize| -> StyledRecord {
        let mut rec = record_for(k);
        let outcome = produce(&rec, backbone, &job, r, style, size);
        if let Err(e) = outcome {
            rec.status = RecordStatus::Failed;
            if let Error::Stage { stage, source } = &e {
                rec.stage = Some((*stage).to_string());
                rec.error = Some(source.to_string());
            } else {
                rec.error = Some(e.to_string());
            }
            log::warn!("record {k} failed: {e}");
        }
        rec
    };
    let worker = || -> Result<()> {
        loop {
            let n = next.fetch_add(1, Ordering::SeqCst);
            let Some(&k) = todo.get(n) else { return Ok(()) };
            let rec = run_one(k);
            let line = serde_json::to_string(&rec).expect("record serializes");
            {
                let mut j = journal.lock().expect("journal lock");
                writeln!(j, "{line}").and_then(|_| j.flush()).map_err(|e| Error::io(&journal_path, e))?;
            }
            results.lock().expect("results lock").push(rec);
        }
    };
    let workers = opts.workers.max(1).min(todo.len().max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers).map(|_| s.spawn(worker)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect::<Result<Vec<()>>>()
    })?;

    let mut finals: BTreeMap<usize, StyledRecord> = previous
        .into_iter()
        .filter(|(k, _)| *k < combos.len())
        .collect();
    let fresh = results.into_inner().expect("results lock");
    let failed = fresh.iter().filter(|r| r.status == RecordStatus::Failed).count();
    let generated = fresh.len() - failed;
    for r in fresh {
        finals.insert(r.index, r);
    }
    Ok(DatasetReport {
        pair_dir: dir,
        records: finals.into_values().collect(),
        generated,
        skipped,
        failed,
    })
}

fn produce<T: Scalar, B: Backbone<T> + ?Sized>(
    rec: &StyledRecord,
    backbone: &B,
    job: &JobConfig<T>,
    r: f64,
    style: bool,
    size: (usize, usize),
) -> Result<()> {
    let x_src = load_image::<T>(&rec.source_image_path).map_err(|e| Error::stage("load", e))?;
    let m_src = load_mask(&rec.source_mask_path).map_err(|e| Error::stage("load", e))?;
    let (image, mask) = if style {
        let x_tgt = load_image::<T>(&rec.target_image_path).map_err(|e| Error::stage("load", e))?;
        let x_tgt = prepare_target(&x_tgt, r, size).map_err(|e| Error::stage("prepare_target", e))?;
        (stylize_pair(backbone, &x_src, &x_tgt, &m_src, job)?, m_src)
    } else {
        let inv = 1.0 / r;
        let image = rescale_image(&x_src, inv, Interpolation::Bilinear).map_err(|e| Error::stage("rescale", e))?;
        let mask = rescale_mask(&m_src, inv).map_err(|e| Error::stage("rescale", e))?;
        (image, mask)
    };
    if image.dims() != mask.dims() {
        return Err(Error::stage(
            "write",
            Error::ShapeMismatch(format!("styled image {:?} vs mask {:?}", image.dims(), mask.dims())),
        ));
    }
    save_image(&image, &rec.styled_image_path, BitDepth::Sixteen).map_err(|e| Error::stage("write", e))?;
    save_mask(&mask, &rec.mask_path).map_err(|e| Error::stage("write", e))?;
    Ok(())
}
