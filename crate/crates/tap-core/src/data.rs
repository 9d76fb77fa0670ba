//! Data pipeline: IDX and CSV loaders, cross-modal dataset assembly, the
//! labeled/reference/eval split, and offline synthetic corpus generators.
//!
//! A [`ModalDataset`] holds two views of every row — primary features `X` (the
//! modality the classifier reads) and secondary features `Z` (the modality the
//! reference bank is drawn from) — plus integer labels. The split API enforces
//! the protocol's information boundaries at the type level: labeled and eval rows
//! expose only `(X, y)`, reference rows expose only `Z`.

use crate::error::{Result, TapError};
use crate::scalar::{cast, Scalar};
use crate::stats;
use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

pub const DEFAULT_N_LABELED: usize = 200;
pub const DEFAULT_N_REFERENCE: usize = 1000;

// ── Dataset naming and shape invariants ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    /// 28×28 grayscale digits split into halves: upper 392 pixels are X,
    /// lower 392 pixels are Z; 10 classes.
    MnistHalf,
    /// Wearable-sensor activity recognition: 208 EDA features are X,
    /// 151 TEB features are Z; 4 classes.
    Activity,
    /// Crop typing: 76 optical features are X, 98 radar features are Z; 7 classes.
    Crop,
}

impl DatasetName {
    /// (d_x, d_z, class_count) contract for each known dataset.
    pub fn expected_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetName::MnistHalf => (392, 392, 10),
            DatasetName::Activity => (208, 151, 4),
            DatasetName::Crop => (76, 98, 7),
        }
    }

    /// Tabular modalities are z-scored; pixel halves are already scaled to [0,1].
    pub fn standardize_by_default(&self) -> bool {
        !matches!(self, DatasetName::MnistHalf)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::MnistHalf => "mnist_half",
            DatasetName::Activity => "activity",
            DatasetName::Crop => "crop",
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetName {
    type Err = TapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist_half" => Ok(DatasetName::MnistHalf),
            "activity" => Ok(DatasetName::Activity),
            "crop" => Ok(DatasetName::Crop),
            other => Err(TapError::Config(format!(
                "unknown dataset '{other}' (expected mnist_half, activity, or crop)"
            ))),
        }
    }
}

/// Paired-modality dataset with integer labels.
#[derive(Debug, Clone)]
pub struct ModalDataset<F: Scalar> {
    pub name: DatasetName,
    x: Vec<F>,
    z: Vec<F>,
    y: Vec<usize>,
    n: usize,
    d_x: usize,
    d_z: usize,
    class_count: usize,
}

impl<F: Scalar> ModalDataset<F> {
    pub fn new(
        name: DatasetName,
        x: Vec<F>,
        z: Vec<F>,
        y: Vec<usize>,
        d_x: usize,
        d_z: usize,
    ) -> Result<Self> {
        let (ex, ez, classes) = name.expected_shape();
        if d_x != ex || d_z != ez {
            return Err(TapError::Data(format!(
                "{name}: expected d_x={ex}, d_z={ez}; got d_x={d_x}, d_z={d_z}"
            )));
        }
        let n = y.len();
        if n == 0 {
            return Err(TapError::Data(format!("{name}: empty dataset")));
        }
        if x.len() != n * d_x || z.len() != n * d_z {
            return Err(TapError::Data(format!(
                "{name}: row count mismatch (n={n}, |X|={}, |Z|={})",
                x.len(),
                z.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(TapError::Data(format!(
                "{name}: label {bad} out of range [0, {classes})"
            )));
        }
        if !x.iter().chain(z.iter()).all(|v| v.is_finite()) {
            return Err(TapError::Data(format!("{name}: non-finite feature values")));
        }
        Ok(ModalDataset {
            name,
            x,
            z,
            y,
            n,
            d_x,
            d_z,
            class_count: classes,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn label(&self, row: usize) -> usize {
        self.y[row]
    }
}

// ── IDX format ────────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Read an IDX3 image file: big-endian magic 2051, count, rows, cols, then
/// row-major u8 pixels. Pixels are scaled to [0, 1] by /255.
pub fn load_idx_images<F: Scalar>(path: &Path) -> Result<(Vec<F>, usize, usize, usize)> {
    let mut file =
        std::fs::File::open(path).map_err(|e| TapError::io(path.display().to_string(), e))?;
    let magic = file
        .read_u32::<BigEndian>()
        .map_err(|_| TapError::idx(path.display().to_string(), "truncated header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(TapError::idx(
            path.display().to_string(),
            format!("bad magic {magic} (expected {IDX_IMAGES_MAGIC})"),
        ));
    }
    let count = file
        .read_u32::<BigEndian>()
        .map_err(|_| TapError::idx(path.display().to_string(), "truncated header"))?
        as usize;
    let rows = file
        .read_u32::<BigEndian>()
        .map_err(|_| TapError::idx(path.display().to_string(), "truncated header"))?
        as usize;
    let cols = file
        .read_u32::<BigEndian>()
        .map_err(|_| TapError::idx(path.display().to_string(), "truncated header"))?
        as usize;
    let mut raw = vec![0u8; count * rows * cols];
    file.read_exact(&mut raw).map_err(|_| {
        TapError::idx(
            path.display().to_string(),
            format!("truncated pixel payload (expected {} bytes)", raw.len()),
        )
    })?;
    let scale = cast::<F>(1.0 / 255.0);
    let data = raw.iter().map(|&b| cast::<F>(b as f64) * scale).collect();
    Ok((data, count, rows, cols))
}

/// Read an IDX1 label file: big-endian magic 2049, count, then u8 labels.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut file =
        std::fs::File::open(path).map_err(|e| TapError::io(path.display().to_string(), e))?;
    let magic = file
        .read_u32::<BigEndian>()
        .map_err(|_| TapError::idx(path.display().to_string(), "truncated header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(TapError::idx(
            path.display().to_string(),
            format!("bad magic {magic} (expected {IDX_LABELS_MAGIC})"),
        ));
    }
    let count = file
        .read_u32::<BigEndian>()
        .map_err(|_| TapError::idx(path.display().to_string(), "truncated header"))?
        as usize;
    let mut raw = vec![0u8; count];
    file.read_exact(&mut raw).map_err(|_| {
        TapError::idx(
            path.display().to_string(),
            format!("truncated label payload (expected {count} bytes)"),
        )
    })?;
    Ok(raw.iter().map(|&b| b as usize).collect())
}

pub fn write_idx_images(
    path: &Path,
    pixels: &[u8],
    count: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(count as u32).to_be_bytes());
    buf.extend_from_slice(&(rows as u32).to_be_bytes());
    buf.extend_from_slice(&(cols as u32).to_be_bytes());
    buf.extend_from_slice(pixels);
    std::fs::write(path, buf).map_err(|e| TapError::io(path.display().to_string(), e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    std::fs::write(path, buf).map_err(|e| TapError::io(path.display().to_string(), e))
}

/// Assemble the half-image cross-modal dataset from 28×28 IDX files: the upper
/// 14 rows (392 pixels) become X, the lower 14 rows become Z.
pub fn load_mnist_half<F: Scalar>(images: &Path, labels: &Path) -> Result<ModalDataset<F>> {
    let (pixels, count, rows, cols) = load_idx_images::<F>(images)?;
    if rows != 28 || cols != 28 {
        return Err(TapError::idx(
            images.display().to_string(),
            format!("expected 28×28 images, got {rows}×{cols}"),
        ));
    }
    let y = load_idx_labels(labels)?;
    if y.len() != count {
        return Err(TapError::Data(format!(
            "image/label count mismatch: {count} images vs {} labels",
            y.len()
        )));
    }
    let half = 14 * 28;
    let mut x = Vec::with_capacity(count * half);
    let mut z = Vec::with_capacity(count * half);
    for i in 0..count {
        let img = &pixels[i * 784..(i + 1) * 784];
        x.extend_from_slice(&img[..half]);
        z.extend_from_slice(&img[half..]);
    }
    ModalDataset::new(DatasetName::MnistHalf, x, z, y, half, half)
}

// ── CSV tabular loading ───────────────────────────────────────────────────────

/// Column schema mapping a headered CSV onto the two modalities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: DatasetName,
    pub label_column: String,
    pub primary_columns: Vec<String>,
    pub secondary_columns: Vec<String>,
    /// Explicit label vocabulary in class-index order; when absent the sorted
    /// distinct label values define the classes.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:03}")).collect()
}

/// Default schema for the wearable-sensor dataset (208 EDA / 151 TEB columns).
pub fn activity_schema() -> ColumnSchema {
    ColumnSchema {
        name: DatasetName::Activity,
        label_column: "label".into(),
        primary_columns: numbered("eda_", 208),
        secondary_columns: numbered("teb_", 151),
        classes: None,
    }
}

/// Default schema for the crop dataset (76 optical / 98 radar columns).
pub fn crop_schema() -> ColumnSchema {
    ColumnSchema {
        name: DatasetName::Crop,
        label_column: "label".into(),
        primary_columns: numbered("opt_", 76),
        secondary_columns: numbered("rad_", 98),
        classes: None,
    }
}

impl ColumnSchema {
    pub fn for_dataset(name: DatasetName) -> Result<ColumnSchema> {
        match name {
            DatasetName::Activity => Ok(activity_schema()),
            DatasetName::Crop => Ok(crop_schema()),
            DatasetName::MnistHalf => Err(TapError::Config(
                "mnist_half loads from IDX files, not CSV".into(),
            )),
        }
    }

    pub fn load(path: &Path) -> Result<ColumnSchema> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TapError::io(path.display().to_string(), e))?;
        serde_json::from_str(&raw).map_err(|e| TapError::Serde(e.to_string()))
    }
}

/// Load a headered CSV into a [`ModalDataset`] according to the schema. Raw
/// values only — standardization happens per split (see [`SplitViews`]) so eval
/// rows can never leak into the statistics.
pub fn load_csv_tabular<F: Scalar>(path: &Path, schema: &ColumnSchema) -> Result<ModalDataset<F>> {
    let (ex, ez, expected_classes) = schema.name.expected_shape();
    if schema.primary_columns.len() != ex || schema.secondary_columns.len() != ez {
        return Err(TapError::Config(format!(
            "{}: schema has {}/{} feature columns, dataset requires {ex}/{ez}",
            schema.name,
            schema.primary_columns.len(),
            schema.secondary_columns.len()
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| TapError::csv(path.display().to_string(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| TapError::csv(path.display().to_string(), e.to_string()))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            TapError::csv(
                path.display().to_string(),
                format!("missing column '{name}'"),
            )
        })
    };
    let label_idx = col_index(&schema.label_column)?;
    let primary_idx: Vec<usize> = schema
        .primary_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let secondary_idx: Vec<usize> = schema
        .secondary_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut x = Vec::new();
    let mut z = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| TapError::csv(path.display().to_string(), e.to_string()))?;
        let parse = |idx: usize| -> Result<F> {
            let field = record.get(idx).ok_or_else(|| {
                TapError::csv(
                    path.display().to_string(),
                    format!("row {row_no}: short record"),
                )
            })?;
            let v: f64 = field.trim().parse().map_err(|_| {
                TapError::csv(
                    path.display().to_string(),
                    format!("row {row_no}: non-numeric value '{field}'"),
                )
            })?;
            Ok(cast::<F>(v))
        };
        for &ci in &primary_idx {
            x.push(parse(ci)?);
        }
        for &ci in &secondary_idx {
            z.push(parse(ci)?);
        }
        raw_labels.push(
            record
                .get(label_idx)
                .ok_or_else(|| {
                    TapError::csv(
                        path.display().to_string(),
                        format!("row {row_no}: short record"),
                    )
                })?
                .trim()
                .to_string(),
        );
    }

    let vocab: Vec<String> = match &schema.classes {
        Some(classes) => classes.clone(),
        None => {
            let mut distinct: Vec<String> = raw_labels.clone();
            distinct.sort();
            distinct.dedup();
            distinct
        }
    };
    if vocab.len() != expected_classes {
        return Err(TapError::Data(format!(
            "{}: found {} label values, expected {expected_classes}",
            schema.name,
            vocab.len()
        )));
    }
    let y: Vec<usize> = raw_labels
        .iter()
        .map(|l| {
            vocab.iter().position(|v| v == l).ok_or_else(|| {
                TapError::Data(format!("{}: unknown label value '{l}'", schema.name))
            })
        })
        .collect::<Result<_>>()?;

    ModalDataset::new(schema.name, x, z, y, ex, ez)
}

// ── Splits ────────────────────────────────────────────────────────────────────

/// Disjoint row assignment drawn uniformly without replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled: Vec<usize>,
    pub reference: Vec<usize>,
    pub eval: Vec<usize>,
    pub seed: u64,
}

pub fn make_split(
    n_rows: usize,
    seed: u64,
    n_labeled: usize,
    n_reference: usize,
) -> Result<SplitPlan> {
    if n_labeled == 0 || n_reference == 0 {
        return Err(TapError::Config("split sizes must be positive".into()));
    }
    if n_rows < n_labeled + n_reference + 1 {
        return Err(TapError::Config(format!(
            "dataset has {n_rows} rows; need more than {} for a {n_labeled}/{n_reference}/eval split",
            n_labeled + n_reference
        )));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = stats::rng_for(seed, "split", 0);
    order.shuffle(&mut rng);
    let labeled = order[..n_labeled].to_vec();
    let reference = order[n_labeled..n_labeled + n_reference].to_vec();
    let eval = order[n_labeled + n_reference..].to_vec();
    Ok(SplitPlan {
        labeled,
        reference,
        eval,
        seed,
    })
}

/// Materialized split with the information boundary built in: labeled/eval rows
/// expose `(X, y)` only, reference rows expose `Z` only. Standardization
/// statistics come exclusively from labeled rows (X) and reference rows (Z) —
/// never from eval rows.
#[derive(Debug, Clone)]
pub struct SplitViews<F: Scalar> {
    labeled_x: Vec<F>,
    labeled_y: Vec<usize>,
    reference_z: Vec<F>,
    eval_x: Vec<F>,
    eval_y: Vec<usize>,
    d_x: usize,
    d_z: usize,
    class_count: usize,
}

fn gather_rows<F: Scalar>(data: &[F], width: usize, rows: &[usize]) -> Vec<F> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&data[r * width..(r + 1) * width]);
    }
    out
}

/// Column-wise z-score with statистics from `stats_of`, applied to every matrix
/// in `apply_to`. An (exactly) constant column maps to exact zeros.
fn standardize_columns<F: Scalar>(stats_of: &[F], width: usize, apply_to: &mut [&mut Vec<F>]) {
    let rows = stats_of.len() / width;
    assert!(rows >= 1);
    for c in 0..width {
        let col: Vec<f64> = (0..rows)
            .map(|r| stats_of[r * width + c].to_f64().unwrap())
            .collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = stats::mean(&col);
        let constant = lo == hi;
        let std = if constant {
            1.0
        } else {
            stats::sample_std(&col).max(1e-8)
        };
        for m in apply_to.iter_mut() {
            let mrows = m.len() / width;
            for r in 0..mrows {
                let v = &mut m[r * width + c];
                *v = if constant {
                    F::zero()
                } else {
                    cast::<F>((v.to_f64().unwrap() - mean) / std)
                };
            }
        }
    }
}

impl<F: Scalar> SplitViews<F> {
    pub fn build(
        ds: &ModalDataset<F>,
        plan: &SplitPlan,
        standardize: bool,
    ) -> Result<SplitViews<F>> {
        let n = ds.len();
        let mut seen = vec![false; n];
        for &r in plan.labeled.iter().chain(&plan.reference).chain(&plan.eval) {
            if r >= n {
                return Err(TapError::Data(format!(
                    "split row {r} out of range (n={n})"
                )));
            }
            if seen[r] {
                return Err(TapError::Data(format!("split assigns row {r} twice")));
            }
            seen[r] = true;
        }
        let mut labeled_x = gather_rows(&ds.x, ds.d_x, &plan.labeled);
        let labeled_y: Vec<usize> = plan.labeled.iter().map(|&r| ds.y[r]).collect();
        let mut reference_z = gather_rows(&ds.z, ds.d_z, &plan.reference);
        let mut eval_x = gather_rows(&ds.x, ds.d_x, &plan.eval);
        let eval_y: Vec<usize> = plan.eval.iter().map(|&r| ds.y[r]).collect();

        if standardize {
            let stats_x = labeled_x.clone();
            standardize_columns(&stats_x, ds.d_x, &mut [&mut labeled_x, &mut eval_x]);
            let stats_z = reference_z.clone();
            standardize_columns(&stats_z, ds.d_z, &mut [&mut reference_z]);
        }

        Ok(SplitViews {
            labeled_x,
            labeled_y,
            reference_z,
            eval_x,
            eval_y,
            d_x: ds.d_x,
            d_z: ds.d_z,
            class_count: ds.class_count,
        })
    }

    pub fn labeled_x(&self) -> &[F] {
        &self.labeled_x
    }

    pub fn labeled_y(&self) -> &[usize] {
        &self.labeled_y
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn reference_z(&self) -> &[F] {
        &self.reference_z
    }

    pub fn n_reference(&self) -> usize {
        self.reference_z.len() / self.d_z
    }

    pub fn eval_x(&self) -> &[F] {
        &self.eval_x
    }

    pub fn eval_y(&self) -> &[usize] {
        &self.eval_y
    }

    pub fn n_eval(&self) -> usize {
        self.eval_y.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

/// One-hot encode labels row-major `[n × classes]`.
pub fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Vec<F> {
    let mut out = vec![F::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * classes + l] = F::one();
    }
    out
}

// ── Synthetic corpora ─────────────────────────────────────────────────────────

/// Generator constants for the offline image-halves corpus.
///
/// Each sample draws a class `c` and a 4-dim style vector `u`; both halves are
/// linear images of `(class pattern, style)` plus Gaussian pixel noise, rendered
/// to u8. The lower half (the Z modality) carries a strong class signature; the
/// upper half (X) a weak one — so the secondary modality holds transferable
/// structure that the primary modality alone lacks, and the shared style makes
/// the X→Z correspondence learnable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_rows: usize,
    pub seed: u64,
    pub class_amp_x: f64,
    pub class_amp_z: f64,
    pub style_amp_x: f64,
    pub style_amp_z: f64,
    pub noise_x: f64,
    pub noise_z: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_rows: 1800,
            seed: 7,
            class_amp_x: 0.35,
            class_amp_z: 1.3,
            style_amp_x: 0.45,
            style_amp_z: 0.45,
            noise_x: 1.0,
            noise_z: 0.35,
        }
    }
}

const HALF_PIXELS: usize = 392;
const STYLE_DIMS: usize = 4;

/// Generate the image corpus in memory: (u8 pixels n×784, labels).
pub fn gen_synthetic_images(cfg: &SyntheticConfig) -> (Vec<u8>, Vec<u8>) {
    let classes = 10usize;
    let mut proj_rng = stats::rng_for(cfg.seed, "corpus-proj", 0);
    let std_normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut draw_block = |n: usize, amp: f64| -> Vec<f64> {
        (0..n)
            .map(|_| amp * std_normal.sample(&mut proj_rng))
            .collect()
    };
    // fixed linear maps: class patterns and style directions per half
    let class_x = draw_block(classes * HALF_PIXELS, cfg.class_amp_x);
    let class_z = draw_block(classes * HALF_PIXELS, cfg.class_amp_z);
    let style_x = draw_block(STYLE_DIMS * HALF_PIXELS, cfg.style_amp_x);
    let style_z = draw_block(STYLE_DIMS * HALF_PIXELS, cfg.style_amp_z);

    let mut rng = stats::rng_for(cfg.seed, "corpus-sample", 0);
    let mut pixels = Vec::with_capacity(cfg.n_rows * 784);
    let mut labels = Vec::with_capacity(cfg.n_rows);
    let render = |v: f64| -> u8 { (128.0 + 42.0 * v).clamp(0.0, 255.0).round() as u8 };
    for _ in 0..cfg.n_rows {
        let c = rng.gen_range(0..classes);
        let u: Vec<f64> = (0..STYLE_DIMS)
            .map(|_| std_normal.sample(&mut rng))
            .collect();
        for p in 0..HALF_PIXELS {
            let mut v = class_x[c * HALF_PIXELS + p];
            for (k, &uk) in u.iter().enumerate() {
                v += uk * style_x[k * HALF_PIXELS + p];
            }
            v += cfg.noise_x * std_normal.sample(&mut rng);
            pixels.push(render(v));
        }
        for p in 0..HALF_PIXELS {
            let mut v = class_z[c * HALF_PIXELS + p];
            for (k, &uk) in u.iter().enumerate() {
                v += uk * style_z[k * HALF_PIXELS + p];
            }
            v += cfg.noise_z * std_normal.sample(&mut rng);
            pixels.push(render(v));
        }
        labels.push(c as u8);
    }
    (pixels, labels)
}

/// Write the synthetic image corpus as an IDX pair; returns (images, labels) paths.
pub fn write_synthetic_corpus(
    dir: &Path,
    cfg: &SyntheticConfig,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| TapError::io(dir.display().to_string(), e))?;
    let (pixels, labels) = gen_synthetic_images(cfg);
    let images_path = dir.join("images-idx3-ubyte");
    let labels_path = dir.join("labels-idx1-ubyte");
    write_idx_images(&images_path, &pixels, cfg.n_rows, 28, 28)?;
    write_idx_labels(&labels_path, &labels)?;
    Ok((images_path, labels_path))
}

/// Write a synthetic tabular corpus (activity or crop layout) as a headered CSV
/// using the same latent class+style construction. Returns the CSV path.
pub fn write_synthetic_tabular(
    dir: &Path,
    name: DatasetName,
    cfg: &SyntheticConfig,
) -> Result<std::path::PathBuf> {
    let schema = ColumnSchema::for_dataset(name)?;
    let (d_x, d_z, classes) = name.expected_shape();
    std::fs::create_dir_all(dir).map_err(|e| TapError::io(dir.display().to_string(), e))?;
    let mut proj_rng = stats::rng_for(cfg.seed, "corpus-proj", 1);
    let std_normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut draw_block = |n: usize, amp: f64| -> Vec<f64> {
        (0..n)
            .map(|_| amp * std_normal.sample(&mut proj_rng))
            .collect()
    };
    let class_x = draw_block(classes * d_x, cfg.class_amp_x);
    let class_z = draw_block(classes * d_z, cfg.class_amp_z);
    let style_x = draw_block(STYLE_DIMS * d_x, cfg.style_amp_x);
    let style_z = draw_block(STYLE_DIMS * d_z, cfg.style_amp_z);

    let mut rng = stats::rng_for(cfg.seed, "corpus-sample", 1);
    let path = dir.join(format!("{name}.csv"));
    let mut header = vec![schema.label_column.clone()];
    header.extend(schema.primary_columns.iter().cloned());
    header.extend(schema.secondary_columns.iter().cloned());
    let mut lines = Vec::with_capacity(cfg.n_rows + 1);
    lines.push(header.join(","));
    for _ in 0..cfg.n_rows {
        let c = rng.gen_range(0..classes);
        let u: Vec<f64> = (0..STYLE_DIMS)
            .map(|_| std_normal.sample(&mut rng))
            .collect();
        let mut fields = Vec::with_capacity(1 + d_x + d_z);
        fields.push(format!("k{c}"));
        for p in 0..d_x {
            let mut v = class_x[c * d_x + p];
            for (k, &uk) in u.iter().enumerate() {
                v += uk * style_x[k * d_x + p];
            }
            v += cfg.noise_x * std_normal.sample(&mut rng);
            fields.push(format!("{v:.6}"));
        }
        for p in 0..d_z {
            let mut v = class_z[c * d_z + p];
            for (k, &uk) in u.iter().enumerate() {
                v += uk * style_z[k * d_z + p];
            }
            v += cfg.noise_z * std_normal.sample(&mut rng);
            fields.push(format!("{v:.6}"));
        }
        lines.push(fields.join(","));
    }
    std::fs::write(&path, lines.join("\n"))
        .map_err(|e| TapError::io(path.display().to_string(), e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("tap-core-data-{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    // hand-rolled IDX writer, independent of the production write_idx_* helpers
    fn raw_idx_pair(
        dir: &Path,
        images: &[[u8; 784]],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img_bytes = Vec::new();
        img_bytes.extend_from_slice(&2051u32.to_be_bytes());
        img_bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img_bytes.extend_from_slice(&28u32.to_be_bytes());
        img_bytes.extend_from_slice(&28u32.to_be_bytes());
        for img in images {
            img_bytes.extend_from_slice(img);
        }
        let mut lbl_bytes = Vec::new();
        lbl_bytes.extend_from_slice(&2049u32.to_be_bytes());
        lbl_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbl_bytes.extend_from_slice(labels);
        let ip = dir.join("imgs");
        let lp = dir.join("lbls");
        std::fs::write(&ip, img_bytes).unwrap();
        std::fs::write(&lp, lbl_bytes).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_loader_reads_hand_built_files_and_splits_halves() {
        let dir = tmp_dir("idx");
        // image 0: pixel value = row index; image 1: constant 255
        let mut img0 = [0u8; 784];
        for r in 0..28 {
            for c in 0..28 {
                img0[r * 28 + c] = r as u8;
            }
        }
        let img1 = [255u8; 784];
        let (ip, lp) = raw_idx_pair(&dir, &[img0, img1], &[3, 9]);
        let ds: ModalDataset<f64> = load_mnist_half(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.d_x(), 392);
        assert_eq!(ds.d_z(), 392);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.label(1), 9);
        // upper half of image 0 = rows 0..14 → x[r*28+c] = r/255
        for r in 0..14 {
            assert!((ds.x[r * 28] - r as f64 / 255.0).abs() < 1e-12);
            // lower half rows 14..28 land in z
            assert!((ds.z[r * 28] - (r + 14) as f64 / 255.0).abs() < 1e-12);
        }
        assert!(
            (ds.x[392] - 1.0).abs() < 1e-12,
            "image 1 is all ones after scaling"
        );
    }

    #[test]
    fn idx_loader_rejects_bad_magic_and_truncation() {
        let dir = tmp_dir("idx-bad");
        let bad_magic = dir.join("badmagic");
        let mut b = Vec::new();
        b.extend_from_slice(&1234u32.to_be_bytes());
        b.extend_from_slice(&1u32.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(&[0u8; 784]);
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(
            load_idx_images::<f64>(&bad_magic),
            Err(TapError::Idx { .. })
        ));

        let truncated = dir.join("trunc");
        let mut t = Vec::new();
        t.extend_from_slice(&2051u32.to_be_bytes());
        t.extend_from_slice(&2u32.to_be_bytes());
        t.extend_from_slice(&28u32.to_be_bytes());
        t.extend_from_slice(&28u32.to_be_bytes());
        t.extend_from_slice(&[0u8; 784]); // one image short
        std::fs::write(&truncated, &t).unwrap();
        assert!(matches!(
            load_idx_images::<f64>(&truncated),
            Err(TapError::Idx { .. })
        ));

        // image/label count mismatch
        let mut img0 = [[0u8; 784]; 1];
        img0[0][0] = 7;
        let (ip, _) = raw_idx_pair(&dir, &img0, &[1]);
        let lp2 = dir.join("lbls2");
        let mut l = Vec::new();
        l.extend_from_slice(&2049u32.to_be_bytes());
        l.extend_from_slice(&2u32.to_be_bytes());
        l.extend_from_slice(&[1, 2]);
        std::fs::write(&lp2, l).unwrap();
        assert!(load_mnist_half::<f64>(&ip, &lp2).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seed_stable() {
        for seed in [1u64, 2, 3, 99] {
            let plan = make_split(1800, seed, 200, 1000).unwrap();
            assert_eq!(plan.labeled.len(), 200);
            assert_eq!(plan.reference.len(), 1000);
            assert_eq!(plan.eval.len(), 600);
            let mut seen = vec![false; 1800];
            for &r in plan.labeled.iter().chain(&plan.reference).chain(&plan.eval) {
                assert!(!seen[r], "row {r} assigned twice (seed {seed})");
                seen[r] = true;
            }
            assert!(seen.iter().all(|&s| s), "split must cover every row");
        }
        let a = make_split(1800, 5, 200, 1000).unwrap();
        let b = make_split(1800, 5, 200, 1000).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.eval, b.eval);
        let c = make_split(1800, 6, 200, 1000).unwrap();
        assert_ne!(a.labeled, c.labeled);
        // too-small corpus is rejected
        assert!(make_split(1200, 1, 200, 1000).is_err());
    }

    #[test]
    fn csv_loader_parses_standard_schema_and_flags_errors() {
        let dir = tmp_dir("csv");
        let cfg = SyntheticConfig {
            n_rows: 40,
            seed: 11,
            ..SyntheticConfig::default()
        };
        let path = write_synthetic_tabular(&dir, DatasetName::Activity, &cfg).unwrap();
        let ds: ModalDataset<f64> = load_csv_tabular(&path, &activity_schema()).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.d_x(), 208);
        assert_eq!(ds.d_z(), 151);
        assert_eq!(ds.class_count(), 4);

        // corrupt one field → csv error with row context
        let raw = std::fs::read_to_string(&path).unwrap();
        let corrupted = raw.replacen("k", "", 1); // header untouched? "k" first appears in a label field
        let bad = dir.join("bad.csv");
        std::fs::write(&bad, corrupted).unwrap();
        // removing the label prefix makes an unknown label value appear
        let res = load_csv_tabular::<f64>(&bad, &activity_schema());
        assert!(res.is_err());

        // missing column
        let mut schema = activity_schema();
        schema.primary_columns[0] = "not_a_column".into();
        assert!(matches!(
            load_csv_tabular::<f64>(&path, &schema),
            Err(TapError::Csv { .. })
        ));

        // wrong column count in schema
        let mut short = activity_schema();
        short.primary_columns.pop();
        assert!(load_csv_tabular::<f64>(&path, &short).is_err());
    }

    #[test]
    fn standardization_uses_only_labeled_and_reference_statistics() {
        let dir = tmp_dir("std");
        let cfg = SyntheticConfig {
            n_rows: 60,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let path = write_synthetic_tabular(&dir, DatasetName::Crop, &cfg).unwrap();
        let ds: ModalDataset<f64> = load_csv_tabular(&path, &crop_schema()).unwrap();
        let plan = make_split(60, 4, 20, 25).unwrap();
        let views = SplitViews::build(&ds, &plan, true).unwrap();

        // labeled X columns are exactly centered with unit sample variance
        let d_x = views.d_x();
        for c in [0usize, 37, 75] {
            let col: Vec<f64> = (0..views.n_labeled())
                .map(|r| views.labeled_x()[r * d_x + c])
                .collect();
            assert!(stats::mean(&col).abs() < 1e-10, "labeled col {c} centered");
            assert!((stats::sample_std(&col) - 1.0).abs() < 1e-10);
        }
        // reference Z columns likewise
        let d_z = views.d_z();
        for c in [0usize, 50, 97] {
            let col: Vec<f64> = (0..views.n_reference())
                .map(|r| views.reference_z()[r * d_z + c])
                .collect();
            assert!(stats::mean(&col).abs() < 1e-10);
            assert!((stats::sample_std(&col) - 1.0).abs() < 1e-10);
        }
        // eval X columns are scaled by the labeled statistics, not their own:
        // they should NOT be exactly centered (overwhelmingly unlikely)
        let col: Vec<f64> = (0..views.n_eval())
            .map(|r| views.eval_x()[r * d_x])
            .collect();
        assert!(stats::mean(&col).abs() > 1e-6);
    }

    #[test]
    fn constant_column_standardizes_to_exact_zeros() {
        // build a tiny crop-shaped dataset by hand with one constant X column
        let (d_x, d_z, _) = DatasetName::Crop.expected_shape();
        let n = 30;
        let mut rng = stats::rng_for(8, "const-col", 0);
        let mut x = vec![0.0f64; n * d_x];
        let mut z = vec![0.0f64; n * d_z];
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in z.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for r in 0..n {
            x[r * d_x + 5] = 3.25; // constant column
        }
        let y: Vec<usize> = (0..n).map(|i| i % 7).collect();
        let ds = ModalDataset::new(DatasetName::Crop, x, z, y, d_x, d_z).unwrap();
        let plan = make_split(n, 2, 10, 12).unwrap();
        let views = SplitViews::build(&ds, &plan, true).unwrap();
        for r in 0..views.n_labeled() {
            assert_eq!(views.labeled_x()[r * d_x + 5], 0.0);
        }
        for r in 0..views.n_eval() {
            assert_eq!(views.eval_x()[r * d_x + 5], 0.0);
        }
    }

    #[test]
    fn synthetic_corpus_round_trips_through_idx_and_has_balanced_classes() {
        let dir = tmp_dir("corpus");
        let cfg = SyntheticConfig {
            n_rows: 500,
            seed: 42,
            ..SyntheticConfig::default()
        };
        let (ip, lp) = write_synthetic_corpus(&dir, &cfg).unwrap();
        let ds: ModalDataset<f32> = load_mnist_half(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 500);
        let mut counts = [0usize; 10];
        for r in 0..ds.len() {
            counts[ds.label(r)] += 1;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            assert!(cnt > 20, "class {c} badly under-represented: {cnt}");
        }
        // determinism
        let (pixels_a, labels_a) = gen_synthetic_images(&cfg);
        let (pixels_b, labels_b) = gen_synthetic_images(&cfg);
        assert_eq!(pixels_a, pixels_b);
        assert_eq!(labels_a, labels_b);
        let other = SyntheticConfig {
            seed: 43,
            ..cfg.clone()
        };
        let (pixels_c, _) = gen_synthetic_images(&other);
        assert_ne!(pixels_a, pixels_c);
    }

    #[test]
    fn one_hot_places_single_one_per_row() {
        let oh: Vec<f64> = one_hot(&[2, 0, 1], 3);
        assert_eq!(oh, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn dataset_name_round_trip_and_shape_contract() {
        for name in [
            DatasetName::MnistHalf,
            DatasetName::Activity,
            DatasetName::Crop,
        ] {
            let s = name.to_string();
            let back: DatasetName = s.parse().unwrap();
            assert_eq!(back, name);
        }
        assert!("imagenet".parse::<DatasetName>().is_err());
        // wrong dims rejected by the dataset constructor
        assert!(ModalDataset::new(
            DatasetName::Crop,
            vec![0.0f64; 10 * 76],
            vec![0.0; 10 * 98],
            (0..10).map(|i| i % 7).collect(),
            76,
            97
        )
        .is_err());
        // out-of-range label rejected
        assert!(ModalDataset::new(
            DatasetName::Crop,
            vec![0.0f64; 10 * 76],
            vec![0.0; 10 * 98],
            vec![7; 10],
            76,
            98
        )
        .is_err());
    }
}
