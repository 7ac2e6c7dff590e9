//! Datasets, contamination-guarded three-way splits, image-folder
//! ingestion, and synthetic generators with enumerable joint distributions
//! for validating the decoder-based MI estimates against an exact oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mi::JointHistogram;
use crate::nn::hex_string;

/// Labeled images, channel-first (N, 3, H, W), integer intensities.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Array4<u8>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if images.dim().1 != 3 {
            return Err(Error::Dataset("images must have 3 channels".into()));
        }
        let num_classes = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range")));
        }
        Ok(Dataset { images, labels, num_classes, class_names })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.dim().2
    }

    pub fn image(&self, idx: usize) -> ArrayView3<'_, u8> {
        self.images.index_axis(Axis(0), idx)
    }

    /// Content hash of one example (image bytes + label).
    pub fn example_digest(&self, idx: usize) -> String {
        let mut hasher = Sha256::new();
        for v in self.image(idx).iter() {
            hasher.update([*v]);
        }
        hasher.update((self.labels[idx] as u64).to_le_bytes());
        hex_string(&hasher.finalize())
    }

    /// Content hash of the whole collection (order-sensitive).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        let (n, c, h, w) = self.images.dim();
        for d in [n, c, h, w] {
            hasher.update((d as u64).to_le_bytes());
        }
        hasher.update(self.images.as_slice().expect("contiguous"));
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::<u8>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&self.image(idx));
            labels.push(self.labels[idx]);
        }
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    /// Deterministic subsample of the first `n` examples after a seeded
    /// shuffle; handy for cutting desk-scale corpora down further.
    pub fn take(&self, n: usize, seed: u64) -> Dataset {
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(n.min(self.len()));
        self.subset(&indices)
    }
}

/// The three disjoint subsets of the estimation pipeline.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub encoding: Dataset,
    pub decoding: Dataset,
    pub evaluation: Dataset,
}

impl SplitDataset {
    pub fn digests(&self) -> [String; 3] {
        [self.encoding.digest(), self.decoding.digest(), self.evaluation.digest()]
    }
}

/// Outcome metadata of a split: how many trailing examples were dropped to
/// make the subsets equal-sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitReport {
    pub truncated: usize,
}

/// Partition a source pool into three equal disjoint subsets,
/// deterministically in `seed`. Duplicate examples (by content hash) are
/// refused outright: a duplicate pair crossing a subset boundary would
/// contaminate the estimates silently.
pub fn three_way_split(source: &Dataset, seed: u64) -> Result<(SplitDataset, SplitReport)> {
    let n = source.len();
    if n < 3 {
        return Err(Error::Dataset(format!("cannot three-way split {n} examples")));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for idx in 0..n {
        let digest = source.example_digest(idx);
        if let Some(prev) = seen.insert(digest, idx) {
            return Err(Error::Contamination(format!(
                "examples {prev} and {idx} have identical content"
            )));
        }
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let per = n / 3;
    let truncated = n - per * 3;
    let split = SplitDataset {
        encoding: source.subset(&indices[..per]),
        decoding: source.subset(&indices[per..2 * per]),
        evaluation: source.subset(&indices[2 * per..3 * per]),
    };
    Ok((split, SplitReport { truncated }))
}

/// Datasets ingested from a `root/<subset>/<class>/<image>` folder layout.
#[derive(Debug)]
pub struct FolderDataset {
    pub subsets: BTreeMap<String, Dataset>,
    /// Files skipped because they failed to decode as images.
    pub skipped: usize,
}

/// Load every subset directory under `root`. The class directory sets must
/// agree across subsets; empty class directories are an error.
pub fn load_image_folder(root: &Path) -> Result<FolderDataset> {
    let mut subset_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            subset_dirs.push((entry.file_name().to_string_lossy().to_string(), entry.path()));
        }
    }
    subset_dirs.sort();
    if subset_dirs.is_empty() {
        return Err(Error::Dataset(format!("no subset directories under {}", root.display())));
    }

    // class sets must be identical across subsets
    let mut class_sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (name, path) in &subset_dirs {
        let mut classes = BTreeSet::new();
        for entry in std::fs::read_dir(path)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                classes.insert(entry.file_name().to_string_lossy().to_string());
            }
        }
        class_sets.insert(name.clone(), classes);
    }
    let reference = class_sets.values().next().unwrap().clone();
    for (subset, classes) in &class_sets {
        if *classes != reference {
            let missing: Vec<_> = reference.symmetric_difference(classes).cloned().collect();
            return Err(Error::Dataset(format!(
                "class directories differ in subset `{subset}`: {missing:?}"
            )));
        }
    }
    let class_names: Vec<String> = reference.into_iter().collect();

    let mut subsets = BTreeMap::new();
    let mut skipped = 0usize;
    for (subset_name, subset_path) in &subset_dirs {
        let mut images: Vec<Array4<u8>> = Vec::new();
        let mut labels = Vec::new();
        let mut size: Option<usize> = None;
        for (label, class) in class_names.iter().enumerate() {
            let class_dir = subset_path.join(class);
            let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut loaded = 0usize;
            for file in files {
                let img = match image::open(&file) {
                    Ok(img) => img.to_rgb8(),
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                let (w, h) = (img.width() as usize, img.height() as usize);
                if w != h {
                    return Err(Error::Dataset(format!(
                        "{} is {w}x{h}; images must be square",
                        file.display()
                    )));
                }
                match size {
                    None => size = Some(w),
                    Some(s) if s != w => {
                        return Err(Error::Dataset(format!(
                            "{} is {w}px but earlier images are {s}px",
                            file.display()
                        )))
                    }
                    _ => {}
                }
                let mut arr = Array4::<u8>::zeros((1, 3, h, w));
                for y in 0..h {
                    for x in 0..w {
                        let px = img.get_pixel(x as u32, y as u32);
                        for ch in 0..3 {
                            arr[(0, ch, y, x)] = px.0[ch];
                        }
                    }
                }
                images.push(arr);
                labels.push(label);
                loaded += 1;
            }
            if loaded == 0 {
                return Err(Error::Dataset(format!(
                    "class directory `{}` in subset `{subset_name}` has no decodable images",
                    class
                )));
            }
        }
        let views: Vec<_> = images.iter().map(|a| a.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dataset(format!("stacking images: {e}")))?;
        subsets.insert(
            subset_name.clone(),
            Dataset::new(stacked, labels, class_names.clone())?,
        );
    }
    Ok(FolderDataset { subsets, skipped })
}

/// Build the three-way split from a folder tree: subset directories named
/// `encoding`/`decoding`/`evaluation` are used directly; any other layout
/// is pooled and partitioned deterministically from the seed.
pub fn splits_from_folder(root: &Path, seed: u64) -> Result<(SplitDataset, SplitReport)> {
    let folder = load_image_folder(root)?;
    let named: Vec<&str> = vec!["encoding", "decoding", "evaluation"];
    if named.iter().all(|s| folder.subsets.contains_key(*s)) {
        let mut subsets = folder.subsets;
        let split = SplitDataset {
            encoding: subsets.remove("encoding").unwrap(),
            decoding: subsets.remove("decoding").unwrap(),
            evaluation: subsets.remove("evaluation").unwrap(),
        };
        // explicit subsets are trusted as given; identical content across
        // them is reported but not refused, since independently drawn
        // discrete samples repeat legitimately
        let mut seen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut cross_duplicates = 0usize;
        for (si, ds) in [&split.encoding, &split.decoding, &split.evaluation].iter().enumerate() {
            for i in 0..ds.len() {
                if let Some((psi, _)) = seen.insert(ds.example_digest(i), (si, i)) {
                    if psi != si {
                        cross_duplicates += 1;
                    }
                }
            }
        }
        if cross_duplicates > 0 {
            eprintln!("note: {cross_duplicates} examples share content across named subsets");
        }
        return Ok((split, SplitReport { truncated: 0 }));
    }
    let pools: Vec<&Dataset> = folder.subsets.values().collect();
    let views: Vec<_> = pools.iter().map(|d| d.images.view()).collect();
    let images = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Dataset(format!("pooling subsets: {e}")))?;
    let labels: Vec<usize> = pools.iter().flat_map(|d| d.labels.iter().copied()).collect();
    let class_names = pools[0].class_names.clone();
    let pool = Dataset::new(images, labels, class_names)?;
    three_way_split(&pool, seed)
}

/// Write a dataset as `root/<subset>/<class>/<index>.png`.
pub fn save_image_folder(dataset: &Dataset, root: &Path, subset: &str) -> Result<()> {
    for (idx, &label) in dataset.labels.iter().enumerate() {
        let dir = root.join(subset).join(&dataset.class_names[label]);
        std::fs::create_dir_all(&dir)?;
        let img = dataset.image(idx);
        let (_, h, w) = img.dim();
        let mut out = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(x as u32, y as u32, image::Rgb([img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]]));
            }
        }
        out.save(dir.join(format!("{idx:06}.png")))?;
    }
    Ok(())
}

/// Specification for the enumerable binary-template dataset. Images are
/// `image_size²` binary pixels (intensity 0 or max, channels tied); a
/// sample is its template with every pixel independently flipped with
/// probability `noise_rate`. The joint over (x, template) is closed-form.
#[derive(Debug, Clone)]
pub struct TemplateDatasetSpec {
    pub image_size: usize,
    pub num_templates: usize,
    pub noise_rate: f64,
    /// Class label assigned to each template.
    pub labels: Vec<usize>,
    /// Intensity written for set bits (0 stays 0). 255 renders normally;
    /// 1 pairs with a 2-level pixel space where the logistic mixture can
    /// express Bernoulli pixels exactly.
    pub high_intensity: u8,
}

impl TemplateDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bits = self.image_size * self.image_size;
        if bits > 20 {
            return Err(Error::Dataset(format!(
                "template space 2^{bits} is not enumerable (cap 2^20)"
            )));
        }
        if self.num_templates == 0 || self.labels.len() != self.num_templates {
            return Err(Error::Dataset("need one label per template".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Dataset(format!("noise rate {} outside [0,1]", self.noise_rate)));
        }
        Ok(())
    }
}

/// The closed-form joint distribution of the template dataset plus exact
/// MI values computed from it.
#[derive(Debug, Clone)]
pub struct TemplateOracle {
    pub templates: Vec<Vec<u8>>,
    /// p(x, template) over all 2^pixels patterns × templates.
    pub joint_template: JointHistogram,
    /// p(x, label).
    pub joint_label: JointHistogram,
    pub exact_mi_template: f64,
    pub exact_mi_label: f64,
}

impl TemplateOracle {
    /// Raster bit-encoding of a binary pattern (pixel 0 is the low bit).
    pub fn pattern_index(bits: &[u8]) -> usize {
        bits.iter()
            .enumerate()
            .map(|(i, &b)| if b > 0 { 1usize << i } else { 0 })
            .sum()
    }

    /// Index of a dataset image in the enumerated x space.
    pub fn image_index(image: ArrayView3<'_, u8>) -> usize {
        let (_, h, w) = image.dim();
        let mut idx = 0usize;
        for i in 0..h {
            for j in 0..w {
                if image[(0, i, j)] > 0 {
                    idx |= 1 << (i * w + j);
                }
            }
        }
        idx
    }
}

/// Generate `num_samples` images plus the exact joint over (x, template).
pub fn generate_template_dataset(
    spec: &TemplateDatasetSpec,
    seed: u64,
    num_samples: usize,
) -> Result<(Dataset, TemplateOracle)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = spec.image_size * spec.image_size;
    let num_x = 1usize << pixels;

    // templates drawn once, distinct
    let mut templates: Vec<Vec<u8>> = Vec::with_capacity(spec.num_templates);
    let mut used = BTreeSet::new();
    while templates.len() < spec.num_templates {
        let t: Vec<u8> = (0..pixels).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let idx = TemplateOracle::pattern_index(&t);
        if used.insert(idx) {
            templates.push(t);
        }
    }

    // closed-form joint: p(x, t) = (1/T)·eps^d·(1-eps)^(n-d)
    let eps = spec.noise_rate;
    let t_prior = 1.0 / spec.num_templates as f64;
    let mut joint_t = Array2::<f64>::zeros((num_x, spec.num_templates));
    for (ti, t) in templates.iter().enumerate() {
        let t_idx = TemplateOracle::pattern_index(t);
        for x in 0..num_x {
            let d = ((x ^ t_idx) as u64).count_ones() as f64;
            let n_minus_d = pixels as f64 - d;
            let p = if eps == 0.0 {
                if d == 0.0 { 1.0 } else { 0.0 }
            } else if eps == 1.0 {
                if n_minus_d == 0.0 { 1.0 } else { 0.0 }
            } else {
                eps.powf(d) * (1.0 - eps).powf(n_minus_d)
            };
            joint_t[(x, ti)] = t_prior * p;
        }
    }
    let num_labels = spec.labels.iter().max().unwrap() + 1;
    let mut joint_l = Array2::<f64>::zeros((num_x, num_labels));
    for (ti, &label) in spec.labels.iter().enumerate() {
        for x in 0..num_x {
            joint_l[(x, label)] += joint_t[(x, ti)];
        }
    }
    let joint_template = JointHistogram::new(joint_t)?;
    let joint_label = JointHistogram::new(joint_l)?;
    let exact_mi_template = crate::mi::exact_mi_discrete(&joint_template);
    let exact_mi_label = crate::mi::exact_mi_discrete(&joint_label);

    // samples
    let size = spec.image_size;
    let hi = spec.high_intensity.max(1);
    let mut images = Array4::<u8>::zeros((num_samples, 3, size, size));
    let mut labels = Vec::with_capacity(num_samples);
    for n in 0..num_samples {
        let ti = rng.random_range(0..spec.num_templates);
        labels.push(spec.labels[ti]);
        for p in 0..pixels {
            let mut bit = templates[ti][p];
            if rng.random_bool(eps) {
                bit ^= 1;
            }
            let v = if bit > 0 { hi } else { 0 };
            let (i, j) = (p / size, p % size);
            for ch in 0..3 {
                images[(n, ch, i, j)] = v;
            }
        }
    }
    let class_names: Vec<String> = (0..num_labels).map(|l| format!("t{l}")).collect();
    let dataset = Dataset::new(images, labels, class_names)?;
    Ok((dataset, TemplateOracle { templates, joint_template, joint_label, exact_mi_template, exact_mi_label }))
}

/// Three independently drawn sample sets from one template distribution.
/// Unlike [`three_way_split`], repeats across subsets are expected here:
/// the subsets are i.i.d. draws from a low-entropy discrete distribution,
/// which is exactly what the estimators assume.
pub fn template_split(
    spec: &TemplateDatasetSpec,
    seed: u64,
    per_subset: usize,
) -> Result<(SplitDataset, TemplateOracle)> {
    // one oracle; templates must be shared, so derive subsets by drawing
    // a triple-size sample set and slicing it
    let (all, oracle) = generate_template_dataset(spec, seed, per_subset * 3)?;
    let part = |range: std::ops::Range<usize>| -> Result<Dataset> {
        let mut images = Array4::<u8>::zeros((range.len(), 3, spec.image_size, spec.image_size));
        let mut labels = Vec::with_capacity(range.len());
        for (row, idx) in range.clone().enumerate() {
            images.index_axis_mut(Axis(0), row).assign(&all.image(idx));
            labels.push(all.labels[idx]);
        }
        Dataset::new(images, labels, all.class_names.clone())
    };
    let split = SplitDataset {
        encoding: part(0..per_subset)?,
        decoding: part(per_subset..2 * per_subset)?,
        evaluation: part(2 * per_subset..3 * per_subset)?,
    };
    Ok((split, oracle))
}

/// Desk-scale stand-in for a natural 10-class corpus: each image is a
/// high-amplitude random smooth background (class-irrelevant) plus a small
/// class-specific glyph, plus pixel noise. Classifiers must keep the glyph
/// and may discard the background; reconstruction-driven encoders face the
/// opposite pressure.
#[derive(Debug, Clone)]
pub struct PatternDatasetSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Amplitude of the smooth random background around mid-intensity.
    pub background_amplitude: f64,
    /// Added intensity of glyph pixels.
    pub glyph_contrast: f64,
    /// Uniform per-pixel noise amplitude.
    pub noise_amplitude: f64,
    /// Side of the random corner grid the background interpolates; larger
    /// grids carry more label-irrelevant degrees of freedom per image.
    pub background_grid: usize,
}

impl Default for PatternDatasetSpec {
    fn default() -> Self {
        PatternDatasetSpec {
            image_size: 8,
            num_classes: 10,
            background_amplitude: 90.0,
            glyph_contrast: 70.0,
            noise_amplitude: 8.0,
            background_grid: 2,
        }
    }
}

pub fn generate_pattern_dataset(
    spec: &PatternDatasetSpec,
    seed: u64,
    num_samples: usize,
) -> Result<Dataset> {
    if spec.image_size < 4 {
        return Err(Error::Dataset("pattern images need at least 4 pixels per side".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let glyph_size = size / 2;

    // fixed per-class glyph bit patterns
    let glyphs: Vec<Vec<bool>> = (0..spec.num_classes)
        .map(|_| (0..glyph_size * glyph_size).map(|_| rng.random_bool(0.5)).collect())
        .collect();

    let grid = spec.background_grid.max(2);
    let mut images = Array4::<u8>::zeros((num_samples, 3, size, size));
    let mut labels = Vec::with_capacity(num_samples);
    let offset = (size - glyph_size) / 2;
    for n in 0..num_samples {
        let class = rng.random_range(0..spec.num_classes);
        labels.push(class);
        for ch in 0..3 {
            // bilinear interpolation of a random corner grid
            let corners: Vec<f64> = (0..grid * grid).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..size {
                for j in 0..size {
                    let fy = i as f64 / (size - 1) as f64 * (grid - 1) as f64;
                    let fx = j as f64 / (size - 1) as f64 * (grid - 1) as f64;
                    let (gy, gx) = ((fy as usize).min(grid - 2), (fx as usize).min(grid - 2));
                    let (ty, tx) = (fy - gy as f64, fx - gx as f64);
                    let at = |y: usize, x: usize| corners[y * grid + x];
                    let field = at(gy, gx) * (1.0 - ty) * (1.0 - tx)
                        + at(gy, gx + 1) * (1.0 - ty) * tx
                        + at(gy + 1, gx) * ty * (1.0 - tx)
                        + at(gy + 1, gx + 1) * ty * tx;
                    let mut v = 128.0 + spec.background_amplitude * field;
                    let gi = i.wrapping_sub(offset);
                    let gj = j.wrapping_sub(offset);
                    if gi < glyph_size && gj < glyph_size && glyphs[class][gi * glyph_size + gj] {
                        v += spec.glyph_contrast;
                    }
                    v += rng.random_range(-spec.noise_amplitude..spec.noise_amplitude);
                    images[(n, ch, i, j)] = v.clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let class_names: Vec<String> = (0..spec.num_classes).map(|c| format!("c{c}")).collect();
    Dataset::new(images, labels, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mi::exact_mi_discrete;

    fn toy_dataset(n: usize, distinct: bool) -> Dataset {
        let mut images = Array4::<u8>::zeros((n, 3, 4, 4));
        for i in 0..n {
            let v = if distinct { i as u8 } else { 0 };
            images.index_axis_mut(Axis(0), i).fill(v);
        }
        Dataset::new(images, vec![0; n], vec!["only".into()]).unwrap()
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let source = toy_dataset(9, true);
        let (a, report) = three_way_split(&source, 42).unwrap();
        let (b, _) = three_way_split(&source, 42).unwrap();
        assert_eq!(report.truncated, 0);
        assert_eq!(a.digests(), b.digests());
        assert_eq!(a.encoding.len(), 3);

        let mut all: Vec<String> = Vec::new();
        for ds in [&a.encoding, &a.decoding, &a.evaluation] {
            for i in 0..ds.len() {
                all.push(ds.example_digest(i));
            }
        }
        let unique: BTreeSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len(), "subsets overlap");

        let (c, _) = three_way_split(&source, 43).unwrap();
        assert_ne!(a.digests(), c.digests(), "different seed, same partition");
    }

    #[test]
    fn split_truncates_non_divisible_sources() {
        let source = toy_dataset(11, true);
        let (split, report) = three_way_split(&source, 1).unwrap();
        assert_eq!(report.truncated, 2);
        assert_eq!(split.encoding.len() + split.decoding.len() + split.evaluation.len(), 9);
    }

    #[test]
    fn split_refuses_duplicates() {
        let source = toy_dataset(6, false);
        assert!(matches!(three_way_split(&source, 0), Err(Error::Contamination(_))));
    }

    #[test]
    fn template_dataset_oracle_values() {
        // deterministic map: I(x; template) = ln(num_templates)
        let spec = TemplateDatasetSpec {
            image_size: 2,
            num_templates: 4,
            noise_rate: 0.0,
            labels: vec![0, 1, 2, 3],
            high_intensity: 255,
        };
        let (_, oracle) = generate_template_dataset(&spec, 7, 10).unwrap();
        assert!((oracle.exact_mi_template - 4.0f64.ln()).abs() < 1e-9);

        // independence at noise 0.5
        let spec = TemplateDatasetSpec { noise_rate: 0.5, ..spec };
        let (_, oracle) = generate_template_dataset(&spec, 7, 10).unwrap();
        assert!(oracle.exact_mi_template.abs() < 1e-9);
    }

    #[test]
    fn template_oracle_matches_brute_force_enumeration() {
        // 2 templates over 4 binary pixels differing in every pixel
        let spec = TemplateDatasetSpec {
            image_size: 2,
            num_templates: 2,
            noise_rate: 0.1,
            labels: vec![0, 1],
            high_intensity: 255,
        };
        // fix the templates by searching seeds for an all-pixels-differ draw
        let mut chosen = None;
        for seed in 0..200 {
            let (_, oracle) = generate_template_dataset(&spec, seed, 1).unwrap();
            let a = TemplateOracle::pattern_index(&oracle.templates[0]);
            let b = TemplateOracle::pattern_index(&oracle.templates[1]);
            if a ^ b == 0b1111 {
                chosen = Some(oracle);
                break;
            }
        }
        let oracle = chosen.expect("no complementary template pair found");

        // independent brute-force evaluation of I from first principles
        let eps: f64 = 0.1;
        let mut brute = 0.0;
        for x in 0..16usize {
            let mut px = 0.0;
            let mut terms = Vec::new();
            for t in 0..2 {
                let t_idx = TemplateOracle::pattern_index(&oracle.templates[t]);
                let d = (x ^ t_idx).count_ones() as f64;
                let pxt = 0.5 * eps.powf(d) * (1.0 - eps).powf(4.0 - d);
                px += pxt;
                terms.push(pxt);
            }
            for pxt in terms {
                if pxt > 0.0 {
                    brute += pxt * (pxt / (px * 0.5)).ln();
                }
            }
        }
        assert!((oracle.exact_mi_template - brute).abs() < 1e-12);
        assert!(brute > 0.0 && brute < 2.0f64.ln());
    }

    #[test]
    fn template_empirical_joint_converges_to_oracle() {
        let spec = TemplateDatasetSpec {
            image_size: 2,
            num_templates: 2,
            noise_rate: 0.05,
            labels: vec![0, 1],
            high_intensity: 255,
        };
        let n = 30_000;
        let (dataset, oracle) = generate_template_dataset(&spec, 11, n).unwrap();
        // labels equal template ids here, so (x, label) pairs estimate the joint
        let pairs = (0..n).map(|i| (TemplateOracle::image_index(dataset.image(i)), dataset.labels[i]));
        let hist = JointHistogram::from_pairs(pairs, 16, 2).unwrap();
        let empirical = exact_mi_discrete(&hist);
        // plug-in estimate of MI is biased by ~(|X|-1)(|Y|-1)/(2N) upward
        let bias = 15.0 * 1.0 / (2.0 * n as f64);
        let tol = 3.0 * (oracle.exact_mi_template / n as f64).sqrt() + 3.0 * bias + 5e-3;
        assert!(
            (empirical - oracle.exact_mi_template).abs() < tol,
            "empirical {empirical} vs exact {} (tol {tol})",
            oracle.exact_mi_template
        );
    }

    #[test]
    fn template_spec_guards() {
        let spec = TemplateDatasetSpec {
            image_size: 5,
            num_templates: 2,
            noise_rate: 0.1,
            labels: vec![0, 1],
            high_intensity: 255,
        };
        assert!(spec.validate().is_err(), "2^25 should exceed the enumerability cap");
    }

    #[test]
    fn pattern_dataset_shapes_and_determinism() {
        let spec = PatternDatasetSpec::default();
        let a = generate_pattern_dataset(&spec, 3, 20).unwrap();
        let b = generate_pattern_dataset(&spec, 3, 20).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.images.dim(), (20, 3, 8, 8));
        assert_eq!(a.num_classes, 10);
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for subset in ["train", "valid"] {
            for class in ["cat", "dog"] {
                let d = root.join(subset).join(class);
                std::fs::create_dir_all(&d).unwrap();
                for i in 0..2 {
                    let mut img = image::RgbImage::new(4, 4);
                    for p in img.pixels_mut() {
                        p.0 = [i * 40, 100, 200];
                    }
                    img.save(d.join(format!("{i}.png"))).unwrap();
                }
            }
        }
        // a stray non-image file is skipped with a count
        std::fs::write(root.join("train").join("cat").join("notes.txt"), b"not an image").unwrap();

        let folder = load_image_folder(root).unwrap();
        assert_eq!(folder.skipped, 1);
        assert_eq!(folder.subsets.len(), 2);
        let train = &folder.subsets["train"];
        assert_eq!(train.len(), 4);
        assert_eq!(train.class_names, vec!["cat".to_string(), "dog".to_string()]);
        assert_eq!(train.images[(0, 2, 0, 0)], 200);
    }

    #[test]
    fn image_folder_class_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (subset, classes) in [("train", vec!["cat", "dog"]), ("valid", vec!["cat"])] {
            for class in classes {
                let d = root.join(subset).join(class);
                std::fs::create_dir_all(&d).unwrap();
                image::RgbImage::new(4, 4).save(d.join("0.png")).unwrap();
            }
        }
        let err = load_image_folder(root).unwrap_err();
        assert!(err.to_string().contains("dog"), "{err}");
    }

    #[test]
    fn image_folder_empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let d = root.join("train").join("cat");
        std::fs::create_dir_all(&d).unwrap();
        image::RgbImage::new(4, 4).save(d.join("0.png")).unwrap();
        std::fs::create_dir_all(root.join("train").join("empty")).unwrap();
        let err = load_image_folder(root).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }
}
