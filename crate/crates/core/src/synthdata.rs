//! Procedural 32×32 glyph images with ground-truth feature labels.
//!
//! Each image is a thick polyline sheared horizontally, optionally with a
//! bright accessory bar across the top rows. Because every label is a
//! predicate on the generating [`GlyphSpec`], the labels are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

pub const THICKNESS_RANGE: (f64, f64) = (0.5, 3.5);
pub const SLANT_RANGE: (f64, f64) = (-0.6, 0.6);
pub const SEGMENT_RANGE: (u32, u32) = (2, 5);

/// Upper decile of `THICKNESS_RANGE` under uniform sampling.
pub const THICK_THRESHOLD: f64 = 3.2;
/// Lower decile of `SLANT_RANGE` under uniform sampling (strong left slant).
pub const SLANT_THRESHOLD: f64 = -0.48;

/// Bar rows and columns, both inclusive.
pub const BAR_ROWS: (usize, usize) = (2, 4);
pub const BAR_COLS: (usize, usize) = (6, 26);

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("glyph field `{field}` = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("bar probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("dataset file: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset on disk does not match its manifest: {0}")]
    Corrupt(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureName {
    Thickness,
    Slant,
    Bar,
}

impl FeatureName {
    pub const ALL: [FeatureName; 3] =
        [FeatureName::Thickness, FeatureName::Slant, FeatureName::Bar];

    /// Position of this feature's head in the probe output.
    pub fn index(self) -> usize {
        match self {
            FeatureName::Thickness => 0,
            FeatureName::Slant => 1,
            FeatureName::Bar => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureName::Thickness => "thickness",
            FeatureName::Slant => "slant",
            FeatureName::Bar => "bar",
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureName {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "thickness" => Ok(FeatureName::Thickness),
            "slant" => Ok(FeatureName::Slant),
            "bar" => Ok(FeatureName::Bar),
            other => Err(SynthError::UnknownFeature(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub seed: u64,
    /// Stroke half-width in pixels.
    pub thickness: f64,
    /// Horizontal shear factor; negative leans left.
    pub slant: f64,
    pub has_bar: bool,
    pub n_segments: u32,
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        check(
            "thickness",
            self.thickness,
            THICKNESS_RANGE.0,
            THICKNESS_RANGE.1,
        )?;
        check("slant", self.slant, SLANT_RANGE.0, SLANT_RANGE.1)?;
        check(
            "n_segments",
            self.n_segments as f64,
            SEGMENT_RANGE.0 as f64,
            SEGMENT_RANGE.1 as f64,
        )
    }
}

fn check(field: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), SynthError> {
    if !(lo..=hi).contains(&value) {
        return Err(SynthError::OutOfRange {
            field,
            value,
            lo,
            hi,
        });
    }
    Ok(())
}

pub fn feature_label(spec: &GlyphSpec, feature: FeatureName) -> bool {
    match feature {
        FeatureName::Thickness => spec.thickness >= THICK_THRESHOLD,
        FeatureName::Slant => spec.slant <= SLANT_THRESHOLD,
        FeatureName::Bar => spec.has_bar,
    }
}

/// Polyline vertices in unsheared image coordinates (x, y).
fn vertices(spec: &GlyphSpec) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..=spec.n_segments)
        .map(|_| (rng.random_range(10.0..22.0), rng.random_range(11.0..27.0)))
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Renders a glyph as a `[32, 32]` tensor with values in [0, 1].
pub fn render_glyph(spec: &GlyphSpec) -> Result<Tensor, SynthError> {
    spec.validate()?;
    let centre = IMAGE_SIDE as f64 / 2.0;
    let pts: Vec<(f64, f64)> = vertices(spec)
        .into_iter()
        .map(|(x, y)| (x + spec.slant * (y - centre), y))
        .collect();
    let mut data = vec![0.0; IMAGE_PIXELS];
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            let d = pts
                .windows(2)
                .map(|s| segment_distance(p, s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            // One-pixel linear falloff outside the stroke half-width.
            data[row * IMAGE_SIDE + col] = (spec.thickness + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    if spec.has_bar {
        for row in BAR_ROWS.0..=BAR_ROWS.1 {
            for col in BAR_COLS.0..=BAR_COLS.1 {
                data[row * IMAGE_SIDE + col] = 1.0;
            }
        }
    }
    Ok(Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], data).expect("image shape"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    image: Tensor,
    labels: BTreeMap<FeatureName, bool>,
    spec: GlyphSpec,
}

impl LabeledImage {
    pub fn from_spec(spec: GlyphSpec) -> Result<Self, SynthError> {
        let image = render_glyph(&spec)?;
        let labels = FeatureName::ALL
            .iter()
            .map(|&f| (f, feature_label(&spec, f)))
            .collect();
        Ok(Self {
            image,
            labels,
            spec,
        })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn spec(&self) -> &GlyphSpec {
        &self.spec
    }

    pub fn label(&self, feature: FeatureName) -> bool {
        self.labels[&feature]
    }

    pub fn labels(&self) -> &BTreeMap<FeatureName, bool> {
        &self.labels
    }
}

/// Draws `n` specs: thickness and slant uniform over their ranges, bar with
/// probability `bar_prob`, segment count uniform over its range.
pub fn sample_specs(n: usize, seed: u64, bar_prob: f64) -> Result<Vec<GlyphSpec>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&bar_prob) {
        return Err(SynthError::BadProbability(bar_prob));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| GlyphSpec {
            seed: rng.random(),
            thickness: rng.random_range(THICKNESS_RANGE.0..=THICKNESS_RANGE.1),
            slant: rng.random_range(SLANT_RANGE.0..=SLANT_RANGE.1),
            has_bar: rng.random_bool(bar_prob),
            n_segments: rng.random_range(SEGMENT_RANGE.0..=SEGMENT_RANGE.1),
        })
        .collect())
}

pub fn sample_dataset(n: usize, seed: u64, bar_prob: f64) -> Result<Vec<LabeledImage>, SynthError> {
    sample_specs(n, seed, bar_prob)?
        .into_iter()
        .map(LabeledImage::from_spec)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub bar_prob: f64,
    pub version: u32,
}

pub const IMAGES_FILE: &str = "images.f32";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json`, `images.f32` (little-endian f32, row-major n×32×32)
/// and `labels.csv` into `dir`.
pub fn export_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    data: &[LabeledImage],
) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(manifest)?,
    )?;

    let mut blob = Vec::with_capacity(data.len() * IMAGE_PIXELS * 4);
    for item in data {
        for &v in item.image.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(IMAGES_FILE), blob)?;

    let mut csv = fs::File::create(dir.join(LABELS_FILE))?;
    writeln!(csv, "index,thickness,slant,bar")?;
    for (i, item) in data.iter().enumerate() {
        let b = |f| u8::from(item.label(f));
        writeln!(
            csv,
            "{i},{},{},{}",
            b(FeatureName::Thickness),
            b(FeatureName::Slant),
            b(FeatureName::Bar)
        )?;
    }
    Ok(())
}

/// Regenerates a dataset from its manifest and checks it against the exported files.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledImage>), SynthError> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(SynthError::Corrupt(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let data = sample_dataset(manifest.n, manifest.seed, manifest.bar_prob)?;
    let blob = fs::read(dir.join(IMAGES_FILE))?;
    if blob.len() != manifest.n * IMAGE_PIXELS * 4 {
        return Err(SynthError::Corrupt(format!(
            "{} bytes of image data for n = {}",
            blob.len(),
            manifest.n
        )));
    }
    let stored = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let regenerated = data
        .iter()
        .flat_map(|d| d.image.data().iter().map(|&v| v as f32));
    if stored
        .zip(regenerated)
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(SynthError::Corrupt(
            "image data differs from regenerated glyphs".into(),
        ));
    }
    Ok((manifest, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(thickness: f64, slant: f64, has_bar: bool) -> GlyphSpec {
        GlyphSpec {
            seed: 11,
            thickness,
            slant,
            has_bar,
            n_segments: 3,
        }
    }

    #[test]
    fn thickness_out_of_range_names_field() {
        let err = render_glyph(&spec(4.0, 0.0, false)).unwrap_err();
        match err {
            SynthError::OutOfRange { field, .. } => assert_eq!(field, "thickness"),
            other => panic!("unexpected {other:?}"),
        }
        let err = render_glyph(&GlyphSpec {
            n_segments: 6,
            ..spec(1.0, 0.0, false)
        })
        .unwrap_err();
        assert!(matches!(
            err,
            SynthError::OutOfRange {
                field: "n_segments",
                ..
            }
        ));
    }

    #[test]
    fn rendering_is_bit_identical() {
        let s = spec(2.0, -0.3, true);
        let a = render_glyph(&s).unwrap();
        let b = render_glyph(&s).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn pixels_in_unit_interval() {
        for item in sample_dataset(50, 3, 0.5).unwrap() {
            assert_eq!(item.image().shape(), &[32, 32]);
            assert!(item.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bar_region_is_bright() {
        let specs = sample_specs(10, 99, 1.0).unwrap();
        for s in specs {
            assert!(s.has_bar);
            let img = render_glyph(&s).unwrap();
            let mut total = 0.0;
            let mut count = 0.0;
            for r in 2..=4 {
                for c in 6..=26 {
                    total += img.data()[r * 32 + c];
                    count += 1.0;
                }
            }
            assert!(total / count >= 0.9);
        }
    }

    #[test]
    fn glyph_never_touches_bar_rows() {
        for s in sample_specs(200, 5, 0.0).unwrap() {
            let img = render_glyph(&s).unwrap();
            for r in 0..=BAR_ROWS.1 {
                assert!(
                    img.row(r).iter().all(|&v| v == 0.0),
                    "stroke reached row {r}"
                );
            }
        }
    }

    #[test]
    fn label_boundaries() {
        assert!(feature_label(
            &spec(3.5, 0.0, false),
            FeatureName::Thickness
        ));
        assert!(!feature_label(
            &spec(0.5, 0.0, false),
            FeatureName::Thickness
        ));
        assert!(feature_label(&spec(1.0, -0.6, false), FeatureName::Slant));
        assert!(!feature_label(&spec(1.0, 0.6, false), FeatureName::Slant));
        assert!(feature_label(&spec(1.0, 0.0, true), FeatureName::Bar));
    }

    #[test]
    fn labels_match_predicates_on_grid() {
        for ti in 0..=30 {
            for si in 0..=24 {
                for bar in [false, true] {
                    let s = spec(
                        (0.5 + 0.1 * ti as f64).min(3.5),
                        (-0.6 + 0.05 * si as f64).min(0.6),
                        bar,
                    );
                    let item = LabeledImage::from_spec(s.clone()).unwrap();
                    assert_eq!(item.label(FeatureName::Thickness), s.thickness >= 3.2);
                    assert_eq!(item.label(FeatureName::Slant), s.slant <= -0.48);
                    assert_eq!(item.label(FeatureName::Bar), bar);
                }
            }
        }
    }

    #[test]
    fn base_rates_near_ten_percent() {
        let specs = sample_specs(100_000, 2024, 0.1).unwrap();
        for f in FeatureName::ALL {
            let rate =
                specs.iter().filter(|s| feature_label(s, f)).count() as f64 / specs.len() as f64;
            assert!((0.08..=0.12).contains(&rate), "{f}: {rate}");
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = sample_dataset(5, 7, 0.1).unwrap();
        let b = sample_dataset(5, 7, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_dataset(0, 7, 0.1),
            Err(SynthError::EmptyDataset)
        ));
    }

    #[test]
    fn bar_rate_for_ten_thousand() {
        let data = sample_specs(10_000, 1, 0.1).unwrap();
        let rate = data.iter().filter(|s| s.has_bar).count() as f64 / 1e4;
        assert!((0.08..=0.12).contains(&rate));
    }

    #[test]
    fn feature_tokens_round_trip() {
        for f in FeatureName::ALL {
            assert_eq!(f.as_str().parse::<FeatureName>().unwrap(), f);
            assert_eq!(
                serde_json::to_string(&f).unwrap(),
                format!("\"{}\"", f.as_str())
            );
        }
        assert!("Bar".parse::<FeatureName>().is_err());
    }

    #[test]
    fn export_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest {
            seed: 4,
            n: 6,
            bar_prob: 0.5,
            version: DATASET_FORMAT_VERSION,
        };
        let data = sample_dataset(6, 4, 0.5).unwrap();
        export_dataset(dir.path(), &manifest, &data).unwrap();
        let csv = fs::read_to_string(dir.path().join(LABELS_FILE)).unwrap();
        assert!(csv.starts_with("index,thickness,slant,bar\n"));
        assert_eq!(csv.lines().count(), 7);
        let blob = fs::read(dir.path().join(IMAGES_FILE)).unwrap();
        assert_eq!(blob.len(), 6 * 1024 * 4);
        let (m, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(loaded, data);
    }
}
