//! Synthetic vehicles whose identity lives in one horizontal band.
//!
//! Every image is a coarse grey template chosen by the vehicle type, tinted
//! by the colour, with an identity-specific random patch stamped at a fixed
//! position inside the identity's cue band (top, middle or bottom third).
//! Images of one identity differ only by pixel noise, so the patch is the
//! only thing separating two vehicles that share type and colour.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{RamError, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

use super::batch::Dataset;
use super::manifest::{load_manifest, parse_manifest, DatasetManifest, Split, MANIFEST_HEADER};
use super::ppm;

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const SPEC_ECHO_NAME: &str = "synthetic.txt";

/// Coarse template grid per axis.
const TEMPLATE_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Top,
    Middle,
    Bottom,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Top, Band::Middle, Band::Bottom];

    /// Row range of this third of an image of `height` rows.
    pub fn rows(self, height: usize) -> std::ops::Range<usize> {
        let (a, b) = (height / 3, 2 * height / 3);
        match self {
            Band::Top => 0..a,
            Band::Middle => a..b,
            Band::Bottom => b..height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CueRegion {
    /// Drawn uniformly per identity.
    Random,
    Fixed(Band),
}

impl FromStr for CueRegion {
    type Err = RamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CueRegion::Random),
            "top" => Ok(CueRegion::Fixed(Band::Top)),
            "middle" => Ok(CueRegion::Fixed(Band::Middle)),
            "bottom" => Ok(CueRegion::Fixed(Band::Bottom)),
            other => Err(RamError::Config(format!("unknown cue region `{other}`"))),
        }
    }
}

impl fmt::Display for CueRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CueRegion::Random => "random",
            CueRegion::Fixed(Band::Top) => "top",
            CueRegion::Fixed(Band::Middle) => "middle",
            CueRegion::Fixed(Band::Bottom) => "bottom",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub num_colors: usize,
    pub num_types: usize,
    pub cue_region: CueRegion,
    pub patch_size: usize,
    pub noise_std: f64,
    /// The last `num_test_ids` identities are held out for query/gallery.
    pub num_test_ids: usize,
    /// Images per held-out identity tagged `query`; the rest are `gallery`.
    pub queries_per_id: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_ids: 20,
            images_per_id: 10,
            height: 32,
            width: 32,
            num_colors: 4,
            num_types: 3,
            cue_region: CueRegion::Random,
            patch_size: 6,
            noise_std: 0.2,
            num_test_ids: 10,
            queries_per_id: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RamError::Config(format!("synthetic: {m}")));
        if self.num_ids == 0 || self.images_per_id == 0 {
            return bad("num_ids and images_per_id must be positive".into());
        }
        if self.num_colors == 0 || self.num_types == 0 {
            return bad("num_colors and num_types must be positive".into());
        }
        if self.num_test_ids > self.num_ids {
            return bad(format!(
                "{} test identities requested out of {}",
                self.num_test_ids, self.num_ids
            ));
        }
        if self.num_test_ids > 0 && self.queries_per_id >= self.images_per_id {
            return bad("each test identity needs at least one gallery image".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        let band_h = Band::ALL.iter().map(|b| b.rows(self.height).len()).min().unwrap_or(0);
        if self.patch_size == 0 || self.patch_size > band_h || self.patch_size > self.width {
            return bad(format!(
                "a {0}x{0} patch does not fit a {band_h}x{1} band",
                self.patch_size, self.width
            ));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &mut KvMap) -> Result<()> {
        self.num_ids = kv.take_or("synthetic.num_ids", self.num_ids)?;
        self.images_per_id = kv.take_or("synthetic.images_per_id", self.images_per_id)?;
        self.height = kv.take_or("synthetic.height", self.height)?;
        self.width = kv.take_or("synthetic.width", self.width)?;
        self.num_colors = kv.take_or("synthetic.num_colors", self.num_colors)?;
        self.num_types = kv.take_or("synthetic.num_types", self.num_types)?;
        if let Some(c) = kv.take("synthetic.cue_region") {
            self.cue_region = c.parse()?;
        }
        self.patch_size = kv.take_or("synthetic.patch_size", self.patch_size)?;
        self.noise_std = kv.take_or("synthetic.noise_std", self.noise_std)?;
        self.num_test_ids = kv.take_or("synthetic.num_test_ids", self.num_test_ids)?;
        self.queries_per_id = kv.take_or("synthetic.queries_per_id", self.queries_per_id)?;
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("synthetic.num_ids", self.num_ids.to_string()),
            ("synthetic.images_per_id", self.images_per_id.to_string()),
            ("synthetic.height", self.height.to_string()),
            ("synthetic.width", self.width.to_string()),
            ("synthetic.num_colors", self.num_colors.to_string()),
            ("synthetic.num_types", self.num_types.to_string()),
            ("synthetic.cue_region", self.cue_region.to_string()),
            ("synthetic.patch_size", self.patch_size.to_string()),
            ("synthetic.noise_std", self.noise_std.to_string()),
            ("synthetic.num_test_ids", self.num_test_ids.to_string()),
            ("synthetic.queries_per_id", self.queries_per_id.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityInfo {
    pub vehicle_id: u64,
    pub color: usize,
    pub kind: usize,
    pub band: Band,
    /// Top-left corner of the cue patch.
    pub patch_origin: (usize, usize),
    pub test: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub file_name: String,
    pub vehicle_id: u64,
    /// `3 x H x W`, already quantized to 8 bits.
    pub image: Tensor,
    pub bytes: Vec<u8>,
    pub split: &'static str,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub identities: Vec<IdentityInfo>,
    pub images: Vec<SyntheticImage>,
    pub manifest_csv: String,
}

impl SyntheticDataset {
    /// The generated manifest; image files are not checked.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        parse_manifest(&self.manifest_csv, Path::new("."), "synthetic manifest", false)
    }

    /// The images of `splits` as a [`Dataset`], without touching disk.
    pub fn dataset(&self, splits: &[Split]) -> Result<Dataset> {
        let manifest = self.manifest()?;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        let mut images = Vec::new();
        for (s, img) in manifest.samples.iter().zip(&self.images) {
            if splits.contains(&s.split) {
                labels.push(manifest.train_label(s));
                samples.push(s.clone());
                images.push(img.image.clone());
            }
        }
        Dataset::from_images(samples, labels, images)
    }
}

/// Generates the dataset in memory; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let templates: Vec<Vec<f64>> = (0..spec.num_types)
        .map(|_| {
            (0..TEMPLATE_CELLS * TEMPLATE_CELLS)
                .map(|_| rng.random_range(0.2..0.8))
                .collect()
        })
        .collect();
    let tints: Vec<[f64; 3]> = (0..spec.num_colors)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.4..1.0)))
        .collect();

    let first_test = spec.num_ids - spec.num_test_ids;
    let p = spec.patch_size;
    let mut identities = Vec::with_capacity(spec.num_ids);
    let mut patches = Vec::with_capacity(spec.num_ids);
    for id in 0..spec.num_ids {
        let color = rng.random_range(0..spec.num_colors);
        let kind = rng.random_range(0..spec.num_types);
        let band = match spec.cue_region {
            CueRegion::Random => Band::ALL[rng.random_range(0..3)],
            CueRegion::Fixed(b) => b,
        };
        let rows = band.rows(h);
        let top = rng.random_range(rows.start..=rows.end - p);
        let left = rng.random_range(0..=w - p);
        let patch: Vec<f64> = (0..3 * p * p).map(|_| rng.random_range(0.0..1.0)).collect();
        identities.push(IdentityInfo {
            vehicle_id: id as u64,
            color,
            kind,
            band,
            patch_origin: (top, left),
            test: id >= first_test,
        });
        patches.push(patch);
    }

    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| RamError::Config(format!("synthetic noise: {e}")))?;
    let mut images = Vec::with_capacity(spec.num_ids * spec.images_per_id);
    let mut csv = MANIFEST_HEADER.join(",");
    csv.push('\n');
    for (info, patch) in identities.iter().zip(&patches) {
        let clean = render_clean(spec, &templates[info.kind], &tints[info.color], info, patch);
        for k in 0..spec.images_per_id {
            let mut data = clean.clone();
            if spec.noise_std > 0.0 {
                for v in &mut data {
                    *v += noise.sample(&mut rng);
                }
            }
            let image = Tensor::new(vec![3, h, w], data)?;
            let bytes = ppm::encode(&image)?;
            let image = ppm::decode(&bytes)?;
            let split = match (info.test, k < spec.queries_per_id) {
                (false, _) => "train",
                (true, true) => "query",
                (true, false) => "gallery",
            };
            let file_name = format!("images/{:04}_{:03}.ppm", info.vehicle_id, k);
            csv.push_str(&format!(
                "{file_name},{},{},{},,{split}\n",
                info.vehicle_id, info.color, info.kind
            ));
            images.push(SyntheticImage {
                file_name,
                vehicle_id: info.vehicle_id,
                image,
                bytes,
                split,
            });
        }
    }
    Ok(SyntheticDataset {
        identities,
        images,
        manifest_csv: csv,
    })
}

fn render_clean(spec: &SyntheticSpec, template: &[f64], tint: &[f64; 3], info: &IdentityInfo, patch: &[f64]) -> Vec<f64> {
    let (h, w, p) = (spec.height, spec.width, spec.patch_size);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let cy = y * TEMPLATE_CELLS / h;
            for x in 0..w {
                let cx = x * TEMPLATE_CELLS / w;
                data[(c * h + y) * w + x] = template[cy * TEMPLATE_CELLS + cx] * tint[c];
            }
        }
    }
    let (top, left) = info.patch_origin;
    for c in 0..3 {
        for dy in 0..p {
            for dx in 0..p {
                data[(c * h + top + dy) * w + left + dx] = patch[(c * p + dy) * p + dx];
            }
        }
    }
    data
}

/// Writes images, `manifest.csv` and `synthetic.txt` (the spec echo plus
/// seed) under `out_dir`, then loads the manifest back.
pub fn write_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let ds = generate_synthetic(spec)?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| RamError::io(&images_dir, e))?;
    for img in &ds.images {
        let path = out_dir.join(&img.file_name);
        fs::write(&path, &img.bytes).map_err(|e| RamError::io(&path, e))?;
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    fs::write(&manifest, &ds.manifest_csv).map_err(|e| RamError::io(&manifest, e))?;
    let mut echo = spec.to_kv();
    echo.push(("run.seed".into(), spec.seed.to_string()));
    let echo_path = out_dir.join(SPEC_ECHO_NAME);
    fs::write(&echo_path, crate::kv::render(&echo)).map_err(|e| RamError::io(&echo_path, e))?;
    load_manifest(&manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_ids: 4,
            images_per_id: 3,
            num_test_ids: 2,
            queries_per_id: 1,
            noise_std: noise,
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_identity_images_are_identical() {
        let ds = generate_synthetic(&small(0.0)).unwrap();
        for chunk in ds.images.chunks(3) {
            assert!(chunk.iter().all(|i| i.bytes == chunk[0].bytes));
        }
        assert_ne!(ds.images[0].bytes, ds.images[3].bytes);
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_synthetic(&small(0.1)).unwrap();
        let b = generate_synthetic(&small(0.1)).unwrap();
        assert_eq!(a.manifest_csv, b.manifest_csv);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.bytes == y.bytes));
        let c = generate_synthetic(&SyntheticSpec { seed: 10, ..small(0.1) }).unwrap();
        assert_ne!(a.images[0].bytes, c.images[0].bytes);
    }

    #[test]
    fn same_look_differs_only_in_cue_band() {
        let spec = SyntheticSpec {
            num_ids: 2,
            images_per_id: 1,
            num_colors: 1,
            num_types: 1,
            num_test_ids: 0,
            cue_region: CueRegion::Fixed(Band::Bottom),
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (a, b) = (&ds.images[0].image, &ds.images[1].image);
        let rows = Band::Bottom.rows(32);
        let mut differs = false;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let (va, vb) = (a.get(&[c, y, x]), b.get(&[c, y, x]));
                    if !rows.contains(&y) {
                        assert_eq!(va, vb, "row {y} outside the cue band differs");
                    } else if va != vb {
                        differs = true;
                    }
                }
            }
        }
        assert!(differs);
    }

    #[test]
    fn splits_and_rows() {
        let ds = generate_synthetic(&small(0.0)).unwrap();
        let splits: Vec<&str> = ds.images.iter().map(|i| i.split).collect();
        assert_eq!(
            splits,
            ["train", "train", "train", "train", "train", "train", "query", "gallery", "gallery", "query", "gallery", "gallery"]
        );
        assert_eq!(ds.manifest_csv.lines().count(), 1 + 12);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec { num_ids: 0, ..small(0.0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { patch_size: 11, ..small(0.0) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { queries_per_id: 3, ..small(0.0) }).is_err());
    }
}
