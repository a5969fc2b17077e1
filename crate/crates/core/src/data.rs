//! Procedural skeleton/creature domains, analytic detectors, and dataset
//! manifests.
//!
//! Both domains share one geometry: a round head, `n` vertical spikes on top
//! (`n` = class + 1), a short blunt snout on the facing side and a thin crest
//! trailing on the other side. Skeletons are white outlines with a ring-shaped
//! eye socket; creatures are filled, striped, class-coloured and have an eye
//! dot. The crest is longer than the snout, so the foreground bounding box
//! leans backwards while the mass leans forwards, which is what
//! [`orientation_of`] keys on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 6;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Pixels with Rec.601 luma above this (on a 0..1 scale) are foreground.
pub const LUMA_THRESHOLD: f32 = 0.25;

const SPIKE_SPACING: i32 = 3;
const SNOUT_LEN: i32 = 3;
const CREST_LEN: i32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Skeleton,
    Creature,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Skeleton => "skeleton",
            Domain::Creature => "creature",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "skeleton" => Some(Domain::Skeleton),
            "creature" => Some(Domain::Creature),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Left,
    Right,
}

impl Orientation {
    fn sign(self) -> i32 {
        match self {
            Orientation::Left => -1,
            Orientation::Right => 1,
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Left => "left",
            Orientation::Right => "right",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Directory / display name of a class: `"<spikes>-spike"`.
pub fn class_name(class: usize) -> String {
    format!("{}-spike", class + 1)
}

/// Parses `"3"`, `"3-spike"` or `"3-spike creature"` into class id 2.
pub fn parse_class(s: &str) -> Result<usize> {
    let head = s.trim().split(['-', ' ']).next().unwrap_or("");
    match head.parse::<usize>() {
        Ok(n) if (1..=NUM_CLASSES).contains(&n) => Ok(n - 1),
        _ => invalid(format!("unknown class {s:?}; expected 1..={NUM_CLASSES} spikes")),
    }
}

/// Everything that determines one rendered image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub class: usize,
    pub orientation: Orientation,
    pub domain: Domain,
    pub cx: i32,
    pub cy: i32,
    pub radius: i32,
    pub spike_len: i32,
    pub tint: [f32; 3],
    pub background: f32,
}

const HUES: [[f32; 3]; NUM_CLASSES] = [
    [0.95, 0.35, 0.30],
    [0.95, 0.65, 0.20],
    [0.75, 0.90, 0.25],
    [0.30, 0.85, 0.40],
    [0.35, 0.55, 0.98],
    [0.80, 0.40, 0.90],
];

impl GlyphSpec {
    pub fn random(class: usize, domain: Domain, rng: &mut impl Rng) -> Self {
        let radius = rng.gen_range(8..=9);
        let cx = if radius == 9 { rng.gen_range(15..=16) } else { rng.gen_range(14..=17) };
        Self {
            class,
            orientation: if rng.gen_bool(0.5) { Orientation::Right } else { Orientation::Left },
            domain,
            cx,
            cy: rng.gen_range(16..=20),
            radius,
            spike_len: rng.gen_range(4..=6),
            tint: [0; 3].map(|_| rng.gen_range(-0.05..=0.05)),
            background: rng.gen_range(0.02..=0.08),
        }
    }

    fn spike_xs(&self) -> Vec<i32> {
        let n = self.class as i32 + 1;
        (0..n)
            .map(|i| self.cx + SPIKE_SPACING * i - SPIKE_SPACING * (n - 1) / 2)
            .collect()
    }

    /// Renders to a `[3, 32, 32]` tensor in `[-1, 1]`.
    pub fn render(&self) -> Tensor {
        let n = IMAGE_SIZE;
        let mut rgb = vec![[self.background; 3]; n * n];
        let body = match self.domain {
            Domain::Skeleton => [0.92; 3],
            Domain::Creature => {
                let h = HUES[self.class];
                [0, 1, 2].map(|c| (h[c] + self.tint[c]).clamp(0.0, 1.0))
            }
        };
        let bright = [0.95f32; 3];
        let dim = |c: [f32; 3]| c.map(|v| v * 0.75);
        let mut put = |x: i32, y: i32, c: [f32; 3]| {
            if (0..n as i32).contains(&x) && (0..n as i32).contains(&y) {
                rgb[y as usize * n + x as usize] = c;
            }
        };
        let (cx, cy, r, s) = (self.cx, self.cy, self.radius, self.orientation.sign());
        let rf = r as f32;

        // head
        for y in cy - r - 1..=cy + r + 1 {
            for x in cx - r - 1..=cx + r + 1 {
                let d = (((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f32).sqrt();
                match self.domain {
                    Domain::Skeleton if (d - rf).abs() < 0.6 => put(x, y, body),
                    Domain::Creature if d <= rf => {
                        let stripe = ((x + y).rem_euclid(4)) < 2;
                        put(x, y, if stripe { dim(body) } else { body });
                    }
                    _ => {}
                }
            }
        }
        // snout on the facing side, rows cy-1..=cy+3
        for dx in 1..=SNOUT_LEN {
            for y in cy - 1..=cy + 3 {
                let x = cx + s * (r + dx);
                let edge = dx == SNOUT_LEN || y == cy - 1 || y == cy + 3;
                if self.domain == Domain::Creature || edge {
                    put(x, y, body);
                }
            }
        }
        // skeleton snout also needs its inner wall where it meets the head
        if self.domain == Domain::Skeleton {
            for y in cy - 1..=cy + 3 {
                put(cx + s * r, y, body);
            }
        }
        // crest trailing behind, two rows thick
        for dx in 1..=CREST_LEN {
            for y in cy - 3..=cy - 2 {
                put(cx - s * (r + dx), y, body);
            }
        }
        // spikes from a shared tip row down to the head outline
        let top = cy - r - self.spike_len;
        for x in self.spike_xs() {
            let dx = (x - cx) as f32;
            let surface = cy as f32 - (rf * rf - dx * dx).max(0.0).sqrt();
            let mut y = top;
            while (y as f32) < surface {
                put(x, y, body);
                y += 1;
            }
        }
        // eye on the facing side
        let (ex, ey) = (cx + s * (r / 2), cy - 3);
        match self.domain {
            Domain::Skeleton => {
                for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                    put(ex + dx, ey + dy, bright);
                }
                put(ex, ey, [self.background; 3]);
            }
            Domain::Creature => {
                for (dx, dy) in [(0, 0), (s, 0), (0, 1), (s, 1)] {
                    put(ex + dx, ey + dy, bright);
                }
            }
        }

        let mut data = vec![0.0f32; 3 * n * n];
        for (i, px) in rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * n * n + i] = px[c] * 2.0 - 1.0;
            }
        }
        Tensor::from_parts(vec![3, n, n], data)
    }
}

fn luma_mask(image: &Tensor) -> Result<(usize, usize, Vec<bool>)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return invalid(format!("expected a [3, H, W] image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let plane = h * w;
    let mask = (0..plane)
        .map(|i| {
            let px = |c: usize| (d[c * plane + i] + 1.0) * 0.5;
            0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2) > LUMA_THRESHOLD
        })
        .collect();
    Ok((h, w, mask))
}

/// Signed horizontal offset of the foreground centroid from the centre of
/// the foreground bounding box, in pixels.
pub fn orientation_offset(image: &Tensor) -> Result<f64> {
    let (h, w, mask) = luma_mask(image)?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    let (mut lo, mut hi) = (usize::MAX, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                sum += x as f64;
                count += 1;
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    if count == 0 {
        return Err(Error::NoSubject);
    }
    Ok(sum / count as f64 - (lo + hi) as f64 / 2.0)
}

/// Facing direction: right when the foreground mass sits right of its
/// bounding-box centre.
pub fn orientation_of(image: &Tensor) -> Result<Orientation> {
    let off = orientation_offset(image)?;
    Ok(if off < 0.0 { Orientation::Left } else { Orientation::Right })
}

/// Number of spikes, counted as foreground runs one row below the topmost
/// foreground row.
pub fn spike_count(image: &Tensor) -> Result<usize> {
    let (h, w, mask) = luma_mask(image)?;
    let Some(top) = (0..h).find(|&y| mask[y * w..(y + 1) * w].iter().any(|&m| m)) else {
        return Err(Error::NoSubject);
    };
    let row = &mask[(top + 1).min(h - 1) * w..][..w];
    Ok(row.iter().zip(std::iter::once(&false).chain(row.iter())).filter(|(&cur, &prev)| cur && !prev).count())
}

/// Class id recovered from the spike count.
pub fn class_of(image: &Tensor) -> Result<usize> {
    let n = spike_count(image)?;
    if !(1..=NUM_CLASSES).contains(&n) {
        return invalid(format!("counted {n} spikes"));
    }
    Ok(n - 1)
}

/// Horizontal mirror of a `[C, H, W]` image.
pub fn mirror(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

// ---------------------------------------------------------------------------
// PNG I/O

/// Loads an 8-bit PNG as a `[3, H, W]` tensor in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn image_to_rgb8(image: &Tensor) -> Result<image::RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return invalid(format!("expected a [3, H, W] image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (((d[c * h * w + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8))
    }))
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    image_to_rgb8(image)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the dataset root.
    pub path: String,
    pub domain: Domain,
    pub class: usize,
    pub orientation: Option<Orientation>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    /// Non-fatal findings such as empty class directories.
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn select(&self, domain: Domain, split: Split) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads the images of the given records as `[3, H, W]` tensors.
    pub fn load_images(&self, records: &[&ImageRecord]) -> Result<Vec<Tensor>> {
        records.iter().map(|r| load_image(&self.root.join(&r.path))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetCounts {
    pub train: usize,
    pub test: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        Self { train: 1080, test: 121 }
    }
}

fn domain_seed(seed: u64, domain: Domain) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.name().as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Specs for one domain. Within each split the classes cycle, so every
/// class count differs by at most one.
pub fn toy_specs(seed: u64, domain: Domain, counts: DatasetCounts) -> Vec<(GlyphSpec, Split, uuid::Uuid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, domain));
    let mut out = Vec::with_capacity(counts.train + counts.test);
    for (split, n) in [(Split::Train, counts.train), (Split::Test, counts.test)] {
        for i in 0..n {
            let spec = GlyphSpec::random(i % NUM_CLASSES, domain, &mut rng);
            let id = uuid::Builder::from_random_bytes(rng.gen()).into_uuid();
            out.push((spec, split, id));
        }
    }
    out
}

/// Renders both domains under `root` and writes `manifest.jsonl`.
pub fn gen_toy_dataset(root: &Path, seed: u64, counts: DatasetCounts) -> Result<DatasetManifest> {
    if counts.train < NUM_CLASSES {
        return invalid(format!(
            "need at least {NUM_CLASSES} training images per domain (one per class), got {}",
            counts.train
        ));
    }
    let mut records = Vec::new();
    for domain in [Domain::Skeleton, Domain::Creature] {
        for (spec, split, id) in toy_specs(seed, domain, counts) {
            let rel = format!("{}/{}/{}.png", domain.name(), class_name(spec.class), id);
            save_image(&root.join(&rel), &spec.render())?;
            records.push(ImageRecord {
                path: rel,
                domain,
                class: spec.class,
                orientation: Some(spec.orientation),
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records,
        warnings: Vec::new(),
    };
    manifest.write_jsonl(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Deterministic split from a hash of the file name.
pub fn hashed_split(file_name: &str, test_fraction: f64) -> Split {
    let digest = Sha256::digest(file_name.as_bytes());
    let u = u64::from_le_bytes(digest[..8].try_into().unwrap()) as f64 / u64::MAX as f64;
    if u < test_fraction {
        Split::Test
    } else {
        Split::Train
    }
}

pub const DEFAULT_TEST_FRACTION: f64 = 121.0 / 1201.0;

/// Reads a dataset root. A `manifest.jsonl` is authoritative when present;
/// otherwise the `<domain>/<class>/*.png` tree is scanned, classes are
/// numbered by sorted directory name and splits come from [`hashed_split`].
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    load_manifest_with(root, DEFAULT_TEST_FRACTION)
}

pub fn load_manifest_with(root: &Path, test_fraction: f64) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let (records, warnings) = if manifest_path.is_file() {
        let text = std::fs::read_to_string(&manifest_path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ImageRecord>, _>>()?;
        (records, Vec::new())
    } else {
        scan_tree(root, test_fraction)?
    };
    check_sizes(root, &records)?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records,
        warnings,
    })
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn scan_tree(root: &Path, test_fraction: f64) -> Result<(Vec<ImageRecord>, Vec<String>)> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for ddir in sorted_dirs(root)? {
        let dname = ddir.file_name().unwrap().to_string_lossy().to_string();
        let Some(domain) = Domain::from_name(&dname) else {
            warnings.push(format!("skipping unknown domain directory {dname}"));
            continue;
        };
        for (class, cdir) in sorted_dirs(&ddir)?.into_iter().enumerate() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&cdir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            if files.is_empty() {
                let msg = format!("empty class directory {}", cdir.display());
                log::warn!("{msg}");
                warnings.push(msg);
            }
            for f in files {
                let rel = f.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                let fname = f.file_name().unwrap().to_string_lossy().to_string();
                records.push(ImageRecord {
                    path: rel,
                    domain,
                    class,
                    orientation: None,
                    split: hashed_split(&fname, test_fraction),
                });
            }
        }
    }
    Ok((records, warnings))
}

fn check_sizes(root: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut by_size: BTreeMap<(u32, u32), Vec<PathBuf>> = BTreeMap::new();
    for r in records {
        let p = root.join(&r.path);
        let dims = image::image_dimensions(&p)?;
        by_size.entry(dims).or_default().push(p);
    }
    if by_size.len() <= 1 {
        return Ok(());
    }
    let offenders = by_size
        .into_iter()
        .flat_map(|((w, h), paths)| paths.into_iter().map(move |p| (p, w, h)))
        .collect();
    Err(Error::MixedSizes(offenders))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_specs() -> Vec<GlyphSpec> {
        let mut out = Vec::new();
        for domain in [Domain::Skeleton, Domain::Creature] {
            for class in 0..NUM_CLASSES {
                for orientation in [Orientation::Left, Orientation::Right] {
                    for radius in 8..=9 {
                        let cxs = if radius == 9 { 15..=16 } else { 14..=17 };
                        for cx in cxs {
                            for cy in 16..=20 {
                                for spike_len in 4..=6 {
                                    out.push(GlyphSpec {
                                        class,
                                        orientation,
                                        domain,
                                        cx,
                                        cy,
                                        radius,
                                        spike_len,
                                        tint: [0.05, -0.05, 0.05],
                                        background: 0.08,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn detectors_are_exact_over_the_whole_jitter_grid() {
        let mut min_margin = f64::MAX;
        for spec in all_specs() {
            let img = spec.render();
            assert_eq!(class_of(&img).unwrap(), spec.class, "{spec:?}");
            assert_eq!(orientation_of(&img).unwrap(), spec.orientation, "{spec:?}");
            assert_eq!(orientation_of(&mirror(&img)).unwrap(), match spec.orientation {
                Orientation::Left => Orientation::Right,
                Orientation::Right => Orientation::Left,
            });
            min_margin = min_margin.min(orientation_offset(&img).unwrap().abs());
        }
        assert!(min_margin > 0.5, "orientation margin {min_margin}");
    }

    #[test]
    fn glyph_fits_canvas() {
        for spec in all_specs() {
            let img = spec.render();
            let (h, w, mask) = luma_mask(&img).unwrap();
            for y in 0..h {
                assert!(!mask[y * w] && !mask[y * w + w - 1]);
            }
            assert!(!mask[..w].iter().any(|&m| m), "{spec:?}");
            assert!(!mask[(h - 1) * w..].iter().any(|&m| m), "{spec:?}");
        }
    }

    #[test]
    fn all_black_image_has_no_subject() {
        let img = Tensor::full(&[3, 32, 32], -1.0);
        assert!(matches!(orientation_of(&img), Err(Error::NoSubject)));
        assert!(matches!(class_of(&img), Err(Error::NoSubject)));
    }

    #[test]
    fn class_names_parse() {
        assert_eq!(parse_class("3").unwrap(), 2);
        assert_eq!(parse_class("3-spike").unwrap(), 2);
        assert_eq!(parse_class("6-spike creature").unwrap(), 5);
        assert!(parse_class("7").is_err());
        assert!(parse_class("spike").is_err());
        assert_eq!(class_name(2), "3-spike");
    }

    #[test]
    fn split_fraction_is_near_nominal() {
        let test = (0..121)
            .filter(|i| hashed_split(&format!("img_{i:04}.png"), 0.1) == Split::Test)
            .count();
        // binomial(121, 0.1): mean 12.1, sd 3.3
        assert!((6..=18).contains(&test), "{test}");
    }

    #[test]
    fn domains_use_disjoint_streams() {
        let c = DatasetCounts { train: 30, test: 6 };
        let sk = toy_specs(7, Domain::Skeleton, c);
        let cr = toy_specs(7, Domain::Creature, c);
        let ids: std::collections::HashSet<_> = sk.iter().map(|s| s.2).collect();
        assert!(cr.iter().all(|s| !ids.contains(&s.2)));
        let jitter = |g: &GlyphSpec| (g.cx, g.cy, g.radius, g.spike_len, g.tint.map(f32::to_bits), g.background.to_bits());
        let sj: std::collections::HashSet<_> = sk.iter().map(|s| jitter(&s.0)).collect();
        assert!(cr.iter().all(|s| !sj.contains(&jitter(&s.0))));
    }
}
