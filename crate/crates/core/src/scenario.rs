//! Seeded synthetic segmentation scenes with normal-ID, hard-ID and OOD pixels.
//!
//! An image is a grid of square cells. Each ID cell renders the sinusoidal
//! pattern of one of `num_classes` classes plus Gaussian pixel noise. A hard
//! cell is an ID cell whose pattern is warped and whose noise is amplified in
//! proportion to `hard_id_noise`. OOD test images carry one square block of
//! cells rendered from a separate, independently seeded pattern bank.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{checked_volume, read_file, write_file, ByteReader, ByteWriter};
use crate::config::stream_seed;
use crate::dump::OOD_LABEL;
use crate::error::{Error, ParseError, Result};
use crate::micronet::LabeledImage;
use crate::tensorgrid::Grid;

/// Minimum distance between the mean colours of any two generated patterns.
const MIN_CLASS_SEPARATION: f64 = 0.5;
/// Minimum distance between an OOD pattern's mean colour and every ID one.
const MIN_OOD_SEPARATION: f64 = 0.45;
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    /// Filled in from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test_id: usize,
    pub n_test_ood: usize,
    pub hard_id_fraction: f64,
    pub hard_id_noise: f64,
    pub ood_pattern_count: usize,
    pub cell_size: usize,
    pub pixel_noise: f64,
    /// Side length, in cells, of the square OOD block in OOD test images.
    pub ood_region_cells: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            seed: 0,
            num_classes: 4,
            height: 64,
            width: 64,
            channels: 3,
            n_train: 64,
            n_test_id: 8,
            n_test_ood: 16,
            hard_id_fraction: 0.25,
            hard_id_noise: 1.0,
            ood_pattern_count: 3,
            cell_size: 8,
            pixel_noise: 0.1,
            ood_region_cells: 2,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("scenario: {m}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_classes >= OOD_LABEL as usize {
            return bad("num_classes collides with the OOD label".into());
        }
        if self.channels == 0 || self.cell_size == 0 {
            return bad("channels and cell_size must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if !self.height.is_multiple_of(self.cell_size) || !self.width.is_multiple_of(self.cell_size) {
            return bad(format!(
                "image {}x{} is not a whole number of {}-pixel cells",
                self.height, self.width, self.cell_size
            ));
        }
        let (rows, cols) = self.cells();
        if self.ood_region_cells > rows.min(cols) {
            return bad(format!(
                "OOD region of {0}x{0} cells does not fit a {rows}x{cols} cell grid",
                self.ood_region_cells
            ));
        }
        if self.ood_pattern_count == 0 {
            return bad("ood_pattern_count must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.hard_id_fraction) {
            return bad(format!("hard_id_fraction {} outside [0, 1]", self.hard_id_fraction));
        }
        for (name, v) in [("hard_id_noise", self.hard_id_noise), ("pixel_noise", self.pixel_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.height / self.cell_size, self.width / self.cell_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum PixelKind {
    Normal = 0,
    Hard = 1,
    Ood = 2,
}

impl PixelKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PixelKind::Normal),
            1 => Some(PixelKind::Hard),
            2 => Some(PixelKind::Ood),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub id: String,
    pub image: Grid,
    /// Class id per pixel, [`OOD_LABEL`] for OOD pixels.
    pub labels: Vec<u16>,
    pub kinds: Vec<PixelKind>,
}

impl SceneImage {
    pub fn labeled(&self) -> LabeledImage {
        LabeledImage {
            image: self.image.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub images: Vec<SceneImage>,
}

const DATASET_MAGIC: &[u8; 4] = b"CSMX";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn grids(&self) -> Vec<Grid> {
        self.images.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labeled(&self) -> Vec<LabeledImage> {
        self.images.iter().map(SceneImage::labeled).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.len_u32(self.num_classes, "class count")?;
        w.len_u32(self.images.len(), "image count")?;
        for s in &self.images {
            w.str16(&s.id)?;
            w.len_u32(s.image.height, "image height")?;
            w.len_u32(s.image.width, "image width")?;
            w.len_u32(s.image.channels, "image channels")?;
            for &v in &s.image.data {
                w.f32(v as f32);
            }
            for &l in &s.labels {
                w.u16(l);
            }
            for &k in &s.kinds {
                w.u8(k as u8);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = ByteReader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let num_classes = r.u32("class count")? as usize;
        let count = r.u32("image count")? as usize;
        let mut images = Vec::new();
        for i in 0..count {
            let id = r.str16(&format!("image {i} id"))?;
            let shape_at = r.offset();
            let ctx = format!("image {id} shape");
            let (h, w, c) = (r.u32(&ctx)? as usize, r.u32(&ctx)? as usize, r.u32(&ctx)? as usize);
            let n = checked_volume(&[h, w, c], shape_at, &ctx)?;
            let pixels = checked_volume(&[h, w], shape_at, &ctx)?;
            let data_at = r.offset();
            let data: Vec<f64> = r.f32_array(n, &format!("image {id} pixels"))?.into_iter().map(f64::from).collect();
            let image = Grid::new(h, w, c, data).map_err(|e| r.invalid(data_at, &ctx, e.to_string()))?;
            let labels = r.u16_array(pixels, &format!("image {id} labels"))?;
            let kinds_at = r.offset();
            let raw = r.array(pixels, 1, &format!("image {id} kinds"), |b| b[0])?;
            let kinds = raw
                .iter()
                .map(|&k| PixelKind::from_u8(k))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| r.invalid(kinds_at, "pixel kinds", "unknown kind code"))?;
            images.push(SceneImage { id, image, labels, kinds });
        }
        r.finish("dataset")?;
        Ok(Dataset { num_classes, images })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&read_file(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub train: Dataset,
    pub test: Dataset,
}

/// A cell texture: per-channel offset, amplitude and phase over a shared
/// spatial frequency.
#[derive(Debug, Clone)]
struct Pattern {
    base: Vec<f64>,
    amp: Vec<f64>,
    phase: Vec<f64>,
    freq: (f64, f64),
}

impl Pattern {
    fn draw(rng: &mut ChaCha8Rng, channels: usize, look: &Look) -> Self {
        Pattern {
            base: (0..channels).map(|_| rng.random_range(-look.base..look.base)).collect(),
            amp: (0..channels).map(|_| rng.random_range(0.2..0.6)).collect(),
            phase: (0..channels).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
            freq: (rng.random_range(look.freq.clone()), rng.random_range(look.freq.clone())),
        }
    }

    fn distance(&self, other: &Pattern) -> f64 {
        self.base
            .iter()
            .zip(&other.base)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Ranges patterns are drawn from.
struct Look {
    base: f64,
    freq: std::ops::Range<f64>,
}

const ID_LOOK: Look = Look { base: 1.0, freq: 0.5..2.0 };
const OOD_LOOK: Look = Look { base: 2.5, freq: 0.5..2.0 };

/// Per-cell deformation of a pattern; all zero for an unperturbed cell.
#[derive(Debug, Clone, Default)]
struct Warp {
    shift: Vec<f64>,
    phase: f64,
    freq_scale: f64,
    noise_gain: f64,
}

impl Warp {
    fn identity(channels: usize) -> Self {
        Warp {
            shift: vec![0.0; channels],
            phase: 0.0,
            freq_scale: 1.0,
            noise_gain: 1.0,
        }
    }

    /// A hard-ID warp. Draws the same number of variates whatever the
    /// strength, so `strength = 0` leaves the rest of the stream unchanged.
    fn hard(rng: &mut ChaCha8Rng, channels: usize, strength: f64) -> Self {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        Warp {
            shift: (0..channels).map(|_| strength * 0.35 * unit.sample(rng)).collect(),
            phase: strength * rng.random_range(-PI..PI),
            freq_scale: 1.0 + strength * rng.random_range(-0.5..0.5),
            noise_gain: 1.0 + 0.5 * strength,
        }
    }
}

fn bank(rng: &mut ChaCha8Rng, count: usize, channels: usize, look: &Look, accept: impl Fn(&Pattern, &[Pattern]) -> bool) -> Result<Vec<Pattern>> {
    let mut out: Vec<Pattern> = Vec::with_capacity(count);
    let mut draws = 0;
    while out.len() < count {
        if draws == MAX_DRAWS {
            return Err(Error::config(format!(
                "could not draw {count} well-separated patterns in {channels} channels"
            )));
        }
        draws += 1;
        let p = Pattern::draw(rng, channels, look);
        if accept(&p, &out) {
            out.push(p);
        }
    }
    Ok(out)
}

struct Renderer<'a> {
    spec: &'a ScenarioSpec,
    noise: Normal<f64>,
}

impl Renderer<'_> {
    fn paint(&self, grid: &mut Grid, cell: (usize, usize), pattern: &Pattern, warp: &Warp, rng: &mut ChaCha8Rng) {
        let s = self.spec.cell_size;
        let (fx, fy) = (pattern.freq.0 * warp.freq_scale, pattern.freq.1 * warp.freq_scale);
        for dy in 0..s {
            for dx in 0..s {
                let (y, x) = (cell.0 * s + dy, cell.1 * s + dx);
                let arg = 2.0 * PI * (fx * dx as f64 + fy * dy as f64) / s as f64;
                let at = (y * grid.width + x) * grid.channels;
                for ch in 0..grid.channels {
                    let clean = pattern.base[ch] + warp.shift[ch] + pattern.amp[ch] * (arg + pattern.phase[ch] + warp.phase).sin();
                    let v = clean + warp.noise_gain * self.noise.sample(rng);
                    grid.data[at + ch] = v as f32 as f64;
                }
            }
        }
    }
}

fn render_image(
    spec: &ScenarioSpec,
    id: String,
    classes: &[Pattern],
    ood_bank: &[Pattern],
    with_ood: bool,
    rng: &mut ChaCha8Rng,
) -> SceneImage {
    let r = Renderer {
        spec,
        noise: Normal::new(0.0, spec.pixel_noise).expect("validated noise"),
    };
    let (rows, cols) = spec.cells();
    let ood_block = if with_ood && spec.ood_region_cells > 0 {
        let k = spec.ood_region_cells;
        let top = rng.random_range(0..=rows - k);
        let left = rng.random_range(0..=cols - k);
        let pattern = rng.random_range(0..ood_bank.len());
        Some((top, left, k, pattern))
    } else {
        None
    };
    let mut grid = Grid::zeros(spec.height, spec.width, spec.channels);
    let mut labels = vec![0u16; spec.height * spec.width];
    let mut kinds = vec![PixelKind::Normal; spec.height * spec.width];
    for cy in 0..rows {
        for cx in 0..cols {
            let in_ood = ood_block.is_some_and(|(t, l, k, _)| (t..t + k).contains(&cy) && (l..l + k).contains(&cx));
            let (label, kind, pattern, warp) = if in_ood {
                let p = &ood_bank[ood_block.unwrap().3];
                (OOD_LABEL, PixelKind::Ood, p, Warp::identity(spec.channels))
            } else {
                let class = rng.random_range(0..classes.len());
                let hard = rng.random_bool(spec.hard_id_fraction);
                let warp = if hard {
                    Warp::hard(rng, spec.channels, spec.hard_id_noise)
                } else {
                    Warp::identity(spec.channels)
                };
                let kind = if hard { PixelKind::Hard } else { PixelKind::Normal };
                (class as u16, kind, &classes[class], warp)
            };
            r.paint(&mut grid, (cy, cx), pattern, &warp, rng);
            let s = spec.cell_size;
            for dy in 0..s {
                for dx in 0..s {
                    let i = (cy * s + dy) * spec.width + cx * s + dx;
                    labels[i] = label;
                    kinds[i] = kind;
                }
            }
        }
    }
    SceneImage {
        id,
        image: grid,
        labels,
        kinds,
    }
}

/// Generates the train and test sets. Pure function of the spec.
pub fn gen_synthetic(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut id_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "scenario.id-bank"));
    let classes = bank(&mut id_rng, spec.num_classes, spec.channels, &ID_LOOK, |p, acc| {
        acc.iter().all(|q| p.distance(q) >= MIN_CLASS_SEPARATION)
    })?;
    let mut ood_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "scenario.ood-bank"));
    let ood_bank = bank(&mut ood_rng, spec.ood_pattern_count, spec.channels, &OOD_LOOK, |p, _| {
        classes.iter().all(|q| p.distance(q) >= MIN_OOD_SEPARATION)
    })?;

    let mut train_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "scenario.train"));
    let train = (0..spec.n_train)
        .map(|i| render_image(spec, format!("train-{i:04}"), &classes, &ood_bank, false, &mut train_rng))
        .collect();

    let mut test_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, "scenario.test"));
    let mut plan: Vec<bool> = std::iter::repeat_n(false, spec.n_test_id)
        .chain(std::iter::repeat_n(true, spec.n_test_ood))
        .collect();
    plan.shuffle(&mut test_rng);
    let (mut n_id, mut n_ood) = (0, 0);
    let test = plan
        .into_iter()
        .map(|with_ood| {
            let id = if with_ood {
                n_ood += 1;
                format!("test-ood-{:04}", n_ood - 1)
            } else {
                n_id += 1;
                format!("test-id-{:04}", n_id - 1)
            };
            render_image(spec, id, &classes, &ood_bank, with_ood, &mut test_rng)
        })
        .collect();

    Ok(Scenario {
        train: Dataset {
            num_classes: spec.num_classes,
            images: train,
        },
        test: Dataset {
            num_classes: spec.num_classes,
            images: test,
        },
    })
}
