//! Procedural five-class image dataset with controllable difficulty.
//!
//! Each class renders one family of soft-edged "masses" on a noisy
//! background. A study draws one set of latent parameters (position, size,
//! orientation, texture frequency, contrast); its slices are sections through
//! the same mass, so they share the draw and differ only by a smooth
//! position-dependent size change and a small drift.
//!
//! The `difficulty` knob in `[0, 1]` scales the width of the intra-class
//! parameter jitter, the slice-to-slice size change, the weight with which the
//! neighbouring class's family is blended in, and the background noise level.
//! At zero every study of a class renders the same prototype.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Slice, Study};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["ACA", "NAA", "GN", "AM", "PCC"];
/// Studies per class in the reference corpus.
pub const TABLE1_STUDIES: [usize; 5] = [54, 35, 58, 33, 49];
/// Slices per class in the reference corpus.
pub const TABLE1_SLICES: [usize; 5] = [1707, 245, 1047, 350, 716];

/// Difficulty settings over which the raw-pixel floor is checked to fall.
pub const DIFFICULTY_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

const BACKGROUND: f64 = 0.15;
const EDGE: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OrientedGrating,
    SoftBlob,
    MixedDensityBlob,
    EllipseRing,
    SpeckleMass,
}

/// Closed parameter interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Midpoint jittered by up to `spread` (in `[0, 1]`) of the half-width.
    fn jitter(&self, spread: f64, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random_range(-1.0..=1.0);
        (self.mid() + 0.5 * (self.hi - self.lo) * spread * u).clamp(self.lo, self.hi)
    }

    /// Point at fraction `t` of the way from `lo` to `hi`.
    fn at(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub class: usize,
    pub family: Family,
    /// Mass radius, in units of the half image width.
    pub radius: Range,
    /// Radians.
    pub orientation: Range,
    /// Texture cycles per unit length.
    pub frequency: Range,
    pub contrast: Range,
    /// Background noise standard deviation, from `lo` at difficulty 0 to `hi` at 1.
    pub noise: Range,
    /// Offset of the mass centre along each axis.
    pub offset: Range,
    /// Weight of the neighbouring class's family at difficulty 1.
    pub overlap: f64,
}

/// The five shipped recipes, one per class.
pub fn default_recipes() -> Vec<ClassRecipe> {
    let base = |class, family, radius: Range| ClassRecipe {
        class,
        family,
        radius,
        orientation: Range::new(0.0, 1.2),
        frequency: Range::new(2.0, 4.0),
        contrast: Range::new(0.55, 0.85),
        noise: Range::new(0.01, 0.08),
        offset: Range::new(-0.2, 0.2),
        overlap: 0.45,
    };
    vec![
        base(0, Family::OrientedGrating, Range::new(0.45, 0.7)),
        base(1, Family::SoftBlob, Range::new(0.25, 0.45)),
        base(2, Family::MixedDensityBlob, Range::new(0.35, 0.6)),
        base(3, Family::EllipseRing, Range::new(0.4, 0.65)),
        base(4, Family::SpeckleMass, Range::new(0.3, 0.55)),
    ]
}

/// Latent parameters shared by all slices of one study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyParams {
    pub radius: f64,
    pub orientation: f64,
    pub frequency: f64,
    pub contrast: f64,
    pub noise: f64,
    pub center: (f64, f64),
    pub phase: f64,
    /// Angle along which slices drift.
    pub drift_angle: f64,
}

impl ClassRecipe {
    /// Draws study-level parameters; every value lies inside its declared range.
    pub fn sample(&self, difficulty: f64, rng: &mut impl Rng) -> StudyParams {
        let d = difficulty.clamp(0.0, 1.0);
        StudyParams {
            radius: self.radius.jitter(d, rng),
            orientation: self.orientation.jitter(d, rng),
            frequency: self.frequency.jitter(d, rng),
            contrast: self.contrast.jitter(d, rng),
            noise: self.noise.at(d),
            center: (self.offset.jitter(d, rng), self.offset.jitter(d, rng)),
            phase: 2.0 * PI * d * rng.random::<f64>(),
            drift_angle: 2.0 * PI * rng.random::<f64>(),
        }
    }

    pub fn contains(&self, p: &StudyParams) -> bool {
        self.radius.contains(p.radius)
            && self.orientation.contains(p.orientation)
            && self.frequency.contains(p.frequency)
            && self.contrast.contains(p.contrast)
            && self.noise.contains(p.noise)
            && self.offset.contains(p.center.0)
            && self.offset.contains(p.center.1)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Geometry of one slice through a study's mass.
struct SliceGeometry {
    radius: f64,
    cx: f64,
    cy: f64,
    phase: f64,
}

/// Mass intensity (before background and noise) of `family` at `(u, v)`.
fn family_value(
    family: Family,
    p: &StudyParams,
    g: &SliceGeometry,
    u: f64,
    v: f64,
    speckle: f64,
) -> f64 {
    let (du, dv) = (u - g.cx, v - g.cy);
    let r = (du * du + dv * dv).sqrt() / g.radius;
    let inside = sigmoid((1.0 - r) / EDGE);
    let (s, c) = p.orientation.sin_cos();
    match family {
        Family::OrientedGrating => {
            let t = du * c + dv * s;
            inside * (0.5 + 0.5 * (2.0 * PI * p.frequency * t + g.phase).sin())
        }
        Family::SoftBlob => {
            let sigma = 0.5;
            (-(r * r) / (2.0 * sigma * sigma)).exp()
        }
        Family::MixedDensityBlob => {
            // Three low-density pockets on a fixed template, rotated by the orientation.
            let mut dip = 0.0;
            for k in 0..3 {
                let a = p.orientation + k as f64 * 2.0 * PI / 3.0;
                let (sx, sy) = (g.cx + 0.45 * g.radius * a.cos(), g.cy + 0.45 * g.radius * a.sin());
                let d2 = ((u - sx).powi(2) + (v - sy).powi(2)) / (0.22 * g.radius).powi(2);
                dip += (-0.5 * d2).exp();
            }
            inside * (0.9 - 0.75 * dip.min(1.0))
        }
        Family::EllipseRing => {
            let (eu, ev) = (du * c + dv * s, -du * s + dv * c);
            let rho = ((eu / g.radius).powi(2) + (ev / (0.6 * g.radius)).powi(2)).sqrt();
            let core = sigmoid((1.0 - rho) / EDGE);
            0.3 * core + 0.7 * (-(rho - 1.0).powi(2) / (2.0 * 0.12f64.powi(2))).exp()
        }
        Family::SpeckleMass => inside * (0.55 + 0.45 * speckle),
    }
}

fn render_slice(
    recipe: &ClassRecipe,
    neighbour: Family,
    params: &StudyParams,
    z: f64,
    difficulty: f64,
    size: usize,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let d = difficulty.clamp(0.0, 1.0);
    let drift = 0.05 * d * z;
    let g = SliceGeometry {
        // Sections away from the middle are smaller; 0.3 at the shipped 0.4.
        radius: params.radius * (1.0 - 0.75 * d * z * z),
        cx: params.center.0 + drift * params.drift_angle.cos(),
        cy: params.center.1 + drift * params.drift_angle.sin(),
        phase: params.phase + 0.5 * d * z,
    };
    let blend = recipe.overlap * d;
    // Box-smoothed uniform noise gives speckle grains a couple of pixels wide.
    let raw: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut pixels = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let u = (2.0 * j as f64 + 1.0) / size as f64 - 1.0;
            let v = (2.0 * i as f64 + 1.0) / size as f64 - 1.0;
            let mut acc = 0.0;
            let mut n = 0.0;
            for di in i.saturating_sub(1)..(i + 2).min(size) {
                for dj in j.saturating_sub(1)..(j + 2).min(size) {
                    acc += raw[di * size + dj];
                    n += 1.0;
                }
            }
            let speckle = (acc / n * 1.7).clamp(-1.0, 1.0);
            let own = family_value(recipe.family, params, &g, u, v, speckle);
            let other = family_value(neighbour, params, &g, u, v, speckle);
            let mass = (1.0 - blend) * own + blend * other;
            let noise: f64 = rng.sample(StandardNormal);
            pixels.push((BACKGROUND + params.contrast * mass + params.noise * noise) as f32);
        }
    }
    pixels
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: usize,
    pub studies_per_class: Vec<usize>,
    /// Exact slice total per class, split across that class's studies.
    pub slices_per_class: Vec<usize>,
    /// Inclusive bounds on slices per study.
    pub slices_per_study: [usize; 2],
    pub difficulty: f64,
    pub seed: u64,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl SynthSpec {
    /// Full-size class ratios of the reference corpus at 64 × 64.
    pub fn table1() -> Self {
        SynthSpec {
            image_size: 64,
            studies_per_class: TABLE1_STUDIES.to_vec(),
            slices_per_class: TABLE1_SLICES.to_vec(),
            slices_per_study: [3, 40],
            difficulty: 0.5,
            seed: 0,
        }
    }

    /// The fixture used by tests and the end-to-end benchmark: a fifth of the
    /// studies, a twentieth of the slices, 32 × 32 images, moderate overlap.
    pub fn table1_small() -> Self {
        SynthSpec {
            image_size: 32,
            slices_per_study: [1, 10],
            difficulty: 0.4,
            ..Self::table1().scale_counts(0.2, 0.05)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Self::table1()),
            "table1-small" => Ok(Self::table1_small()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected table1 or table1-small)"
            ))),
        }
    }

    /// Scales study and slice counts independently, rounding half up.
    pub fn scale_counts(&self, studies: f64, slices: f64) -> Self {
        SynthSpec {
            studies_per_class: self
                .studies_per_class
                .iter()
                .map(|&n| round_half_up(n as f64 * studies))
                .collect(),
            slices_per_class: self
                .slices_per_class
                .iter()
                .map(|&n| round_half_up(n as f64 * slices))
                .collect(),
            ..self.clone()
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.scale_counts(factor, factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.studies_per_class.len() != CLASS_NAMES.len() || self.slices_per_class.len() != CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "the generator has {} classes; got {} study and {} slice counts",
                CLASS_NAMES.len(),
                self.studies_per_class.len(),
                self.slices_per_class.len()
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        let [lo, hi] = self.slices_per_study;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid slices-per-study range [{lo}, {hi}]")));
        }
        for (c, (&n, &total)) in self.studies_per_class.iter().zip(&self.slices_per_class).enumerate() {
            if n == 0 {
                return Err(Error::Config(format!("class {} has no studies", CLASS_NAMES[c])));
            }
            if total < n * lo || total > n * hi {
                return Err(Error::Config(format!(
                    "class {}: {total} slices cannot be split over {n} studies with {lo}..={hi} each",
                    CLASS_NAMES[c]
                )));
            }
        }
        Ok(())
    }
}

/// Splits `total` into `parts` counts within `[lo, hi]`, uniformly at random.
fn split_counts(total: usize, parts: usize, lo: usize, hi: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut counts = vec![lo; parts];
    let mut open: Vec<usize> = (0..parts).filter(|_| hi > lo).collect();
    for _ in 0..total - lo * parts {
        let k = rng.random_range(0..open.len());
        let i = open[k];
        counts[i] += 1;
        if counts[i] == hi {
            open.swap_remove(k);
        }
    }
    counts
}

/// Builds the dataset in memory; deterministic in `spec.seed`.
pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let recipes = default_recipes();
    let [lo, hi] = spec.slices_per_study;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut studies = Vec::new();
    let mut stream = 0u64;
    for (class, recipe) in recipes.iter().enumerate() {
        let neighbour = recipes[(class + 1) % recipes.len()].family;
        let counts = split_counts(
            spec.slices_per_class[class],
            spec.studies_per_class[class],
            lo,
            hi,
            &mut layout_rng,
        );
        for (k, &n_slices) in counts.iter().enumerate() {
            stream += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream);
            let params = recipe.sample(spec.difficulty, &mut rng);
            let id = format!("{}-{k:03}", CLASS_NAMES[class]);
            let slices = (0..n_slices)
                .map(|j| {
                    let z = if n_slices > 1 {
                        2.0 * j as f64 / (n_slices - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                    let pixels = render_slice(recipe, neighbour, &params, z, spec.difficulty, spec.image_size, &mut rng);
                    Ok(Slice {
                        id: format!("{id}/{j:03}"),
                        image: Tensor::new(&[1, spec.image_size, spec.image_size], pixels)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            studies.push(Study { id, class, slices });
        }
    }
    Ok(Dataset {
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        image_shape: [1, spec.image_size, spec.image_size],
        studies,
        provenance: Some(serde_json::to_value(spec)?),
    })
}

/// Synthesises a dataset and writes it under `root`.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<Dataset> {
    let ds = synthesize(spec)?;
    ds.write(root)?;
    Ok(ds)
}
