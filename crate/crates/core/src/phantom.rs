//! Synthetic organ phantoms.
//!
//! Each patient is a noisy body cross-section holding one ellipsoidal organ
//! per class. Organ classes differ in position, aspect ratio, orientation and
//! intensity band; patients jitter all of these. The record for `(class k,
//! patient p)` pairs the patient's image with the mask of organ `k` only, so
//! every image also contains the other classes' organs as unlabelled
//! structures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AnnotatedVolume, Dims, LabelMask, MaskKind, Volume};

/// Minimum ellipsoid semi-axis, in voxels.
pub const MIN_RADIUS: f64 = 2.0;
const MAX_RETRIES: usize = 10;

const BODY_INTENSITY: f32 = 0.15;
const AIR_INTENSITY: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub n_classes: u8,
    pub n_patients: u32,
    pub dims: Dims,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_patients: 20,
            dims: [32, 64, 64],
            seed: 0,
            noise_sigma: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.n_patients < 1 {
            return Err(Error::Config("n_patients must be >= 1".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("all extents must be >= 8, got {:?}", self.dims)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Checks that the in-plane extents survive `levels - 1` halvings.
    pub fn validate_for_levels(&self, levels: usize) -> Result<()> {
        let div = 1usize << levels.saturating_sub(1);
        if !self.dims[1].is_multiple_of(div) || !self.dims[2].is_multiple_of(div) {
            return Err(Error::Config(format!(
                "in-plane extents {}x{} not divisible by {div}",
                self.dims[1], self.dims[2]
            )));
        }
        Ok(())
    }
}

/// Mean organ geometry of one class, as fractions of the volume extents.
#[derive(Clone, Copy, Debug)]
struct ClassShape {
    center: [f64; 3],
    radii: [f64; 3],
    angle_deg: f64,
    band: (f64, f64),
}

const SHAPES: [ClassShape; 6] = [
    ClassShape {
        center: [0.50, 0.36, 0.32],
        radii: [0.25, 0.18, 0.15],
        angle_deg: 20.0,
        band: (0.50, 0.60),
    },
    ClassShape {
        center: [0.50, 0.36, 0.72],
        radii: [0.18, 0.10, 0.19],
        angle_deg: -15.0,
        band: (0.80, 0.90),
    },
    ClassShape {
        center: [0.45, 0.72, 0.38],
        radii: [0.22, 0.17, 0.09],
        angle_deg: 10.0,
        band: (0.35, 0.45),
    },
    ClassShape {
        center: [0.55, 0.70, 0.70],
        radii: [0.18, 0.14, 0.14],
        angle_deg: 0.0,
        band: (0.65, 0.75),
    },
    ClassShape {
        center: [0.50, 0.20, 0.52],
        radii: [0.20, 0.07, 0.12],
        angle_deg: 5.0,
        band: (0.27, 0.33),
    },
    ClassShape {
        center: [0.50, 0.54, 0.54],
        radii: [0.20, 0.07, 0.07],
        angle_deg: 0.0,
        band: (0.92, 0.98),
    },
];

fn class_shape(class_id: u8) -> ClassShape {
    let idx = (class_id as usize - 1) % SHAPES.len();
    let cycle = (class_id as usize - 1) / SHAPES.len();
    let mut shape = SHAPES[idx];
    shape.angle_deg += 30.0 * cycle as f64;
    shape
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Copy, Debug)]
struct Organ {
    center: [f64; 3],
    radii: [f64; 3],
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Organ {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let dz = z as f64 - self.center[0];
        let dy = y as f64 - self.center[1];
        let dx = x as f64 - self.center[2];
        let ry = self.cos * dy + self.sin * dx;
        let rx = -self.sin * dy + self.cos * dx;
        let q = (dz / self.radii[0]).powi(2) + (ry / self.radii[1]).powi(2) + (rx / self.radii[2]).powi(2);
        q <= 1.0
    }
}

fn sample_organ(spec: &PhantomSpec, class_id: u8, patient: u32) -> Result<Organ> {
    let shape = class_shape(class_id);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[spec.seed, class_id as u64, patient as u64, 1]));
    let ext = spec.dims.map(|d| d as f64);
    for _ in 0..=MAX_RETRIES {
        let center: [f64; 3] =
            std::array::from_fn(|i| (shape.center[i] + rng.random_range(-0.1..=0.1)) * ext[i]);
        let radii: [f64; 3] =
            std::array::from_fn(|i| shape.radii[i] * ext[i] * rng.random_range(0.8..=1.2));
        let angle = (shape.angle_deg + rng.random_range(-20.0..=20.0)).to_radians();
        let intensity = rng.random_range(shape.band.0..=shape.band.1);
        if radii.iter().all(|&r| r >= MIN_RADIUS) {
            return Ok(Organ {
                center,
                radii,
                cos: angle.cos(),
                sin: angle.sin(),
                intensity,
            });
        }
    }
    Err(Error::Phantom(format!(
        "class {class_id} patient {patient}: ellipsoid radius below {MIN_RADIUS} voxels after {MAX_RETRIES} retries"
    )))
}

/// Per-voxel organ index map (0 = none) and image of one patient.
fn render_patient(spec: &PhantomSpec, patient: u32) -> Result<(Vec<u8>, Vec<f32>)> {
    let [d, h, w] = spec.dims;
    let organs = (1..=spec.n_classes)
        .map(|k| sample_organ(spec, k, patient))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[spec.seed, patient as u64, 2]));
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Phantom(e.to_string()))?;
    let (cy, cx) = (0.5 * h as f64, 0.5 * w as f64);
    let (by, bx) = (0.46 * h as f64, 0.44 * w as f64);
    let mut labels = vec![0u8; d * h * w];
    let mut image = vec![0f32; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let in_body = ((y as f64 - cy) / by).powi(2) + ((x as f64 - cx) / bx).powi(2) <= 1.0;
                let mut value = if in_body { BODY_INTENSITY as f64 } else { AIR_INTENSITY as f64 };
                for (j, organ) in organs.iter().enumerate() {
                    if organ.contains(z, y, x) {
                        labels[i] = j as u8 + 1;
                        value = organ.intensity;
                    }
                }
                let n: f64 = noise.sample(&mut rng);
                image[i] = (value + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((labels, image))
}

fn record(spec: &PhantomSpec, class_id: u8, patient: u32, labels: &[u8], image: Vec<f32>) -> Result<AnnotatedVolume> {
    let own = labels.iter().map(|&l| if l == class_id { class_id } else { 0 }).collect();
    AnnotatedVolume::new(
        patient,
        class_id,
        Volume::new(spec.dims, image)?,
        LabelMask::new(spec.dims, own, MaskKind::Full)?,
    )
}

/// The phantom for one `(class, patient)` pair.
pub fn generate_phantom(spec: &PhantomSpec, class_id: u8, patient: u32) -> Result<AnnotatedVolume> {
    spec.validate()?;
    if class_id == 0 || class_id > spec.n_classes || patient >= spec.n_patients {
        return Err(Error::Invalid(format!(
            "(class {class_id}, patient {patient}) outside {} classes x {} patients",
            spec.n_classes, spec.n_patients
        )));
    }
    let (labels, image) = render_patient(spec, patient)?;
    record(spec, class_id, patient, &labels, image)
}

/// Every `(class, patient)` phantom, ordered by class then patient.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<AnnotatedVolume>> {
    spec.validate()?;
    let mut per_patient = Vec::with_capacity(spec.n_patients as usize);
    for p in 0..spec.n_patients {
        per_patient.push(render_patient(spec, p)?);
    }
    let mut out = Vec::with_capacity(spec.n_classes as usize * spec.n_patients as usize);
    for k in 1..=spec.n_classes {
        for (p, (labels, image)) in per_patient.iter().enumerate() {
            out.push(record(spec, k, p as u32, labels, image.clone())?);
        }
    }
    Ok(out)
}
