//! Procedural eye images with exact ground truth.
//!
//! Each identity fixes an iris radius, pupil ratio, base intensity and a sum of cosine
//! texture components over (radius, angle). Each instance jitters position, size, rotation
//! and brightness, draws an upper eyelid and adds Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contour::{Circle, EyeGeometry};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::mask::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEyeSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub identities: usize,
    pub samples_per_identity: usize,
    /// Iris radius range in pixels.
    pub iris_radius: [f64; 2],
    /// Pupil radius over iris radius.
    pub pupil_ratio: [f64; 2],
    pub octaves: usize,
    /// Largest fraction of the limbic circle hidden by the upper eyelid.
    pub occlusion: f64,
    /// Standard deviation of additive noise, in units of full scale.
    pub noise: f64,
    /// Largest shift of the eye center from the image center, in pixels.
    pub center_jitter: f64,
    /// Largest in-plane rotation between samples of one identity, in degrees.
    pub rotation_jitter: f64,
}

impl Default for SyntheticEyeSpec {
    fn default() -> Self {
        SyntheticEyeSpec {
            seed: 7,
            width: 256,
            height: 192,
            identities: 10,
            samples_per_identity: 5,
            iris_radius: [44.0, 58.0],
            pupil_ratio: [0.25, 0.45],
            octaves: 4,
            occlusion: 0.15,
            noise: 0.02,
            center_jitter: 8.0,
            rotation_jitter: 5.0,
        }
    }
}

/// Intensities on the 0..255 scale.
const PUPIL: f64 = 15.0;
const SCLERA: f64 = 220.0;
const EYELID: f64 = 180.0;
const TEXTURE_AMPLITUDE: f64 = 38.0;
const COMPONENTS_PER_OCTAVE: usize = 6;
/// Eyelid curvature, pixels of drop per squared pixel of horizontal offset.
const EYELID_CURVE: f64 = 0.002;

impl SyntheticEyeSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let s: SyntheticEyeSpec =
            toml::from_str(text).map_err(|e| Error::Validation(format!("synthetic spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("synthetic spec: {m}")));
        if self.width < 16 || self.height < 16 {
            return bad("image must be at least 16x16");
        }
        if self.identities == 0 || self.samples_per_identity == 0 {
            return bad("need at least one identity and one sample");
        }
        let [r0, r1] = self.iris_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("iris radius range is empty");
        }
        let half = self.width.min(self.height) as f64 / 2.0;
        if r1 * 1.02 + self.center_jitter + 1.0 >= half {
            return bad("iris does not fit inside the image");
        }
        let [p0, p1] = self.pupil_ratio;
        if !(0.1..=0.8).contains(&p0) || !(0.1..=0.8).contains(&p1) || p0 > p1 {
            return bad("pupil ratio must lie within [0.1, 0.8]");
        }
        if !(0.0..=0.5).contains(&self.occlusion) {
            return bad("occlusion must lie in [0, 0.5]");
        }
        if !(self.noise >= 0.0) || !(self.center_jitter >= 0.0) || !(self.rotation_jitter >= 0.0) {
            return bad("noise and jitter must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Component {
    amp: f64,
    k: f64,
    omega: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct Identity {
    radius: f64,
    ratio: f64,
    base: f64,
    texture: Vec<Component>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Identity {
    fn new(spec: &SyntheticEyeSpec, id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, id as u64 + 1, 0));
        let mut texture = Vec::new();
        for o in 0..spec.octaves {
            let lo = 2usize << o;
            for _ in 0..COMPONENTS_PER_OCTAVE {
                texture.push(Component {
                    amp: rng.gen_range(0.5..1.0) / (1 << o) as f64,
                    // whole cycles keep the texture continuous around the circle
                    k: rng.gen_range(lo..=3 * lo) as f64,
                    omega: rng.gen_range(0.0..2.0 * PI * (o + 1) as f64),
                    phase: rng.gen_range(0.0..2.0 * PI),
                });
            }
        }
        let total: f64 = texture.iter().map(|c| c.amp).sum();
        texture.iter_mut().for_each(|c| c.amp /= total.max(1e-12));
        Identity {
            radius: rng.gen_range(spec.iris_radius[0]..=spec.iris_radius[1]),
            ratio: rng.gen_range(spec.pupil_ratio[0]..=spec.pupil_ratio[1]),
            base: rng.gen_range(85.0..115.0),
            texture,
        }
    }

    /// In `[-1, 1]`.
    fn texture(&self, rho: f64, theta: f64) -> f64 {
        self.texture
            .iter()
            .map(|c| c.amp * (c.k * theta + c.omega * rho + c.phase).cos())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub name: String,
    pub identity: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub geometry: EyeGeometry,
}

pub fn identity_name(id: usize) -> String {
    format!("id{id:02}")
}

/// Renders sample `instance` of identity `id`. Pure function of the dataset settings and indices.
pub fn render_sample(spec: &SyntheticEyeSpec, id: usize, instance: usize) -> Result<SyntheticSample> {
    spec.validate()?;
    let ident = Identity::new(spec, id);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, id as u64 + 1, instance as u64 + 1));
    let (w, h) = (spec.width, spec.height);
    let j = spec.center_jitter;
    let cx = w as f64 / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let cy = h as f64 / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let r = ident.radius * rng.gen_range(0.98..=1.02);
    let ratio = (ident.ratio + rng.gen_range(-0.02..=0.02)).clamp(0.1, 0.8);
    let pr = ratio * r;
    let (pcx, pcy) = (cx + rng.gen_range(-1.0..=1.0), cy + rng.gen_range(-1.0..=1.0));
    let rot = spec.rotation_jitter.to_radians();
    let delta = if rot > 0.0 { rng.gen_range(-rot..=rot) } else { 0.0 };
    let gain = rng.gen_range(0.95..=1.05);
    let frac = if spec.occlusion > 0.0 {
        spec.occlusion * rng.gen_range(0.3..=1.0)
    } else {
        0.0
    };
    // The eyelid hides the top of the iris down to a chord, never reaching the pupil.
    let lid_y = (cy - r * (PI * frac).cos()).min(pcy - pr - 5.0);
    let noise = Normal::new(0.0, spec.noise * 255.0).map_err(|e| Error::Validation(e.to_string()))?;

    let mut pixels = Vec::with_capacity(w * h);
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let d = (fx - cx).hypot(fy - cy);
            let in_iris = d <= r;
            let in_pupil = (fx - pcx).hypot(fy - pcy) <= pr;
            let in_lid = frac > 0.0 && fy < lid_y + EYELID_CURVE * (fx - cx).powi(2);
            let v = if in_lid {
                EYELID + 6.0 * ((fx * 0.07).sin() + (fy * 0.05).cos())
            } else if in_pupil {
                PUPIL
            } else if in_iris {
                let theta = (fy - cy).atan2(fx - cx);
                let rho = ((d - pr) / (r - pr)).clamp(0.0, 1.0);
                ident.base + TEXTURE_AMPLITUDE * ident.texture(rho, theta - delta)
            } else {
                SCLERA - 12.0 * (d / (w as f64)).min(1.0)
            };
            let noisy = v * gain + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
            bits.push(in_iris && !in_pupil && !in_lid);
        }
    }
    Ok(SyntheticSample {
        name: format!("{}_{instance}", identity_name(id)),
        identity: identity_name(id),
        image: GrayImage::new(w, h, pixels)?,
        mask: BinaryMask::from_bits(w, h, bits)?,
        geometry: EyeGeometry {
            iris: Circle { cx, cy, r },
            pupil: Circle { cx: pcx, cy: pcy, r: pr },
            pupil_fallback: false,
        },
    })
}

/// All samples, identity-major.
pub fn render_all(spec: &SyntheticEyeSpec) -> Result<Vec<SyntheticSample>> {
    let mut out = Vec::with_capacity(spec.identities * spec.samples_per_identity);
    for id in 0..spec.identities {
        for k in 0..spec.samples_per_identity {
            out.push(render_sample(spec, id, k)?);
        }
    }
    Ok(out)
}

/// Writes `images/`, `masks/` and `geometry/` under `root`. Returns the sample names.
pub fn synth_generate(spec: &SyntheticEyeSpec, root: &Path) -> Result<Vec<String>> {
    spec.validate()?;
    for d in ["images", "masks", "geometry"] {
        fs::create_dir_all(root.join(d))?;
    }
    let mut names = Vec::new();
    for s in render_all(spec)? {
        s.image.save(&root.join("images").join(format!("{}.pgm", s.name)))?;
        GrayImage::from_mask(&s.mask).save(&root.join("masks").join(format!("{}.pgm", s.name)))?;
        fs::write(root.join("geometry").join(format!("{}.json", s.name)), s.geometry.to_json())?;
        names.push(s.name);
    }
    Ok(names)
}
