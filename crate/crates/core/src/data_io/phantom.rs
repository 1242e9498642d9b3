//! Synthetic plane-wave phantoms.
//!
//! Images are built in the linear envelope domain (0 dB = amplitude 1) and
//! converted to dB at the end:
//!
//! - a uniform background with multiplicative speckle. Speckle is the
//!   magnitude of a smoothed complex Gaussian field; a configurable fraction of
//!   the field is redrawn per angle, the rest is shared by every angle;
//! - anechoic disks replacing the tissue by a floor level;
//! - point scatterers drawn as anisotropic Gaussian bumps;
//! - for every scatterer a dark wedge below it whose lateral position drifts
//!   by `-tan(alpha) * depth`, so it swings to the opposite side as the
//!   steering angle changes sign;
//! - optionally, a Gaussian system blur of each dB image, so the images are
//!   band-limited like beamformed data.
//!
//! # Spec file
//!
//! One directive per line, `#` starts a comment, lengths in mm unless noted:
//!
//! ```text
//! grid <height_px> <width_px>
//! pitch <axial_mm_per_px> <lateral_mm_per_px>
//! angles <min_deg> <max_deg> <count>       # evenly spaced
//! angle_list <deg> <deg> ...                # explicit, ascending
//! dynamic_range <min_db> <max_db>
//! background <db>
//! speckle <level 0..1> <grain_axial_px> <grain_lateral_px> [angle_decorrelation 0..1]
//! scatterer_size <axial_sigma_px> <lateral_sigma_px>
//! scatterer <lateral_mm> <depth_mm> <peak_db>
//! disk <lateral_mm> <depth_mm> <radius_mm> <floor_db>
//! shadow <width_mm> <spread_per_mm> <attenuation_db>
//! psf <axial_sigma_px> <lateral_sigma_px>   # blur of the final dB image
//! name <provenance tag>
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data_io::PlaneWaveStack;
use crate::error::{Error, Result};
use crate::numerics::{ops, DenseArray};
use crate::render::gaussian_taps;

/// Bundled 64 x 64 x 8 phantom.
pub const DEFAULT_PHANTOM_SPEC: &str = include_str!("../../assets/default_phantom.txt");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub lateral_mm: f64,
    pub depth_mm: f64,
    pub peak_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub lateral_mm: f64,
    pub depth_mm: f64,
    pub radius_mm: f64,
    pub floor_db: f64,
}

/// Wedge shadow cast below each scatterer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowModel {
    /// Full width at the scatterer depth.
    pub width_mm: f64,
    /// Growth of the half width per mm of depth below the scatterer.
    pub spread: f64,
    pub attenuation_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub pitch_axial_mm: f64,
    pub pitch_lateral_mm: f64,
    pub angles_deg: Vec<f64>,
    pub dyn_range_db: (f64, f64),
    pub background_db: f64,
    pub speckle_level: f64,
    /// Axial and lateral smoothing sigma of the speckle field.
    pub speckle_grain_px: (f64, f64),
    pub speckle_decorrelation: f64,
    pub scatterer_sigma_px: (f64, f64),
    pub scatterers: Vec<Scatterer>,
    pub disks: Vec<Disk>,
    pub shadow: Option<ShadowModel>,
    /// Axial and lateral sigma of the blur applied to every dB image.
    pub psf_sigma_px: Option<(f64, f64)>,
    pub name: String,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            pitch_axial_mm: 0.1,
            pitch_lateral_mm: 0.1,
            angles_deg: evenly_spaced(-16.0, 16.0, 8),
            dyn_range_db: (-60.0, 0.0),
            background_db: -30.0,
            speckle_level: 0.0,
            speckle_grain_px: (1.0, 1.0),
            speckle_decorrelation: 0.0,
            scatterer_sigma_px: (1.0, 1.5),
            scatterers: Vec::new(),
            disks: Vec::new(),
            shadow: None,
            psf_sigma_px: None,
            name: "phantom".to_string(),
        }
    }
}

fn evenly_spaced(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![(min + max) / 2.0],
        n => (0..n).map(|i| min + (max - min) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format {
        offset: line,
        reason: format!("line {line}: {msg}"),
    }
}

impl PhantomSpec {
    /// Parses the line-oriented spec format. Format errors carry the 1-based
    /// line number as their offset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().expect("non-empty line");
            let rest: Vec<&str> = parts.collect();
            if key == "name" {
                spec.name = rest.join(" ");
                continue;
            }
            let nums: Vec<f64> = rest
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(line_no, format!("not a number: {t:?}"))))
                .collect::<Result<_>>()?;
            let want = |n: usize| -> Result<()> {
                if nums.len() != n {
                    Err(parse_err(line_no, format!("{key} takes {n} values, got {}", nums.len())))
                } else {
                    Ok(())
                }
            };
            let count = |v: f64| -> Result<usize> {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(parse_err(line_no, format!("expected a positive integer, got {v}")))
                }
            };
            match key {
                "grid" => {
                    want(2)?;
                    spec.height = count(nums[0])?;
                    spec.width = count(nums[1])?;
                }
                "pitch" => {
                    want(2)?;
                    spec.pitch_axial_mm = nums[0];
                    spec.pitch_lateral_mm = nums[1];
                }
                "angles" => {
                    want(3)?;
                    spec.angles_deg = evenly_spaced(nums[0], nums[1], count(nums[2])?);
                }
                "angle_list" => {
                    if nums.is_empty() {
                        return Err(parse_err(line_no, "angle_list needs at least one angle"));
                    }
                    spec.angles_deg = nums;
                }
                "dynamic_range" => {
                    want(2)?;
                    spec.dyn_range_db = (nums[0], nums[1]);
                }
                "background" => {
                    want(1)?;
                    spec.background_db = nums[0];
                }
                "speckle" => {
                    if !(nums.len() == 3 || nums.len() == 4) {
                        return Err(parse_err(line_no, "speckle takes 3 or 4 values"));
                    }
                    spec.speckle_level = nums[0];
                    spec.speckle_grain_px = (nums[1], nums[2]);
                    spec.speckle_decorrelation = nums.get(3).copied().unwrap_or(0.0);
                }
                "scatterer_size" => {
                    want(2)?;
                    spec.scatterer_sigma_px = (nums[0], nums[1]);
                }
                "scatterer" => {
                    want(3)?;
                    spec.scatterers.push(Scatterer {
                        lateral_mm: nums[0],
                        depth_mm: nums[1],
                        peak_db: nums[2],
                    });
                }
                "disk" => {
                    want(4)?;
                    spec.disks.push(Disk {
                        lateral_mm: nums[0],
                        depth_mm: nums[1],
                        radius_mm: nums[2],
                        floor_db: nums[3],
                    });
                }
                "shadow" => {
                    want(3)?;
                    spec.shadow = Some(ShadowModel {
                        width_mm: nums[0],
                        spread: nums[1],
                        attenuation_db: nums[2],
                    });
                }
                "psf" => {
                    want(2)?;
                    spec.psf_sigma_px = Some((nums[0], nums[1]));
                }
                other => return Err(parse_err(line_no, format!("unknown directive {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_PHANTOM_SPEC).expect("bundled phantom spec parses")
    }

    pub fn extent_mm(&self) -> (f64, f64) {
        (
            (self.width - 1) as f64 * self.pitch_lateral_mm,
            (self.height - 1) as f64 * self.pitch_axial_mm,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("phantom grid must be non-empty"));
        }
        if !(self.pitch_axial_mm > 0.0 && self.pitch_lateral_mm > 0.0) {
            return Err(Error::contract("phantom pitch must be positive"));
        }
        if self.angles_deg.is_empty() || self.angles_deg.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::contract("phantom angles must be non-empty and strictly ascending"));
        }
        if self.angles_deg.iter().any(|a| a.abs() >= 90.0) {
            return Err(Error::contract("phantom angles must lie in (-90, 90) degrees"));
        }
        if !(self.dyn_range_db.1 > self.dyn_range_db.0) {
            return Err(Error::contract("dynamic range max must exceed min"));
        }
        if !(0.0..=1.0).contains(&self.speckle_level) || !(0.0..=1.0).contains(&self.speckle_decorrelation) {
            return Err(Error::contract("speckle level and decorrelation must lie in [0, 1]"));
        }
        if !(self.speckle_grain_px.0 > 0.0 && self.speckle_grain_px.1 > 0.0) || !(self.scatterer_sigma_px.0 > 0.0 && self.scatterer_sigma_px.1 > 0.0) {
            return Err(Error::contract("speckle grain and scatterer sizes must be positive"));
        }
        let (xmax, zmax) = self.extent_mm();
        let inside = |x: f64, z: f64| (0.0..=xmax).contains(&x) && (0.0..=zmax).contains(&z);
        for (i, s) in self.scatterers.iter().enumerate() {
            if !inside(s.lateral_mm, s.depth_mm) {
                return Err(Error::contract(format!("scatterer {i} lies outside the grid")));
            }
        }
        for (i, d) in self.disks.iter().enumerate() {
            let fits = d.radius_mm > 0.0
                && inside(d.lateral_mm - d.radius_mm, d.depth_mm - d.radius_mm)
                && inside(d.lateral_mm + d.radius_mm, d.depth_mm + d.radius_mm);
            if !fits {
                return Err(Error::contract(format!("disk {i} does not fit inside the grid")));
            }
        }
        if let Some((a, l)) = self.psf_sigma_px {
            if !(a > 0.0 && l > 0.0) {
                return Err(Error::contract("psf sigmas must be positive"));
            }
        }
        if let Some(s) = &self.shadow {
            if !(s.width_mm > 0.0 && s.spread >= 0.0 && s.attenuation_db >= 0.0) {
                return Err(Error::contract("shadow width must be positive, spread and attenuation non-negative"));
            }
        }
        Ok(())
    }
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Complex Gaussian field smoothed with an isotropic Gaussian of `grain` px;
/// returned as (re, im) planes.
/// Gaussian blur truncated at 3 sigma, and to what an `h x w` image supports.
fn gaussian_blur(h: usize, w: usize, sigma: (f64, f64)) -> Result<ops::SeparableKernel<f64>> {
    let taps = |sigma: f64, extent: usize| {
        let size = (2.0 * (3.0 * sigma).ceil() + 1.0) as usize;
        gaussian_taps(sigma, size.min(2 * (extent - 1) + 1).max(1))
    };
    ops::SeparableKernel::new(taps(sigma.0, h)?, taps(sigma.1, w)?)
}

fn speckle_field(h: usize, w: usize, grain: (f64, f64), rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let kernel = gaussian_blur(h, w, grain)?;
    let mut plane = || -> Result<Vec<f64>> {
        let noise = DenseArray::from_fn(h, w, |_, _| StandardNormal.sample(&mut *rng));
        Ok(ops::conv2d_separable(&noise, &kernel)?.into_data())
    };
    Ok((plane()?, plane()?))
}

/// Renders every angle of `spec`; deterministic for a given seed.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PlaneWaveStack> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let shared = if spec.speckle_level > 0.0 {
        Some(speckle_field(h, w, spec.speckle_grain_px, &mut rng)?)
    } else {
        None
    };

    let system_blur = spec.psf_sigma_px.map(|s| gaussian_blur(h, w, s)).transpose()?;

    let background = db_to_amp(spec.background_db);
    // Tissue map without angle dependence: background with anechoic disks.
    let mut tissue = vec![background; h * w];
    for d in &spec.disks {
        let floor = db_to_amp(d.floor_db);
        for r in 0..h {
            for c in 0..w {
                let dz = r as f64 * spec.pitch_axial_mm - d.depth_mm;
                let dx = c as f64 * spec.pitch_lateral_mm - d.lateral_mm;
                if dx * dx + dz * dz <= d.radius_mm * d.radius_mm {
                    tissue[r * w + c] = floor;
                }
            }
        }
    }

    let (sa, sl) = spec.scatterer_sigma_px;
    let mut images = Vec::with_capacity(spec.angles_deg.len() * h * w);
    for &angle in &spec.angles_deg {
        let mut amp = tissue.clone();

        if let Some((shared_re, shared_im)) = &shared {
            let rho = spec.speckle_decorrelation;
            let own = if rho > 0.0 {
                Some(speckle_field(h, w, spec.speckle_grain_px, &mut rng)?)
            } else {
                None
            };
            let mags: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (mut re, mut im) = (shared_re[i], shared_im[i]);
                    if let Some((ore, oim)) = &own {
                        re = (1.0 - rho).sqrt() * re + rho.sqrt() * ore[i];
                        im = (1.0 - rho).sqrt() * im + rho.sqrt() * oim[i];
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            let mean = mags.iter().sum::<f64>() / mags.len() as f64;
            for (a, m) in amp.iter_mut().zip(&mags) {
                *a *= (1.0 - spec.speckle_level) + spec.speckle_level * m / mean;
            }
        }

        if let Some(shadow) = &spec.shadow {
            let keep = db_to_amp(-shadow.attenuation_db);
            let tan = angle.to_radians().tan();
            for s in &spec.scatterers {
                let r0 = s.depth_mm / spec.pitch_axial_mm;
                let c0 = s.lateral_mm / spec.pitch_lateral_mm;
                for r in 0..h {
                    let depth_px = r as f64 - r0;
                    if depth_px <= 0.0 {
                        continue;
                    }
                    let depth_mm = depth_px * spec.pitch_axial_mm;
                    let centre = c0 - tan * depth_mm / spec.pitch_lateral_mm;
                    let half = (shadow.width_mm / 2.0 + shadow.spread * depth_mm) / spec.pitch_lateral_mm;
                    let onset = 1.0 - (-depth_px / 2.0).exp();
                    for c in 0..w {
                        let u = (c as f64 - centre) / half;
                        let depthness = onset * (-0.5 * u * u * u * u).exp();
                        amp[r * w + c] *= 1.0 - (1.0 - keep) * depthness;
                    }
                }
            }
        }

        for s in &spec.scatterers {
            let peak = db_to_amp(s.peak_db);
            let r0 = s.depth_mm / spec.pitch_axial_mm;
            let c0 = s.lateral_mm / spec.pitch_lateral_mm;
            for r in 0..h {
                let dr = (r as f64 - r0) / sa;
                if dr.abs() > 6.0 {
                    continue;
                }
                for c in 0..w {
                    let dc = (c as f64 - c0) / sl;
                    amp[r * w + c] += peak * (-0.5 * (dr * dr + dc * dc)).exp();
                }
            }
        }

        let (lo, hi) = spec.dyn_range_db;
        let db: Vec<f64> = amp.iter().map(|&a| (20.0 * a.max(1e-12).log10()).clamp(lo, hi)).collect();
        let db = match &system_blur {
            Some(k) => ops::conv2d_separable(&DenseArray::new([h, w], db)?, k)?.into_data(),
            None => db,
        };
        images.extend(db.iter().map(|&v| v as f32));
    }

    PlaneWaveStack::new(
        h,
        w,
        spec.angles_deg.iter().map(|&a| a as f32).collect(),
        (spec.pitch_axial_mm as f32, spec.pitch_lateral_mm as f32),
        (spec.dyn_range_db.0 as f32, spec.dyn_range_db.1 as f32),
        images,
        spec.name.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_scatterer_spec() -> PhantomSpec {
        PhantomSpec {
            height: 64,
            width: 64,
            angles_deg: vec![-16.0, 16.0],
            background_db: -30.0,
            scatterers: vec![Scatterer {
                lateral_mm: 3.2,
                depth_mm: 1.0,
                peak_db: 0.0,
            }],
            shadow: Some(ShadowModel {
                width_mm: 0.6,
                spread: 0.1,
                attenuation_db: 20.0,
            }),
            ..Default::default()
        }
    }

    #[test]
    fn bundled_spec_shape() {
        let spec = PhantomSpec::bundled();
        let stack = generate_phantom(&spec, 0).unwrap();
        assert_eq!((stack.height(), stack.width(), stack.angle_count()), (64, 64, 8));
    }

    #[test]
    fn empty_spec_is_uniform_background() {
        let spec = PhantomSpec::default();
        let stack = generate_phantom(&spec, 1).unwrap();
        for a in 0..stack.angle_count() {
            assert!(stack.image_raw(a).iter().all(|&v| (v + 30.0).abs() < 1e-4));
        }
    }

    #[test]
    fn same_seed_same_stack() {
        let spec = PhantomSpec::bundled();
        assert_eq!(generate_phantom(&spec, 7).unwrap(), generate_phantom(&spec, 7).unwrap());
        assert_ne!(generate_phantom(&spec, 7).unwrap(), generate_phantom(&spec, 8).unwrap());
    }

    #[test]
    fn shadows_mirror_for_opposite_angles() {
        let spec = single_scatterer_spec();
        let stack = generate_phantom(&spec, 0).unwrap();
        let scatter_col = 32.0;
        // Lateral centroid of shadowed pixels (well below background) under the scatterer.
        let centroid = |a: usize| {
            let img = stack.image_raw(a);
            let (mut sum, mut n) = (0.0, 0.0);
            for r in 20..64 {
                for c in 0..64 {
                    if img[r * 64 + c] < -36.0 {
                        sum += c as f64;
                        n += 1.0;
                    }
                }
            }
            sum / n - scatter_col
        };
        let (neg, pos) = (centroid(0), centroid(1));
        assert!(neg > 1.0, "{neg}");
        assert!(pos < -1.0, "{pos}");
        assert!((neg + pos).abs() < 0.5, "{neg} {pos}");
    }

    #[test]
    fn system_blur_smooths_and_keeps_constants() {
        let sharp = single_scatterer_spec();
        let blurred = PhantomSpec {
            psf_sigma_px: Some((2.0, 4.0)),
            ..single_scatterer_spec()
        };
        let tv = |spec: &PhantomSpec| -> f64 {
            let s = generate_phantom(spec, 0).unwrap();
            s.image_raw(0).windows(2).map(|p| (p[1] - p[0]).abs() as f64).sum()
        };
        assert!(tv(&blurred) < tv(&sharp));

        let flat = PhantomSpec {
            psf_sigma_px: Some((2.0, 4.0)),
            ..Default::default()
        };
        let stack = generate_phantom(&flat, 0).unwrap();
        assert!(stack.image_raw(0).iter().all(|&v| (v + 30.0).abs() < 1e-4));
        assert!(PhantomSpec::parse("psf 0 1").is_err());
    }

    #[test]
    fn shadows_make_angles_differ() {
        let stack = generate_phantom(&single_scatterer_spec(), 0).unwrap();
        let l2: f64 = stack
            .image_raw(0)
            .iter()
            .zip(stack.image_raw(1))
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!(l2 > 0.0);
    }

    #[test]
    fn geometry_outside_grid_rejected() {
        let mut spec = single_scatterer_spec();
        spec.scatterers[0].depth_mm = 50.0;
        assert!(generate_phantom(&spec, 0).is_err());
        let mut spec = single_scatterer_spec();
        spec.disks.push(Disk {
            lateral_mm: 0.5,
            depth_mm: 3.0,
            radius_mm: 1.0,
            floor_db: -55.0,
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = PhantomSpec::parse("grid 8 8\n\nscatterer 1 x 0\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3, .. }), "{err}");
        let err = PhantomSpec::parse("grid 8\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 1, .. }));
        let err = PhantomSpec::parse("bogus 1\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 1, .. }));
    }

    #[test]
    fn parse_round_values() {
        let spec = PhantomSpec::parse(
            "# test\ngrid 16 20\npitch 0.2 0.1\nangles -10 10 5\nspeckle 0.5 1.2 2.4 0.25\nname toy set\n",
        )
        .unwrap();
        assert_eq!((spec.height, spec.width), (16, 20));
        assert_eq!(spec.angles_deg, vec![-10.0, -5.0, 0.0, 5.0, 10.0]);
        assert_eq!(spec.speckle_grain_px, (1.2, 2.4));
        assert_eq!(spec.speckle_decorrelation, 0.25);
        assert_eq!(spec.name, "toy set");
    }
}
