//! Synthetic vessel phantoms and the single-shot imaging model.
//!
//! A shot sees the phantom attenuated by a Gaussian light spread around its
//! irradiation center (floored at [`CONFIDENCE_FLOOR`]) plus additive Gaussian
//! pixel noise. The same Gaussian doubles as the per-shot confidence map.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub type Image = Array2<f32>;

/// Lowest value a confidence map (and the attenuation field) can take.
pub const CONFIDENCE_FLOOR: f64 = 0.2;
pub const MIN_PHANTOM_SIZE: usize = 16;

const MAX_PLACEMENT_TRIES: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct VesselPhantom {
    pub image: Image,
    pub vessel_mask: Array2<bool>,
}

impl VesselPhantom {
    pub fn size(&self) -> usize {
        self.image.nrows()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.vessel_mask.iter().filter(|&&m| m).count() as f64 / self.vessel_mask.len() as f64
    }
}

/// Light-irradiation position (row, col) in pixels and the spread of its
/// scattering Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotGeometry {
    pub center: (f64, f64),
    pub sigma: f64,
}

impl ShotGeometry {
    pub fn validate(&self, size: usize) -> Result<()> {
        let hi = size as f64 - 1.0;
        let (r, c) = self.center;
        ensure!(
            r.is_finite() && c.is_finite() && (0.0..=hi).contains(&r) && (0.0..=hi).contains(&c),
            "irradiation center ({r}, {c}) outside a {size}x{size} image"
        );
        ensure!(self.sigma > 0.0 && self.sigma.is_finite(), "sigma must be positive, got {}", self.sigma);
        Ok(())
    }

    /// Center uniform over the central 80% of the frame, sigma uniform in
    /// `[0.2, 0.4] × size`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let span = size as f64 - 1.0;
        let r = rng.gen_range(0.1 * span..=0.9 * span);
        let c = rng.gen_range(0.1 * span..=0.9 * span);
        let sigma = rng.gen_range(0.2..=0.4) * size as f64;
        Self { center: (r, c), sigma }
    }
}

/// Per-pixel signal reliability `h`, in `[0.2, 1.0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub values: Image,
}

impl ConfidenceMap {
    /// Wraps precomputed values, checking the `[0.2, 1.0]` range.
    pub fn from_values(values: Image) -> Result<Self> {
        ensure!(values.iter().all(|&v| v >= CONFIDENCE_FLOOR as f32 && v <= 1.0), "confidence values must lie in [0.2, 1.0]");
        Ok(Self { values })
    }

    /// A map equal to 1 everywhere.
    pub fn ones(size: usize) -> Self {
        Self { values: Image::ones((size, size)) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotImage {
    pub image: Image,
    pub geometry: ShotGeometry,
    pub confidence: ConfidenceMap,
}

/// M input shots of one scene location plus its high-quality target.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub shots: Vec<ShotImage>,
    pub target: Image,
    pub location_id: u64,
}

impl PairedSample {
    pub fn m(&self) -> usize {
        self.shots.len()
    }

    pub fn size(&self) -> usize {
        self.target.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.shots.is_empty(), "sample {} has no shots", self.location_id);
        let dim = self.target.dim();
        ensure!(dim.0 == dim.1, "target must be square, got {dim:?}");
        for s in &self.shots {
            ensure!(s.image.dim() == dim && s.confidence.values.dim() == dim, "sample {}: shot and target shapes differ", self.location_id);
        }
        Ok(())
    }
}

/// Gaussian tube cross-section: `amp·exp(-d²/2s²)`, cut to zero beyond `2s`.
#[derive(Clone, Copy, Debug)]
struct Tube {
    amp: f64,
    s: f64,
}

impl Tube {
    fn value(&self, d: f64) -> f64 {
        if d > 2.0 * self.s {
            0.0
        } else {
            self.amp * (-d * d / (2.0 * self.s * self.s)).exp()
        }
    }
}

type Point = (f64, f64);

fn bezier(p: [Point; 4], u: f64) -> Point {
    let v = 1.0 - u;
    let (a, b, c, d) = (v * v * v, 3.0 * v * v * u, 3.0 * v * u * u, u * u * u);
    (a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0, a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1)
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + u * dx - p.0, a.1 + u * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Draws one vessel: a cubic Bézier whose chord has random position,
/// direction and length, with control points bent off the chord.
fn random_vessel(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let span = size as f64 - 1.0;
    let p0 = (rng.gen_range(0.0..=span), rng.gen_range(0.0..=span));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let len = rng.gen_range(0.5..=1.0) * size as f64;
    let p3 = ((p0.0 + len * theta.sin()).clamp(0.0, span), (p0.1 + len * theta.cos()).clamp(0.0, span));
    let (nx, ny) = (-theta.cos(), theta.sin());
    let chord = ((p3.0 - p0.0).powi(2) + (p3.1 - p0.1).powi(2)).sqrt();
    let mut ctrl = |frac: f64| {
        let bend = rng.gen_range(-0.3..=0.3) * chord;
        (p0.0 + frac * (p3.0 - p0.0) + bend * nx, p0.1 + frac * (p3.1 - p0.1) + bend * ny)
    };
    let (p1, p2) = (ctrl(1.0 / 3.0), ctrl(2.0 / 3.0));
    let tube = Tube { amp: rng.gen_range(0.6..=1.0), s: rng.gen_range(0.55..=1.0) };

    let n_pts = (chord * 4.0).ceil() as usize + 8;
    let pts: Vec<Point> = (0..=n_pts).map(|i| bezier([p0, p1, p2, p3], i as f64 / n_pts as f64)).collect();
    Image::from_shape_fn((size, size), |(r, c)| {
        let p = (r as f64, c as f64);
        let d = pts.windows(2).map(|w| segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
        tube.value(d) as f32
    })
}

/// True when `a` has a pixel within one (8-neighbour) step of `mask`.
fn touches(a: &Image, mask: &Array2<bool>) -> bool {
    let n = mask.nrows() as isize;
    a.indexed_iter().any(|((r, c), &v)| {
        v > 0.0
            && (-1..=1).any(|dr| {
                (-1..=1).any(|dc| {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    rr >= 0 && cc >= 0 && rr < n && cc < n && mask[[rr as usize, cc as usize]]
                })
            })
    })
}

/// Renders `n_vessels` non-touching spline tubes on a zero background.
pub fn generate_phantom(seed: u64, size: usize, n_vessels: usize) -> Result<VesselPhantom> {
    ensure!(size >= MIN_PHANTOM_SIZE, "phantom size must be at least {MIN_PHANTOM_SIZE}, got {size}");
    ensure!(n_vessels >= 1, "need at least one vessel");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Image::zeros((size, size));
    let mut mask = Array2::from_elem((size, size), false);
    let max_fg = size * size / 2;

    for _ in 0..n_vessels {
        let mut fallback = None;
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let v = random_vessel(&mut rng, size);
            let fg = mask.iter().zip(&v).filter(|(&m, &x)| m || x > 0.0).count();
            if fg == 0 || fg >= max_fg {
                continue;
            }
            if !touches(&v, &mask) {
                placed = Some(v);
                break;
            }
            fallback.get_or_insert(v);
        }
        let v = placed
            .or(fallback)
            .ok_or_else(|| crate::Error::invalid(format!("cannot fit {n_vessels} vessels in a {size}x{size} phantom")))?;
        image.zip_mut_with(&v, |a, &b| *a = a.max(b));
        mask.zip_mut_with(&v, |m, &b| *m |= b > 0.0);
    }
    Ok(VesselPhantom { image, vessel_mask: mask })
}

/// `h(p) = 0.2 + 0.8·exp(-‖p - center‖² / 2σ²)`.
pub fn make_confidence_map(geometry: &ShotGeometry, size: usize) -> Result<ConfidenceMap> {
    geometry.validate(size)?;
    let (cr, cc) = geometry.center;
    let two_s2 = 2.0 * geometry.sigma * geometry.sigma;
    let values = Image::from_shape_fn((size, size), |(r, c)| {
        let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
        (CONFIDENCE_FLOOR + (1.0 - CONFIDENCE_FLOOR) * (-d2 / two_s2).exp()) as f32
    });
    Ok(ConfidenceMap { values })
}

/// `clip(phantom ⊙ h + noise_level·n, 0, 1)` with `n ~ N(0, 1)` drawn from `seed`.
pub fn simulate_shot(phantom: &VesselPhantom, geometry: &ShotGeometry, noise_level: f64, seed: u64) -> Result<ShotImage> {
    ensure!(noise_level >= 0.0 && noise_level.is_finite(), "noise_level must be >= 0, got {noise_level}");
    let confidence = make_confidence_map(geometry, phantom.size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = phantom.image.clone();
    image.zip_mut_with(&confidence.values, |p, &h| {
        let n: f64 = StandardNormal.sample(&mut rng);
        *p = (*p as f64 * h as f64 + noise_level * n).clamp(0.0, 1.0) as f32;
    });
    Ok(ShotImage { image, geometry: *geometry, confidence })
}

/// Pixel-wise mean of equally shaped images.
pub fn average_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Image> {
    let mut iter = images.into_iter();
    let first = iter.next().ok_or_else(|| crate::Error::invalid("cannot average an empty list"))?;
    let mut acc = first.mapv(|v| v as f64);
    let mut n = 1usize;
    for img in iter {
        ensure!(img.dim() == first.dim(), "shape mismatch: {:?} vs {:?}", img.dim(), first.dim());
        acc.zip_mut_with(img, |a, &b| *a += b as f64);
        n += 1;
    }
    Ok(acc.mapv(|v| (v / n as f64) as f32))
}

pub fn average_shots(shots: &[ShotImage]) -> Result<Image> {
    average_images(shots.iter().map(|s| &s.image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn components(mask: &Array2<bool>) -> usize {
        let n = mask.nrows();
        let mut seen = Array2::from_elem((n, n), false);
        let mut count = 0;
        for start in 0..n * n {
            let (r0, c0) = (start / n, start % n);
            if !mask[[r0, c0]] || seen[[r0, c0]] {
                continue;
            }
            count += 1;
            let mut q = VecDeque::from([(r0, c0)]);
            seen[[r0, c0]] = true;
            while let Some((r, c)) = q.pop_front() {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr < 0 || cc < 0 || rr >= n as i64 || cc >= n as i64 {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if mask[[rr, cc]] && !seen[[rr, cc]] {
                            seen[[rr, cc]] = true;
                            q.push_back((rr, cc));
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn phantom_has_requested_components() {
        let p = generate_phantom(0, 64, 3).unwrap();
        assert_eq!(components(&p.vessel_mask), 3);
        let q = generate_phantom(0, 64, 3).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn phantom_rejects_bad_arguments() {
        assert!(matches!(generate_phantom(1, 64, 0), Err(crate::Error::InvalidArgument(_))));
        assert!(matches!(generate_phantom(1, 15, 2), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn phantom_invariants_over_seeds() {
        for seed in 0..40 {
            for &(size, n) in &[(32usize, 2usize), (32, 4), (16, 1), (64, 3)] {
                let p = generate_phantom(seed, size, n).unwrap();
                assert!(p.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
                for (v, m) in p.image.iter().zip(&p.vessel_mask) {
                    assert_eq!(*m, *v > 0.0);
                }
                let f = p.foreground_fraction();
                assert!(f > 0.0 && f < 0.5, "seed {seed}: fraction {f}");
            }
        }
    }

    #[test]
    fn confidence_map_examples() {
        let g = ShotGeometry { center: (10.0, 20.0), sigma: 4.0 };
        let h = make_confidence_map(&g, 32).unwrap();
        assert_eq!(h.values[[10, 20]], 1.0);
        // Far corner with a tiny sigma sits at the floor.
        let g = ShotGeometry { center: (0.0, 0.0), sigma: 0.5 };
        let h = make_confidence_map(&g, 32).unwrap();
        assert!((h.values[[31, 31]] - 0.2).abs() < 1e-7);
        // Half-maximum radius sigma·√(2 ln 2) gives 0.6. Place it on an axis.
        let sigma = 3.0 / (2.0 * 2f64.ln()).sqrt();
        let g = ShotGeometry { center: (5.0, 5.0), sigma };
        let h = make_confidence_map(&g, 16).unwrap();
        assert!((h.values[[5, 8]] - 0.6).abs() < 1e-6);
        let bad = ShotGeometry { center: (32.0, 0.0), sigma: 1.0 };
        assert!(make_confidence_map(&bad, 32).is_err());
    }

    #[test]
    fn shot_without_attenuation_or_noise_is_the_phantom() {
        let p = generate_phantom(3, 32, 3).unwrap();
        let g = ShotGeometry { center: (15.5, 15.5), sigma: 1e9 };
        let s = simulate_shot(&p, &g, 0.0, 7).unwrap();
        assert_eq!(s.image, p.image);
    }

    #[test]
    fn far_vessel_pixels_are_attenuated_to_the_floor() {
        let p = generate_phantom(4, 32, 3).unwrap();
        let g = ShotGeometry { center: (0.0, 0.0), sigma: 1.0 };
        let s = simulate_shot(&p, &g, 0.0, 1).unwrap();
        for ((r, c), &v) in p.image.indexed_iter() {
            if r + c > 20 && v > 0.0 {
                assert!(s.image[[r, c]] <= 0.2 * v + 1e-6);
            }
        }
    }

    #[test]
    fn seeds_change_only_the_noise() {
        let p = generate_phantom(5, 32, 2).unwrap();
        let g = ShotGeometry { center: (12.0, 18.0), sigma: 8.0 };
        let a = simulate_shot(&p, &g, 0.1, 1).unwrap();
        let b = simulate_shot(&p, &g, 0.1, 2).unwrap();
        assert_eq!(a.confidence, b.confidence);
        assert_ne!(a.image, b.image);
        assert_eq!(a, simulate_shot(&p, &g, 0.1, 1).unwrap());
        assert!(simulate_shot(&p, &g, -0.1, 1).is_err());
    }

    #[test]
    fn averaging_examples() {
        let p = generate_phantom(6, 32, 2).unwrap();
        let g = ShotGeometry { center: (16.0, 16.0), sigma: 8.0 };
        let s = simulate_shot(&p, &g, 0.15, 1).unwrap();
        assert_eq!(average_shots(std::slice::from_ref(&s)).unwrap(), s.image);
        let a = Image::from_elem((4, 4), 0.2);
        let b = Image::from_elem((4, 4), 0.6);
        let m = average_images([&a, &b]).unwrap();
        assert!(m.iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert!(average_shots(&[]).is_err());
        assert!(average_images([&a, &Image::zeros((3, 3))]).is_err());
    }

    // Background variance of an N-shot average falls as 1/N. Noise is kept
    // small relative to the mid-grey level so that clipping stays negligible.
    fn background_variance(n: usize, seed: u64) -> f64 {
        let mut p = generate_phantom(2, 32, 1).unwrap();
        p.image.fill(0.5);
        let g = ShotGeometry { center: (16.0, 16.0), sigma: 1e9 };
        let shots: Vec<_> = (0..n).map(|i| simulate_shot(&p, &g, 0.1, seed * 1000 + i as u64).unwrap()).collect();
        let avg = average_shots(&shots).unwrap();
        let m = avg.iter().map(|&v| v as f64).sum::<f64>() / avg.len() as f64;
        avg.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (avg.len() - 1) as f64
    }

    #[test]
    fn averaging_reduces_variance_as_one_over_n() {
        let base = 0.1f64 * 0.1;
        for &n in &[1usize, 4, 16, 64] {
            let v: f64 = (0..4).map(|s| background_variance(n, s)).sum::<f64>() / 4.0;
            let ratio = v * n as f64 / base;
            assert!((ratio - 1.0).abs() < 0.2, "N={n}: ratio {ratio}");
        }
        // 40 shots: residual std ≈ noise/√40.
        let v40 = background_variance(40, 9).sqrt();
        assert!((v40 / (0.1 / 40f64.sqrt()) - 1.0).abs() < 0.2);
    }

    proptest! {
        #[test]
        fn confidence_range_and_peak(r in 0.0f64..31.0, c in 0.0f64..31.0, sigma in 0.3f64..40.0) {
            let g = ShotGeometry { center: (r, c), sigma };
            let h = make_confidence_map(&g, 32).unwrap();
            prop_assert!(h.values.iter().all(|&v| (0.2..=1.0).contains(&v)));
            // Maximum sits at the pixel nearest the center.
            let peak = h.values[[r.round() as usize, c.round() as usize]];
            prop_assert!(h.values.iter().all(|&v| v <= peak));
            let exact = ShotGeometry { center: (r.round(), c.round()), sigma };
            let h2 = make_confidence_map(&exact, 32).unwrap();
            prop_assert_eq!(h2.values[[r.round() as usize, c.round() as usize]], 1.0);
        }

        #[test]
        fn confidence_is_radially_monotone(r in 0usize..32, c in 0usize..32, sigma in 0.5f64..20.0) {
            let g = ShotGeometry { center: (r as f64, c as f64), sigma };
            let h = make_confidence_map(&g, 32).unwrap();
            // Walking away from the center along a row never increases h.
            for cc in c + 1..32 {
                prop_assert!(h.values[[r, cc]] <= h.values[[r, cc - 1]]);
            }
            for cc in (0..c).rev() {
                prop_assert!(h.values[[r, cc]] <= h.values[[r, cc + 1]]);
            }
        }

        #[test]
        fn averaging_is_permutation_invariant_and_linear(
            vals in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 16), 1..6),
            a in 0.1f32..3.0,
            rot in 0usize..6,
        ) {
            let imgs: Vec<Image> = vals.iter().map(|v| Image::from_shape_vec((4, 4), v.clone()).unwrap()).collect();
            let base = average_images(&imgs).unwrap();
            let mut perm = imgs.clone();
            perm.rotate_left(rot % imgs.len());
            perm.reverse();
            let p = average_images(&perm).unwrap();
            for (x, y) in base.iter().zip(&p) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            let scaled: Vec<Image> = imgs.iter().map(|i| i * a).collect();
            let s = average_images(&scaled).unwrap();
            for (x, y) in base.iter().zip(&s) {
                prop_assert!((a * x - y).abs() < 1e-5);
            }
        }
    }
}
