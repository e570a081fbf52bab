//! Synthetic multi-modal dataset generator.
//!
//! Each case carries N textured pseudo-modality volumes and a lesion mask of
//! 1–3 elliptic blobs whose total area varies over two orders of magnitude
//! across a cohort. In conjunctive mode the lesion signal appears only in the
//! first two modalities while every modality also carries its own decoy blobs
//! of identical intensity, so no single modality can separate lesion from
//! decoy — only the cross-modal co-occurrence can. That gives a desk-scale
//! dataset on which fusion quality is measurable.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{default_modality_names, Case};

/// Geometry and content knobs for one generated cohort.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_cases: usize,
    /// Slice size `(H, W)`; both divisible by 16 so a depth-4 network fits.
    pub size: (usize, usize),
    /// Maximum depth; cases are drawn from thin depths {2, 4} up to this.
    pub depth: usize,
    pub num_modalities: usize,
    /// Lesion visible only as co-occurrence of the first two modalities.
    pub conjunctive: bool,
}

/// Additive intensity of lesion and decoy blobs; sits above the background
/// band (≤ 0.58) with a clean margin so ideal thresholds are exact.
const SIGNAL: f64 = 0.5;
/// Per-voxel noise half-width.
const NOISE: f64 = 0.05;
/// Accepted painted lesion fraction of one slice (exclusive bounds).
const FRACTION_LO: f64 = 0.0012;
const FRACTION_HI: f64 = 0.14;

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<Case>> {
    let (h, w) = spec.size;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "slice size must be a positive multiple of 16, got {h}×{w}"
        )));
    }
    if spec.depth == 0 || spec.num_cases == 0 || spec.num_modalities == 0 {
        return Err(Error::Config(
            "depth, case count and modality count must be positive".into(),
        ));
    }
    if spec.conjunctive && spec.num_modalities < 2 {
        return Err(Error::Config(
            "conjunctive mode needs at least two modalities".into(),
        ));
    }
    let names = default_modality_names(spec.num_modalities);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_cases)
        .map(|i| generate_case(spec, &names, format!("case{i:03}"), &mut rng))
        .collect()
}

fn generate_case(
    spec: &SynthSpec,
    names: &[String],
    case_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let (h, w) = spec.size;
    let n = spec.num_modalities;
    // thin volumes (2 and 4 slices) are deliberately part of every cohort
    let depth_choices: Vec<usize> = {
        let mut c: Vec<usize> = [2, 4, spec.depth]
            .into_iter()
            .filter(|d| *d >= 1 && *d <= spec.depth)
            .collect();
        c.dedup();
        if c.is_empty() {
            vec![spec.depth]
        } else {
            c
        }
    };
    let d = depth_choices[rng.random_range(0..depth_choices.len())];

    // lesion blobs: rejection-sample until the painted fraction is in bounds
    let (f_lo, f_hi): (f64, f64) = if spec.conjunctive {
        (0.004, 0.04)
    } else {
        (0.004, 0.12)
    };
    let mut lesion: Vec<u8> = Vec::new();
    let mut painter = Painter::new(h, w);
    for attempt in 0..60 {
        if attempt == 59 {
            return Err(Error::Data(format!(
                "{case_id}: could not place lesion blobs in a {h}×{w} slice"
            )));
        }
        painter = Painter::new(h, w);
        let target = (rng.random_range(f_lo.ln()..f_hi.ln())).exp() * (h * w) as f64;
        let blobs = rng.random_range(1..=3usize);
        let mut weights: Vec<f64> = (0..blobs).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        for we in &mut weights {
            *we *= target / total;
        }
        let mut cells = Vec::new();
        let mut ok = true;
        for area in weights {
            match painter.place(rng, area) {
                Some(c) => cells.extend(c),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let frac = cells.len() as f64 / (h * w) as f64;
        if frac > FRACTION_LO && frac < FRACTION_HI {
            lesion = vec![0u8; h * w];
            for c in cells {
                lesion[c] = 1;
            }
            break;
        }
    }

    // decoys: one group per modality, same intensity as the lesion, mutually
    // disjoint — conjunctive mode only
    let lesion_area = lesion.iter().filter(|v| **v == 1).count() as f64;
    let mut decoys: Vec<Vec<u8>> = vec![vec![0u8; h * w]; n];
    if spec.conjunctive {
        for decoy in decoys.iter_mut() {
            let factor = rng.random_range(2.0..3.0);
            let blobs = rng.random_range(1..=2usize);
            for b in 0..blobs {
                let area = lesion_area * factor / blobs as f64;
                // shrinking retries happen inside the painter; a decoy that
                // simply cannot fit is dropped rather than failing the case
                if let Some(cells) = painter.place(rng, area) {
                    for c in cells {
                        decoy[c] = 1;
                    }
                } else if b == 0 {
                    return Err(Error::Data(format!(
                        "{case_id}: no room for decoy blobs in a {h}×{w} slice"
                    )));
                }
            }
        }
    }

    // per-modality smooth background + blob signals, then 3-D noise
    let tau = std::f64::consts::TAU;
    let mut volumes = Vec::with_capacity(n);
    for (m, decoy) in decoys.iter().enumerate() {
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(1..4u32) as f64,
                    rng.random_range(1..4u32) as f64,
                    rng.random_range(0.0..tau),
                )
            })
            .collect();
        let mut slice = vec![0f32; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut v = 0.35;
                for (u, q, phi) in &waves {
                    v += 0.06
                        * (tau * (u * r as f64 / h as f64 + q * c as f64 / w as f64) + phi).cos();
                }
                let i = r * w + c;
                let signal_here = decoy[i] == 1
                    || (lesion[i] == 1 && (!spec.conjunctive || m < 2));
                if signal_here {
                    v += SIGNAL;
                }
                slice[i] = v as f32;
            }
        }
        let data: Vec<f32> = (0..d * h * w)
            .map(|i| slice[i % (h * w)] + rng.random_range(-NOISE..NOISE) as f32)
            .collect();
        volumes.push(Tensor::new(vec![d, h, w], data).expect("constructed to shape"));
    }

    let mask: Vec<u8> = (0..d * h * w).map(|i| lesion[i % (h * w)]).collect();
    Case::new(case_id, names.to_vec(), volumes, Some(mask), [1.0, 1.0, 1.0])
}

/// Places axis-aligned ellipses on a slice without letting them touch: every
/// painted cell keeps a one-cell margin from previously painted blobs.
struct Painter {
    h: usize,
    w: usize,
    occupied: Vec<bool>,
}

impl Painter {
    fn new(h: usize, w: usize) -> Self {
        Painter {
            h,
            w,
            occupied: vec![false; h * w],
        }
    }

    /// Tries to place one ellipse of roughly `area` cells; shrinks on
    /// repeated collision and gives up after bounded retries.
    fn place(&mut self, rng: &mut ChaCha8Rng, area: f64) -> Option<Vec<usize>> {
        let (h, w) = (self.h as f64, self.w as f64);
        for attempt in 0..200 {
            let shrink = 0.85f64.powi((attempt / 10) as i32);
            let r0 = (area / std::f64::consts::PI).sqrt().max(1.0) * shrink;
            let aspect = rng.random_range(0.65..1.55f64);
            let ra = (r0 * aspect.sqrt()).clamp(1.0, (h - 4.0) / 2.0);
            let rb = (r0 / aspect.sqrt()).clamp(1.0, (w - 4.0) / 2.0);
            let cy = rng.random_range(ra + 1.5..h - ra - 1.5);
            let cx = rng.random_range(rb + 1.5..w - rb - 1.5);
            let cells = self.ellipse_cells(cy, cx, ra, rb);
            if cells.is_empty() || cells.iter().any(|&c| self.collides(c)) {
                continue;
            }
            for &c in &cells {
                self.occupied[c] = true;
            }
            return Some(cells);
        }
        None
    }

    fn ellipse_cells(&self, cy: f64, cx: f64, ra: f64, rb: f64) -> Vec<usize> {
        let mut cells = Vec::new();
        let r_lo = (cy - ra).floor().max(0.0) as usize;
        let r_hi = ((cy + ra).ceil() as usize).min(self.h - 1);
        let c_lo = (cx - rb).floor().max(0.0) as usize;
        let c_hi = ((cx + rb).ceil() as usize).min(self.w - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let dy = (r as f64 + 0.5 - cy) / ra;
                let dx = (c as f64 + 0.5 - cx) / rb;
                if dy * dy + dx * dx <= 1.0 {
                    cells.push(r * self.w + c);
                }
            }
        }
        cells
    }

    fn collides(&self, cell: usize) -> bool {
        let (r, c) = (cell / self.w, cell % self.w);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr >= 0
                    && cc >= 0
                    && (rr as usize) < self.h
                    && (cc as usize) < self.w
                    && self.occupied[rr as usize * self.w + cc as usize]
                {
                    return true;
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(conjunctive: bool) -> SynthSpec {
        SynthSpec {
            seed: 7,
            num_cases: 4,
            size: (32, 32),
            depth: 4,
            num_modalities: 2,
            conjunctive,
        }
    }

    /// Pooled DSC of thresholding `score ≥ t` against the masks.
    fn pooled_dsc(score: &[f32], mask: &[u8], t: f32) -> f64 {
        let mut inter = 0usize;
        let mut pred = 0usize;
        let mut refv = 0usize;
        for (s, m) in score.iter().zip(mask) {
            let p = *s >= t;
            pred += usize::from(p);
            refv += usize::from(*m == 1);
            inter += usize::from(p && *m == 1);
        }
        if pred + refv == 0 {
            return 1.0;
        }
        2.0 * inter as f64 / (pred + refv) as f64
    }

    fn dataset_voxels(cases: &[Case], modality: usize) -> (Vec<f32>, Vec<u8>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in cases {
            xs.extend_from_slice(c.volumes[modality].data());
            ys.extend_from_slice(c.mask.as_ref().unwrap());
        }
        (xs, ys)
    }

    fn sweep(lo: f32, hi: f32, steps: usize) -> Vec<f32> {
        (0..=steps)
            .map(|i| lo + (hi - lo) * i as f32 / steps as f32)
            .collect()
    }

    #[test]
    fn fixed_seed_reproduces_the_dataset_bitwise() {
        let a = synth_dataset(&spec(true)).unwrap();
        let b = synth_dataset(&spec(true)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.case_id, y.case_id);
            assert_eq!(x.mask, y.mask);
            for (vx, vy) in x.volumes.iter().zip(&y.volumes) {
                assert!(vx
                    .data()
                    .iter()
                    .zip(vy.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
    }

    #[test]
    fn lesion_fraction_stays_inside_the_documented_band() {
        let cases = synth_dataset(&SynthSpec {
            seed: 3,
            num_cases: 12,
            size: (32, 32),
            depth: 4,
            num_modalities: 3,
            conjunctive: true,
        })
        .unwrap();
        for c in &cases {
            let (d, h, w) = c.shape();
            let fg = c.mask.as_ref().unwrap().iter().filter(|v| **v == 1).count();
            let frac = fg as f64 / (d * h * w) as f64;
            assert!(
                frac > 0.001 && frac < 0.15,
                "{}: lesion fraction {frac}",
                c.case_id
            );
        }
    }

    #[test]
    fn cohort_lesion_sizes_span_an_order_of_magnitude_or_more() {
        let cases = synth_dataset(&SynthSpec {
            seed: 1,
            num_cases: 40,
            size: (48, 48),
            depth: 2,
            num_modalities: 1,
            conjunctive: false,
        })
        .unwrap();
        let per_slice: Vec<f64> = cases
            .iter()
            .map(|c| {
                let (d, _, _) = c.shape();
                c.mask.as_ref().unwrap().iter().filter(|v| **v == 1).count() as f64 / d as f64
            })
            .collect();
        let lo = per_slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per_slice.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi / lo >= 10.0, "sizes {lo}..{hi} too uniform");
    }

    #[test]
    fn thin_depths_appear_and_never_exceed_the_maximum() {
        let cases = synth_dataset(&SynthSpec {
            seed: 5,
            num_cases: 16,
            size: (16, 16),
            depth: 4,
            num_modalities: 2,
            conjunctive: true,
        })
        .unwrap();
        let depths: Vec<usize> = cases.iter().map(|c| c.shape().0).collect();
        assert!(depths.iter().all(|d| *d == 2 || *d == 4));
        assert!(depths.contains(&2) && depths.contains(&4));
    }

    #[test]
    fn conjunctive_lesions_are_invisible_to_single_modalities() {
        let cases = synth_dataset(&spec(true)).unwrap();
        let (x0, mask) = dataset_voxels(&cases, 0);
        let (x1, _) = dataset_voxels(&cases, 1);
        // best single-modality threshold cannot tell lesion from decoys
        for xs in [&x0, &x1] {
            let lo = xs.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let best = sweep(lo, hi, 48)
                .into_iter()
                .map(|t| pooled_dsc(xs, &mask, t))
                .fold(0.0f64, f64::max);
            assert!(best < 0.6, "single-modality oracle reached DSC {best}");
        }
        // the conjunction of the two signal modalities is near-perfect
        let lo = 0.4f32;
        let hi = 1.1f32;
        let mut best = 0.0f64;
        for t0 in sweep(lo, hi, 24) {
            // combined score: min of the two channels thresholded jointly
            let conj: Vec<f32> = x0
                .iter()
                .zip(&x1)
                .map(|(a, b)| a.min(*b))
                .collect();
            best = best.max(pooled_dsc(&conj, &mask, t0));
        }
        assert!(best > 0.95, "conjunction oracle only reached DSC {best}");
    }

    #[test]
    fn plain_mode_is_detectable_from_every_modality() {
        let cases = synth_dataset(&spec(false)).unwrap();
        for m in 0..2 {
            let (xs, mask) = dataset_voxels(&cases, m);
            let lo = xs.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let best = sweep(lo, hi, 48)
                .into_iter()
                .map(|t| pooled_dsc(&xs, &mask, t))
                .fold(0.0f64, f64::max);
            assert!(best > 0.95, "modality {m} oracle only reached {best}");
        }
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut s = spec(true);
        s.size = (30, 32);
        assert!(synth_dataset(&s).is_err());
        let mut s = spec(true);
        s.num_modalities = 1;
        assert!(synth_dataset(&s).is_err());
        let mut s = spec(false);
        s.depth = 0;
        assert!(synth_dataset(&s).is_err());
        let mut s = spec(false);
        s.num_cases = 0;
        assert!(synth_dataset(&s).is_err());
    }
}
