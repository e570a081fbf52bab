//! Multi-modal case handling: volumes as stacks of 2-D slices, intensity
//! normalization to [0, 1], the MDT container format, and a synthetic
//! dataset generator for end-to-end verification.

pub mod mdt;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One subject: a volume per modality, an optional ground-truth mask, and
/// voxel spacing in millimetres. All volumes are `[D, H, W]` and share their
/// shape with the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub modality_names: Vec<String>,
    pub volumes: Vec<Tensor<f32>>,
    /// Binary voxels, length `D·H·W`, slice-major like the volumes.
    pub mask: Option<Vec<u8>>,
    pub spacing: [f64; 3],
}

impl Case {
    pub fn new(
        case_id: String,
        modality_names: Vec<String>,
        volumes: Vec<Tensor<f32>>,
        mask: Option<Vec<u8>>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        if modality_names.is_empty() {
            return Err(Error::Data(format!("case {case_id} has no modalities")));
        }
        if modality_names.len() != volumes.len() {
            return Err(Error::Data(format!(
                "case {case_id}: {} modality names but {} volumes",
                modality_names.len(),
                volumes.len()
            )));
        }
        for (i, n) in modality_names.iter().enumerate() {
            if modality_names[..i].contains(n) {
                return Err(Error::Data(format!(
                    "case {case_id}: duplicate modality `{n}`"
                )));
            }
        }
        let shape = volumes[0].shape().to_vec();
        if shape.len() != 3 || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "case {case_id}: volumes must be [D, H, W], got {shape:?}"
            )));
        }
        for (n, v) in modality_names.iter().zip(&volumes) {
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "case {case_id}: modality `{n}` shape {:?} differs from {shape:?}",
                    v.shape()
                )));
            }
        }
        if let Some(m) = &mask {
            if m.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "case {case_id}: mask has {} voxels, volumes have {}",
                    m.len(),
                    shape.iter().product::<usize>()
                )));
            }
            if m.iter().any(|v| *v > 1) {
                return Err(Error::Data(format!(
                    "case {case_id}: mask voxels must be 0 or 1"
                )));
            }
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!(
                "case {case_id}: spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Case {
            case_id,
            modality_names,
            volumes,
            mask,
            spacing,
        })
    }

    /// `(D, H, W)` of every volume in this case.
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.volumes[0].shape();
        (s[0], s[1], s[2])
    }

    /// Splits the case into per-slice samples along the depth axis.
    pub fn slices(&self) -> Vec<SliceSample> {
        let (d, h, w) = self.shape();
        (0..d)
            .map(|si| SliceSample {
                case_id: self.case_id.clone(),
                slice_index: si,
                inputs: self
                    .volumes
                    .iter()
                    .map(|v| {
                        Tensor::new(vec![1, 1, h, w], v.data()[si * h * w..(si + 1) * h * w].to_vec())
                            .expect("slice extent matches volume row")
                    })
                    .collect(),
                label: self
                    .mask
                    .as_ref()
                    .map(|m| m[si * h * w..(si + 1) * h * w].to_vec()),
            })
            .collect()
    }

    /// Reassembles slices (in order) into a case; inverse of [`Case::slices`].
    pub fn from_slices(
        case_id: String,
        modality_names: Vec<String>,
        spacing: [f64; 3],
        slices: &[SliceSample],
    ) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Data(format!("case {case_id}: no slices to stack")))?;
        let (_, _, h, w) = first.inputs[0].dims4()?;
        let d = slices.len();
        let n = first.inputs.len();
        if n != modality_names.len() {
            return Err(Error::Data(format!(
                "case {case_id}: {n} slice inputs but {} modality names",
                modality_names.len()
            )));
        }
        let mut volumes: Vec<Vec<f32>> = vec![Vec::with_capacity(d * h * w); n];
        let has_label = first.label.is_some();
        let mut mask: Vec<u8> = Vec::with_capacity(if has_label { d * h * w } else { 0 });
        for (si, s) in slices.iter().enumerate() {
            if s.slice_index != si {
                return Err(Error::Data(format!(
                    "case {case_id}: slice {si} carries index {}",
                    s.slice_index
                )));
            }
            if s.inputs.len() != n || s.label.is_some() != has_label {
                return Err(Error::Data(format!(
                    "case {case_id}: slice {si} is inconsistent with slice 0"
                )));
            }
            for (vol, t) in volumes.iter_mut().zip(&s.inputs) {
                if t.shape() != [1, 1, h, w] {
                    return Err(Error::Shape(format!(
                        "case {case_id}: slice {si} has shape {:?}",
                        t.shape()
                    )));
                }
                vol.extend_from_slice(t.data());
            }
            if let Some(l) = &s.label {
                mask.extend_from_slice(l);
            }
        }
        Case::new(
            case_id,
            modality_names,
            volumes
                .into_iter()
                .map(|v| Tensor::new(vec![d, h, w], v).expect("accumulated extent matches"))
                .collect(),
            has_label.then_some(mask),
            spacing,
        )
    }

    /// Min–max normalizes every modality volume in place (per modality, per
    /// case).
    pub fn normalize(&mut self) {
        for v in &mut self.volumes {
            *v = normalize(v);
        }
    }
}

/// One 2-D training/inference sample cut from a case.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub slice_index: usize,
    /// One `[1, 1, H, W]` tensor per modality, in case order.
    pub inputs: Vec<Tensor<f32>>,
    /// Binary labels, length `H·W`; absent for unlabeled cases.
    pub label: Option<Vec<u8>>,
}

/// `(x − min) / (max − min)`; a constant volume maps to all zeros.
pub fn normalize(volume: &Tensor<f32>) -> Tensor<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in volume.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Tensor::zeros(volume.shape().to_vec());
    }
    // true division (not reciprocal multiply): the maximum maps to exactly
    // 1.0, which in turn makes normalization bitwise idempotent
    let range = hi - lo;
    Tensor::new(
        volume.shape().to_vec(),
        volume.data().iter().map(|v| (v - lo) / range).collect(),
    )
    .expect("shape unchanged")
}

/// The four default pseudo-modality labels; extended with generic names when
/// more streams are requested.
pub fn default_modality_names(n: usize) -> Vec<String> {
    const NAMED: [&str; 4] = ["CBV", "CTP", "DWI", "MTT"];
    (0..n)
        .map(|i| {
            NAMED
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("M{}", i + 1))
        })
        .collect()
}
