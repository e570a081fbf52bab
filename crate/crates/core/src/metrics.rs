//! Segmentation evaluation: Dice similarity coefficient, modified (95th
//! percentile) Hausdorff distance in millimetres, and volumetric similarity,
//! plus per-cohort aggregation with mean ± population standard deviation.
//!
//! All three metrics are pure functions of binary masks. Distances honour
//! per-axis physical voxel spacing; boundaries use face connectivity
//! (4-neighbour in 2D, 6-neighbour in 3D), and a foreground voxel on the
//! image border always counts as boundary. Empty masks make the distance and
//! volume ratios undefined; those cases are reported as flags, never panics,
//! because an empty prediction is a legitimate failure mode of a model.

use crate::error::{Error, Result};

/// Default percentile of the directed distance distribution.
pub const MHD_PERCENTILE: f64 = 95.0;

/// A binary mask over a 2-D `(H, W)` or 3-D `(D, H, W)` voxel grid with
/// per-axis spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    shape: Vec<usize>,
    data: Vec<u8>,
    spacing: Vec<f64>,
}

impl SegmentationMask {
    /// Unit 1 mm spacing on every axis.
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let spacing = vec![1.0; shape.len()];
        Self::with_spacing(shape, data, spacing)
    }

    pub fn with_spacing(shape: Vec<usize>, data: Vec<u8>, spacing: Vec<f64>) -> Result<Self> {
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::Shape(format!(
                "mask must be 2-D or 3-D, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Shape(format!("mask has a zero extent: {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "mask data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::Data(format!(
                "mask voxels must be 0 or 1, found {v}"
            )));
        }
        if spacing.len() != shape.len() {
            return Err(Error::Shape(format!(
                "spacing has {} axes for a {}-D mask",
                spacing.len(),
                shape.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!(
                "spacing must be strictly positive and finite, got {spacing:?}"
            )));
        }
        Ok(SegmentationMask {
            shape,
            data,
            spacing,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Foreground voxel count.
    pub fn volume(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    fn check_comparable(&self, other: &SegmentationMask) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        if self.spacing != other.spacing {
            return Err(Error::Data(format!(
                "mask spacings differ: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    /// Linear indices of boundary voxels: foreground with a background face
    /// neighbour, or foreground on the image border.
    pub fn boundary(&self) -> Vec<usize> {
        let dims = self.shape.len();
        let mut strides = vec![1usize; dims];
        for a in (0..dims - 1).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        let mut out = Vec::new();
        let mut coord = vec![0usize; dims];
        for (idx, &v) in self.data.iter().enumerate() {
            if v == 1 {
                let mut rem = idx;
                for a in 0..dims {
                    coord[a] = rem / strides[a];
                    rem %= strides[a];
                }
                let mut is_boundary = false;
                'axes: for a in 0..dims {
                    if coord[a] == 0 || coord[a] + 1 == self.shape[a] {
                        is_boundary = true;
                        break 'axes;
                    }
                    if self.data[idx - strides[a]] == 0 || self.data[idx + strides[a]] == 0 {
                        is_boundary = true;
                        break 'axes;
                    }
                }
                if is_boundary {
                    out.push(idx);
                }
            }
        }
        out
    }
}

/// Dice similarity coefficient `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dsc(a: &SegmentationMask, b: &SegmentationMask) -> Result<f64> {
    a.check_comparable(b)?;
    let inter = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(x, y)| **x == 1 && **y == 1)
        .count();
    let total = a.volume() + b.volume();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Volumetric similarity `1 − ||A|−|B|| / (|A|+|B|)`; undefined (None) when
/// both masks are empty.
pub fn vs(a: &SegmentationMask, b: &SegmentationMask) -> Result<Option<f64>> {
    a.check_comparable(b)?;
    let (va, vb) = (a.volume() as f64, b.volume() as f64);
    if va + vb == 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - (va - vb).abs() / (va + vb)))
}

/// Modified Hausdorff distance at the default 95th percentile, one percentile
/// per directed distance multiset, maximum of the two directions. Undefined
/// (None) when either mask is empty.
pub fn mhd(a: &SegmentationMask, b: &SegmentationMask) -> Result<Option<f64>> {
    mhd_with(a, b, MHD_PERCENTILE, false)
}

/// MHD with an explicit percentile; `pooled` merges both directed multisets
/// before taking the single percentile instead of maxing two directional
/// percentiles.
pub fn mhd_with(
    a: &SegmentationMask,
    b: &SegmentationMask,
    percentile: f64,
    pooled: bool,
) -> Result<Option<f64>> {
    a.check_comparable(b)?;
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Config(format!(
            "percentile must lie in [0, 100], got {percentile}"
        )));
    }
    if a.volume() == 0 || b.volume() == 0 {
        return Ok(None);
    }
    let ba = a.boundary();
    let bb = b.boundary();
    let d_ab = directed_distances(a, &ba, &bb);
    let d_ba = directed_distances(b, &bb, &ba);
    let value = if pooled {
        let mut all = d_ab;
        all.extend(d_ba);
        percentile_linear(&mut all, percentile)
    } else {
        let (mut d_ab, mut d_ba) = (d_ab, d_ba);
        percentile_linear(&mut d_ab, percentile).max(percentile_linear(&mut d_ba, percentile))
    };
    Ok(Some(value))
}

/// Distances (mm) from each voxel of `from_boundary` to the nearest voxel of
/// `to_boundary`, via an exact separable Euclidean distance transform seeded
/// on the target set. The grid geometry (shape, spacing) is shared, so `grid`
/// may be either mask.
fn directed_distances(
    grid: &SegmentationMask,
    from_boundary: &[usize],
    to_boundary: &[usize],
) -> Vec<f64> {
    let sq = edt_squared(&grid.shape, &grid.spacing, to_boundary);
    from_boundary.iter().map(|&i| sq[i].sqrt()).collect()
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed, by per-axis lower-envelope sweeps.
fn edt_squared(shape: &[usize], spacing: &[f64], seeds: &[usize]) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let mut dist = vec![f64::INFINITY; numel];
    for &s in seeds {
        dist[s] = 0.0;
    }
    let dims = shape.len();
    let mut strides = vec![1usize; dims];
    for a in (0..dims - 1).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let mut line = Vec::new();
    for axis in 0..dims {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        let lines = numel / n;
        line.resize(n, 0.0);
        for li in 0..lines {
            // decompose the line index into the coordinates of the fixed axes
            let mut base = 0usize;
            let mut rem = li;
            for a in (0..dims).rev() {
                if a == axis {
                    continue;
                }
                base += (rem % shape[a]) * strides[a];
                rem /= shape[a];
            }
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = dist[base + i * stride];
            }
            dt_line(&mut line, spacing[axis]);
            for (i, slot) in line.iter().enumerate() {
                dist[base + i * stride] = *slot;
            }
        }
    }
    dist
}

/// One-dimensional squared-distance transform of sampled costs `f` at
/// coordinates `i·step`, in place. Standard lower envelope of parabolas;
/// infinite entries are skipped as sites.
fn dt_line(f: &mut [f64], step: f64) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n); // parabola sites
    let mut z: Vec<f64> = Vec::with_capacity(n + 1); // envelope breakpoints
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * step;
        loop {
            match v.last() {
                None => break,
                Some(&p) => {
                    let xp = p as f64 * step;
                    let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        z.push(s);
                        break;
                    }
                }
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        return; // no finite site anywhere on the line
    }
    z.push(f64::INFINITY);
    let mut k = 0usize;
    let mut out = vec![0.0f64; n];
    for (q, slot) in out.iter_mut().enumerate() {
        let xq = q as f64 * step;
        while z[k + 1] < xq {
            k += 1;
        }
        let xp = v[k] as f64 * step;
        *slot = (xq - xp) * (xq - xp) + f[v[k]];
    }
    f.copy_from_slice(&out);
}

/// Percentile with linear interpolation between order statistics; sorts the
/// slice in place. Caller guarantees the slice is non-empty.
fn percentile_linear(values: &mut [f64], percentile: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = percentile / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// One evaluated case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub dsc: f64,
    /// None when either mask was empty (distance undefined).
    pub mhd_mm: Option<f64>,
    /// None when both masks were empty (size ratio undefined).
    pub vs: Option<f64>,
}

/// Mean and population standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Summary {
        mean,
        std: var.sqrt(),
        count: values.len(),
    })
}

/// Cohort-level report: per-case records plus per-metric aggregates. Cases
/// whose MHD or VS is undefined are excluded from that metric's aggregate and
/// counted separately.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub records: Vec<CaseRecord>,
    pub dsc: Summary,
    pub mhd_mm: Option<Summary>,
    pub mhd_undefined: usize,
    pub vs: Option<Summary>,
    pub vs_undefined: usize,
}

/// Aggregates per-case records; at least one record is required.
pub fn aggregate(records: Vec<CaseRecord>) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("cannot aggregate zero metric records".into()));
    }
    let dscs: Vec<f64> = records.iter().map(|r| r.dsc).collect();
    let mhds: Vec<f64> = records.iter().filter_map(|r| r.mhd_mm).collect();
    let vss: Vec<f64> = records.iter().filter_map(|r| r.vs).collect();
    Ok(MetricsReport {
        dsc: summarize(&dscs).expect("records is non-empty"),
        mhd_mm: summarize(&mhds),
        mhd_undefined: records.len() - mhds.len(),
        vs: summarize(&vss),
        vs_undefined: records.len() - vss.len(),
        records,
    })
}

impl MetricsReport {
    /// `case,dsc,mhd_mm,vs` rows; undefined values are left empty.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("case,dsc,mhd_mm,vs\n");
        for r in &self.records {
            let mhd = r.mhd_mm.map(|v| v.to_string()).unwrap_or_default();
            let vs = r.vs.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.case_id, r.dsc, mhd, vs));
        }
        out
    }

    /// Human-readable block: `metric  mean ± std  (n, undefined)` per line.
    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let line = |name: &str, s: Option<Summary>, undefined: usize| -> String {
            match s {
                Some(s) => {
                    let note = if undefined > 0 {
                        format!("  ({undefined} undefined)")
                    } else {
                        String::new()
                    };
                    format!(
                        "{name:<9} {:.4} \u{00b1} {:.4}  n={}{note}\n",
                        s.mean, s.std, s.count
                    )
                }
                None => format!("{name:<9} undefined on all {undefined} cases\n"),
            }
        };
        out.push_str(&format!("cases     {}\n", self.records.len()));
        out.push_str(&line("DSC", Some(self.dsc), 0));
        out.push_str(&line("MHD (mm)", self.mhd_mm, self.mhd_undefined));
        out.push_str(&line("VS", self.vs, self.vs_undefined));
        out
    }
}

/// Convenience: evaluate all three metrics for one case.
pub fn evaluate_case(
    case_id: &str,
    reference: &SegmentationMask,
    predicted: &SegmentationMask,
) -> Result<CaseRecord> {
    Ok(CaseRecord {
        case_id: case_id.to_string(),
        dsc: dsc(reference, predicted)?,
        mhd_mm: mhd(reference, predicted)?,
        vs: vs(reference, predicted)?,
    })
}
