//! Per-volume Dice and average surface distance (ASD).
//!
//! A volume is an ordered stack of label slices. Surfaces use face adjacency
//! (6-connectivity); voxels on the volume border count as surface voxels.
//! Single-slice volumes are treated as 2D images: the two faces normal to the
//! slice axis are not boundaries there, so their surface is the in-plane
//! contour.
//!
//! Distances to a surface come from an exact separable Euclidean distance
//! transform with anisotropic spacing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::{Error, LabelMask, Result};

/// Names of the foreground structures, in label order starting at 1.
pub const CLASS_NAMES: [&str; 4] = ["AA", "LAC", "LVC", "MYO"];

pub fn class_name(class: usize) -> String {
    CLASS_NAMES
        .get(class.wrapping_sub(1))
        .map(|s| String::from(*s))
        .unwrap_or_else(|| format!("C{class}"))
}

/// Dense 3D label volume, indexed `[slice][row][col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(depth: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != depth * height * width {
            return Err(Error::invalid("volume payload does not match its dimensions"));
        }
        Ok(Self { depth, height, width, data })
    }

    pub fn from_slices(slices: &[LabelMask]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::invalid("volume has no slices"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            if s.height() != h || s.width() != w {
                return Err(Error::invalid("slices of one volume differ in shape"));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Self { depth: slices.len(), height: h, width: w, data })
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }
}

/// Voxels of `class` with at least one face neighbour outside the class.
///
/// With `slice_faces == false` the neighbours across the slice axis are
/// ignored, which is how single-slice volumes are handled.
pub fn surface_voxels_with(volume: &LabelVolume, class: u8, slice_faces: bool) -> Vec<[usize; 3]> {
    let (d, h, w) = (volume.depth, volume.height, volume.width);
    let is = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        volume.data[volume.index(z as usize, y as usize, x as usize)] == class
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if volume.data[volume.index(z, y, x)] != class {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let planar = !is(zi, yi - 1, xi) || !is(zi, yi + 1, xi) || !is(zi, yi, xi - 1) || !is(zi, yi, xi + 1);
                let axial = slice_faces && (!is(zi - 1, yi, xi) || !is(zi + 1, yi, xi));
                if planar || axial {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Surface voxels under the full 3D 6-connectivity definition.
pub fn surface_voxels(volume: &LabelVolume, class: u8) -> Vec<[usize; 3]> {
    surface_voxels_with(volume, class, true)
}

/// Prediction and reference stacks for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePrediction {
    pub prediction: Vec<LabelMask>,
    pub reference: Vec<LabelMask>,
    /// Voxel size along (slice, row, column).
    pub spacing: [f64; 3],
}

impl VolumePrediction {
    pub fn new(prediction: Vec<LabelMask>, reference: Vec<LabelMask>) -> Result<Self> {
        let vp = Self { prediction, reference, spacing: [1.0; 3] };
        vp.check()?;
        Ok(vp)
    }

    pub fn single_slice(prediction: LabelMask, reference: LabelMask) -> Result<Self> {
        Self::new(vec![prediction], vec![reference])
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        self.spacing = spacing;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.prediction.len() != self.reference.len() || self.prediction.is_empty() {
            return Err(Error::invalid(format!(
                "prediction has {} slices, reference {}",
                self.prediction.len(),
                self.reference.len()
            )));
        }
        for (p, r) in self.prediction.iter().zip(&self.reference) {
            if p.height() != r.height() || p.width() != r.width() {
                return Err(Error::invalid("prediction and reference slices differ in shape"));
            }
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("spacing must be positive and finite"));
        }
        Ok(())
    }

    fn volumes(&self) -> Result<(LabelVolume, LabelVolume)> {
        self.check()?;
        Ok((LabelVolume::from_slices(&self.prediction)?, LabelVolume::from_slices(&self.reference)?))
    }
}

/// Dice overlap in percent; 100 when both masks lack the class, 0 when only
/// one of them does.
pub fn dice_coefficient(vp: &VolumePrediction, class: u8) -> Result<f64> {
    vp.check()?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (ps, gs) in vp.prediction.iter().zip(&vp.reference) {
        for (&a, &b) in ps.data().iter().zip(gs.data()) {
            let (ia, ib) = (a == class, b == class);
            p += ia as usize;
            g += ib as usize;
            both += (ia && ib) as usize;
        }
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// Symmetric ASD: the mean of the two directed average nearest-surface
/// distances, scaled by the voxel spacing. `None` when either mask lacks the
/// class.
pub fn asd(vp: &VolumePrediction, class: u8) -> Result<Option<f64>> {
    let (pred, reference) = vp.volumes()?;
    let slice_faces = pred.depth > 1;
    let sp = surface_voxels_with(&pred, class, slice_faces);
    let sg = surface_voxels_with(&reference, class, slice_faces);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let dims = [pred.depth, pred.height, pred.width];
    let to_g = squared_distance_field(&sg, dims, vp.spacing);
    let to_p = squared_distance_field(&sp, dims, vp.spacing);
    let directed = |from: &[[usize; 3]], field: &[f64]| {
        from.iter().map(|v| libm::sqrt(field[(v[0] * dims[1] + v[1]) * dims[2] + v[2]])).sum::<f64>()
            / from.len() as f64
    };
    Ok(Some(0.5 * (directed(&sp, &to_g) + directed(&sg, &to_p))))
}

/// Squared Euclidean distance from every voxel to the nearest site.
pub fn squared_distance_field(sites: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut field = vec![f64::INFINITY; d * h * w];
    for s in sites {
        field[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let n = d.max(h).max(w);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut scratch = Envelope::with_capacity(n);
    // axis 2 (columns), then rows, then slices
    for axis in [2usize, 1, 0] {
        let (len, stride) = match axis {
            2 => (w, 1),
            1 => (h, w),
            _ => (d, h * w),
        };
        let starts: Vec<usize> = (0..d * h * w).filter(|&i| (i / stride) % len == 0).collect();
        for start in starts {
            for k in 0..len {
                line[k] = field[start + k * stride];
            }
            scratch.transform(&line[..len], spacing[axis], &mut out[..len]);
            for k in 0..len {
                field[start + k * stride] = out[k];
            }
        }
    }
    field
}

/// Lower envelope of parabolas for the 1D squared distance transform.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { sites: Vec::with_capacity(n), bounds: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], spacing: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        for q in 0..f.len() {
            if f[q].is_infinite() {
                continue;
            }
            let xq = q as f64 * spacing;
            loop {
                let Some(&p) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let xp = p as f64 * spacing;
                let cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                if cross <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(cross);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let xq = q as f64 * spacing;
            while k + 1 < self.sites.len() && self.bounds[k + 1] < xq {
                k += 1;
            }
            let dx = xq - self.sites[k] as f64 * spacing;
            *o = dx * dx + f[self.sites[k]];
        }
    }
}

/// Per-structure Dice and ASD averaged over volumes, plus the structure
/// average.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub classes: Vec<String>,
    pub dice: Vec<f64>,
    pub dice_average: f64,
    pub asd: Vec<Option<f64>>,
    /// `None` as soon as any structure's ASD is undefined.
    pub asd_average: Option<f64>,
}

/// Aggregates foreground classes `1..K` over all volumes.
///
/// A structure's ASD is undefined if it is undefined in any volume.
pub fn evaluate(preds: &[VolumePrediction]) -> Result<MetricReport> {
    let first = preds.first().ok_or_else(|| Error::invalid("nothing to evaluate"))?;
    let classes = first.reference[0].classes();
    if classes < 2 {
        return Err(Error::invalid("need at least one foreground class"));
    }
    let nvol = preds.len() as f64;
    let mut report = MetricReport {
        classes: (1..classes).map(class_name).collect(),
        dice: Vec::new(),
        dice_average: 0.0,
        asd: Vec::new(),
        asd_average: None,
    };
    for k in 1..classes {
        let mut dice_sum = 0.0;
        let mut asd_sum = Some(0.0);
        for vp in preds {
            dice_sum += dice_coefficient(vp, k as u8)?;
            let a = asd(vp, k as u8)?;
            asd_sum = asd_sum.zip(a).map(|(s, a)| s + a);
        }
        report.dice.push(dice_sum / nvol);
        report.asd.push(asd_sum.map(|s| s / nvol));
    }
    let nfg = (classes - 1) as f64;
    report.dice_average = report.dice.iter().sum::<f64>() / nfg;
    report.asd_average = report.asd.iter().try_fold(0.0, |acc, a| a.map(|v| acc + v)).map(|s| s / nfg);
    Ok(report)
}

fn fmt_asd(a: Option<f64>) -> String {
    a.map(|v| format!("{v:.1}")).unwrap_or_else(|| String::from("N/A"))
}

impl MetricReport {
    /// Fixed-width grid with one column per structure plus `Average`.
    pub fn to_grid(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<12}", "Metric");
        for name in &self.classes {
            let _ = write!(s, "{name:>9}");
        }
        let _ = writeln!(s, "{:>9}", "Average");
        let _ = write!(s, "{:<12}", "Dice [%]");
        for d in &self.dice {
            let _ = write!(s, "{d:>9.1}");
        }
        let _ = writeln!(s, "{:>9.1}", self.dice_average);
        let _ = write!(s, "{:<12}", "ASD [voxel]");
        for a in &self.asd {
            let _ = write!(s, "{:>9}", fmt_asd(*a));
        }
        let _ = writeln!(s, "{:>9}", fmt_asd(self.asd_average));
        s
    }

    /// Machine-readable `<class>,<dice>,<asd|NA>` lines, ending with `Average`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, name: &str, d: f64, a: Option<f64>| {
            let asd = a.map(|v| format!("{v}")).unwrap_or_else(|| String::from("NA"));
            let _ = writeln!(s, "{name},{d},{asd}");
        };
        for ((name, &d), &a) in self.classes.iter().zip(&self.dice).zip(&self.asd) {
            row(&mut s, name, d, a);
        }
        row(&mut s, "Average", self.dice_average, self.asd_average);
        s
    }
}
