//! Image-quality metrics and stack evaluation.
//!
//! SSIM, PSNR, CNR and SNR are measured on normalised `[0, 1]` intensities;
//! FWHM is measured on dB images. Standard deviations are population
//! deviations throughout. Degenerate ratios are reported as infinities rather
//! than errors.
//!
//! # ROI file
//!
//! One region per line, `#` starts a comment, pixel units:
//!
//! ```text
//! <name> rect <role> <row0> <col0> <rows> <cols>
//! <name> disk <role> <center_row> <center_col> <radius_px>
//! ```
//!
//! `role` is one of `target_in`, `background_out`, `snr_roi` or
//! `scatterer_point`. Each `target_in` region is compared against the union of
//! all `background_out` regions for CNR.

use std::fmt::Write as _;

use crate::data_io::{denormalize_db, PlaneWaveStack};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{DenseArray, Real};
use crate::objective::{ssim_map, LossConfig};
use crate::render::{render, PsfKernel};

/// Regions for the bundled phantom.
pub const DEFAULT_ROI_SPEC: &str = include_str!("../assets/default_roi.txt");

/// Scale note recorded alongside every report.
pub const METRIC_SCALE: &str = "ssim/psnr/cnr/snr on normalised [0,1] intensity; fwhm on dB";

fn check_shape(op: &'static str, a: &DenseArray<f64>, b: &DenseArray<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(range^2 / MSE)`; `+inf` when the images are identical.
pub fn psnr(pred: &DenseArray<f64>, gt: &DenseArray<f64>, data_range: f64) -> Result<f64> {
    check_shape("psnr", pred, gt)?;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean SSIM.
pub fn ssim_metric(pred: &DenseArray<f64>, gt: &DenseArray<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(ssim_map(pred, gt, cfg)?.mean())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `10 log10(|mu_in - mu_out|^2 / ((var_in + var_out) / 2))`.
pub fn cnr(inside: &[f64], outside: &[f64]) -> Result<f64> {
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::Measurement("CNR needs non-empty regions".into()));
    }
    let (mi, si) = mean_std(inside);
    let (mo, so) = mean_std(outside);
    let num = (mi - mo) * (mi - mo);
    if num == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let den = (si * si + so * so) / 2.0;
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (num / den).log10())
}

/// `mean / std`; `+inf` for a constant region.
pub fn snr(roi: &[f64]) -> Result<f64> {
    if roi.is_empty() {
        return Err(Error::Measurement("SNR needs a non-empty region".into()));
    }
    let (m, s) = mean_std(roi);
    if s == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(m / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Lateral,
}

/// Width in samples of the `peak - 6` dB lobe around `peak` in a dB profile,
/// with linear interpolation of both crossings.
pub fn fwhm_samples(profile: &[f64], peak: usize) -> Result<f64> {
    let top = *profile
        .get(peak)
        .ok_or_else(|| Error::Measurement("peak index outside profile".into()))?;
    let level = top - 6.0;
    let crossing = |step: isize| -> Result<f64> {
        let mut prev = peak as isize;
        loop {
            let next = prev + step;
            if next < 0 || next as usize >= profile.len() {
                return Err(Error::Measurement("no -6 dB crossing inside the image".into()));
            }
            let (a, b) = (profile[prev as usize], profile[next as usize]);
            if b <= level {
                let frac = if a == b { 1.0 } else { (a - level) / (a - b) };
                return Ok(prev as f64 + step as f64 * frac);
            }
            prev = next;
        }
    };
    Ok(crossing(1)? - crossing(-1)?)
}

/// -6 dB width in mm of the peak found inside `region`.
pub fn fwhm(image_db: &DenseArray<f64>, region: &Region, axis: Axis, pitch_mm: f64) -> Result<f64> {
    let (h, w) = image_db.dims2("fwhm")?;
    let pixels = region.pixels(h, w)?;
    let &(pr, pc) = pixels
        .iter()
        .max_by(|a, b| {
            image_db
                .get(a.0, a.1)
                .total_cmp(&image_db.get(b.0, b.1))
                .then(b.cmp(a))
        })
        .expect("region validated non-empty");
    let top = image_db.get(pr, pc);
    let neighbours = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    for (dr, dc) in neighbours {
        let (r, c) = (pr as isize + dr, pc as isize + dc);
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && image_db.get(r as usize, c as usize) > top {
            return Err(Error::Measurement(format!("region {} has no local maximum", region.name)));
        }
    }
    let (profile, peak): (Vec<f64>, usize) = match axis {
        Axis::Axial => ((0..h).map(|r| image_db.get(r, pc)).collect(), pr),
        Axis::Lateral => ((0..w).map(|c| image_db.get(pr, c)).collect(), pc),
    };
    fwhm_samples(&profile, peak)
        .map(|s| s * pitch_mm)
        .map_err(|e| Error::Measurement(format!("region {}: {e}", region.name)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { row0: usize, col0: usize, rows: usize, cols: usize },
    Disk { center_row: f64, center_col: f64, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    TargetIn,
    BackgroundOut,
    SnrRoi,
    ScattererPoint,
}

impl Role {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "target_in" => Role::TargetIn,
            "background_out" => Role::BackgroundOut,
            "snr_roi" => Role::SnrRoi,
            "scatterer_point" => Role::ScattererPoint,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub shape: Shape,
    pub role: Role,
}

impl Region {
    /// Row-major pixel coordinates, after checking the region fits the image.
    pub fn pixels(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let outside = || Error::Contract(format!("region {} lies outside the {height}x{width} image", self.name));
        let px = match self.shape {
            Shape::Rect { row0, col0, rows, cols } => {
                if rows == 0 || cols == 0 || row0 + rows > height || col0 + cols > width {
                    return Err(outside());
                }
                (row0..row0 + rows)
                    .flat_map(|r| (col0..col0 + cols).map(move |c| (r, c)))
                    .collect()
            }
            Shape::Disk { center_row, center_col, radius } => {
                if !(radius >= 0.0)
                    || center_row - radius < 0.0
                    || center_col - radius < 0.0
                    || center_row + radius > (height - 1) as f64
                    || center_col + radius > (width - 1) as f64
                {
                    return Err(outside());
                }
                let mut v = Vec::new();
                for r in 0..height {
                    for c in 0..width {
                        let (dr, dc) = (r as f64 - center_row, c as f64 - center_col);
                        if dr * dr + dc * dc <= radius * radius {
                            v.push((r, c));
                        }
                    }
                }
                v
            }
        };
        if px.is_empty() {
            return Err(Error::Contract(format!("region {} covers no pixels", self.name)));
        }
        Ok(px)
    }

    pub fn values(&self, image: &DenseArray<f64>) -> Result<Vec<f64>> {
        let (h, w) = image.dims2("Region::values")?;
        Ok(self.pixels(h, w)?.into_iter().map(|(r, c)| image.get(r, c)).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiSpec {
    pub regions: Vec<Region>,
}

impl RoiSpec {
    /// Parses the line format in the module docs; errors carry the line number
    /// as offset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut regions = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |why: &str| Error::format(line_no, format!("{why}: `{line}`"));
            if fields.len() < 3 {
                return Err(bad("expected `name kind role params...`"));
            }
            let role = Role::parse(fields[2]).ok_or_else(|| bad("unknown role"))?;
            let shape = match fields[1] {
                "rect" => {
                    let v: Vec<usize> = fields[3..]
                        .iter()
                        .map(|f| f.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("rect expects integers"))?;
                    let [row0, col0, rows, cols] = v[..] else {
                        return Err(bad("rect expects row0 col0 rows cols"));
                    };
                    Shape::Rect { row0, col0, rows, cols }
                }
                "disk" => {
                    let v: Vec<f64> = fields[3..]
                        .iter()
                        .map(|f| f.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("disk expects numbers"))?;
                    let [center_row, center_col, radius] = v[..] else {
                        return Err(bad("disk expects center_row center_col radius"));
                    };
                    Shape::Disk { center_row, center_col, radius }
                }
                _ => return Err(bad("unknown region kind")),
            };
            if regions.iter().any(|r: &Region| r.name == fields[0]) {
                return Err(bad("duplicate region name"));
            }
            regions.push(Region {
                name: fields[0].to_string(),
                shape,
                role,
            });
        }
        Ok(Self { regions })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_ROI_SPEC).expect("bundled ROI spec parses")
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for r in &self.regions {
            r.pixels(height, width)?;
        }
        Ok(())
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(move |r| r.role == role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Section {
    Train,
    Holdout,
}

impl Section {
    pub fn as_str(self) -> &'static str {
        match self {
            Section::Train => "train",
            Section::Holdout => "holdout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    GroundTruth,
    Intermediate,
    Rendered,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::GroundTruth => "gt",
            Source::Intermediate => "o",
            Source::Rendered => "o_prime",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub section: Section,
    pub angle_index: usize,
    pub angle_deg: f64,
    pub source: Source,
    pub metric: &'static str,
    /// Region name, empty for whole-image metrics.
    pub region: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub section: Section,
    pub source: Source,
    pub metric: &'static str,
    pub region: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population std; identical values (infinities included) give
/// that value with zero spread.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    mean_std(values)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    /// Measurements that could not be taken, e.g. a FWHM without a crossing.
    pub failures: Vec<String>,
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        format!("\"{}\"", fmt_value(v))
    }
}

impl MetricsReport {
    /// Groups rows by `(section, source, metric, region)` in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(Section, Source, &'static str, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.section, r.source, r.metric, r.region.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(section, source, metric, region)| {
                let values: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.section == section && r.source == source && r.metric == metric && r.region == region)
                    .map(|r| r.value)
                    .collect();
                let (mean, std) = aggregate(&values);
                Aggregate {
                    section,
                    source,
                    metric,
                    region: region.to_string(),
                    mean,
                    std,
                    count: values.len(),
                }
            })
            .collect()
    }

    /// Mean of one metric over a section, if any rows match.
    pub fn mean_of(&self, section: Section, source: Source, metric: &str) -> Option<f64> {
        self.aggregates()
            .into_iter()
            .find(|a| a.section == section && a.source == source && a.metric == metric && a.region.is_empty())
            .map(|a| a.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,angle_index,angle_deg,source,metric,region,value\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.section.as_str(),
                r.angle_index,
                r.angle_deg,
                r.source.as_str(),
                r.metric,
                r.region,
                fmt_value(r.value)
            );
        }
        out
    }

    /// Aggregates as JSON; non-finite numbers are written as strings.
    pub fn aggregate_json(&self) -> String {
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"scale\": \"{METRIC_SCALE}\",");
        let aggs = self.aggregates();
        for section in [Section::Train, Section::Holdout] {
            let items: Vec<&Aggregate> = aggs.iter().filter(|a| a.section == section).collect();
            let _ = writeln!(out, "  \"{}\": [", section.as_str());
            for (i, a) in items.iter().enumerate() {
                let _ = write!(
                    out,
                    "    {{\"source\": \"{}\", \"metric\": \"{}\", \"region\": \"{}\", \"mean\": {}, \"std\": {}, \"count\": {}}}",
                    a.source.as_str(),
                    a.metric,
                    a.region,
                    json_number(a.mean),
                    json_number(a.std),
                    a.count
                );
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str("  ],\n");
        }
        let _ = writeln!(out, "  \"failures\": [");
        for (i, f) in self.failures.iter().enumerate() {
            let escaped = f.replace('\\', "\\\\").replace('"', "\\\"");
            let _ = write!(out, "    \"{escaped}\"");
            out.push_str(if i + 1 < self.failures.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ]\n}\n");
        out
    }
}

/// Metrics for one image of one source, appended to `report`.
fn measure_image(
    report: &mut MetricsReport,
    key: (Section, usize, f64, Source),
    img: &DenseArray<f64>,
    gt: &DenseArray<f64>,
    stack: &PlaneWaveStack,
    roi: &RoiSpec,
    ssim_cfg: &LossConfig,
) -> Result<()> {
    let (section, angle_index, angle_deg, source) = key;
    let mut push = |metric: &'static str, region: &str, value: f64| {
        report.rows.push(MetricRow {
            section,
            angle_index,
            angle_deg,
            source,
            metric,
            region: region.to_string(),
            value,
        })
    };
    push("ssim", "", ssim_metric(img, gt, ssim_cfg)?);
    push("psnr", "", psnr(img, gt, 1.0)?);

    let outside: Vec<f64> = roi
        .with_role(Role::BackgroundOut)
        .map(|r| r.values(img))
        .collect::<Result<Vec<_>>>()?
        .concat();
    for r in roi.with_role(Role::TargetIn) {
        if !outside.is_empty() {
            push("cnr_db", &r.name, cnr(&r.values(img)?, &outside)?);
        }
    }
    for r in roi.with_role(Role::SnrRoi) {
        push("snr", &r.name, snr(&r.values(img)?)?);
    }

    let (lo, hi) = stack.dyn_range_db();
    let db = img.map(|u| denormalize_db(u, lo as f64, hi as f64));
    let mut failures = Vec::new();
    for r in roi.with_role(Role::ScattererPoint) {
        for (axis, metric, pitch) in [
            (Axis::Axial, "fwhm_axial_mm", stack.pitch_axial_mm() as f64),
            (Axis::Lateral, "fwhm_lateral_mm", stack.pitch_lateral_mm() as f64),
        ] {
            match fwhm(&db, r, axis, pitch) {
                Ok(v) => push(metric, &r.name, v),
                Err(Error::Measurement(why)) => failures.push(format!(
                    "{} angle {angle_index} {} {metric}: {why}",
                    section.as_str(),
                    source.as_str()
                )),
                Err(e) => return Err(e),
            }
        }
    }
    report.failures.extend(failures);
    Ok(())
}

/// Renders `o` and `o'` for every angle of `stack` and measures them together
/// with the ground truth. Angles listed in `training` form the train section,
/// the rest the holdout section.
pub fn evaluate_stack<T: Real>(
    params: &ModelParams<T>,
    stack: &PlaneWaveStack,
    roi: &RoiSpec,
    kernel: &PsfKernel,
    training: &[usize],
) -> Result<MetricsReport> {
    roi.validate(stack.height(), stack.width())?;
    let ssim_cfg = LossConfig::default();
    let mut report = MetricsReport::default();
    for a in 0..stack.angle_count() {
        let section = if training.contains(&a) { Section::Train } else { Section::Holdout };
        let angle = stack.angles_deg()[a] as f64;
        let gt = stack.image_normalized::<f64>(a);
        let o = params.predict_image(stack.height(), stack.width(), angle)?;
        let o_prime = render(&o, kernel)?.cast::<f64>();
        let o = o.cast::<f64>();
        for (source, img) in [
            (Source::GroundTruth, &gt),
            (Source::Intermediate, &o),
            (Source::Rendered, &o_prime),
        ] {
            measure_image(&mut report, (section, a, angle, source), img, &gt, stack, roi, &ssim_cfg)?;
        }
    }
    Ok(report)
}

/// Mean SSIM(o', GT) over the given angle indices.
pub fn mean_rendered_ssim<T: Real>(
    params: &ModelParams<T>,
    stack: &PlaneWaveStack,
    kernel: &PsfKernel,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::contract("no angles to evaluate"));
    }
    let cfg = LossConfig::default();
    let mut total = 0.0;
    for &a in indices {
        let o = params.predict_image(stack.height(), stack.width(), stack.angles_deg()[a] as f64)?;
        let o_prime = render(&o, kernel)?.cast::<f64>();
        total += ssim_metric(&o_prime, &stack.image_normalized::<f64>(a), &cfg)?;
    }
    Ok(total / indices.len() as f64)
}
