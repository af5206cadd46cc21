//! Ground-truth density maps from dot annotations, counting, and ROI masks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel truncation radius in units of sigma.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

/// Head positions in pixel coordinates; pixel `(row, col)` covers
/// `[col, col + 1) x [row, row + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotAnnotation {
    pub height: usize,
    pub width: usize,
    /// `(x, y)` pairs.
    pub points: Vec<(f64, f64)>,
}

impl DotAnnotation {
    pub fn new(height: usize, width: usize, points: Vec<(f64, f64)>) -> Result<Self> {
        let ann = DotAnnotation {
            height,
            width,
            points,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidInput("annotation extent must be positive".into()));
        }
        for &(x, y) in &self.points {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..self.width as f64).contains(&x)
                && (0.0..self.height as f64).contains(&y);
            if !inside {
                return Err(Error::InvalidInput(format!(
                    "point ({x}, {y}) outside [0,{})x[0,{})",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Nonnegative H x W grid whose sum is a count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(
                "density_map",
                format!("{height}x{width} grid with {} values", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("density entry {v} is not a finite nonnegative value")));
        }
        Ok(DensityMap {
            height,
            width,
            data,
        })
    }

    /// Wraps network output; negative entries are clamped to zero.
    pub fn from_prediction(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(height, width, data.iter().map(|v| v.max(0.0)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn scaled(&self, c: f64) -> DensityMap {
        assert!(c >= 0.0);
        DensityMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// Binary region-of-interest mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("roi", format!("{height}x{width} mask with {} values", data.len())));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::InvalidInput("roi mask selects no pixels".into()));
        }
        Ok(RoiMask {
            height,
            width,
            data,
        })
    }

    pub fn all(height: usize, width: usize) -> Self {
        RoiMask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    /// Thresholds a grayscale grid in `[0, 1]` at 0.5.
    pub fn from_gray(height: usize, width: usize, gray: &[f64]) -> Result<Self> {
        Self::new(height, width, gray.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// A block is inside the reduced mask when at least half of its pixels are.
    pub fn downsample(&self, factor: usize) -> Result<RoiMask> {
        check_divisible("downsample_roi", self.height, self.width, factor)?;
        let (h, w) = (self.height / factor, self.width / factor);
        let mut data = vec![false; h * w];
        for (i, cell) in data.iter_mut().enumerate() {
            let (r, c) = (i / w, i % w);
            let mut inside = 0;
            for y in r * factor..(r + 1) * factor {
                for x in c * factor..(c + 1) * factor {
                    inside += usize::from(self.contains(y, x));
                }
            }
            *cell = 2 * inside >= factor * factor;
        }
        RoiMask::new(h, w, data)
    }
}

/// Renders each point as a Gaussian truncated at `3 sigma` and renormalized
/// so that its in-image mass is exactly one.
pub fn make_density_map(ann: &DotAnnotation, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    ann.validate()?;
    let (h, w) = (ann.height, ann.width);
    let mut out = vec![0.0; h * w];
    let mut points = ann.points.clone();
    points.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));

    let radius = TRUNCATION_SIGMAS * sigma;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::new();
    for &(x, y) in &points {
        let (px, py) = (x.floor() as usize, y.floor() as usize);
        let r0 = ((y - radius - 0.5).ceil().max(0.0) as usize).min(py);
        let r1 = ((y + radius - 0.5).floor().min(h as f64 - 1.0) as usize).max(py);
        let c0 = ((x - radius - 0.5).ceil().max(0.0) as usize).min(px);
        let c1 = ((x + radius - 0.5).floor().min(w as f64 - 1.0) as usize).max(px);

        weights.clear();
        let mut mass = 0.0;
        for r in r0..=r1 {
            let dy = r as f64 + 0.5 - y;
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - x;
                let d2 = dx * dx + dy * dy;
                let inside = d2 <= radius * radius || (r == py && c == px);
                let v = if inside { (-d2 * inv_two_var).exp() } else { 0.0 };
                weights.push(v);
                mass += v;
            }
        }
        if mass <= 0.0 {
            // sigma tiny relative to the pixel: all mass on the containing pixel
            out[py * w + px] += 1.0;
            continue;
        }
        let mut k = 0;
        for r in r0..=r1 {
            for c in c0..=c1 {
                out[r * w + c] += weights[k] / mass;
                k += 1;
            }
        }
    }
    Ok(DensityMap {
        height: h,
        width: w,
        data: out,
    })
}

/// Compensated sum of `values`, optionally weighted by a 0/1 mask.
fn masked_sum(values: &[f64], mask: Option<&[bool]>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sum of the map over the ROI (or everywhere).
pub fn count(map: &DensityMap, roi: Option<&RoiMask>) -> Result<f64> {
    match roi {
        None => Ok(masked_sum(&map.data, None)),
        Some(r) => {
            if (r.height, r.width) != (map.height, map.width) {
                return Err(Error::shape(
                    "count",
                    format!(
                        "roi {}x{} vs map {}x{}",
                        r.height, r.width, map.height, map.width
                    ),
                ));
            }
            Ok(masked_sum(&map.data, Some(&r.data)))
        }
    }
}

/// Sum-pools `factor x factor` blocks.
pub fn downsample_density(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    check_divisible("downsample_density", map.height, map.width, factor)?;
    let (h, w) = (map.height / factor, map.width / factor);
    let mut data = vec![0.0; h * w];
    let mut block = Vec::with_capacity(factor * factor);
    for (i, cell) in data.iter_mut().enumerate() {
        let (r, c) = (i / w, i % w);
        block.clear();
        for y in r * factor..(r + 1) * factor {
            block.extend_from_slice(&map.data[y * map.width + c * factor..y * map.width + (c + 1) * factor]);
        }
        *cell = masked_sum(&block, None);
    }
    Ok(DensityMap {
        height: h,
        width: w,
        data,
    })
}

fn check_divisible(op: &'static str, h: usize, w: usize, factor: usize) -> Result<()> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(op, format!("{h}x{w} is not divisible by {factor}")));
    }
    Ok(())
}

/// One line of an annotation file: `<image path> <H> <W> x1 y1 x2 y2 ...`
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image: String,
    pub annotation: DotAnnotation,
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let a = &rec.annotation;
        write!(out, "{} {} {}", rec.image, a.height, a.width).unwrap();
        for (x, y) in &a.points {
            write!(out, " {x} {y}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses annotation records; blank lines and `#` comments are skipped.
/// `path` is only used in error messages.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    Ok(parse_annotation_lines(text, path)?.into_iter().map(|(_, r)| r).collect())
}

/// Like [`parse_annotations`], keeping each record's 1-based line number.
pub fn parse_annotation_lines(text: &str, path: &Path) -> Result<Vec<(usize, AnnotationRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let image = fields.next().unwrap().to_string();
        let mut dim = |what: &str| -> Result<usize> {
            let tok = fields.next().ok_or_else(|| err(format!("missing {what}")))?;
            tok.parse()
                .map_err(|_| err(format!("bad {what} {tok:?}")))
        };
        let height = dim("height")?;
        let width = dim("width")?;
        let coords = fields
            .map(|tok| tok.parse::<f64>().map_err(|_| err(format!("bad coordinate {tok:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if coords.len() % 2 != 0 {
            return Err(err("odd number of coordinates".into()));
        }
        let points = coords.chunks(2).map(|p| (p[0], p[1])).collect();
        let annotation = DotAnnotation::new(height, width, points).map_err(|e| err(e.to_string()))?;
        out.push((line_no, AnnotationRecord { image, annotation }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_annotation_gives_zero_map() {
        let ann = DotAnnotation::new(8, 8, vec![]).unwrap();
        let m = make_density_map(&ann, 3.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert_eq!(count(&m, None).unwrap(), 0.0);
    }

    #[test]
    fn single_point_has_unit_mass() {
        for &(x, y) in &[(32.0, 32.0), (0.0, 0.0), (63.99, 0.2), (10.5, 63.5)] {
            let ann = DotAnnotation::new(64, 64, vec![(x, y)]).unwrap();
            let m = make_density_map(&ann, 3.0).unwrap();
            // plain loop oracle
            let mut direct = 0.0;
            for r in 0..64 {
                for c in 0..64 {
                    direct += m.get(r, c);
                }
            }
            assert!((direct - 1.0).abs() < 1e-9, "({x},{y}) -> {direct}");
        }
    }

    #[test]
    fn kernel_peaks_at_point() {
        let ann = DotAnnotation::new(16, 16, vec![(8.5, 8.5)]).unwrap();
        let m = make_density_map(&ann, 1.0).unwrap();
        let peak = m.get(8, 8);
        assert!(m.data().iter().all(|&v| v <= peak));
        // symmetric neighbours
        assert_eq!(m.get(7, 8), m.get(9, 8));
        assert_eq!(m.get(8, 7), m.get(8, 9));
    }

    #[test]
    fn tiny_sigma_puts_mass_on_pixel() {
        let ann = DotAnnotation::new(4, 4, vec![(1.9, 2.1)]).unwrap();
        let m = make_density_map(&ann, 1e-3).unwrap();
        assert!((m.get(2, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_outside_extent_rejected() {
        assert!(DotAnnotation::new(4, 4, vec![(4.0, 1.0)]).is_err());
        assert!(DotAnnotation::new(4, 4, vec![(1.0, -0.1)]).is_err());
        let ann = DotAnnotation {
            height: 4,
            width: 4,
            points: vec![(1.0, 7.0)],
        };
        assert!(make_density_map(&ann, 3.0).is_err());
        assert!(make_density_map(&DotAnnotation::new(4, 4, vec![]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn count_examples() {
        let m = DensityMap::from_vec(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        assert_eq!(count(&m, None).unwrap(), 2.0);
        assert_eq!(count(&DensityMap::zeros(3, 3), None).unwrap(), 0.0);
        let roi = RoiMask::new(2, 2, vec![false, true, true, false]).unwrap();
        assert_eq!(count(&m, Some(&roi)).unwrap(), 1.5);
        let wrong = RoiMask::all(3, 2);
        assert!(count(&m, Some(&wrong)).is_err());
    }

    #[test]
    fn downsample_examples() {
        let m = DensityMap::from_vec(4, 4, vec![0.25; 16]).unwrap();
        assert_eq!(downsample_density(&m, 1).unwrap(), m);
        let d = downsample_density(&m, 2).unwrap();
        assert_eq!(d.data(), &[1.0; 4]);
        assert!(downsample_density(&m, 3).is_err());
    }

    #[test]
    fn roi_validation_and_downsample() {
        assert!(RoiMask::new(2, 2, vec![false; 4]).is_err());
        let roi = RoiMask::from_gray(4, 4, &[0.0, 0.0, 1.0, 1.0].repeat(4)).unwrap();
        let small = roi.downsample(2).unwrap();
        assert_eq!(small.data(), &[false, true, false, true]);
    }

    #[test]
    fn annotation_text_round_trip() {
        let recs = vec![
            AnnotationRecord {
                image: "images/0000.pgm".into(),
                annotation: DotAnnotation::new(48, 48, vec![(0.1, 47.9), (1.0 / 3.0, 2.5)]).unwrap(),
            },
            AnnotationRecord {
                image: "images/0001.pgm".into(),
                annotation: DotAnnotation::new(48, 48, vec![]).unwrap(),
            },
        ];
        let text = format_annotations(&recs);
        let back = parse_annotations(&text, Path::new("a.txt")).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn annotation_errors_carry_line_numbers() {
        let text = "# header\na.pgm 4 4 1 1\nb.pgm 4 4 9 1\n";
        match parse_annotations(text, Path::new("ann.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_annotations("a.pgm 4 4 1\n", Path::new("x")).is_err());
        assert!(parse_annotations("a.pgm four 4\n", Path::new("x")).is_err());
    }
}
