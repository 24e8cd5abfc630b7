//! Point cloud data model, ASCII/PLY I/O and spatial cropping.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A single 3D observation: position plus optional color, sensor intensity
/// and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointObservation {
    /// Position in meters.
    pub position: [f64; 3],
    /// RGB, each channel in [0, 255].
    pub color: Option<[f64; 3]>,
    /// Sensor intensity in raw sensor units.
    pub intensity: Option<f64>,
    /// Class id in `0..label_count`; `None` = unlabeled.
    pub label: Option<usize>,
}

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn of_points(points: &[PointObservation]) -> Option<Aabb> {
        let first = points.first()?;
        let mut min = first.position;
        let mut max = first.position;
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p.position[a]);
                max[a] = max[a].max(p.position[a]);
            }
        }
        Some(Aabb { min, max })
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// A set of observations with their tight bounds and the size of the label
/// set they are drawn from.
#[derive(Debug, Clone)]
pub struct LabeledPointCloud {
    pub points: Vec<PointObservation>,
    pub bounds: Aabb,
    pub label_count: usize,
}

/// ASCII line formats understood by [`load_cloud`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// `x y z r g b label` per line; label -1 means unlabeled.
    XyzRgbL,
    /// `x y z label` per line; label -1 means unlabeled.
    XyzLabel,
}

/// Output formats for [`save_predictions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionFormat {
    /// Same ASCII layout as the cloud's richest input format.
    Ascii,
    /// Binary little-endian PLY with per-class palette colors.
    PlyBinary,
}

/// Fixed palette used when exporting labeled points to PLY.
pub const LABEL_PALETTE: [[u8; 3]; 10] = [
    [166, 124, 82],  // 0
    [220, 220, 220], // 1
    [140, 140, 150], // 2
    [200, 60, 40],   // 3
    [60, 90, 200],   // 4
    [60, 180, 75],   // 5
    [255, 225, 25],  // 6
    [145, 30, 180],  // 7
    [70, 240, 240],  // 8
    [128, 128, 0],   // 9
];

pub fn palette_color(label: usize) -> [u8; 3] {
    LABEL_PALETTE[label % LABEL_PALETTE.len()]
}

impl LabeledPointCloud {
    /// Builds a cloud from observations, computing tight bounds.
    pub fn new(points: Vec<PointObservation>, label_count: usize) -> Result<Self> {
        let bounds = Aabb::of_points(&points)
            .ok_or_else(|| Error::InvalidInput("empty point cloud".into()))?;
        if label_count == 0 {
            return Err(Error::InvalidInput("label_count must be positive".into()));
        }
        for (i, p) in points.iter().enumerate() {
            validate_point(p, label_count).map_err(|msg| {
                Error::InvalidInput(format!("point {i}: {msg}"))
            })?;
        }
        Ok(LabeledPointCloud {
            points,
            bounds,
            label_count,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_color(&self) -> bool {
        self.points.iter().all(|p| p.color.is_some())
    }

    pub fn has_intensity(&self) -> bool {
        self.points.iter().all(|p| p.intensity.is_some())
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn colors(&self) -> Option<Vec<[f64; 3]>> {
        self.points.iter().map(|p| p.color).collect()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// Recomputes tight bounds after positions changed.
    pub fn refresh_bounds(&mut self) {
        if let Some(b) = Aabb::of_points(&self.points) {
            self.bounds = b;
        }
    }
}

fn validate_point(p: &PointObservation, label_count: usize) -> std::result::Result<(), String> {
    if p.position.iter().any(|v| !v.is_finite()) {
        return Err("non-finite position".into());
    }
    if let Some(c) = p.color {
        if c.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 255.0) {
            return Err("color channel outside [0, 255]".into());
        }
    }
    if let Some(l) = p.label {
        if l >= label_count {
            return Err(format!("label {l} >= label_count {label_count}"));
        }
    }
    Ok(())
}

/// Parses an ASCII point file. Bounds are the tight AABB; `label_count` is
/// inferred as `max(label) + 1` (at least 1).
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<LabeledPointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let columns = match format {
        CloudFormat::XyzRgbL => 7,
        CloudFormat::XyzLabel => 4,
    };
    let mut points = Vec::new();
    let mut max_label: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != columns {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} columns, found {}", columns, fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::parse(path, lineno, format!("bad {what} value '{s}'")))
        };
        let x = num(fields[0], "x")?;
        let y = num(fields[1], "y")?;
        let z = num(fields[2], "z")?;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::parse(path, lineno, "non-finite coordinate"));
        }
        let (color, label_field) = match format {
            CloudFormat::XyzRgbL => {
                let r = num(fields[3], "r")?;
                let g = num(fields[4], "g")?;
                let b = num(fields[5], "b")?;
                for (name, v) in [("r", r), ("g", g), ("b", b)] {
                    if !v.is_finite() || !(0.0..=255.0).contains(&v) {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!("color channel {name}={v} outside [0, 255]"),
                        ));
                    }
                }
                (Some([r, g, b]), fields[6])
            }
            CloudFormat::XyzLabel => (None, fields[3]),
        };
        let label_raw: i64 = label_field.parse().map_err(|_| {
            Error::parse(path, lineno, format!("bad label value '{label_field}'"))
        })?;
        let label = if label_raw < 0 {
            None
        } else {
            let l = label_raw as usize;
            max_label = Some(max_label.map_or(l, |m| m.max(l)));
            Some(l)
        };
        points.push(PointObservation {
            position: [x, y, z],
            color,
            intensity: None,
            label,
        });
    }
    if points.is_empty() {
        return Err(Error::parse(path, 0, "empty point file"));
    }
    let label_count = max_label.map_or(1, |m| m + 1);
    LabeledPointCloud::new(points, label_count)
}

/// Writes a cloud with its own labels in the given ASCII format. Positions
/// use 6 decimal places.
pub fn save_cloud(cloud: &LabeledPointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    if format == CloudFormat::XyzRgbL && !cloud.has_color() {
        return Err(Error::InvalidInput(
            "xyzrgbl format requires colors on every point".into(),
        ));
    }
    let labels: Vec<Option<usize>> = cloud.labels();
    write_ascii(cloud, &labels, path, format)
}

/// Writes per-point predicted labels next to the cloud geometry.
pub fn save_predictions(
    cloud: &LabeledPointCloud,
    labels: &[usize],
    path: &Path,
    format: PredictionFormat,
) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(Error::InvalidInput(format!(
            "labels length {} != point count {}",
            labels.len(),
            cloud.len()
        )));
    }
    match format {
        PredictionFormat::Ascii => {
            let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
            let fmt = if cloud.has_color() {
                CloudFormat::XyzRgbL
            } else {
                CloudFormat::XyzLabel
            };
            write_ascii(cloud, &labels, path, fmt)
        }
        PredictionFormat::PlyBinary => write_ply(cloud, labels, path),
    }
}

fn write_ascii(
    cloud: &LabeledPointCloud,
    labels: &[Option<usize>],
    path: &Path,
    format: CloudFormat,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (p, label) in cloud.points.iter().zip(labels.iter()) {
        let l = label.map_or(-1i64, |v| v as i64);
        let line = match format {
            CloudFormat::XyzRgbL => {
                let c = p.color.unwrap_or([0.0, 0.0, 0.0]);
                format!(
                    "{:.6} {:.6} {:.6} {} {} {} {}",
                    p.position[0],
                    p.position[1],
                    p.position[2],
                    fmt_color(c[0]),
                    fmt_color(c[1]),
                    fmt_color(c[2]),
                    l
                )
            }
            CloudFormat::XyzLabel => format!(
                "{:.6} {:.6} {:.6} {}",
                p.position[0], p.position[1], p.position[2], l
            ),
        };
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Colors are written without trailing zeros when integral so that files
/// with integer RGB survive a round trip byte-identically.
fn fmt_color(v: f64) -> String {
    if v == v.trunc() {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

/// Binary little-endian PLY: `vertex { x,y,z: float32, red,green,blue: uchar }`,
/// colored by the label palette.
fn write_ply(cloud: &LabeledPointCloud, labels: &[usize], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         end_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for (p, &label) in cloud.points.iter().zip(labels.iter()) {
        for a in 0..3 {
            w.write_all(&(p.position[a] as f32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&palette_color(label)).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One spatial crop of a larger cloud.
#[derive(Debug, Clone)]
pub struct Crop {
    pub cloud: LabeledPointCloud,
    /// Minimum corner of the crop window, in the original coordinates.
    pub origin: [f64; 3],
    /// Index of each crop point in the original cloud.
    pub point_indices: Vec<usize>,
}

/// Splits a cloud into crop windows of at most `crop_xy` meters, adjacent
/// windows overlapping by `overlap` meters. With `overlap == 0` every point
/// lands in exactly one crop (boundary points go to the lower-index crop);
/// with positive overlap points may appear in several. `keep_full_z` keeps
/// the cloud's entire Z extent in every crop instead of splitting Z.
pub fn crop_subareas(
    cloud: &LabeledPointCloud,
    crop_xy: f64,
    overlap: f64,
    keep_full_z: bool,
) -> Result<Vec<Crop>> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot crop an empty cloud".into()));
    }
    if !(crop_xy > overlap && overlap >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "need crop ({crop_xy}) > overlap ({overlap}) >= 0"
        )));
    }
    let stride = crop_xy - overlap;
    let extent = cloud.bounds.extent();
    let axes: [bool; 3] = [true, true, !keep_full_z];
    let counts: Vec<usize> = (0..3)
        .map(|a| {
            if !axes[a] || extent[a] <= crop_xy {
                1
            } else {
                ((extent[a] - crop_xy) / stride).ceil() as usize + 1
            }
        })
        .collect();

    let mut crops: Vec<(Vec<PointObservation>, [f64; 3], Vec<usize>)> = Vec::new();
    for ix in 0..counts[0] {
        for iy in 0..counts[1] {
            for iz in 0..counts[2] {
                let idx = [ix, iy, iz];
                let origin: [f64; 3] = std::array::from_fn(|a| {
                    if axes[a] {
                        cloud.bounds.min[a] + idx[a] as f64 * stride
                    } else {
                        cloud.bounds.min[a]
                    }
                });
                crops.push((Vec::new(), origin, Vec::new()));
            }
        }
    }

    let crop_index = |cell: [usize; 3]| -> usize {
        (cell[0] * counts[1] + cell[1]) * counts[2] + cell[2]
    };

    for (pi, p) in cloud.points.iter().enumerate() {
        if overlap == 0.0 {
            // First (lowest-index) crop whose closed window contains the
            // point; equivalently the half-open cell clamped to the last
            // window so boundary points stay covered.
            let cell: [usize; 3] = std::array::from_fn(|a| {
                if !axes[a] || counts[a] == 1 {
                    0
                } else {
                    let rel = p.position[a] - cloud.bounds.min[a];
                    let lower = ((rel - crop_xy) / stride).ceil().max(0.0) as usize;
                    lower.min(counts[a] - 1)
                }
            });
            let ci = crop_index(cell);
            crops[ci].0.push(p.clone());
            crops[ci].2.push(pi);
        } else {
            for ci in 0..crops.len() {
                let origin = crops[ci].1;
                let inside = (0..3).all(|a| {
                    !axes[a]
                        || (p.position[a] >= origin[a] && p.position[a] <= origin[a] + crop_xy)
                });
                if inside {
                    crops[ci].0.push(p.clone());
                    crops[ci].2.push(pi);
                }
            }
        }
    }

    let label_count = cloud.label_count;
    Ok(crops
        .into_iter()
        .filter(|(points, _, _)| !points.is_empty())
        .map(|(points, origin, point_indices)| Crop {
            cloud: LabeledPointCloud::new(points, label_count)
                .expect("crop points are valid by construction"),
            origin,
            point_indices,
        })
        .collect())
}
