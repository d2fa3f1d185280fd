//! Bird's-eye-view grids: pillar assignment, per-point features, scatter,
//! bilinear sampling and weighted fusion.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::MergedCloud;
use crate::error::{check_len, Error, Result};
use crate::geometry::Vec3;

const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    /// Voxel size (x, y, z) in meters.
    pub cell: [f64; 3],
    /// BEV pixel side in voxels.
    pub stride: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: [-51.2, 51.2],
            y_range: [-51.2, 51.2],
            z_range: [-5.0, 3.0],
            cell: [0.1, 0.1, 0.2],
            stride: 8,
        }
    }
}

fn cells_along(field: &str, range: [f64; 2], cell: f64) -> Result<usize> {
    if !(range[0].is_finite() && range[1].is_finite() && range[1] > range[0]) {
        return Err(Error::invalid(format!("{field}: range must be finite and increasing")));
    }
    if !(cell.is_finite() && cell > 0.0) {
        return Err(Error::invalid(format!("cell: size along {field} must be positive")));
    }
    let n = (range[1] - range[0]) / cell;
    let rounded = n.round();
    if (n - rounded).abs() > GRID_TOL * n.max(1.0) || rounded < 1.0 {
        return Err(Error::invalid(format!("{field}: width {} is not a multiple of cell {cell}", range[1] - range[0])));
    }
    Ok(rounded as usize)
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let nx = cells_along("x_range", self.x_range, self.cell[0])?;
        let ny = cells_along("y_range", self.y_range, self.cell[1])?;
        cells_along("z_range", self.z_range, self.cell[2])?;
        if self.stride == 0 {
            return Err(Error::invalid("stride: must be at least 1"));
        }
        if nx % self.stride != 0 || ny % self.stride != 0 {
            return Err(Error::invalid(format!("stride: {} does not divide grid {nx}x{ny}", self.stride)));
        }
        Ok(())
    }

    /// Pixel columns.
    pub fn width(&self) -> usize {
        ((self.x_range[1] - self.x_range[0]) / self.cell[0]).round() as usize / self.stride
    }

    /// Pixel rows.
    pub fn height(&self) -> usize {
        ((self.y_range[1] - self.y_range[0]) / self.cell[1]).round() as usize / self.stride
    }

    pub fn pixel_size(&self) -> [f64; 2] {
        [self.cell[0] * self.stride as f64, self.cell[1] * self.stride as f64]
    }

    pub fn num_pixels(&self) -> usize {
        self.width() * self.height()
    }

    /// World (x, y) of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let [px, py] = self.pixel_size();
        [
            self.x_range[0] + (col as f64 + 0.5) * px,
            self.y_range[0] + (row as f64 + 0.5) * py,
        ]
    }

    /// `(row, col)` of the pixel containing `p`, or `None` outside the range.
    /// Cells are half-open, so a point on an interior boundary belongs to the
    /// cell above it.
    pub fn locate(&self, p: &Vec3) -> Option<(usize, usize)> {
        if !(p.x >= self.x_range[0]
            && p.x < self.x_range[1]
            && p.y >= self.y_range[0]
            && p.y < self.y_range[1]
            && p.z >= self.z_range[0]
            && p.z < self.z_range[1])
        {
            return None;
        }
        let [px, py] = self.pixel_size();
        let col = ((p.x - self.x_range[0]) / px).floor() as usize;
        let row = ((p.y - self.y_range[0]) / py).floor() as usize;
        (col < self.width() && row < self.height()).then_some((row, col))
    }
}

/// Pixel of each point; `None` marks points outside the grid.
pub fn pillarize(points: &[Vec3], grid: &GridSpec) -> Vec<Option<(usize, usize)>> {
    points.iter().map(|p| grid.locate(p)).collect()
}

/// Row-major per-point feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Features {
    pub fn zeros(len: usize, channels: usize) -> Self {
        Self {
            channels,
            values: vec![0.0; len * channels],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * channels);
        for r in rows {
            check_len("feature row", channels, r.len())?;
            values.extend_from_slice(r);
        }
        Ok(Self { channels, values })
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.channels).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Channels produced by [`featurize`].
pub const FEATURE_CHANNELS: usize = 6;
pub const FEATURE_NAMES: [&str; FEATURE_CHANNELS] = ["occupancy", "dx", "dy", "dz", "k", "presence"];

/// Deterministic per-point descriptor: pillar occupancy, offset from the
/// pillar center (z measured from the middle of the height range), sweep
/// index and a constant presence flag. Points outside the grid get zeros.
pub fn featurize_points(points: &[Vec3], k: &[u32], grid: &GridSpec) -> Result<Features> {
    check_len("k", points.len(), k.len())?;
    let cells = pillarize(points, grid);
    let mut counts = vec![0u32; grid.num_pixels()];
    for (row, col) in cells.iter().flatten() {
        counts[row * grid.width() + col] += 1;
    }
    let z_mid = 0.5 * (grid.z_range[0] + grid.z_range[1]);
    let mut out = Features::zeros(points.len(), FEATURE_CHANNELS);
    out.values
        .par_chunks_mut(FEATURE_CHANNELS)
        .enumerate()
        .for_each(|(i, f)| {
            if let Some((row, col)) = cells[i] {
                let [cx, cy] = grid.pixel_center(row, col);
                let p = points[i];
                f.copy_from_slice(&[
                    counts[row * grid.width() + col] as f64,
                    p.x - cx,
                    p.y - cy,
                    p.z - z_mid,
                    k[i] as f64,
                    1.0,
                ]);
            }
        });
    Ok(out)
}

pub fn featurize(merged: &MergedCloud, grid: &GridSpec) -> Result<Features> {
    featurize_points(&merged.points, &merged.k, grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    #[default]
    Max,
    Mean,
}

/// Dense `height x width x channels` image in row-major order, with the
/// number of points that landed in each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct BevImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub counts: Vec<u32>,
    pub grid: GridSpec,
}

impl BevImage {
    pub fn zeros(grid: &GridSpec, channels: usize) -> Self {
        let (height, width) = (grid.height(), grid.width());
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
            counts: vec![0; height * width],
            grid: grid.clone(),
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.counts[row * self.width + col] > 0
    }

    pub fn occupancy(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn same_shape(&self, other: &BevImage) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }
}

fn total_max(a: f64, b: f64) -> f64 {
    if b.total_cmp(&a).is_gt() {
        b
    } else {
        a
    }
}

/// Scatters per-point features into their pixels. Pixels no point reaches
/// stay zero.
pub fn scatter_to_bev(points: &[Vec3], features: &Features, grid: &GridSpec, reduce: Reduce) -> Result<BevImage> {
    check_len("features", points.len(), features.len())?;
    let mut img = BevImage::zeros(grid, features.channels);
    for (i, cell) in pillarize(points, grid).into_iter().enumerate() {
        let Some((row, col)) = cell else { continue };
        let first = img.counts[row * img.width + col] == 0;
        img.counts[row * img.width + col] += 1;
        let f = features.row(i);
        let px = img.pixel_mut(row, col);
        for (acc, &v) in px.iter_mut().zip(f) {
            *acc = match (first, reduce) {
                (true, _) => v,
                (false, Reduce::Max) => total_max(*acc, v),
                (false, Reduce::Mean) => *acc + v,
            };
        }
    }
    if reduce == Reduce::Mean {
        let c = img.channels;
        for (px, &n) in img.data.chunks_mut(c.max(1)).zip(&img.counts) {
            if n > 1 {
                px.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
    }
    Ok(img)
}

/// Continuous pixel coordinate along one axis, with positions within a
/// hair of a pixel center snapped onto it.
fn axis_coordinate(v: f64, min: f64, pixel: f64, n: usize) -> (usize, usize, f64) {
    let mut u = (v - min) / pixel - 0.5;
    if (u - u.round()).abs() < GRID_TOL {
        u = u.round();
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let lo = (u.floor() as usize).min(n.saturating_sub(2));
    let hi = (lo + 1).min(n - 1);
    (lo, hi, u - lo as f64)
}

/// Bilinear blend of the four pixel centers around `(x, y)`. Queries between
/// the outermost centers and the range edge use the edge pixels.
pub fn bilinear_interpolate(bev: &BevImage, x: f64, y: f64) -> Result<Vec<f64>> {
    let g = &bev.grid;
    if !(x >= g.x_range[0] && x <= g.x_range[1] && y >= g.y_range[0] && y <= g.y_range[1]) {
        return Err(Error::OutOfRange { x, y });
    }
    let mut out = vec![0.0; bev.channels];
    interpolate_into(bev, x, y, &mut out);
    Ok(out)
}

fn interpolate_into(bev: &BevImage, x: f64, y: f64, out: &mut [f64]) {
    let [px, py] = bev.grid.pixel_size();
    let (c0, c1, fx) = axis_coordinate(x, bev.grid.x_range[0], px, bev.width);
    let (r0, r1, fy) = axis_coordinate(y, bev.grid.y_range[0], py, bev.height);
    let weights = [
        ((r0, c0), (1.0 - fx) * (1.0 - fy)),
        ((r0, c1), fx * (1.0 - fy)),
        ((r1, c0), (1.0 - fx) * fy),
        ((r1, c1), fx * fy),
    ];
    out.fill(0.0);
    for ((r, c), w) in weights {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(bev.pixel(r, c)) {
            *o += w * v;
        }
    }
}

/// Samples `bev` at every point; points outside the xy range get zeros.
pub fn sample_points(bev: &BevImage, points: &[Vec3]) -> Features {
    let g = &bev.grid;
    let mut out = Features::zeros(points.len(), bev.channels);
    if bev.channels == 0 {
        return out;
    }
    out.values
        .par_chunks_mut(bev.channels)
        .zip(points)
        .for_each(|(f, p)| {
            if p.x >= g.x_range[0] && p.x <= g.x_range[1] && p.y >= g.y_range[0] && p.y <= g.y_range[1] {
                interpolate_into(bev, p.x, p.y, f);
            }
        });
    out
}

/// Default fusion weight: 1 where the rectified image has points, else 0.
pub fn occupancy_weight(_i0: &BevImage, i1: &BevImage) -> Vec<f64> {
    i1.counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect()
}

/// Per-pixel `w * i1 + (1 - w) * i0` with `w` supplied by `weight_fn`.
pub fn fuse_bev<W>(i0: &BevImage, i1: &BevImage, weight_fn: W) -> Result<BevImage>
where
    W: Fn(&BevImage, &BevImage) -> Vec<f64>,
{
    i0.same_shape(i1)?;
    let w = weight_fn(i0, i1);
    check_len("fusion weights", i0.counts.len(), w.len())?;
    if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("fusion weight {bad} outside [0, 1]")));
    }
    let c = i0.channels.max(1);
    let mut out = i0.clone();
    out.data
        .par_chunks_mut(c)
        .zip(i1.data.par_chunks(c))
        .zip(w.par_iter())
        .for_each(|((o, b), &w)| {
            if w == 1.0 {
                o.copy_from_slice(b);
            } else if w != 0.0 {
                for (a, &b) in o.iter_mut().zip(b) {
                    *a = w * b + (1.0 - w) * *a;
                }
            }
        });
    for (n, &m) in out.counts.iter_mut().zip(&i1.counts) {
        *n = (*n).max(m);
    }
    Ok(out)
}

/// Number of distinct pixels hit by `points`.
pub fn distinct_pixels(points: &[Vec3], grid: &GridSpec) -> usize {
    let mut seen = vec![false; grid.num_pixels()];
    for (r, c) in pillarize(points, grid).into_iter().flatten() {
        seen[r * grid.width() + c] = true;
    }
    seen.into_iter().filter(|&s| s).count()
}

pub const BEV_GRID_HEADER: &str = "flowbev-bev 1";

/// Writes a portable text grid: a header line, a dimensions line
/// `height width channels x_min y_min pixel_x pixel_y`, then one line of
/// `channels` values per pixel in row-major order.
pub fn write_bev_grid(bev: &BevImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bev_grid_string(bev)).map_err(|e| Error::io(path, e))
}

pub fn bev_grid_string(bev: &BevImage) -> String {
    let [px, py] = bev.grid.pixel_size();
    let mut s = String::with_capacity(bev.data.len() * 4);
    let _ = writeln!(s, "{BEV_GRID_HEADER}");
    let _ = writeln!(
        s,
        "{} {} {} {} {} {} {}",
        bev.height, bev.width, bev.channels, bev.grid.x_range[0], bev.grid.y_range[0], px, py
    );
    for px in bev.data.chunks(bev.channels.max(1)) {
        let mut first = true;
        for v in px {
            if !first {
                s.push(' ');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

/// Reads a grid written by [`write_bev_grid`] as `(height, width, channels,
/// values)`.
pub fn read_bev_grid(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { line, column: 1, message };
    let mut lines = text.lines();
    if lines.next() != Some(BEV_GRID_HEADER) {
        return Err(parse_err(1, format!("expected header `{BEV_GRID_HEADER}`")));
    }
    let dims: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if dims.len() != 7 {
        return Err(parse_err(2, "expected 7 dimension fields".into()));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|e| parse_err(2, e.to_string()));
    let (h, w, c) = (int(dims[0])?, int(dims[1])?, int(dims[2])?);
    let mut values = Vec::with_capacity(h * w * c);
    for (i, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|e| parse_err(i + 3, e.to_string()))?);
        }
    }
    if values.len() != h * w * c {
        return Err(parse_err(h * w + 2, format!("expected {} values, found {}", h * w * c, values.len())));
    }
    Ok((h, w, c, values))
}
