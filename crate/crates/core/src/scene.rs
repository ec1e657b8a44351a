//! Synthetic ventilation scene: a room full of CO₂ relaxing toward the
//! outdoor level through window openings, stirred by a prescribed flow, plus
//! point sensors and the zone/interpolation pre-processing that turns their
//! readings into a gridded observation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-major snapshot of a scalar (or RGB) field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    rows: usize,
    cols: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(rows: usize, cols: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::Invalid("field extents must be positive".into()));
        }
        if values.len() != rows * cols * channels {
            return Err(Error::shape(
                "field values",
                &[channels, rows, cols],
                &[values.len()],
            ));
        }
        Ok(Field {
            rows,
            cols,
            channels,
            values,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Field {
            rows,
            cols,
            channels: 1,
            values: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.rows + row) * self.cols + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.rows, self.cols], self.values.clone())
            .expect("field extents are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, r, w] => Field::new(r, w, c, t.data().to_vec()),
            _ => Err(Error::shape("field tensor [C, H, W]", &[1, 0, 0], t.shape())),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn mse(&self, other: &Field) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::shape(
                "field mse",
                &[self.channels, self.rows, self.cols],
                &[other.channels, other.rows, other.cols],
            ));
        }
        let n = self.values.len() as f64;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VelocityField {
    /// Constant through-flow; `vx` along columns, `vy` along rows, in cells
    /// per step. Air entering across the boundary is at the ambient level.
    Uniform { vx: f64, vy: f64 },
    /// Single divergence-free recirculation cell with no flow through the
    /// walls; `strength` is the peak face speed.
    Vortex { strength: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

/// An opening on one wall: cells `start..end` along that wall relax toward
/// ambient at rate `exchange` per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSegment {
    pub side: Side,
    pub start: usize,
    pub end: usize,
    pub exchange: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub rows: usize,
    pub cols: usize,
    /// Grid units² per step.
    pub diffusivity: f64,
    pub velocity: VelocityField,
    pub windows: Vec<WindowSegment>,
    pub initial_ppm: f64,
    pub ambient_ppm: f64,
    /// Number of snapshots, the first being the initial state.
    pub steps: usize,
    /// Solver steps between snapshots.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rows: 45,
            cols: 62,
            diffusivity: 0.1,
            velocity: VelocityField::Vortex { strength: 0.3 },
            windows: vec![
                WindowSegment {
                    side: Side::Left,
                    start: 6,
                    end: 18,
                    exchange: 0.3,
                },
                WindowSegment {
                    side: Side::Right,
                    start: 27,
                    end: 39,
                    exchange: 0.3,
                },
            ],
            initial_ppm: 1420.0,
            ambient_ppm: 400.0,
            steps: 600,
            substeps: 20,
            seed: 7,
        }
    }
}

/// Explicit upwind finite-volume advection plus five-point diffusion on a
/// unit grid with unit time step.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: SceneConfig,
    /// Velocity on vertical faces, `rows × (cols + 1)`.
    u: Vec<f64>,
    /// Velocity on horizontal faces, `(rows + 1) × cols`.
    v: Vec<f64>,
    /// Summed window exchange rate per cell.
    exchange: Vec<f64>,
}

impl Simulator {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        let (rows, cols) = (cfg.rows, cfg.cols);
        if rows == 0 || cols == 0 || cfg.steps == 0 || cfg.substeps == 0 {
            return Err(Error::Invalid(
                "scene rows, cols, steps and substeps must be positive".into(),
            ));
        }
        if !(cfg.initial_ppm > cfg.ambient_ppm) {
            return Err(Error::Invalid(format!(
                "initial ppm {} must exceed ambient ppm {}",
                cfg.initial_ppm, cfg.ambient_ppm
            )));
        }
        if !(0.0..=0.25).contains(&cfg.diffusivity) {
            return Err(Error::Invalid(format!(
                "diffusivity {} violates 0 <= D*dt/dx^2 <= 0.25",
                cfg.diffusivity
            )));
        }
        let (u, v) = face_velocities(cfg);
        let vmax = u.iter().chain(&v).fold(0.0f64, |m, x| m.max(x.abs()));
        if !(vmax <= 1.0) {
            return Err(Error::Invalid(format!(
                "peak speed {vmax} violates |v|*dt/dx <= 1"
            )));
        }
        let mut exchange = vec![0.0; rows * cols];
        for w in &cfg.windows {
            let len = match w.side {
                Side::Top | Side::Bottom => cols,
                Side::Left | Side::Right => rows,
            };
            if w.start >= w.end || w.end > len || !(0.0..=1.0).contains(&w.exchange) {
                return Err(Error::Invalid(format!("window {w:?} out of range")));
            }
            for i in w.start..w.end {
                let (r, c) = match w.side {
                    Side::Top => (0, i),
                    Side::Bottom => (rows - 1, i),
                    Side::Left => (i, 0),
                    Side::Right => (i, cols - 1),
                };
                exchange[r * cols + c] += w.exchange;
            }
        }
        let sim = Simulator {
            cfg: cfg.clone(),
            u,
            v,
            exchange,
        };
        // The update is a convex combination only if every cell keeps a
        // non-negative weight on its own value.
        for r in 0..rows {
            for c in 0..cols {
                let w = sim.self_weight(r, c);
                if w < -1e-12 {
                    return Err(Error::Invalid(format!(
                        "unstable scene: cell ({r}, {c}) keeps weight {w:.4} on itself"
                    )));
                }
            }
        }
        Ok(sim)
    }

    fn self_weight(&self, r: usize, c: usize) -> f64 {
        let (rows, cols) = (self.cfg.rows, self.cfg.cols);
        let neighbours = [r > 0, r + 1 < rows, c > 0, c + 1 < cols]
            .iter()
            .filter(|&&b| b)
            .count() as f64;
        let west = self.u[r * (cols + 1) + c];
        let east = self.u[r * (cols + 1) + c + 1];
        let north = self.v[r * cols + c];
        let south = self.v[(r + 1) * cols + c];
        let outflow = (-west).max(0.0) + east.max(0.0) + (-north).max(0.0) + south.max(0.0);
        1.0 - self.cfg.diffusivity * neighbours - outflow - self.exchange[r * cols + c]
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    /// Advances `cur` by one solver step into `next`.
    pub fn step(&self, cur: &[f64], next: &mut [f64]) {
        let (rows, cols) = (self.cfg.rows, self.cfg.cols);
        let d = self.cfg.diffusivity;
        let amb = self.cfg.ambient_ppm;
        let at = |r: usize, c: usize| cur[r * cols + c];
        for r in 0..rows {
            for c in 0..cols {
                let x = at(r, c);
                let mut acc = x;
                if r > 0 {
                    acc += d * (at(r - 1, c) - x);
                }
                if r + 1 < rows {
                    acc += d * (at(r + 1, c) - x);
                }
                if c > 0 {
                    acc += d * (at(r, c - 1) - x);
                }
                if c + 1 < cols {
                    acc += d * (at(r, c + 1) - x);
                }
                // west face: positive u flows into this cell
                let uw = self.u[r * (cols + 1) + c];
                let west_up = if uw > 0.0 {
                    if c > 0 { at(r, c - 1) } else { amb }
                } else {
                    x
                };
                let ue = self.u[r * (cols + 1) + c + 1];
                let east_up = if ue > 0.0 {
                    x
                } else if c + 1 < cols {
                    at(r, c + 1)
                } else {
                    amb
                };
                let vn = self.v[r * cols + c];
                let north_up = if vn > 0.0 {
                    if r > 0 { at(r - 1, c) } else { amb }
                } else {
                    x
                };
                let vs = self.v[(r + 1) * cols + c];
                let south_up = if vs > 0.0 {
                    x
                } else if r + 1 < rows {
                    at(r + 1, c)
                } else {
                    amb
                };
                acc += uw * west_up - ue * east_up + vn * north_up - vs * south_up;
                acc -= self.exchange[r * cols + c] * (x - amb);
                next[r * cols + c] = acc;
            }
        }
    }

    /// Snapshots starting from `initial`, taken every `substeps` steps.
    pub fn run_from(&self, initial: &Field) -> Result<Vec<Field>> {
        if (initial.rows, initial.cols, initial.channels) != (self.cfg.rows, self.cfg.cols, 1) {
            return Err(Error::shape(
                "initial field",
                &[1, self.cfg.rows, self.cfg.cols],
                &[initial.channels, initial.rows, initial.cols],
            ));
        }
        let mut cur = initial.values.clone();
        let mut next = vec![0.0; cur.len()];
        let mut out = Vec::with_capacity(self.cfg.steps);
        out.push(initial.clone());
        for _ in 1..self.cfg.steps {
            for _ in 0..self.cfg.substeps {
                self.step(&cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            out.push(Field::new(self.cfg.rows, self.cfg.cols, 1, cur.clone())?);
        }
        Ok(out)
    }
}

fn face_velocities(cfg: &SceneConfig) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (cfg.rows, cfg.cols);
    match cfg.velocity {
        VelocityField::Uniform { vx, vy } => (vec![vx; rows * (cols + 1)], vec![vy; (rows + 1) * cols]),
        VelocityField::Vortex { strength } => {
            // stream function on cell corners, zero on the walls
            let psi = |r: usize, c: usize| {
                (std::f64::consts::PI * r as f64 / rows as f64).sin()
                    * (std::f64::consts::PI * c as f64 / cols as f64).sin()
            };
            let mut u = vec![0.0; rows * (cols + 1)];
            let mut v = vec![0.0; (rows + 1) * cols];
            for r in 0..rows {
                for c in 0..=cols {
                    u[r * (cols + 1) + c] = psi(r + 1, c) - psi(r, c);
                }
            }
            for r in 0..=rows {
                for c in 0..cols {
                    v[r * cols + c] = -(psi(r, c + 1) - psi(r, c));
                }
            }
            let peak = u.iter().chain(&v).fold(0.0f64, |m, x| m.max(x.abs()));
            let scale = if peak > 0.0 { strength / peak } else { 0.0 };
            u.iter_mut().chain(v.iter_mut()).for_each(|x| *x *= scale);
            (u, v)
        }
    }
}

/// Runs the scene from a uniform room at `initial_ppm`. Returns `steps`
/// snapshots in ppm.
pub fn simulate(cfg: &SceneConfig) -> Result<Vec<Field>> {
    let sim = Simulator::new(cfg)?;
    sim.run_from(&Field::filled(cfg.rows, cfg.cols, cfg.initial_ppm))
}

/// Affine map of `[min_ppm, max_ppm]` onto `[0, 1]`, clamped.
pub fn normalize(field: &Field, min_ppm: f64, max_ppm: f64) -> Result<Field> {
    if !(max_ppm > min_ppm) || !min_ppm.is_finite() || !max_ppm.is_finite() {
        return Err(Error::Invalid(format!(
            "degenerate normalization range [{min_ppm}, {max_ppm}]"
        )));
    }
    let span = max_ppm - min_ppm;
    Ok(Field {
        values: field
            .values
            .iter()
            .map(|v| ((v - min_ppm) / span).clamp(0.0, 1.0))
            .collect(),
        ..*field
    })
}

/// Breakpoints of the blue→red colormap: value → (r, g, b), linear in
/// between.
pub const COLORMAP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 1.0]),
    (0.25, [0.0, 1.0, 1.0]),
    (0.5, [0.0, 1.0, 0.0]),
    (0.75, [1.0, 1.0, 0.0]),
    (1.0, [1.0, 0.0, 0.0]),
];

pub fn colormap_value(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in COLORMAP.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + t * (cb[i] - ca[i]));
        }
    }
    COLORMAP[COLORMAP.len() - 1].1
}

/// Maps a normalized single-channel field to three channels.
pub fn colormap_rgb(field: &Field) -> Result<Field> {
    if field.channels != 1 {
        return Err(Error::Invalid(format!(
            "colormap expects one channel, got {}",
            field.channels
        )));
    }
    let (lo, hi) = field.min_max();
    if lo < 0.0 || hi > 1.0 || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid("colormap input must be normalized to [0, 1]".into()));
    }
    let n = field.rows * field.cols;
    let mut values = vec![0.0; 3 * n];
    for (i, &v) in field.values.iter().enumerate() {
        let rgb = colormap_value(v);
        for ch in 0..3 {
            values[ch * n + i] = rgb[ch];
        }
    }
    Field::new(field.rows, field.cols, 3, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSet {
    pub positions: Vec<(usize, usize)>,
    /// Zones span `row - half_width .. row + half_width` (same for columns).
    pub half_width: usize,
    pub noise_std: f64,
}

impl Default for SensorSet {
    fn default() -> Self {
        Self::spread(45, 62)
    }
}

impl SensorSet {
    /// Seven sensors at fixed fractional positions of the room.
    pub fn spread(rows: usize, cols: usize) -> Self {
        const FRACTIONS: [(f64, f64); 7] = [
            (0.2, 0.15),
            (0.25, 0.55),
            (0.3, 0.85),
            (0.55, 0.35),
            (0.6, 0.7),
            (0.8, 0.12),
            (0.82, 0.9),
        ];
        let at = |f: f64, n: usize| ((f * n as f64) as usize).min(n - 1);
        SensorSet {
            positions: FRACTIONS.iter().map(|&(fr, fc)| (at(fr, rows), at(fc, cols))).collect(),
            half_width: 5,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if let Some(p) = self.positions.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Invalid(format!(
                "sensor at {p:?} lies outside the {rows}x{cols} grid"
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Invalid("sensor noise std must be >= 0".into()));
        }
        Ok(())
    }

    /// Clamped zone of sensor `i` as half-open row and column ranges.
    pub fn zone(&self, i: usize, rows: usize, cols: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (r, c) = self.positions[i];
        let hw = self.half_width;
        (
            r.saturating_sub(hw)..(r + hw).min(rows),
            c.saturating_sub(hw)..(c + hw).min(cols),
        )
    }
}

/// Point samples of a ppm field at the sensor positions, with optional
/// Gaussian noise drawn from `seed`.
pub fn sample_sensors(field_ppm: &Field, sensors: &SensorSet, seed: u64) -> Result<Vec<f64>> {
    sensors.validate(field_ppm.rows, field_ppm.cols)?;
    let mut readings: Vec<f64> = sensors
        .positions
        .iter()
        .map(|&(r, c)| field_ppm.get(0, r, c))
        .collect();
    if sensors.noise_std > 0.0 {
        let normal = Normal::new(0.0, sensors.noise_std)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        readings.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(readings)
}

type Point = (f64, f64);

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Delaunay triangles of a small point set by exhaustive empty-circumcircle
/// search. Cubic in the number of triples, which is fine for a handful of
/// sensors.
pub fn delaunay(points: &[Point]) -> Vec<[usize; 3]> {
    let n = points.len();
    let mut tris = vec![];
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (points[i], points[j], points[k]);
                let area2 = cross(a, b, c);
                if area2.abs() < 1e-9 {
                    continue;
                }
                let empty = (0..n)
                    .filter(|&m| m != i && m != j && m != k)
                    .all(|m| !in_circumcircle(a, b, c, points[m]));
                if empty {
                    tris.push([i, j, k]);
                }
            }
        }
    }
    tris
}

fn in_circumcircle(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (ax, ay) = (a.0 - d.0, a.1 - d.1);
    let (bx, by) = (b.0 - d.0, b.1 - d.1);
    let (cx, cy) = (c.0 - d.0, c.1 - d.1);
    let det = (ax * ax + ay * ay) * (bx * cy - cx * by) - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay);
    let orient = cross(a, b, c).signum();
    det * orient > 1e-9
}

/// Barycentric weights of `p` in triangle `abc`, or `None` when outside.
pub fn barycentric(p: Point, a: Point, b: Point, c: Point) -> Option<[f64; 3]> {
    let area = cross(a, b, c);
    let wa = cross(p, b, c) / area;
    let wb = cross(a, p, c) / area;
    let wc = 1.0 - wa - wb;
    let tol = -1e-12;
    (wa >= tol && wb >= tol && wc >= tol).then_some([wa, wb, wc])
}

/// Builds a gridded observation from sensor readings (ppm): each reading
/// fills its zone, the rest of the grid is linearly interpolated over a
/// triangulation of the sensor positions, and points outside their convex
/// hull take the nearest sensor's reading. The result is normalized with
/// `range = (min_ppm, max_ppm)`.
pub fn observation_field(
    readings: &[f64],
    sensors: &SensorSet,
    rows: usize,
    cols: usize,
    range: (f64, f64),
) -> Result<Field> {
    let n = sensors.positions.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 sensors for 2D interpolation, got {n}"
        )));
    }
    if readings.len() != n {
        return Err(Error::shape("sensor readings", &[n], &[readings.len()]));
    }
    sensors.validate(rows, cols)?;
    let pts: Vec<Point> = sensors
        .positions
        .iter()
        .map(|&(r, c)| (r as f64, c as f64))
        .collect();
    let tris = delaunay(&pts);
    if tris.is_empty() {
        return Err(Error::Invalid("sensor positions are collinear".into()));
    }
    let mut values = vec![f64::NAN; rows * cols];
    for i in 0..n {
        let (zr, zc) = sensors.zone(i, rows, cols);
        for r in zr {
            for c in zc.clone() {
                if values[r * cols + c].is_nan() {
                    values[r * cols + c] = readings[i];
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            if !values[r * cols + c].is_nan() {
                continue;
            }
            let p = (r as f64, c as f64);
            let inside = tris.iter().find_map(|t| {
                barycentric(p, pts[t[0]], pts[t[1]], pts[t[2]])
                    .map(|w| w[0] * readings[t[0]] + w[1] * readings[t[1]] + w[2] * readings[t[2]])
            });
            values[r * cols + c] = inside.unwrap_or_else(|| {
                let nearest = (0..n)
                    .min_by(|&a, &b| {
                        let da = (pts[a].0 - p.0).powi(2) + (pts[a].1 - p.1).powi(2);
                        let db = (pts[b].0 - p.0).powi(2) + (pts[b].1 - p.1).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("n >= 3");
                readings[nearest]
            });
        }
    }
    normalize(&Field::new(rows, cols, 1, values)?, range.0, range.1)
}

/// Writes each channel as `rows` lines of comma-separated values, channels
/// one after another.
pub fn write_csv(field: &Field, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ch in 0..field.channels {
        for r in 0..field.rows {
            let line: Vec<String> = (0..field.cols).map(|c| field.get(ch, r, c).to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary 8-bit grayscale PGM of a normalized field (channel mean for RGB).
pub fn write_pgm(field: &Field, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", field.cols, field.rows)?;
    let n = field.rows * field.cols;
    let bytes: Vec<u8> = (0..n)
        .map(|i| {
            let v = (0..field.channels).map(|ch| field.values[ch * n + i]).sum::<f64>()
                / field.channels as f64;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn snapshot_name(t: usize) -> String {
    format!("snap_{t:05}.pgm")
}

/// Places fields side by side with a one-pixel white divider.
pub fn side_by_side(fields: &[&Field]) -> Result<Field> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Invalid("nothing to tile".into()))?;
    let rows = first.rows;
    let channels = first.channels;
    if fields.iter().any(|f| f.rows != rows || f.channels != channels) {
        return Err(Error::Invalid("tiled fields must share rows and channels".into()));
    }
    let cols = fields.iter().map(|f| f.cols).sum::<usize>() + fields.len() - 1;
    let mut values = Vec::with_capacity(rows * cols * channels);
    for ch in 0..channels {
        for r in 0..rows {
            for (k, f) in fields.iter().enumerate() {
                if k > 0 {
                    values.push(1.0);
                }
                values.extend((0..f.cols).map(|c| f.get(ch, r, c)));
            }
        }
    }
    Field::new(rows, cols, channels, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(rows: usize, cols: usize) -> SceneConfig {
        SceneConfig {
            rows,
            cols,
            diffusivity: 0.0,
            velocity: VelocityField::Uniform { vx: 0.0, vy: 0.0 },
            windows: vec![],
            steps: 5,
            substeps: 3,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn frozen_dynamics() {
        let cfg = quiet(6, 7);
        let snaps = simulate(&cfg).unwrap();
        assert_eq!(snaps.len(), 5);
        for s in &snaps {
            assert!(s.values().iter().all(|&v| v == 1420.0));
        }
    }

    #[test]
    fn default_scene_is_valid_and_decays() {
        let cfg = SceneConfig {
            steps: 50,
            ..SceneConfig::default()
        };
        let snaps = simulate(&cfg).unwrap();
        assert!(snaps[49].mean() < snaps[0].mean());
    }

    #[test]
    fn unstable_configs_rejected() {
        let mut cfg = quiet(5, 5);
        cfg.diffusivity = 0.3;
        assert!(simulate(&cfg).is_err());
        let mut cfg = quiet(5, 5);
        cfg.velocity = VelocityField::Uniform { vx: 1.5, vy: 0.0 };
        assert!(simulate(&cfg).is_err());
        let mut cfg = quiet(5, 5);
        cfg.diffusivity = 0.25;
        cfg.velocity = VelocityField::Uniform { vx: 0.5, vy: 0.0 };
        assert!(simulate(&cfg).is_err(), "combined weight is negative");
        let mut cfg = quiet(5, 5);
        cfg.ambient_ppm = 2000.0;
        assert!(simulate(&cfg).is_err());
    }

    #[test]
    fn normalize_examples() {
        let f = Field::new(1, 4, 1, vec![400.0, 1420.0, 910.0, 1500.0]).unwrap();
        let n = normalize(&f, 400.0, 1420.0).unwrap();
        assert_eq!(n.values(), &[0.0, 1.0, 0.5, 1.0]);
        assert!(normalize(&f, 5.0, 5.0).is_err());
    }

    #[test]
    fn colormap_endpoints_and_midpoints() {
        assert_eq!(colormap_value(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap_value(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap_value(0.5), [0.0, 1.0, 0.0]);
        // halfway between the 0.25 and 0.5 breakpoints
        assert_eq!(colormap_value(0.375), [0.0, 1.0, 0.5]);
        let f = Field::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let rgb = colormap_rgb(&f).unwrap();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.values(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let bad = Field::new(1, 1, 1, vec![1.5]).unwrap();
        assert!(colormap_rgb(&bad).is_err());
    }

    #[test]
    fn sensor_sampling() {
        let f = Field::new(3, 3, 1, (0..9).map(f64::from).collect()).unwrap();
        let s = SensorSet {
            positions: vec![(0, 0), (1, 2), (2, 1)],
            half_width: 1,
            noise_std: 0.0,
        };
        assert_eq!(sample_sensors(&f, &s, 1).unwrap(), vec![0.0, 5.0, 7.0]);
        let c = Field::filled(3, 3, 42.0);
        assert_eq!(sample_sensors(&c, &s, 1).unwrap(), vec![42.0; 3]);
        let noisy = SensorSet {
            noise_std: 0.01,
            ..s.clone()
        };
        let a = sample_sensors(&f, &noisy, 9).unwrap();
        let b = sample_sensors(&f, &noisy, 9).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, vec![0.0, 5.0, 7.0]);
        let outside = SensorSet {
            positions: vec![(3, 0)],
            ..s
        };
        assert!(sample_sensors(&f, &outside, 0).is_err());
    }

    #[test]
    fn zones_are_ten_by_ten_and_clamped() {
        let s = SensorSet::spread(45, 62);
        assert_eq!(s.positions.len(), 7);
        let (r, c) = s.zone(1, 45, 62);
        assert_eq!((r.len(), c.len()), (10, 10));
        let edge = SensorSet {
            positions: vec![(1, 60)],
            half_width: 5,
            noise_std: 0.0,
        };
        let (r, c) = edge.zone(0, 45, 62);
        assert_eq!((r, c), (0..6, 55..62));
    }

    #[test]
    fn observation_requires_three_sensors() {
        let s = SensorSet {
            positions: vec![(1, 1), (5, 5)],
            half_width: 1,
            noise_std: 0.0,
        };
        assert!(observation_field(&[500.0, 600.0], &s, 10, 10, (400.0, 1420.0)).is_err());
        let collinear = SensorSet {
            positions: vec![(1, 1), (2, 2), (3, 3)],
            half_width: 0,
            noise_std: 0.0,
        };
        assert!(observation_field(&[500.0; 3], &collinear, 10, 10, (400.0, 1420.0)).is_err());
    }

    #[test]
    fn constant_readings_give_constant_field() {
        let s = SensorSet::spread(45, 62);
        let f = observation_field(&[910.0; 7], &s, 45, 62, (400.0, 1420.0)).unwrap();
        assert!(f.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zone_pixels_take_sensor_value() {
        let s = SensorSet::spread(45, 62);
        let readings: Vec<f64> = (0..7).map(|i| 500.0 + 100.0 * i as f64).collect();
        let f = observation_field(&readings, &s, 45, 62, (400.0, 1420.0)).unwrap();
        let (zr, zc) = s.zone(3, 45, 62);
        let expected = (readings[3] - 400.0) / 1020.0;
        for r in zr {
            for c in zc.clone() {
                assert_eq!(f.get(0, r, c), expected);
            }
        }
    }

    #[test]
    fn triptych_layout() {
        let a = Field::filled(2, 3, 0.0);
        let t = side_by_side(&[&a, &a, &a]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 11));
        assert_eq!(t.get(0, 1, 3), 1.0);
    }
}
