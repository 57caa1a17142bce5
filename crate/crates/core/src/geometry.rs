//! Array and focus-grid geometry, and the free-field Green's function of the
//! convected Helmholtz equation in a uniform subsonic flow.
//!
//! The time-harmonic convention is `e^{+iωt}` everywhere: an outgoing wave
//! carries the phase factor `exp(-i k r)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::CVec;

pub type Point3 = Vector3<f64>;

/// Microphone positions in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct MicArray {
    positions: Vec<Point3>,
}

impl MicArray {
    pub fn new(positions: Vec<Point3>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a microphone array needs at least 2 positions, got {}",
                positions.len()
            )));
        }
        for (i, a) in positions.iter().enumerate() {
            if !a.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite(format!("microphone {i} position")));
            }
            for (j, b) in positions.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(Error::DegenerateGeometry(format!(
                        "microphones {i} and {j} share the position {a:?}"
                    )));
                }
            }
        }
        Ok(MicArray { positions })
    }

    /// Planar sunflower (Vogel) spiral in the `z = 0` plane, centered at the
    /// origin, with the given aperture (diameter) in meters.
    pub fn spiral(count: usize, aperture: f64) -> Result<Self> {
        if !(aperture > 0.0) {
            return Err(Error::InvalidArgument("aperture must be positive".into()));
        }
        let golden = PI * (3.0 - 5f64.sqrt());
        let radius = aperture / 2.0;
        let positions = (0..count)
            .map(|k| {
                let r = radius * ((k as f64 + 0.5) / count as f64).sqrt();
                let theta = k as f64 * golden;
                Point3::new(r * theta.cos(), r * theta.sin(), 0.0)
            })
            .collect();
        MicArray::new(positions)
    }

    /// Parses the text geometry format: one microphone per line with three
    /// whitespace-separated coordinates `x y z` in meters. Blank lines and
    /// everything after `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut positions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "line {}: expected 3 coordinates, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let mut xyz = [0.0; 3];
            for (slot, field) in xyz.iter_mut().zip(&fields) {
                *slot = field.parse().map_err(|_| {
                    Error::InvalidArgument(format!("line {}: cannot parse {field:?}", lineno + 1))
                })?;
            }
            positions.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }
        MicArray::new(positions)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        MicArray::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x y z [m]\n");
        for p in &self.positions {
            out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", p.x, p.y, p.z));
        }
        out
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest pairwise distance between microphones.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.positions.iter().enumerate() {
            for b in &self.positions[i + 1..] {
                best = best.max((a - b).norm());
            }
        }
        best
    }
}

/// Uniform medium: speed of sound and Mach vector of the mean flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowField {
    speed_of_sound: f64,
    mach: Point3,
}

impl FlowField {
    pub fn new(speed_of_sound: f64, mach: Point3) -> Result<Self> {
        if !(speed_of_sound > 0.0) || !speed_of_sound.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "speed of sound must be positive, got {speed_of_sound}"
            )));
        }
        if !(mach.norm() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "flow must be subsonic, |m| = {}",
                mach.norm()
            )));
        }
        Ok(FlowField {
            speed_of_sound,
            mach,
        })
    }

    pub fn quiescent(speed_of_sound: f64) -> Result<Self> {
        FlowField::new(speed_of_sound, Point3::zeros())
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn mach(&self) -> Point3 {
        self.mach
    }

    /// `β² = 1 - |m|²`.
    pub fn beta_squared(&self) -> f64 {
        1.0 - self.mach.norm_squared()
    }

    pub fn wavenumber(&self, omega: f64) -> f64 {
        omega / self.speed_of_sound
    }
}

impl Default for FlowField {
    fn default() -> Self {
        FlowField {
            speed_of_sound: 343.0,
            mach: Point3::zeros(),
        }
    }
}

/// Flow-adapted distance `sqrt(((x-y)·m)² + β²|x-y|²)`.
pub fn mach_distance(x: &Point3, y: &Point3, mach: &Point3) -> Result<f64> {
    if !(mach.norm() < 1.0) {
        return Err(Error::InvalidArgument("flow must be subsonic".into()));
    }
    let d = x - y;
    let dist2 = d.norm_squared();
    if dist2 == 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "coincident points {x:?} and {y:?}"
        )));
    }
    let beta2 = 1.0 - mach.norm_squared();
    let proj = d.dot(mach);
    Ok((proj * proj + beta2 * dist2).sqrt())
}

/// Green's function `g(x, y, ω)` of the convected Helmholtz equation.
pub fn green_function(x: &Point3, y: &Point3, omega: f64, flow: &FlowField) -> Result<Complex64> {
    let m = flow.mach();
    let r_m = mach_distance(x, y, &m)?;
    let k = flow.wavenumber(omega);
    let beta2 = flow.beta_squared();
    let path = -(x - y).dot(&m) + r_m;
    let phase = -k / beta2 * path;
    Ok(Complex64::from_polar(1.0 / (4.0 * PI * r_m), phase))
}

/// Green's function from `y` to every position in `positions`.
pub fn steering_from_positions(
    positions: &[Point3],
    y: &Point3,
    omega: f64,
    flow: &FlowField,
) -> Result<CVec> {
    let mut g = CVec::zeros(positions.len());
    for (slot, x) in g.iter_mut().zip(positions) {
        *slot = green_function(x, y, omega, flow)?;
    }
    Ok(g)
}

/// Propagation vector `g(y)` of the array for focus point `y`.
pub fn propagation_vector(
    array: &MicArray,
    y: &Point3,
    omega: f64,
    flow: &FlowField,
) -> Result<CVec> {
    steering_from_positions(array.positions(), y, omega, flow)
}

/// Bundles the inputs needed to compute steering vectors at one frequency.
#[derive(Debug, Clone, Copy)]
pub struct Propagation<'a> {
    pub array: &'a MicArray,
    pub flow: &'a FlowField,
    pub omega: f64,
}

impl<'a> Propagation<'a> {
    pub fn new(array: &'a MicArray, flow: &'a FlowField, omega: f64) -> Self {
        Propagation { array, flow, omega }
    }

    pub fn steering(&self, y: &Point3) -> Result<CVec> {
        propagation_vector(self.array, y, self.omega, self.flow)
    }
}

/// Planar equidistant lattice parallel to the x-y plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub origin: Point3,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Lattice {
    /// Flat index of lattice cell `(ix, iy)`; x varies fastest.
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn cell(&self, n: usize) -> (usize, usize) {
        (n % self.nx, n / self.nx)
    }

    pub fn point(&self, ix: usize, iy: usize) -> Point3 {
        self.origin + Point3::new(ix as f64 * self.dx, iy as f64 * self.dy, 0.0)
    }

    /// 8-connected neighbours of cell `n`.
    pub fn neighbours(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let (ix, iy) = self.cell(n);
        let (ix, iy) = (ix as isize, iy as isize);
        (-1isize..=1)
            .flat_map(move |dy| (-1isize..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .filter_map(move |(dx, dy)| {
                let (x, y) = (ix + dx, iy + dy);
                if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
                    None
                } else {
                    Some(self.index(x as usize, y as usize))
                }
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusGrid {
    points: Vec<Point3>,
    lattice: Option<Lattice>,
}

impl FocusGrid {
    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("focus grid must not be empty".into()));
        }
        Ok(FocusGrid {
            points,
            lattice: None,
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lattice(&self) -> Option<&Lattice> {
        self.lattice.as_ref()
    }

    /// Index of the grid point closest to `p`.
    pub fn nearest(&self, p: &Point3) -> usize {
        self.points
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - p).norm().total_cmp(&(b.1 - p).norm()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// `nx * ny` lattice points starting at `origin`, x varying fastest.
pub fn build_focus_grid(origin: Point3, dx: f64, dy: f64, nx: usize, ny: usize) -> Result<FocusGrid> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid counts must be positive, got {nx}x{ny}"
        )));
    }
    if !(dx > 0.0 && dy > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid spacing must be positive, got dx={dx}, dy={dy}"
        )));
    }
    let lattice = Lattice {
        origin,
        dx,
        dy,
        nx,
        ny,
    };
    let points = (0..ny)
        .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| lattice.point(ix, iy))
        .collect();
    Ok(FocusGrid {
        points,
        lattice: Some(lattice),
    })
}
