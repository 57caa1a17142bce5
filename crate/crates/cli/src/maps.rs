use std::f64::consts::PI;
use std::path::Path;

use aeroweight::beamforming::{BandDescriptor, SourceMap};
use aeroweight::{build_focus_grid, Error, FocusGrid, Point3};
use anyhow::{Context, Result};
use num_complex::Complex64;

/// A source map read back from its CSV form.
pub struct LoadedMap {
    pub map: SourceMap,
    pub frequency_hz: f64,
}

fn header_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.trim().strip_prefix(key))
        .map(|v| v.trim_start_matches(':').trim())
        .next()
}

/// Frequency in Hz from a `bin 123.4 Hz` or `third-octave 123.4 Hz (5 bins)` band line.
fn band_hz(band: &str) -> Option<f64> {
    band.split_whitespace().nth(1)?.parse().ok()
}

/// Recovers the lattice when the points form an x-fastest rectangular grid.
fn rebuild_grid(points: Vec<Point3>) -> Result<FocusGrid> {
    let n = points.len();
    let first = points[0];
    let nx = points.iter().take_while(|p| p.y == first.y).count();
    if n >= 2 && nx >= 1 && n.is_multiple_of(nx) {
        let ny = n / nx;
        let dx = if nx > 1 { points[1].x - first.x } else { 1.0 };
        let dy = if ny > 1 { points[nx].y - first.y } else { 1.0 };
        if dx > 0.0 && dy > 0.0 {
            let grid = build_focus_grid(first, dx, dy, nx, ny)?;
            let scale = dx.min(dy);
            if grid.points().iter().zip(&points).all(|(a, b)| (a - b).norm() <= 1e-9 * scale) {
                return Ok(grid);
            }
        }
    }
    Ok(FocusGrid::from_points(points)?)
}

pub fn read_map(path: &Path) -> Result<LoadedMap> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: missing column {name}", path.display())))
    };
    let (cx, cy, cz, cre, cim) = (column("x")?, column("y")?, column("z")?, column("re_value")?, column("im_value")?);
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| -> Result<f64> {
            record
                .get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("{}: bad value in data row {}", path.display(), row + 1)).into())
        };
        points.push(Point3::new(field(cx)?, field(cy)?, field(cz)?));
        values.push(Complex64::new(field(cre)?, field(cim)?));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: map has no rows", path.display())).into());
    }
    let frequency_hz = header_value(&text, "band:").and_then(band_hz).unwrap_or(f64::NAN);
    let mut map = SourceMap::new(
        rebuild_grid(points)?,
        BandDescriptor::Bin {
            omega: 2.0 * PI * frequency_hz,
        },
        values,
        header_value(&text, "weighting:").unwrap_or("unknown").to_string(),
        header_value(&text, "mask:").unwrap_or("unknown").to_string(),
    )?;
    map.block_count = header_value(&text, "blocks:").and_then(|v| v.parse().ok());
    Ok(LoadedMap { map, frequency_hz })
}
