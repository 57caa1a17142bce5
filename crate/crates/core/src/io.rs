//! AAIM binary containers and CSV tables.
//!
//! All binary fields are little-endian. A block-sample file holds
//! `"AAIM" | version u32 | M u32 | J u32 | F u32 | F × f64 Hz | J·M·F × (re, im) f64`
//! ordered block, microphone, frequency. A matrix file drops `J` and stores
//! `F·M·M` complex values row-major per frequency. A covariance file is a matrix
//! file for dimension `M²` whose header is followed by one method tag byte.
//! Frequencies are written in Hz and converted to and from rad/s.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::beamforming::SourceMap;
use crate::covariance::CovarianceMethod;
use crate::error::{Error, Result};
use crate::linalg::CMat;
use crate::spectra::BlockSamples;

pub const MAGIC: &[u8; 4] = b"AAIM";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + done as u64,
                        message: format!("file truncated while reading {what}"),
                    })
                }
                Ok(k) => done += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::Io(e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn complex(&mut self, what: &str) -> Result<Complex64> {
        let re = self.f64(what)?;
        let im = self.f64(what)?;
        Ok(Complex64::new(re, im))
    }

    fn header(&mut self) -> Result<()> {
        let mut magic = [0u8; 4];
        self.fill(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"AAIM\""),
            });
        }
        let at = self.offset;
        let version = self.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: at,
                message: format!("unsupported format version {version}"),
            });
        }
        Ok(())
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let at = self.offset;
        let v = self.u32(what)?;
        if v == 0 {
            return Err(Error::Format {
                offset: at,
                message: format!("{what} must be positive"),
            });
        }
        Ok(v as usize)
    }

    fn frequencies(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count)
            .map(|_| {
                let at = self.offset;
                let hz = self.f64("frequency")?;
                if !hz.is_finite() || hz < 0.0 {
                    return Err(Error::Format {
                        offset: at,
                        message: format!("invalid frequency {hz}"),
                    });
                }
                Ok(2.0 * PI * hz)
            })
            .collect()
    }

    fn complexes(&mut self, count: usize, what: &str) -> Result<Vec<Complex64>> {
        let mut out = Vec::with_capacity(count.min(1 << 22));
        for _ in 0..count {
            out.push(self.complex(what)?);
        }
        Ok(out)
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format {
                offset: self.offset,
                message: "unexpected trailing data".into(),
            }),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

fn checked_product(parts: &[usize], offset: u64) -> Result<usize> {
    parts.iter().try_fold(1usize, |acc, &p| acc.checked_mul(p)).ok_or(Error::Format {
        offset,
        message: "declared sizes overflow".into(),
    })
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit the file format")))
}

fn write_header<W: Write>(w: &mut W, counts: &[(usize, &str)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for &(v, what) in counts {
        w.write_all(&u32_field(v, what)?)?;
    }
    Ok(())
}

fn write_frequencies<W: Write>(w: &mut W, freqs: &[f64]) -> Result<()> {
    for &omega in freqs {
        w.write_all(&(omega / (2.0 * PI)).to_le_bytes())?;
    }
    Ok(())
}

fn write_complex<W: Write>(w: &mut W, z: Complex64) -> Result<()> {
    w.write_all(&z.re.to_le_bytes())?;
    w.write_all(&z.im.to_le_bytes())?;
    Ok(())
}

pub fn write_blocks<W: Write>(mut w: W, blocks: &BlockSamples) -> Result<()> {
    write_header(
        &mut w,
        &[
            (blocks.n_mics(), "microphone count"),
            (blocks.n_blocks(), "block count"),
            (blocks.n_freqs(), "frequency count"),
        ],
    )?;
    write_frequencies(&mut w, blocks.freqs())?;
    for &z in blocks.raw() {
        write_complex(&mut w, z)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_blocks<R: Read>(r: R) -> Result<BlockSamples> {
    let mut rd = Reader::new(r);
    rd.header()?;
    let m = rd.count("microphone count")?;
    let j = rd.count("block count")?;
    let f = rd.count("frequency count")?;
    let total = checked_product(&[m, j, f], rd.offset)?;
    let freqs = rd.frequencies(f)?;
    let data = rd.complexes(total, "block samples")?;
    rd.expect_end()?;
    BlockSamples::new(freqs, m, j, data)
}

fn write_matrix_payload<W: Write>(w: &mut W, mats: &[CMat]) -> Result<()> {
    for a in mats {
        for i in 0..a.nrows() {
            for k in 0..a.ncols() {
                write_complex(w, a[(i, k)])?;
            }
        }
    }
    Ok(())
}

fn check_matrices(freqs: &[f64], mats: &[CMat]) -> Result<usize> {
    if freqs.len() != mats.len() {
        return Err(Error::DimensionMismatch {
            expected: freqs.len(),
            got: mats.len(),
        });
    }
    let n = mats.first().map_or(0, |a| a.nrows());
    if n == 0 {
        return Err(Error::InvalidArgument("no matrices to write".into()));
    }
    if let Some(bad) = mats.iter().find(|a| a.nrows() != n || a.ncols() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: bad.nrows().max(bad.ncols()),
        });
    }
    Ok(n)
}

/// Writes one square matrix per frequency (CSM or PCSM).
pub fn write_matrices<W: Write>(mut w: W, freqs: &[f64], mats: &[CMat]) -> Result<()> {
    let n = check_matrices(freqs, mats)?;
    write_header(&mut w, &[(n, "matrix dimension"), (freqs.len(), "frequency count")])?;
    write_frequencies(&mut w, freqs)?;
    write_matrix_payload(&mut w, mats)?;
    w.flush()?;
    Ok(())
}

fn read_matrix_payload<R: Read>(rd: &mut Reader<R>, n: usize, f: usize) -> Result<Vec<CMat>> {
    checked_product(&[n, n, f], rd.offset)?;
    (0..f)
        .map(|_| {
            let values = rd.complexes(n * n, "matrix entries")?;
            Ok(CMat::from_row_slice(n, n, &values))
        })
        .collect()
}

pub fn read_matrices<R: Read>(r: R) -> Result<(Vec<f64>, Vec<CMat>)> {
    let mut rd = Reader::new(r);
    rd.header()?;
    let n = rd.count("matrix dimension")?;
    let f = rd.count("frequency count")?;
    let freqs = rd.frequencies(f)?;
    let mats = read_matrix_payload(&mut rd, n, f)?;
    rd.expect_end()?;
    Ok((freqs, mats))
}

/// Writes the covariance of the averaged CSM per frequency.
pub fn write_covariance<W: Write>(mut w: W, freqs: &[f64], method: CovarianceMethod, sigmas: &[CMat]) -> Result<()> {
    let n = check_matrices(freqs, sigmas)?;
    write_header(&mut w, &[(n, "covariance dimension"), (freqs.len(), "frequency count")])?;
    w.write_all(&[method.tag()])?;
    write_frequencies(&mut w, freqs)?;
    write_matrix_payload(&mut w, sigmas)?;
    w.flush()?;
    Ok(())
}

pub fn read_covariance<R: Read>(r: R) -> Result<(Vec<f64>, CovarianceMethod, Vec<CMat>)> {
    let mut rd = Reader::new(r);
    rd.header()?;
    let n = rd.count("covariance dimension")?;
    let f = rd.count("frequency count")?;
    let at = rd.offset;
    let tag = rd.u8("method tag")?;
    let method = CovarianceMethod::from_tag(tag).ok_or(Error::Format {
        offset: at,
        message: format!("unknown covariance method tag {tag}"),
    })?;
    let freqs = rd.frequencies(f)?;
    let mats = read_matrix_payload(&mut rd, n, f)?;
    rd.expect_end()?;
    Ok((freqs, method, mats))
}

pub fn save_blocks(path: impl AsRef<Path>, blocks: &BlockSamples) -> Result<()> {
    write_blocks(BufWriter::new(File::create(path)?), blocks)
}

pub fn load_blocks(path: impl AsRef<Path>) -> Result<BlockSamples> {
    read_blocks(BufReader::new(File::open(path)?))
}

pub fn save_matrices(path: impl AsRef<Path>, freqs: &[f64], mats: &[CMat]) -> Result<()> {
    write_matrices(BufWriter::new(File::create(path)?), freqs, mats)
}

pub fn load_matrices(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<CMat>)> {
    read_matrices(BufReader::new(File::open(path)?))
}

pub fn save_covariance(path: impl AsRef<Path>, freqs: &[f64], method: CovarianceMethod, sigmas: &[CMat]) -> Result<()> {
    write_covariance(BufWriter::new(File::create(path)?), freqs, method, sigmas)
}

pub fn load_covariance(path: impl AsRef<Path>) -> Result<(Vec<f64>, CovarianceMethod, Vec<CMat>)> {
    read_covariance(BufReader::new(File::open(path)?))
}

fn map_header<W: Write>(w: &mut W, map: &SourceMap) -> Result<()> {
    writeln!(w, "# weighting: {}", map.weighting)?;
    writeln!(w, "# mask: {}", map.mask)?;
    writeln!(w, "# band: {}", map.band.describe())?;
    match map.block_count {
        Some(j) => writeln!(w, "# blocks: {j}")?,
        None => writeln!(w, "# blocks: unknown")?,
    }
    writeln!(w, "# time convention: exp(+i omega t)")?;
    Ok(())
}

/// Source map as CSV with columns `x,y,z,re_value,im_value,power,power_db`.
pub fn write_source_map_csv<W: Write>(mut w: W, map: &SourceMap) -> Result<()> {
    map_header(&mut w, map)?;
    writeln!(w, "x,y,z,re_value,im_value,power,power_db")?;
    let db = map.powers_db();
    for (n, p) in map.grid.points().iter().enumerate() {
        let v = map.values[n];
        writeln!(w, "{},{},{},{},{},{},{}", p.x, p.y, p.z, v.re, v.im, map.powers[n], db[n])?;
    }
    w.flush()?;
    Ok(())
}

/// Source map CSV with an extra column `q` holding the deconvolved powers.
pub fn write_damas_csv<W: Write>(mut w: W, map: &SourceMap, q: &[f64], alpha: f64) -> Result<()> {
    if q.len() != map.len() {
        return Err(Error::DimensionMismatch {
            expected: map.len(),
            got: q.len(),
        });
    }
    map_header(&mut w, map)?;
    writeln!(w, "# alpha: {alpha}")?;
    writeln!(w, "x,y,z,re_value,im_value,power,power_db,q")?;
    let db = map.powers_db();
    for (n, p) in map.grid.points().iter().enumerate() {
        let v = map.values[n];
        writeln!(w, "{},{},{},{},{},{},{},{}", p.x, p.y, p.z, v.re, v.im, map.powers[n], db[n], q[n])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a long-format report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub frequency_hz: f64,
    pub label: String,
    pub metric: String,
    pub value: f64,
    pub flags: String,
}

/// Writes `frequency_hz,label,metric,value,flags` rows.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "frequency_hz,label,metric,value,flags")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.frequency_hz, r.label, r.metric, r.value, r.flags)?;
    }
    w.flush()?;
    Ok(())
}
