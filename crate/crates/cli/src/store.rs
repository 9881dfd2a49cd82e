//! Frame files: raw little-endian f64 with a plain-text header alongside.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use sha2::{Digest, Sha256};

use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}")
}

/// Writes `<dir>/<name>.bin` and `<dir>/<name>.hdr`; returns the `.bin` path.
pub fn write_frame(dir: &Path, name: &str, dims: &[usize], frame: usize, data: &DVector<f64>) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let bin = dir.join(format!("{name}.bin"));
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| io_err(&bin, e))?;
    let dims_txt: Vec<String> = dims.iter().map(usize::to_string).collect();
    let hdr = format!(
        "dims = {}\ndtype = f64le\norder = row-major\nframe = {frame}\n",
        dims_txt.join(" ")
    );
    let hdr_path = dir.join(format!("{name}.hdr"));
    fs::write(&hdr_path, hdr).map_err(|e| io_err(&hdr_path, e))?;
    Ok(bin)
}

pub struct Header {
    pub dims: Vec<usize>,
    pub frame: usize,
}

pub fn read_header(path: &Path) -> Result<Header, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut dims = None;
    let mut frame = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match (k.trim(), v.trim()) {
            ("dims", v) => {
                dims = Some(
                    v.split_whitespace()
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| CliError::Io(format!("{}: bad dims line", path.display())))?,
                )
            }
            ("dtype", "f64le") | ("order", "row-major") => {}
            ("dtype", other) | ("order", other) => {
                return Err(CliError::Io(format!("{}: unsupported value '{other}'", path.display())))
            }
            ("frame", v) => frame = v.parse().ok(),
            _ => {}
        }
    }
    match (dims, frame) {
        (Some(dims), Some(frame)) => Ok(Header { dims, frame }),
        _ => Err(CliError::Io(format!("{}: incomplete header", path.display()))),
    }
}

/// Reads a frame written by [`write_frame`], checking its header.
pub fn read_frame(dir: &Path, name: &str) -> Result<(Header, DVector<f64>), CliError> {
    let header = read_header(&dir.join(format!("{name}.hdr")))?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(|e| io_err(&bin, e))?;
    let expected: usize = header.dims.iter().product();
    if bytes.len() != expected * 8 {
        return Err(CliError::Config(format!(
            "{}: header promises {expected} values but the file holds {} bytes",
            bin.display(),
            bytes.len()
        )));
    }
    let data = DVector::from_iterator(
        expected,
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
    );
    Ok((header, data))
}

/// 8-bit greyscale PGM scaled to the frame's own range.
pub fn write_pgm(path: &Path, n_x: usize, n_y: usize, data: &DVector<f64>) -> Result<(), CliError> {
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{n_y} {n_x}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_str(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
