//! Volume (text header + little-endian f32 payload + mask bytes), binary PGM
//! frames, and sequence directories.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Frame, FrameGeometry, GridSpec, Sequence, Volume};
use crate::error::{parse_err, Result};
use crate::geometry::{read_poses_csv, write_poses_csv, RelativeParams};

pub fn write_volume<W: Write>(mut w: W, v: &Volume) -> Result<()> {
    let g = v.grid();
    writeln!(w, "dims: {} {} {}", g.dims[0], g.dims[1], g.dims[2])?;
    writeln!(
        w,
        "spacing: {} {} {}",
        g.spacing[0], g.spacing[1], g.spacing[2]
    )?;
    writeln!(w, "origin: {} {} {}", g.origin[0], g.origin[1], g.origin[2])?;
    writeln!(w, "dtype: f32le")?;
    writeln!(w)?;
    let mut payload = Vec::with_capacity(v.values().len() * 4);
    for &x in v.values() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    let mask: Vec<u8> = v.mask().iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    Ok(())
}

fn parse_triple<T: std::str::FromStr>(line: &str, key: &str) -> Result<[T; 3]>
where
    T::Err: std::fmt::Display,
{
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| parse_err("volume header", format!("expected '{key}:', got '{line}'")))?;
    let vals = rest
        .split_whitespace()
        .map(|t| {
            t.parse::<T>()
                .map_err(|e| parse_err("volume header", format!("{key}: {e}")))
        })
        .collect::<Result<Vec<T>>>()?;
    <[T; 3]>::try_from(vals)
        .map_err(|_| parse_err("volume header", format!("{key} needs three values")))
}

pub fn read_volume<R: Read>(r: R) -> Result<Volume> {
    let mut r = BufReader::new(r);
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(parse_err(
                "volume header",
                "missing blank line after header",
            ));
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        header.push(line);
    }
    if header.len() != 4 {
        return Err(parse_err(
            "volume header",
            "expected dims, spacing, origin, dtype",
        ));
    }
    let dims: [usize; 3] = parse_triple(&header[0], "dims")?;
    let spacing: [f64; 3] = parse_triple(&header[1], "spacing")?;
    let origin: [f64; 3] = parse_triple(&header[2], "origin")?;
    if header[3].trim() != "dtype: f32le" {
        return Err(parse_err(
            "volume header",
            format!("unsupported {}", header[3]),
        ));
    }
    let grid = GridSpec::new(dims, spacing, origin)?;
    let n = grid.len();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let mut mask_bytes = vec![0u8; n];
    r.read_exact(&mut mask_bytes)?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mask = mask_bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(parse_err("volume mask", format!("byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::new(grid, values, mask)
}

fn quantize(g: f64) -> u8 {
    (g * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_frame_pgm<W: Write>(mut w: W, f: &Frame) -> Result<()> {
    let g = f.geometry();
    write!(w, "P5\n{} {}\n255\n", g.width, g.height)?;
    let bytes: Vec<u8> = f.values().iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM (maxval 255); `spacing` comes from the sequence geometry.
pub fn read_frame_pgm<R: Read>(r: R, spacing: f64) -> Result<Frame> {
    let mut data = Vec::new();
    BufReader::new(r).read_to_end(&mut data)?;
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err("pgm header", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if tokens[0] != "P5" {
        return Err(parse_err(
            "pgm header",
            format!("magic {} is not P5", tokens[0]),
        ));
    }
    let num = |t: &str| {
        t.parse::<usize>()
            .map_err(|e| parse_err("pgm header", format!("{t}: {e}")))
    };
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(parse_err(
            "pgm header",
            format!("maxval {maxval} unsupported"),
        ));
    }
    let raster = data
        .get(pos..pos + width * height)
        .ok_or_else(|| parse_err("pgm raster", "truncated pixel data"))?;
    let geometry = FrameGeometry::new(height, width, spacing)?;
    Frame::new(geometry, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

fn frame_file_name(i: usize) -> String {
    format!("frame_{i:04}.pgm")
}

/// Writes `frame_NNNN.pgm`, `geometry.txt` and, when present, `gt_relative.csv`.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames().iter().enumerate() {
        write_frame_pgm(
            BufWriter::new(File::create(dir.join(frame_file_name(i)))?),
            f,
        )?;
    }
    let g = seq.geometry();
    fs::write(
        dir.join("geometry.txt"),
        format!(
            "height: {}\nwidth: {}\nspacing: {}\n",
            g.height, g.width, g.spacing
        ),
    )?;
    if let Some(gt) = seq.ground_truth() {
        write_poses_csv(
            BufWriter::new(File::create(dir.join("gt_relative.csv"))?),
            gt.poses(),
        )?;
    }
    Ok(())
}

fn read_geometry(path: &Path) -> Result<FrameGeometry> {
    let text = fs::read_to_string(path)?;
    let mut height = None;
    let mut width = None;
    let mut spacing = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| parse_err("geometry.txt", format!("bad line '{line}'")))?;
        let v = v.trim();
        let bad = |e: String| parse_err("geometry.txt", format!("{}: {e}", k.trim()));
        match k.trim() {
            "height" => height = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "width" => width = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "spacing" => spacing = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            other => return Err(parse_err("geometry.txt", format!("unknown key '{other}'"))),
        }
    }
    match (height, width, spacing) {
        (Some(h), Some(w), Some(s)) => FrameGeometry::new(h, w, s),
        _ => Err(parse_err("geometry.txt", "needs height, width and spacing")),
    }
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let geometry = read_geometry(&dir.join("geometry.txt"))?;
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        let frame = read_frame_pgm(File::open(&path)?, geometry.spacing)?;
        frames.push(frame);
    }
    let gt_path = dir.join("gt_relative.csv");
    let gt = if gt_path.exists() {
        Some(RelativeParams::new(read_poses_csv(BufReader::new(
            File::open(gt_path)?,
        ))?))
    } else {
        None
    };
    Sequence::new(frames, geometry, gt)
}
