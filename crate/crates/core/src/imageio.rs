//! PGM images, raw float maps and on-disk sample sets.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synth::SemSample;

pub const MANIFEST: &str = "manifest.csv";

fn data_err<T>(path: &Path, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Data(format!("{}: {msg}", path.display())))
}

/// Encodes `[H × W]` values in `[0, 1]` as binary PGM with maxval 255.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 2 {
        return crate::error::shape_err(format!("PGM needs a rank-2 image, got {:?}", img.shape()));
    }
    let (h, w) = (img.rows(), img.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Decodes a binary (P5) PGM with maxval ≤ 255 into values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic `{}`", fields[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| format!("bad header field `{s}`: {e}"))
    };
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported geometry {w}×{h} maxval {maxval}"));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + w * h).ok_or("pixel data truncated")?;
    let data = pixels.iter().map(|&b| b as f32 / maxval as f32).collect();
    Tensor::new(vec![h, w], data).map_err(|e| e.to_string())
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes).or_else(|e| data_err(path, e))
}

/// Min-max normalized 8-bit heatmap. A constant map becomes all zeros.
pub fn heatmap(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// `{u32 H, u32 W}` little-endian header followed by `H·W` f32 values.
pub fn encode_raw_map(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return crate::error::shape_err(format!("map must be rank 2, got {:?}", map.shape()));
    }
    let mut out = Vec::with_capacity(8 + 4 * map.len());
    out.extend((map.rows() as u32).to_le_bytes());
    out.extend((map.cols() as u32).to_le_bytes());
    for v in map.data() {
        out.extend(v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw_map(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 {
        return Err("missing header".into());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(format!(
            "expected {} payload bytes, found {}",
            4 * h * w,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![h, w], data).map_err(|e| e.to_string())
}

/// Writes `<stem>.f32` and `<stem>.pgm` next to each other.
pub fn write_map_pair(stem: &Path, map: &Tensor) -> Result<()> {
    fs::write(stem.with_extension("f32"), encode_raw_map(map)?)?;
    write_pgm(&stem.with_extension("pgm"), &heatmap(map))
}

/// A sample read back from disk together with its file stem.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedSample {
    pub name: String,
    pub sample: SemSample,
}

pub fn sample_name(index: usize, class: &str) -> String {
    format!("{index:04}_{class}")
}

/// Writes images, masks and `manifest.csv` into `dir`.
pub fn write_samples(dir: &Path, samples: &[SemSample], classes: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join(MANIFEST))?;
    writeln!(manifest, "file,label,seed")?;
    for (i, s) in samples.iter().enumerate() {
        let class = classes.get(s.label).ok_or_else(|| {
            Error::Data(format!(
                "sample {i} has label {} outside the class list",
                s.label
            ))
        })?;
        let name = sample_name(i, class);
        write_pgm(&dir.join(format!("{name}.pgm")), &s.image)?;
        write_pgm(&dir.join(format!("{name}.mask.pgm")), &s.mask)?;
        writeln!(manifest, "{name}.pgm,{class},{}", s.seed)?;
    }
    Ok(())
}

/// Reads a directory written by [`write_samples`]. Labels are resolved
/// against `classes`; unknown labels are a data error.
pub fn read_samples(dir: &Path, classes: &[String]) -> Result<Vec<NamedSample>> {
    let path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("file,label,seed") {
        return data_err(&path, "expected header `file,label,seed`");
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.trim().split(',').collect();
        let [file, label, seed] = cols[..] else {
            return data_err(&path, format!("line {}: expected 3 columns", n + 2));
        };
        let label_idx = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Data(format!("{}: unknown class `{label}`", path.display())))?;
        let seed = seed
            .parse::<u64>()
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), n + 2)))?;
        let name = file.strip_suffix(".pgm").unwrap_or(file).to_string();
        let image = read_pgm(&dir.join(file)).map_err(missing_as_data)?;
        let mask = read_pgm(&dir.join(format!("{name}.mask.pgm")))
            .map_err(missing_as_data)?
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        if image.shape() != mask.shape() {
            return data_err(&path, format!("{name}: image and mask sizes differ"));
        }
        out.push(NamedSample {
            name,
            sample: SemSample {
                image,
                mask,
                label: label_idx,
                seed,
            },
        });
    }
    if out.is_empty() {
        return data_err(&path, "no samples");
    }
    Ok(out)
}

/// Class names listed in a manifest, in first-seen order.
pub fn manifest_classes(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut seen = Vec::new();
    for line in text.lines().skip(1) {
        if let Some(label) = line.split(',').nth(1) {
            if !seen.iter().any(|s: &String| s == label) {
                seen.push(label.to_string());
            }
        }
    }
    Ok(seen)
}

fn missing_as_data(e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Data(io.to_string()),
        other => other,
    }
}
