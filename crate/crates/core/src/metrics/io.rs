use std::fmt::Write as _;
use std::path::Path;

use image::{ImageBuffer, Luma};

use super::instance::InstanceMap;
use crate::error::{Error, Result};

/// Writes ids as a single-channel 16-bit PNG.
pub fn write_png16(map: &InstanceMap, path: &Path) -> Result<()> {
    let mut px = Vec::with_capacity(map.labels.len());
    for &l in &map.labels {
        px.push(u16::try_from(l).map_err(|_| Error::invalid(format!("id {l} does not fit 16 bits")))?);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(map.width as u32, map.height as u32, px)
        .ok_or_else(|| Error::shape("label buffer does not match dimensions"))?;
    img.save(path)?;
    Ok(())
}

pub fn read_png16(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    InstanceMap::new(w as usize, h as usize, img.into_raw().into_iter().map(u32::from).collect())
}

/// Text form: a `width height` line, then one line per row of `id:start+len` runs
/// (background omitted) separated by commas.
pub fn encode_rle(map: &InstanceMap) -> String {
    let mut out = format!("{} {}\n", map.width, map.height);
    for y in 0..map.height {
        let row = &map.labels[y * map.width..(y + 1) * map.width];
        let mut runs = Vec::new();
        let mut x = 0;
        while x < row.len() {
            let id = row[x];
            let start = x;
            while x < row.len() && row[x] == id {
                x += 1;
            }
            if id != 0 {
                runs.push((id, start, x - start));
            }
        }
        for (i, (id, s, l)) in runs.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{id}:{s}+{l}");
        }
        out.push('\n');
    }
    out
}

pub fn decode_rle(text: &str) -> Result<InstanceMap> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty RLE document".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad RLE header `{header}`"))))
        .collect::<Result<_>>()?;
    let [w, h] = dims[..] else {
        return Err(Error::Parse(format!("bad RLE header `{header}`")));
    };
    let mut map = InstanceMap::empty(w, h);
    for y in 0..h {
        let line = lines.next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        for run in line.split(',') {
            let bad = || Error::Parse(format!("bad run `{run}` in row {y}"));
            let (id, rest) = run.split_once(':').ok_or_else(bad)?;
            let (start, len) = rest.split_once('+').ok_or_else(bad)?;
            let id: u32 = id.trim().parse().map_err(|_| bad())?;
            let start: usize = start.trim().parse().map_err(|_| bad())?;
            let len: usize = len.trim().parse().map_err(|_| bad())?;
            if start + len > w {
                return Err(bad());
            }
            map.labels[y * w + start..y * w + start + len].fill(id);
        }
    }
    Ok(map)
}

/// Reads a `.png` (16-bit ids) or `.rle` instance map.
pub fn read_instance_map(path: &Path) -> Result<InstanceMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rle") | Some("txt") => {
            let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            decode_rle(&s)
        }
        _ => read_png16(path),
    }
}

pub fn write_instance_map(map: &InstanceMap, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rle") | Some("txt") => std::fs::write(path, encode_rle(map)).map_err(|e| Error::io(path, e)),
        _ => write_png16(map, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> InstanceMap {
        InstanceMap::new(5, 3, vec![0, 1, 1, 0, 2, 3, 3, 3, 3, 3, 0, 0, 0, 0, 0]).unwrap()
    }

    #[test]
    fn rle_text_form() {
        let s = encode_rle(&sample());
        assert_eq!(s, "5 3\n1:1+2,2:4+1\n3:0+5\n\n");
        assert_eq!(decode_rle(&s).unwrap(), sample());
    }

    #[test]
    fn rle_rejects_overrun() {
        assert!(decode_rle("2 1\n1:1+5\n").is_err());
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample();
        m.labels[0] = 40000;
        let p = dir.path().join("m.png");
        write_png16(&m, &p).unwrap();
        assert_eq!(read_png16(&p).unwrap(), m);
    }
}
