//! Binary netpbm reader/writer: P5 graymaps (the corpus format) plus P6
//! pixmaps, which are collapsed to grayscale by unweighted channel averaging.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read a binary PGM (P5) or PPM (P6) file into an HxW tensor scaled to
/// [0, 1]. Color input is averaged across channels. Maxval must fit one byte.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1usize,
        Some(b"P6") => 3usize,
        _ => return Err("not a binary PGM/PPM (bad magic)".into()),
    };
    let mut pos = 2;
    let mut header = [0usize; 3]; // width, height, maxval
    for slot in header.iter_mut() {
        *slot = next_header_int(bytes, &mut pos)?;
    }
    let [w, h, maxval] = header;
    if w == 0 || h == 0 {
        return Err(format!("degenerate image size {w}x{h}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err("missing raster separator".into());
    }
    pos += 1;
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("truncated raster: need {need} bytes"))?;
    let scale = 1.0 / (maxval as f64 * channels as f64);
    let data: Vec<f64> = raster
        .chunks_exact(channels)
        .map(|px| px.iter().map(|&b| b as f64).sum::<f64>() * scale)
        .collect();
    Tensor::new(vec![h, w], data).map_err(|e| e.to_string())
}

fn next_header_int(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    // Skip whitespace and '#' comment lines.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err("expected integer in header".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse::<usize>()
        .map_err(|e| e.to_string())
}

/// Write an HxW tensor with values in [0, 1] as a binary PGM (P5, maxval 255).
/// Values are quantized with round-to-nearest; out-of-range values saturate.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let [h, w] = image.dims2()?;
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("in-memory write");
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Tensor::new(vec![2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.33]).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Exact 8-bit values survive untouched.
        write_pgm(&path, &back).unwrap();
        let again = read_pnm(&path).unwrap();
        assert_eq!(back, again);
    }

    #[test]
    fn known_byte_scales_by_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pgm");
        fs::write(&path, [b"P5\n1 1\n255\n".as_slice(), &[128u8]].concat()).unwrap();
        let img = read_pnm(&path).unwrap();
        assert!((img.data()[0] - 128.0 / 255.0).abs() < 1e-12);

        fs::write(&path, [b"P5\n1 1\n100\n".as_slice(), &[50u8]].concat()).unwrap();
        let img = read_pnm(&path).unwrap();
        assert!((img.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ppm_averages_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        fs::write(
            &path,
            [b"P6\n1 1\n255\n".as_slice(), &[255u8, 0, 0]].concat(),
        )
        .unwrap();
        let img = read_pnm(&path).unwrap();
        assert!((img.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(
            &path,
            [
                b"P5\n# gimp was here\n2 1\n# again\n255\n".as_slice(),
                &[0u8, 255],
            ]
            .concat(),
        )
        .unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(img.shape(), &[1, 2]);
        assert_eq!(img.data()[1], 1.0);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        assert!(matches!(read_pnm(&path), Err(Error::Format(_))));
        fs::write(&path, [b"P5\n4 4\n255\n".as_slice(), &[0u8; 3]].concat()).unwrap();
        assert!(matches!(read_pnm(&path), Err(Error::Format(_))));
        assert!(matches!(
            read_pnm(&dir.path().join("missing.pgm")),
            Err(Error::Io { .. })
        ));
    }
}
