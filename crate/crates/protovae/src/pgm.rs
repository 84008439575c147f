//! Binary PGM (P5) emission and ingestion for grayscale images and
//! relevance maps, plus raw CSV export of map values.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// (height, width) of a grayscale tensor shaped (H, W), (1, H, W) or
/// (1, 1, H, W).
fn plane_dims<F: Element>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        [1, 1, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidArgument {
            op: "pgm",
            message: format!("expected a single grayscale plane, got shape {other:?}"),
        }),
    }
}

fn write_p5(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    let io = |e: std::io::Error| Error::io(&display, e);
    write!(w, "P5\n{width} {height}\n255\n").map_err(io)?;
    w.write_all(bytes).map_err(io)?;
    w.flush().map_err(io)
}

/// Writes values in [-1, 1] with the fixed affine map to [0, 255].
pub fn write_pgm_fixed<F: Element>(path: impl AsRef<Path>, image: &Tensor<F>) -> Result<()> {
    let (h, w) = plane_dims(image)?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (255.0 * (v.to_f64() + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_p5(path.as_ref(), w, h, &bytes)
}

/// Writes with a per-map affine rescale: min → 0, max → 255. A constant
/// map renders as all zeros.
pub fn write_pgm_autoscale<F: Element>(path: impl AsRef<Path>, map: &Tensor<F>) -> Result<()> {
    let (h, w) = plane_dims(map)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.data() {
        let v = v.to_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| {
            if range == 0.0 {
                0
            } else {
                (255.0 * (v.to_f64() - lo) / range).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    write_p5(path.as_ref(), w, h, &bytes)
}

/// Reads a binary P5 file into a (1, 1, H, W) tensor normalized to [-1, 1].
pub fn read_pgm<F: Element>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&display, e))?;
    let bad = |message: &str| Error::InvalidArgument {
        op: "read_pgm",
        message: format!("{display}: {message}"),
    };
    if !raw.starts_with(b"P5") {
        return Err(bad("not a binary PGM (P5) file"));
    }
    // header: magic, width, height, maxval, separated by whitespace and
    // optional comment lines
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let field = std::str::from_utf8(&raw[start..pos]).map_err(|_| bad("non-ASCII header"))?;
        fields.push(
            field
                .parse::<usize>()
                .map_err(|_| bad("malformed header field"))?,
        );
    }
    if fields.len() != 3 {
        return Err(bad("incomplete header"));
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + width * height {
        return Err(bad("truncated pixel data"));
    }
    let data: Vec<F> = raw[pos..pos + width * height]
        .iter()
        .map(|&b| F::from_f64(2.0 * b as f64 / 255.0 - 1.0))
        .collect();
    Tensor::new(vec![1, 1, height, width], data)
}

/// Tiles equally-sized grayscale images into a rows×cols grid.
pub fn montage<F: Element>(images: &[Tensor<F>], cols: usize) -> Result<Tensor<F>> {
    if images.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument {
            op: "montage",
            message: "need at least one image and one column".into(),
        });
    }
    let (h, w) = plane_dims(&images[0])?;
    let rows = images.len().div_ceil(cols);
    let mut out = Tensor::zeros(vec![rows * h, cols * w]);
    for (i, img) in images.iter().enumerate() {
        let (ih, iw) = plane_dims(img)?;
        if (ih, iw) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "montage",
                dim: 0,
                expected: h,
                got: ih,
            });
        }
        let (r, c) = (i / cols, i % cols);
        for y in 0..h {
            let src = &img.data()[y * w..(y + 1) * w];
            let base = (r * h + y) * cols * w + c * w;
            out.data_mut()[base..base + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Raw float CSV of a (H, W) map, one row per image row.
pub fn write_map_csv<F: Element>(path: impl AsRef<Path>, map: &Tensor<F>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let (h, w) = plane_dims(map)?;
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    let io = |e: std::io::Error| Error::io(&display, e);
    for y in 0..h {
        let row = &map.data()[y * w..(y + 1) * w];
        let line = row
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor;

    #[test]
    fn fixed_scale_round_trips_through_p5() {
        let dir = tempfile::tempdir().unwrap();
        let img = tensor(&[2, 2], &[-1.0f64, 1.0, 0.0, 0.5]);
        let path = dir.path().join("img.pgm");
        write_pgm_fixed(&path, &img).unwrap();
        let back = read_pgm::<f64>(&path).unwrap();
        assert_eq!(back.shape(), &[1, 1, 2, 2]);
        for (a, b) in back.data().iter().zip(img.data().iter()) {
            assert!((a - b).abs() < 1.1 / 255.0);
        }
        // writing twice is byte-identical
        let p2 = dir.path().join("img2.pgm");
        write_pgm_fixed(&p2, &img).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }

    #[test]
    fn autoscale_maps_min_to_zero_and_max_to_255() {
        let dir = tempfile::tempdir().unwrap();
        let map = tensor(&[1, 3], &[-5.0f64, 0.0, 5.0]);
        let path = dir.path().join("map.pgm");
        write_pgm_autoscale(&path, &map).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let pixels = &raw[raw.len() - 3..];
        assert_eq!(pixels, &[0, 128, 255]);

        let flat = tensor(&[1, 2], &[3.0f64, 3.0]);
        let p2 = dir.path().join("flat.pgm");
        write_pgm_autoscale(&p2, &flat).unwrap();
        let raw = std::fs::read(&p2).unwrap();
        assert_eq!(&raw[raw.len() - 2..], &[0, 0]);
    }

    #[test]
    fn montage_tiles_in_row_major_order() {
        let a = tensor(&[1, 1], &[1.0f64]);
        let b = tensor(&[1, 1], &[2.0f64]);
        let c = tensor(&[1, 1], &[3.0f64]);
        let m = montage(&[a, b, c], 2).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn map_csv_contains_exact_floats() {
        let dir = tempfile::tempdir().unwrap();
        let map = tensor(&[2, 2], &[0.125f64, -3.5, 1e-7, 2.0]);
        let path = dir.path().join("map.csv");
        write_map_csv(&path, &map).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0.125,-3.5\n0.0000001,2\n");
    }
}
