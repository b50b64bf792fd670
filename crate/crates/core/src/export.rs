//! Image and table writers: binary PPM for rendered scenes, ASCII PGM for
//! heatmaps, plain CSV for matrices.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::visenc::ImageTensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary `P6` encoding of a 3-channel image with values in `[0, 1]`.
pub fn ppm_bytes(image: &ImageTensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "PPM needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(image.at(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    fs::write(path, ppm_bytes(image)?)?;
    Ok(())
}

/// ASCII `P2` encoding of a 2-D tensor. `lo..hi` maps linearly onto
/// `0..255`; values outside are clamped. Comment lines go after the magic.
pub fn pgm_string(values: &Tensor, lo: f64, hi: f64, comments: &[String]) -> Result<String> {
    if values.rank() != 2 {
        return Err(Error::Shape(format!("PGM needs a matrix, got {:?}", values.shape())));
    }
    if !(hi > lo) {
        return Err(Error::Parameter(format!("empty PGM range [{lo}, {hi}]")));
    }
    let (rows, cols) = (values.rows(), values.cols());
    let mut s = String::from("P2\n");
    for c in comments {
        let _ = writeln!(s, "# {c}");
    }
    let _ = writeln!(s, "{cols} {rows}\n255");
    for r in 0..rows {
        let line: Vec<String> = values
            .row(r)
            .iter()
            .map(|&v| to_byte((v - lo) / (hi - lo)).to_string())
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    Ok(s)
}

pub fn write_pgm(path: &Path, values: &Tensor, lo: f64, hi: f64, comments: &[String]) -> Result<()> {
    fs::write(path, pgm_string(values, lo, hi, comments)?)?;
    Ok(())
}

/// One CSV row per matrix row, values in shortest round-trip form.
/// `header` lines are written first, verbatim.
pub fn matrix_csv(values: &Tensor, header: Option<&str>) -> Result<String> {
    if values.rank() != 2 {
        return Err(Error::Shape(format!("CSV needs a matrix, got {:?}", values.shape())));
    }
    let mut s = String::new();
    if let Some(h) = header {
        let _ = writeln!(s, "{h}");
    }
    for r in 0..values.rows() {
        let line: Vec<String> = values.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let img = ImageTensor::new(3, 2, 3, vec![1.0; 18]).unwrap();
        let b = ppm_bytes(&img).unwrap();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 18);
        assert!(b[11..].iter().all(|&v| v == 255));
    }

    #[test]
    fn pgm_maps_range_linearly() {
        let t = Tensor::from_rows(&[vec![-1.0, 0.0, 1.0]]);
        let s = pgm_string(&t, -1.0, 1.0, &["k v".into()]).unwrap();
        assert_eq!(s, "P2\n# k v\n3 1\n255\n0 128 255\n");
    }

    #[test]
    fn csv_rows() {
        let t = Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, -3.0]]);
        assert_eq!(matrix_csv(&t, Some("# h")).unwrap(), "# h\n0.5,1\n2,-3\n");
    }
}
