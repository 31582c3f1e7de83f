//! Writers for (3, H, W) tensors with values in [0, 1] as 8-bit PNG or binary PPM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB bytes, rounding and clamping each value.
pub fn to_rgb8(image: &Tensor) -> Result<(u32, u32, Vec<u8>)> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        &[1, c, h, w] => (c, h, w),
        other => {
            return Err(Error::Rank {
                op: "to_rgb8",
                expected: 3,
                actual: other.to_vec(),
            })
        }
    };
    if c != 3 && c != 1 {
        return Err(Error::Input(format!("image with {c} channels; expected 1 or 3")));
    }
    let plane = h * w;
    let data = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let v = data[(ch % c) * plane + i];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w as u32, h as u32, out))
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, bytes) = to_rgb8(image)?;
    image::save_buffer(path, &bytes, w, h, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (w, h, bytes) = to_rgb8(image)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write!(file, "P6\n{w} {h}\n255\n")
        .and_then(|_| file.write_all(&bytes))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 1, 2], |i| [0.0, 1.0, 0.5, 0.5, 1.0, 0.0][i]);
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255, 128, 0]);
    }

    #[test]
    fn png_round_trips_through_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 4, 4], |i| (i % 5) as f32 / 4.0);
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (4, 4));
        assert_eq!(back.into_raw(), to_rgb8(&img).unwrap().2);
    }
}
