//! Binary PGM (P5) export for human inspection of masks and gray images.

use crate::error::Result;
use crate::map::BinaryMask;
use crate::scalar::Scalar;
use ndarray::ArrayView2;
use std::io::Write;
use std::path::Path;

/// Write one 8-bit grayscale image as binary PGM.
pub fn pgm_write<W: Write>(w: &mut W, img: ArrayView2<u8>) -> Result<()> {
    let (h, wd) = img.dim();
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = img.iter().copied().collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Save one 8-bit grayscale image to `path`.
pub fn pgm_save<P: AsRef<Path>>(path: P, img: ArrayView2<u8>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    pgm_write(&mut f, img)
}

/// Save real values in `[0, 1]` as an 8-bit grayscale image (linear map to
/// 0..=255 with rounding; values outside the range are clipped).
pub fn pgm_save_unit<S: Scalar, P: AsRef<Path>>(path: P, img: ArrayView2<S>) -> Result<()> {
    let bytes = img.map(|&v| {
        let x = v.as_f64().clamp(0.0, 1.0);
        (x * 255.0).round() as u8
    });
    pgm_save(path, bytes.view())
}

/// Export an `(H, W, C)` mask as one PGM per channel, named
/// `<stem>_c<k>.pgm`, with mask value 1 rendered white.
pub fn pgm_export_mask<P: AsRef<Path>>(stem: P, mask: &BinaryMask) -> Result<Vec<std::path::PathBuf>> {
    let stem = stem.as_ref();
    let (_, _, c) = mask.shape();
    let mut paths = Vec::with_capacity(c);
    for chan in 0..c {
        let plane = mask.data().index_axis(ndarray::Axis(2), chan);
        let bytes = plane.map(|&v| if v != 0 { 255u8 } else { 0 });
        let path = stem.with_file_name(format!(
            "{}_c{chan}.pgm",
            stem.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
        ));
        pgm_save(&path, bytes.view())?;
        paths.push(path);
    }
    Ok(paths)
}
