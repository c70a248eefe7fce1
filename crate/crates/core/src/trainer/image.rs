use std::io::Write;

use crate::error::{invalid, Result};
use crate::ndkernel::Array;

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PPM (P6) grid of `[C, H, W]` images with values in `[-1, 1]`.
/// One channel is rendered grey, three as RGB; otherwise the first channel.
pub fn write_ppm_grid<W: Write>(images: &[Array], cols: usize, mut w: W) -> Result<()> {
    let first = images.first().ok_or_else(|| invalid("no images to write"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || images.iter().any(|im| im.shape() != shape.as_slice()) {
        return Err(invalid("images must share a [C, H, W] shape"));
    }
    let (c, h, wd) = (shape[0], shape[1], shape[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (gw, gh) = (cols * wd, rows * h);
    let mut buf = vec![0u8; gw * gh * 3];
    for (n, im) in images.iter().enumerate() {
        let (oy, ox) = ((n / cols) * h, (n % cols) * wd);
        let d = im.data();
        for y in 0..h {
            for x in 0..wd {
                let px = |ch: usize| to_byte(d[ch * h * wd + y * wd + x]);
                let rgb = if c == 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
                let at = ((oy + y) * gw + ox + x) * 3;
                buf[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }
    write!(w, "P6\n{gw} {gh}\n255\n")?;
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}
