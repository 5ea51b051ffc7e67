//! Plot-ready artifacts without a plotting library: binary PGM heat maps
//! and SVG scatter plots.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

/// Grayscale P5 image of `exp(logp)` scaled so the maximum is 255. Row 0 of
/// `logp` is the bottom of the picture.
pub fn write_pgm<W: Write>(logp: &Array2<f64>, mut w: W) -> std::io::Result<()> {
    let (ny, nx) = logp.dim();
    let top = logp.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    write!(w, "P5\n{nx} {ny}\n255\n")?;
    let mut bytes = Vec::with_capacity(nx * ny);
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = logp[[j, i]];
            let level = if v.is_finite() && top.is_finite() { (v - top).exp() * 255.0 } else { 0.0 };
            bytes.push(level.round().clamp(0.0, 255.0) as u8);
        }
    }
    w.write_all(&bytes)?;
    w.flush()
}

/// SVG 1.1 scatter of the first two columns of `points`, framed by their
/// 0.5% and 99.5% quantiles.
pub fn write_svg_scatter<W: Write>(points: ArrayView2<'_, f64>, mut w: W) -> std::io::Result<()> {
    const SIZE: f64 = 500.0;
    let (lo_x, hi_x) = quantile_range(points.column(0).iter().copied());
    let (lo_y, hi_y) = quantile_range(points.column(1).iter().copied());
    writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    for row in points.rows() {
        let (x, y) = (row[0], row[1]);
        if !(lo_x..=hi_x).contains(&x) || !(lo_y..=hi_y).contains(&y) {
            continue;
        }
        let px = (x - lo_x) / (hi_x - lo_x) * SIZE;
        let py = SIZE - (y - lo_y) / (hi_y - lo_y) * SIZE;
        writeln!(w, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1" fill-opacity="0.4"/>"#)?;
    }
    writeln!(w, "</svg>")?;
    w.flush()
}

fn quantile_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (-1.0, 1.0);
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (at(0.005), at(0.995));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}
