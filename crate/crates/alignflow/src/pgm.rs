//! 8-bit binary PGM rendering of attention maps.

use alignflow_core::numerics::Tensor;

/// Min-max scales `map` (queries down, keys across) to 0..=255. Cells
/// exactly `radius + 1` away from the diagonal, the first ones a
/// convolution of that radius cannot see, are drawn at 255 to mark the
/// receptive-field band.
pub fn render(map: &Tensor, radius: usize) -> Vec<u8> {
    let (h, w) = (map.rows(), map.cols());
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for q in 0..h {
        for k in 0..w {
            let px = if q.abs_diff(k) == radius + 1 {
                255
            } else if span > 0.0 {
                ((map.at(q, k) - lo) / span * 255.0).round() as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    out
}
