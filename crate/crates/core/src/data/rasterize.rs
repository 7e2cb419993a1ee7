use super::{Mask, Polygon};

/// Even-odd scanline fill sampled at pixel centres, unioned over `polys`.
/// Centres lying exactly on an edge are inside.
pub fn rasterize_polygon(polys: &[Polygon], height: usize, width: usize) -> Mask {
    let mut mask = Mask::zeros(height, width);
    let mut xs = Vec::new();
    for poly in polys {
        let v = &poly.vertices;
        let edges = || (0..v.len()).map(move |i| (v[i], v[(i + 1) % v.len()]));
        for row in 0..height {
            let cy = row as f64 + 0.5;
            xs.clear();
            for ((x0, y0), (x1, y1)) in edges() {
                if (y0 > cy) != (y1 > cy) {
                    xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(f64::total_cmp);
            let line = &mut mask.data[row * width..(row + 1) * width];
            for pair in xs.chunks_exact(2) {
                fill_span(line, pair[0], pair[1]);
            }
            for ((x0, y0), (x1, y1)) in edges() {
                if y0 == cy && y1 == cy {
                    fill_span(line, x0.min(x1), x0.max(x1));
                } else if y0.min(y1) <= cy && cy <= y0.max(y1) {
                    let x = x0 + (cy - y0) * (x1 - x0) / (y1 - y0);
                    fill_span(line, x, x);
                }
            }
        }
    }
    mask
}

/// Marks every pixel whose centre lies in [lo, hi].
fn fill_span(line: &mut [u8], lo: f64, hi: f64) {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(line.len() as f64 - 1.0);
    if first > last {
        return;
    }
    for px in &mut line[first as usize..=last as usize] {
        *px = 1;
    }
}
