use std::fmt::Write as _;

use super::fourier::FourierHeatmap;

/// Anchor colours of the viridis map at 0, 1/4, 1/2, 3/4 and 1.
const ANCHORS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// 256-entry RGB table interpolated linearly between the anchors.
pub fn color_table() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (k, entry) in table.iter_mut().enumerate() {
        let t = k as f64 / 255.0 * (ANCHORS.len() - 1) as f64;
        let seg = (t.floor() as usize).min(ANCHORS.len() - 2);
        let f = t - seg as f64;
        for c in 0..3 {
            let v = ANCHORS[seg][c] * (1.0 - f) + ANCHORS[seg + 1][c] * f;
            entry[c] = v.round() as u8;
        }
    }
    table
}

/// Binary PPM (P6): header `P6\n# <comment>\n<w> <h>\n255\n`, then rows
/// top to bottom, each pixel as R, G, B bytes. Cell `(i, j)` of the
/// min-max-scaled map fills a `scale x scale` block at row `i`, column `j`.
pub fn render_ppm(map: &FourierHeatmap, scale: usize, comment: &str) -> Vec<u8> {
    let scale = scale.max(1);
    let side = map.side * scale;
    let table = color_table();
    let norm = map.normalized();
    let comment: String = comment.chars().filter(|&c| c != '\n' && c != '\r').collect();
    let mut out = format!("P6\n# {comment}\n{side} {side}\n255\n").into_bytes();
    for r in 0..side {
        for c in 0..side {
            let v = norm[(r / scale) * map.side + c / scale];
            let idx = (v * 255.0).round().clamp(0.0, 255.0) as usize;
            out.extend_from_slice(&table[idx]);
        }
    }
    out
}

/// Raw error-rate matrix as CSV, one row per frequency index `i`, preceded
/// by `#`-prefixed comment lines.
pub fn heatmap_csv(map: &FourierHeatmap, comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        let _ = writeln!(s, "# {c}");
    }
    for i in 0..map.side {
        let row: Vec<String> = (0..map.side).map(|j| format!("{:.6}", map.cell(i, j))).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}
