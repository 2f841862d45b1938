//! Minimal static SVG line charts for metric curves.

use std::path::Path;

use crate::error::Result;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Write a single-series line chart. `points` are (x, y) pairs in data
/// coordinates; axes are scaled to the data range.
pub fn line_chart_svg(path: &Path, title: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        title
    ));

    if !points.is_empty() {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if (x1 - x0).abs() < 1e-12 {
            x1 = x0 + 1.0;
        }
        if (y1 - y0).abs() < 1e-12 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

        // Axes and range labels.
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        ));
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            t = MARGIN,
            b = HEIGHT - MARGIN
        ));
        for (v, x, y, anchor) in [
            (x0, MARGIN, HEIGHT - MARGIN + 18.0, "middle"),
            (x1, WIDTH - MARGIN, HEIGHT - MARGIN + 18.0, "middle"),
            (y0, MARGIN - 6.0, HEIGHT - MARGIN, "end"),
            (y1, MARGIN - 6.0, MARGIN + 4.0, "end"),
        ] {
            svg.push_str(&format!(
                "<text x=\"{x}\" y=\"{y}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.3}</text>\n"
            ));
        }

        let coords: Vec<String> =
            points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
            coords.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_polyline_and_title() {
        let dir = std::env::temp_dir().join("r3dm_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("chart.svg");
        line_chart_svg(&path, "success rate", &[(0.0, 0.1), (1.0, 0.5), (2.0, 0.9)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("<polyline"));
        assert!(text.contains("success rate"));
    }

    #[test]
    fn empty_series_still_produces_a_valid_svg() {
        let dir = std::env::temp_dir().join("r3dm_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.svg");
        line_chart_svg(&path, "empty", &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
    }
}
