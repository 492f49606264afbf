//! Self-contained SVG scatter/line plots: axes, ticks, points, polylines.
//! No styling dependencies; numbers are written with fixed precision so
//! identical inputs yield byte-identical files.

use std::fmt::Write as _;

const MARGIN: f64 = 52.0;
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;

pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
    body: String,
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Plot {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            body: String::new(),
        }
    }

    /// Axis ranges must be set before adding data.
    pub fn with_ranges(mut self, x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if (hi - lo).abs() < 1e-300 {
                (lo - 1.0, hi + 1.0)
            } else {
                let p = (hi - lo) * 0.05;
                (lo - p, hi + p)
            }
        };
        self.x_range = pad(x);
        self.y_range = pad(y);
        self
    }

    fn tx(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn ty(&self, y: f64) -> f64 {
        HEIGHT - MARGIN
            - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0) * (HEIGHT - 2.0 * MARGIN)
    }

    pub fn scatter(&mut self, points: &[(f64, f64)], radius: f64, color: &str) {
        let mut s = String::new();
        for &(x, y) in points {
            let _ = write!(
                s,
                "<circle cx=\"{}\" cy=\"{}\" r=\"{radius}\" fill=\"{color}\"/>",
                fmt(self.tx(x)),
                fmt(self.ty(y))
            );
        }
        self.body.push_str(&s);
        self.body.push('\n');
    }

    pub fn marker(&mut self, x: f64, y: f64, label: &str, color: &str) {
        let (px, py) = (self.tx(x), self.ty(y));
        let _ = write!(
            self.body,
            "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            fmt(px),
            fmt(py),
            fmt(px + 7.0),
            fmt(py - 7.0)
        );
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: &str, width: f64) {
        if points.is_empty() {
            return;
        }
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(self.tx(x)), fmt(self.ty(y))))
            .collect();
        let _ = write!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
            coords.join(" ")
        );
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        );
        out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        // Axes.
        let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
        let _ = write!(
            out,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            WIDTH - MARGIN
        );
        let _ = write!(
            out,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{MARGIN}\" stroke=\"black\"/>\n"
        );
        // Ticks: five per axis.
        for i in 0..=4 {
            let fx = self.x_range.0 + (self.x_range.1 - self.x_range.0) * i as f64 / 4.0;
            let px = self.tx(fx);
            let _ = write!(
                out,
                "<line x1=\"{}\" y1=\"{y0}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\
                 <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
                fmt(px),
                fmt(px),
                fmt(y0 + 4.0),
                fmt(px),
                fmt(y0 + 16.0),
                format_tick(fx)
            );
            let fy = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            let py = self.ty(fy);
            let _ = write!(
                out,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\
                 <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
                fmt(x0 - 4.0),
                fmt(py),
                fmt(py),
                fmt(x0 - 6.0),
                fmt(py + 3.0),
                format_tick(fy)
            );
        }
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"18\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            xml_escape(&self.title)
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            HEIGHT - 12.0,
            xml_escape(&self.x_label)
        );
        let _ = write!(
            out,
            "<text x=\"14\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            xml_escape(&self.y_label)
        );
        out.push_str(&self.body);
        out.push_str("</svg>\n");
        out
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 10_000.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
