//! Minimal line-plot renderer for difference waves.

use std::fmt::Write as _;

use regbase::inference::CurveSet;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 160.0;
const MARGIN: f64 = 48.0;

/// One panel per channel: the band as a shaded polygon, the estimate as a line,
/// dashed zero line and stimulus onset.
pub fn difference_plot(c: &CurveSet, title: &str) -> String {
    let nc = c.channels.len();
    let height = MARGIN + nc as f64 * (PANEL_H + MARGIN);
    let width = PANEL_W + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#, escape(title));
    let (t0, t1) = match (c.times_ms.first(), c.times_ms.last()) {
        (Some(a), Some(b)) if b > a => (*a, *b),
        _ => return s + "</svg>\n",
    };
    for ch in 0..nc {
        let est = c.estimate_wave(0, ch);
        let lo = c.lower_wave(0, ch);
        let hi = c.upper_wave(0, ch);
        let finite = est.iter().chain(lo).chain(hi).filter(|v| v.is_finite());
        let (mut ymin, mut ymax) = finite.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        if ymax - ymin < 1e-12 {
            ymin -= 1.0;
            ymax += 1.0;
        }
        let top = MARGIN + ch as f64 * (PANEL_H + MARGIN);
        let x = |t: f64| MARGIN + (t - t0) / (t1 - t0) * PANEL_W;
        let y = |v: f64| top + (ymax - v) / (ymax - ymin) * PANEL_H;
        let pts = |vals: &[f64]| -> Vec<String> {
            c.times_ms
                .iter()
                .zip(vals)
                .filter(|(_, v)| v.is_finite())
                .map(|(t, v)| format!("{:.2},{:.2}", x(*t), y(*v)))
                .collect()
        };
        let mut band = pts(hi);
        band.extend(pts(lo).into_iter().rev());
        let _ = writeln!(s, r#"<g><text x="{MARGIN}" y="{:.2}">{}</text>"#, top - 6.0, escape(&c.channels[ch]));
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN}" y="{top:.2}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(s, r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.6"/>"##, band.join(" "));
        if ymin <= 0.0 && ymax >= 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN}" x2="{0:.2}" y1="{1:.2}" y2="{1:.2}" stroke="#666" stroke-dasharray="4 3"/>"##,
                MARGIN + PANEL_W,
                y(0.0)
            );
        }
        if t0 <= 0.0 && t1 >= 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="{0:.2}" x2="{0:.2}" y1="{top:.2}" y2="{1:.2}" stroke="#666"/>"##,
                x(0.0),
                top + PANEL_H
            );
        }
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##, pts(est).join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{:.2}">{t0} ms</text><text x="{:.2}" y="{:.2}" text-anchor="end">{t1} ms</text>"#,
            top + PANEL_H + 14.0,
            MARGIN + PANEL_W,
            top + PANEL_H + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{ymax:.2}</text><text x="{:.2}" y="{:.2}" text-anchor="end">{ymin:.2}</text></g>"#,
            MARGIN - 4.0,
            top + 10.0,
            MARGIN - 4.0,
            top + PANEL_H
        );
    }
    s + "</svg>\n"
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
