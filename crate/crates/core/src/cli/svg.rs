//! Static SVG timelines: one bar per source, stacked top to bottom.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::data::Segment;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const NULL_FILL: &str = "#e6e6e6";

/// Horizontal pixels per frame.
pub const FRAME_PX: usize = 4;
const LEFT: usize = 100;
const TOP: usize = 10;
const ROW_H: usize = 24;
const ROW_GAP: usize = 8;
const LEGEND_H: usize = 28;
const RIGHT: usize = 10;

pub fn fill_for(action: Option<usize>) -> &'static str {
    match action {
        Some(a) => PALETTE[a % PALETTE.len()],
        None => NULL_FILL,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `(label, segments)` rows covering `t` frames.
pub fn render_timeline(rows: &[(&str, &[Segment])], t: usize) -> String {
    let bar_w = t * FRAME_PX;
    let width = LEFT + bar_w + RIGHT;
    let legend_y = TOP + rows.len() * (ROW_H + ROW_GAP);
    let height = legend_y + LEGEND_H;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"##
    );
    let mut present = BTreeSet::new();
    let mut has_null = false;
    for (i, (label, segs)) in rows.iter().enumerate() {
        let y = TOP + i * (ROW_H + ROW_GAP);
        let _ = writeln!(
            s,
            r##"  <text x="{}" y="{}" text-anchor="end">{}</text>"##,
            LEFT - 6,
            y + ROW_H / 2 + 4,
            escape(label)
        );
        let _ = writeln!(s, r##"  <g class="row" data-label="{}">"##, escape(label));
        for seg in segs.iter() {
            match seg.action {
                Some(a) => {
                    present.insert(a);
                }
                None => has_null = true,
            }
            let _ = writeln!(
                s,
                r##"    <rect x="{}" y="{y}" width="{}" height="{ROW_H}" fill="{}"><title>{} [{}, {})</title></rect>"##,
                LEFT + seg.start * FRAME_PX,
                seg.len() * FRAME_PX,
                fill_for(seg.action),
                seg.action.map_or_else(|| "null".to_string(), |a| a.to_string()),
                seg.start,
                seg.end
            );
        }
        let _ = writeln!(
            s,
            r##"    <rect x="{LEFT}" y="{y}" width="{bar_w}" height="{ROW_H}" fill="none" stroke="#333333"/>"##
        );
        s.push_str("  </g>\n");
    }
    let mut x = LEFT;
    let entries = present.into_iter().map(Some).chain(has_null.then_some(None));
    for a in entries {
        let name = a.map_or_else(|| "null".to_string(), |a| a.to_string());
        let _ = writeln!(
            s,
            r##"  <rect x="{x}" y="{}" width="12" height="12" fill="{}" stroke="#333333"/><text x="{}" y="{}">{name}</text>"##,
            legend_y + 6,
            fill_for(a),
            x + 16,
            legend_y + 16
        );
        x += 24 + 8 * name.len();
    }
    s.push_str("</svg>\n");
    s
}
