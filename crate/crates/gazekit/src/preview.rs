//! Static SVG previews of keypoint sequences.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use gazekit_core::mapper::{layout, KeypointFrame, KeypointSequence, Side};

const SIZE: f64 = 256.0;
const MARGIN: f64 = 0.1;
const SHEET_COLUMNS: usize = 8;
const SHEET_CELL: f64 = 128.0;

/// Maps normalized coordinates into a square viewport shared by all frames.
#[derive(Clone, Copy, Debug)]
struct Viewport {
    min: [f64; 2],
    span: f64,
}

impl Viewport {
    fn fit(seq: &KeypointSequence) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for f in &seq.frames {
            for p in &f.points {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9) * (1.0 + 2.0 * MARGIN);
        let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        Self {
            min: [mid[0] - 0.5 * span, mid[1] - 0.5 * span],
            span,
        }
    }

    fn map(&self, p: [f64; 2], size: f64) -> (f64, f64) {
        (
            (p[0] - self.min[0]) / self.span * size,
            (p[1] - self.min[1]) / self.span * size,
        )
    }
}

fn polyline(out: &mut String, pts: impl Iterator<Item = (f64, f64)>, closed: bool, stroke: &str) {
    let tag = if closed { "polygon" } else { "polyline" };
    let coords: Vec<String> = pts.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<{tag} points="{}" fill="none" stroke="{stroke}" stroke-width="1.2"/>"#,
        coords.join(" ")
    );
}

fn draw_frame(out: &mut String, frame: &KeypointFrame, vp: &Viewport, size: f64) {
    let at = |i: usize| vp.map(frame.points[i], size);
    for side in [Side::Left, Side::Right] {
        let lids = layout::upper_lid(side).chain(layout::lower_lid(side).rev());
        polyline(out, lids.map(at), true, "#333");
        polyline(out, layout::iris(side).map(at), true, "#2a6fb0");
        polyline(out, layout::brow(side).map(at), false, "#7a4b22");
        let (x, y) = at(layout::pupil(side));
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="#111"/>"##
        );
    }
    for p in &frame.points {
        let (x, y) = vp.map(*p, size);
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="0.9" fill="#c0392b"/>"##
        );
    }
}

pub fn frame_svg(seq: &KeypointSequence, index: usize) -> String {
    let vp = Viewport::fit(seq);
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    draw_frame(&mut s, &seq.frames[index], &vp, SIZE);
    let _ = writeln!(
        s,
        r#"<text x="4" y="14" font-size="11" font-family="monospace">frame {}</text>"#,
        index + 1
    );
    s.push_str("</svg>\n");
    s
}

pub fn contact_sheet_svg(seq: &KeypointSequence) -> String {
    let vp = Viewport::fit(seq);
    let n = seq.frames.len();
    let cols = SHEET_COLUMNS.min(n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols as f64 * SHEET_CELL, rows as f64 * SHEET_CELL);
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, f) in seq.frames.iter().enumerate() {
        let (x, y) = (
            (i % cols) as f64 * SHEET_CELL,
            (i / cols) as f64 * SHEET_CELL,
        );
        let _ = writeln!(s, r#"<g transform="translate({x},{y})">"#);
        let _ = writeln!(
            s,
            r##"<rect width="{SHEET_CELL}" height="{SHEET_CELL}" fill="none" stroke="#ddd"/>"##
        );
        draw_frame(&mut s, f, &vp, SHEET_CELL);
        let _ = writeln!(
            s,
            r#"<text x="3" y="11" font-size="9" font-family="monospace">{}</text>"#,
            i + 1
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `frame_0001.svg`, … and `contact_sheet.svg`; returns the paths.
pub fn write_preview(seq: &KeypointSequence, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = Vec::with_capacity(seq.frames.len() + 1);
    for i in 0..seq.frames.len() {
        let path = dir.join(format!("frame_{:04}.svg", i + 1));
        std::fs::write(&path, frame_svg(seq, i))
            .with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
    }
    let sheet = dir.join("contact_sheet.svg");
    std::fs::write(&sheet, contact_sheet_svg(seq))
        .with_context(|| format!("cannot write {}", sheet.display()))?;
    written.push(sheet);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazekit_core::mapper::{map_sequence, DeformationModel};
    use gazekit_core::{ControlSequence, ControlState};

    #[test]
    fn sheet_has_one_cell_per_frame() {
        let seq = ControlSequence::constant(ControlState::zero(), 10, 25.0).unwrap();
        let (k, _) = map_sequence(&seq, &DeformationModel::canonical()).unwrap();
        let sheet = contact_sheet_svg(&k);
        assert_eq!(sheet.matches("<g ").count(), 10);
        assert_eq!(frame_svg(&k, 0).matches("<circle").count(), 62 + 2);
    }
}
