//! Static result files: an SVG plot of the root trajectory components and a
//! JSON description of per-frame 2D overlays.

use std::fmt::Write as _;

use mvlift_core::geometry::CameraRig;
use mvlift_core::motion::{Pose2DSequence, Pose3DSequence};
use serde::Serialize;

use crate::{CliError, CliResult};

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 160.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 3] = ["#c0392b", "#27ae60", "#2471a3"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One panel per world axis with the root coordinate against the frame index.
pub fn root_trajectory_svg(id: &str, seq: &Pose3DSequence) -> String {
    let t_len = seq.frame_count();
    let height = 3.0 * PANEL_HEIGHT + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="14" font-family="sans-serif">root trajectory: {}</text>"#,
        MARGIN,
        MARGIN * 0.6,
        escape(id)
    );
    let plot_w = WIDTH - 2.0 * MARGIN;
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let vals: Vec<f64> = (0..t_len).map(|t| seq.root(t)[axis]).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi - lo > 1e-9 { hi - lo } else { 1.0 };
        let top = MARGIN + axis as f64 * PANEL_HEIGHT;
        let inner = PANEL_HEIGHT - 24.0;
        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN}" y="{top}" width="{plot_w}" height="{inner}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="8" y="{}" font-size="12" font-family="sans-serif">{name}</text>"#,
            top + inner / 2.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif">{hi:.3}</text>"#,
            WIDTH - MARGIN + 4.0,
            top + 10.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" font-family="sans-serif">{lo:.3}</text>"#,
            WIDTH - MARGIN + 4.0,
            top + inner
        );
        let denom = (t_len.max(2) - 1) as f64;
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let x = MARGIN + plot_w * t as f64 / denom;
                let y = top + inner - inner * (v - lo) / span;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            COLORS[axis]
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif">frame (0..{})</text>"#,
        WIDTH / 2.0 - 40.0,
        height - 12.0,
        t_len.saturating_sub(1)
    );
    out.push_str("</svg>\n");
    out
}

#[derive(Serialize)]
struct OverlayFrame {
    frame: usize,
    /// Reprojected prediction; `null` for joints behind the camera.
    predicted: Vec<Option<[f64; 2]>>,
    observed: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize)]
struct Overlay<'a> {
    id: &'a str,
    rig: String,
    view: usize,
    edges: Vec<[usize; 2]>,
    frames: Vec<OverlayFrame>,
}

/// Per-frame predicted and observed 2D joints in one rig view, with skeleton edges.
pub fn overlay_description(
    id: &str,
    seq: &Pose3DSequence,
    observed: Option<&Pose2DSequence>,
    parents: &[usize],
    rig: &CameraRig,
    view: usize,
) -> CliResult<String> {
    if let Some(o) = observed {
        if o.frame_count() != seq.frame_count() || o.joint_count() != seq.joint_count() {
            return Err(CliError::Invalid(format!("observed sequence of {id} has a different shape")));
        }
    }
    let edges = parents
        .iter()
        .enumerate()
        .filter(|&(c, &p)| c != p)
        .map(|(c, &p)| [p, c])
        .collect();
    let frames = (0..seq.frame_count())
        .map(|t| OverlayFrame {
            frame: t,
            predicted: seq
                .frame_points(t)
                .iter()
                .map(|p| rig.project(p, view).ok().map(|q| [q.x, q.y]))
                .collect(),
            observed: observed.map(|o| (0..o.joint_count()).map(|j| [o.point(t, j).x, o.point(t, j).y]).collect()),
        })
        .collect();
    let overlay = Overlay {
        id,
        rig: rig.identifier(),
        view,
        edges,
        frames,
    };
    let body = serde_json::to_string_pretty(&overlay).expect("overlay serializes");
    Ok(format!("{body}\n"))
}

/// The SVG plot and overlay description of one sequence.
pub fn render_sequence(
    id: &str,
    seq: &Pose3DSequence,
    observed: Option<&Pose2DSequence>,
    parents: &[usize],
    rig: &CameraRig,
    view: usize,
) -> CliResult<(String, String)> {
    Ok((
        root_trajectory_svg(id, seq),
        overlay_description(id, seq, observed, parents, rig, view)?,
    ))
}
