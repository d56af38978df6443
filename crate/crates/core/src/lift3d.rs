//! Recovery of 3D joint motion from multi-view 2D sequences, bone-length
//! projection, and reprojection into a strictly consistent four-view dataset.

use nalgebra::{Matrix3, Point3, Vector3};
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid, Error, Result};
use crate::geometry::{epipolar_line, triangulate, CameraRig};
use crate::motion::{project_sequence, Pose2DSequence, Pose3DSequence, Record2D, SkeletonDef, ViewTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftOptions {
    /// Weight of the squared second temporal difference.
    pub smoothness: f64,
    /// Weight of the squared deviation of each bone from its median length.
    pub bone: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            smoothness: 1e-2,
            bone: 1e-1,
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }
}

impl LiftOptions {
    /// Reprojection only.
    pub fn unregularized() -> Self {
        Self {
            smoothness: 0.0,
            bone: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness >= 0.0 && self.bone >= 0.0) {
            return Err(invalid("regularizer weights must be non-negative"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid("tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Diagnostics of a [`recover_3d`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftReport {
    pub converged: bool,
    pub iterations: usize,
    /// Objective after triangulation and after each accepted iteration.
    pub objective_trace: Vec<f64>,
    /// Sum of squared reprojection errors of the returned sequence.
    pub reprojection: f64,
    /// Root-mean-square reprojection error over views, per frame and joint.
    pub joint_residuals: Array2<f64>,
}

/// One residual with at most six non-zero partial derivatives.
#[derive(Clone, Copy)]
struct Row {
    r: f64,
    idx: [usize; 6],
    val: [f64; 6],
    len: usize,
}

impl Row {
    fn new(r: f64) -> Self {
        Self {
            r,
            idx: [0; 6],
            val: [0.0; 6],
            len: 0,
        }
    }

    fn push(&mut self, i: usize, v: f64) {
        self.idx[self.len] = i;
        self.val[self.len] = v;
        self.len += 1;
    }

    fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.len].iter().copied().zip(self.val[..self.len].iter().copied())
    }
}

struct Problem<'a> {
    views: &'a [Pose2DSequence],
    rig: &'a CameraRig,
    bones: Vec<(usize, usize)>,
    opts: &'a LiftOptions,
    t_len: usize,
    j_len: usize,
}

fn var(j_len: usize, t: usize, j: usize) -> usize {
    (t * j_len + j) * 3
}

fn point(x: &[f64], i: usize) -> Point3<f64> {
    Point3::new(x[i], x[i + 1], x[i + 2])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Problem<'_> {
    fn reprojection_rows(&self, x: &[f64], rows: &mut Vec<Row>) -> Result<f64> {
        let mut sum = 0.0;
        for (v, seq) in self.views.iter().enumerate() {
            for t in 0..self.t_len {
                for j in 0..self.j_len {
                    let i = var(self.j_len, t, j);
                    let (p, jac) = self.rig.project_with_jacobian(&point(x, i), v)?;
                    let obs = seq.point(t, j);
                    for (c, r) in [p.x - obs.x, p.y - obs.y].into_iter().enumerate() {
                        sum += r * r;
                        let mut row = Row::new(r);
                        for k in 0..3 {
                            row.push(i + k, jac[(c, k)]);
                        }
                        rows.push(row);
                    }
                }
            }
        }
        Ok(sum)
    }

    /// All residual rows and the objective at `x`.
    fn rows(&self, x: &[f64]) -> Result<(Vec<Row>, f64)> {
        let mut rows = Vec::new();
        let mut f = self.reprojection_rows(x, &mut rows)?;
        let ws = self.opts.smoothness.sqrt();
        if ws > 0.0 {
            for t in 1..self.t_len.saturating_sub(1) {
                for j in 0..self.j_len {
                    let (a, b, c) = (
                        var(self.j_len, t - 1, j),
                        var(self.j_len, t, j),
                        var(self.j_len, t + 1, j),
                    );
                    for k in 0..3 {
                        let r = ws * (x[a + k] - 2.0 * x[b + k] + x[c + k]);
                        f += r * r;
                        let mut row = Row::new(r);
                        row.push(a + k, ws);
                        row.push(b + k, -2.0 * ws);
                        row.push(c + k, ws);
                        rows.push(row);
                    }
                }
            }
        }
        let wb = self.opts.bone.sqrt();
        if wb > 0.0 {
            for &(p, c) in &self.bones {
                let lengths: Vec<f64> = (0..self.t_len)
                    .map(|t| (point(x, var(self.j_len, t, c)) - point(x, var(self.j_len, t, p))).norm())
                    .collect();
                let m = median(lengths.clone());
                for (t, &len) in lengths.iter().enumerate() {
                    let (ip, ic) = (var(self.j_len, t, p), var(self.j_len, t, c));
                    let r = wb * (len - m);
                    f += r * r;
                    let mut row = Row::new(r);
                    if len > 1e-12 {
                        let u = (point(x, ic) - point(x, ip)) / len;
                        for k in 0..3 {
                            row.push(ic + k, wb * u[k]);
                            row.push(ip + k, -wb * u[k]);
                        }
                    }
                    rows.push(row);
                }
            }
        }
        Ok((rows, f))
    }

    fn objective(&self, x: &[f64]) -> Option<f64> {
        self.rows(x).ok().map(|(_, f)| f)
    }
}

fn jtj_apply(rows: &[Row], x: &[f64], damping: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = damping * v;
    }
    for row in rows {
        let jx: f64 = row.entries().map(|(i, v)| v * x[i]).sum();
        for (i, v) in row.entries() {
            out[i] += v * jx;
        }
    }
}

/// Solves `(J^T J + damping I) d = b` by conjugate gradients with 3x3 block-Jacobi preconditioning.
fn pcg(rows: &[Row], b: &[f64], damping: f64) -> Vec<f64> {
    let n = b.len();
    let blocks = n / 3;
    let mut diag = vec![Matrix3::<f64>::identity() * damping; blocks];
    for row in rows {
        for (i, vi) in row.entries() {
            for (k, vk) in row.entries() {
                if i / 3 == k / 3 {
                    diag[i / 3][(i % 3, k % 3)] += vi * vk;
                }
            }
        }
    }
    let inv: Vec<Matrix3<f64>> = diag
        .iter()
        .map(|m| m.try_inverse().unwrap_or_else(Matrix3::identity))
        .collect();
    let precond = |r: &[f64], z: &mut [f64]| {
        for (k, m) in inv.iter().enumerate() {
            let v = m * Vector3::new(r[3 * k], r[3 * k + 1], r[3 * k + 2]);
            z[3 * k..3 * k + 3].copy_from_slice(v.as_slice());
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let b_norm = dot(b, b).sqrt();
    let mut ap = vec![0.0; n];
    for _ in 0..(4 * n).min(500) {
        if dot(&r, &r).sqrt() <= 1e-14 * b_norm.max(1e-300) {
            break;
        }
        jtj_apply(rows, &p, damping, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    x
}

/// Triangulates every joint, then jointly refines all frames against reprojection
/// error plus optional temporal smoothness and bone-length consistency.
///
/// The bone term needs `skeleton`; without one it is skipped and joint 0 is the root.
pub fn recover_3d(
    views: &[Pose2DSequence],
    rig: &CameraRig,
    skeleton: Option<&SkeletonDef>,
    opts: &LiftOptions,
) -> Result<(Pose3DSequence, LiftReport)> {
    opts.validate()?;
    if views.len() < 2 {
        return Err(Error::InsufficientViews(views.len()));
    }
    if views.len() != rig.view_count() {
        return Err(invalid(format!(
            "{} view sequences for a {}-view rig",
            views.len(),
            rig.view_count()
        )));
    }
    if views.iter().any(|v| !v.same_shape(&views[0])) {
        return Err(invalid("all view sequences must share one shape"));
    }
    let (t_len, j_len) = (views[0].frame_count(), views[0].joint_count());
    if let Some(s) = skeleton {
        if s.joint_count() != j_len {
            return Err(invalid(format!(
                "skeleton has {} joints, sequences have {j_len}",
                s.joint_count()
            )));
        }
    }
    let root = skeleton.map_or(0, |s| s.root_index);
    let problem = Problem {
        views,
        rig,
        bones: skeleton.map(|s| s.bones().collect()).unwrap_or_default(),
        opts,
        t_len,
        j_len,
    };

    let mut x = vec![0.0; t_len * j_len * 3];
    for t in 0..t_len {
        for j in 0..j_len {
            let obs: Vec<_> = (0..views.len()).map(|v| (v, views[v].point(t, j))).collect();
            let tri = triangulate(&obs, rig)?;
            let i = var(j_len, t, j);
            x[i..i + 3].copy_from_slice(tri.point.coords.as_slice());
        }
    }

    let (_, mut f) = problem.rows(&x)?;
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (rows, _) = problem.rows(&x)?;
        let mut g = vec![0.0; x.len()];
        for row in &rows {
            for (i, v) in row.entries() {
                g[i] -= v * row.r;
            }
        }
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if g_norm <= opts.tolerance * 1e-3 {
            converged = true;
            break;
        }
        let delta = pcg(&rows, &g, 1e-12);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
            if let Some(fc) = problem.objective(&cand) {
                if fc <= f {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            converged = true;
            break;
        };
        let step = delta.iter().fold(0.0f64, |m, d| m.max((alpha * d).abs()));
        let decrease = f - fc;
        x = cand;
        f = fc;
        trace.push(f);
        if step <= opts.tolerance || decrease <= opts.tolerance * f.max(1e-300) {
            converged = true;
            break;
        }
    }

    let seq = Pose3DSequence::new(Array3::from_shape_vec((t_len, j_len, 3), x.clone()).expect("sized"), root)?;
    let mut reprojection = 0.0;
    let mut joint_residuals = Array2::<f64>::zeros((t_len, j_len));
    for (v, obs) in views.iter().enumerate() {
        let proj = project_sequence(&seq, rig, v)?;
        for t in 0..t_len {
            for j in 0..j_len {
                let d2 = (proj.point(t, j) - obs.point(t, j)).norm_squared();
                reprojection += d2;
                joint_residuals[[t, j]] += d2;
            }
        }
    }
    joint_residuals.mapv_inplace(|s| (s / views.len() as f64).sqrt());
    Ok((
        seq,
        LiftReport {
            converged,
            iterations,
            objective_trace: trace,
            reprojection,
            joint_residuals,
        },
    ))
}

/// Moves each child joint, root outward, onto the sphere of its bone length around its parent.
pub fn enforce_bone_lengths(seq: &Pose3DSequence, skeleton: &SkeletonDef) -> Result<Pose3DSequence> {
    skeleton.validate()?;
    if skeleton.joint_count() != seq.joint_count() {
        return Err(invalid(format!(
            "skeleton has {} joints, sequence has {}",
            skeleton.joint_count(),
            seq.joint_count()
        )));
    }
    let mut out = seq.clone();
    let order = skeleton.topological_order();
    for t in 0..seq.frame_count() {
        for &c in &order {
            if c == skeleton.root_index {
                continue;
            }
            let p = skeleton.parent[c];
            let parent = out.point(t, p);
            let dir = seq.point(t, c) - parent;
            let len = dir.norm();
            if len <= 1e-12 {
                return Err(degenerate(format!("joint {c} coincides with its parent in frame {t}")));
            }
            out.set_point(t, c, parent + dir * (skeleton.bone_lengths[c] / len));
        }
    }
    Ok(out)
}

/// Four projections of one 3D sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MvEntry {
    pub id: String,
    pub views: Vec<Pose2DSequence>,
}

impl MvEntry {
    /// Views stacked as `(V, T, J, 2)`.
    pub fn to_array(&self) -> Array4<f64> {
        let (t, j) = (self.views[0].frame_count(), self.views[0].joint_count());
        Array4::from_shape_fn((self.views.len(), t, j, 2), |(v, t, j, c)| self.views[v].array()[[t, j, c]])
    }
}

/// Multi-view 2D sequences that satisfy every pairwise epipolar constraint of their rig.
#[derive(Debug, Clone)]
pub struct MVDataset {
    pub rig: CameraRig,
    pub entries: Vec<MvEntry>,
}

/// A sequence left out of the dataset and why.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSequence {
    pub index: usize,
    pub reason: String,
}

/// Tolerance of the strict-consistency invariant.
pub const STRICT_CONSISTENCY_TOL: f64 = 1e-9;

/// Largest point-to-epipolar-line distance over all ordered view pairs, frames and joints.
pub fn strict_consistency_residual(views: &[Pose2DSequence], rig: &CameraRig) -> Result<f64> {
    if views.len() != rig.view_count() {
        return Err(invalid("view count does not match the rig"));
    }
    let mut worst = 0.0f64;
    for v in 0..views.len() {
        for w in 0..views.len() {
            if v == w {
                continue;
            }
            let f = rig.fundamental(v, w).expect("rig holds every ordered pair");
            for t in 0..views[v].frame_count() {
                for j in 0..views[v].joint_count() {
                    let line = epipolar_line(f, &views[v].point(t, j))?;
                    worst = worst.max(line.distance(&views[w].point(t, j)));
                }
            }
        }
    }
    Ok(worst)
}

fn check_four_view(rig: &CameraRig) -> Result<()> {
    match rig.layout() {
        Some(l) if l.n_views == 4 && (l.angle_step_deg - 90.0).abs() < 1e-12 => Ok(()),
        _ => Err(invalid(format!(
            "dataset needs the four-view 90-degree rig, got {}",
            rig.identifier()
        ))),
    }
}

impl MVDataset {
    pub fn check_entry(&self, e: &MvEntry) -> Result<()> {
        let r = strict_consistency_residual(&e.views, &self.rig)?;
        if r >= STRICT_CONSISTENCY_TOL {
            return Err(invalid(format!(
                "entry {} violates strict consistency (residual {r:.3e})",
                e.id
            )));
        }
        Ok(())
    }

    /// Training samples `(V, T, J, 2)`; view 0 is the conditioning view.
    pub fn training_arrays(&self) -> Vec<Array4<f64>> {
        self.entries.iter().map(MvEntry::to_array).collect()
    }

    /// One record per (sequence, view).
    pub fn to_records(&self, fps: f64) -> Vec<Record2D> {
        let rig_id = self.rig.identifier();
        let mut out = Vec::with_capacity(self.entries.len() * 4);
        for e in &self.entries {
            for (v, seq) in e.views.iter().enumerate() {
                let mut r = Record2D::new(format!("{}-v{v}", e.id), fps, seq.clone());
                r.view = Some(ViewTag {
                    sequence: e.id.clone(),
                    view: v,
                    rig: rig_id.clone(),
                });
                out.push(r);
            }
        }
        out
    }

    /// Regroups records by sequence id and re-verifies the invariant.
    pub fn from_records(records: &[Record2D], rig: CameraRig) -> Result<Self> {
        check_four_view(&rig)?;
        let rig_id = rig.identifier();
        let mut entries: Vec<MvEntry> = Vec::new();
        for r in records {
            let tag = r
                .view
                .as_ref()
                .ok_or_else(|| invalid(format!("record {} has no view tag", r.id)))?;
            if tag.rig != rig_id {
                return Err(invalid(format!("record {} comes from rig {}, expected {rig_id}", r.id, tag.rig)));
            }
            let pos = match entries.iter().position(|e| e.id == tag.sequence) {
                Some(p) => p,
                None => {
                    entries.push(MvEntry {
                        id: tag.sequence.clone(),
                        views: Vec::new(),
                    });
                    entries.len() - 1
                }
            };
            let e = &mut entries[pos];
            if tag.view != e.views.len() {
                return Err(invalid(format!("record {} is out of view order", r.id)));
            }
            e.views.push(r.seq.clone());
        }
        let ds = Self { rig, entries };
        for e in &ds.entries {
            if e.views.len() != 4 {
                return Err(invalid(format!("sequence {} has {} views", e.id, e.views.len())));
            }
            ds.check_entry(e)?;
        }
        if ds.entries.is_empty() {
            return Err(Error::EmptyDataset("no multi-view entries".into()));
        }
        Ok(ds)
    }
}

/// Projects every sequence into the four-view rig. Sequences with a joint behind
/// any camera are skipped and reported.
pub fn build_mv_dataset(
    seqs: &[Pose3DSequence],
    rig4: &CameraRig,
) -> Result<(MVDataset, Vec<SkippedSequence>)> {
    check_four_view(rig4)?;
    let mut ds = MVDataset {
        rig: rig4.clone(),
        entries: Vec::with_capacity(seqs.len()),
    };
    let mut skipped = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let views: Result<Vec<_>> = (0..4).map(|v| project_sequence(seq, rig4, v)).collect();
        match views {
            Ok(views) => {
                let e = MvEntry {
                    id: format!("seq{i:05}"),
                    views,
                };
                ds.check_entry(&e)?;
                ds.entries.push(e);
            }
            Err(err @ Error::BehindCamera { .. }) => {
                log::warn!("skipping sequence {i}: {err}");
                skipped.push(SkippedSequence {
                    index: i,
                    reason: err.to_string(),
                });
            }
            Err(other) => return Err(other),
        }
    }
    if ds.entries.is_empty() {
        return Err(Error::EmptyDataset("every sequence was skipped".into()));
    }
    Ok((ds, skipped))
}
