//! Convex hypersurfaces through prescribed points with prescribed unit
//! normals, realized as the zero level set of a convex extension of the jets
//! `(point, value 0, gradient = normal)`, plus star-shaped level-set
//! extraction by radial bisection from an interior point.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::extend::{extend_with_projection, ExtendOptions, ExtensionModel};
use crate::jets::{Jet, JetSet, Subspace};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalEntry {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    #[serde(default)]
    pub auxiliary: bool,
}

/// Prescribed surface data: points with outward unit normals, optionally an
/// explicit reduction subspace (row basis) and auxiliary entries that shape
/// the extension without being certified afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalData {
    pub dim: usize,
    pub entries: Vec<NormalEntry>,
    #[serde(default)]
    pub x_basis: Option<Vec<Vec<f64>>>,
}

impl NormalData {
    pub fn validate(&self) -> Result<()> {
        if self.entries.iter().all(|e| e.auxiliary) {
            return Err(Error::InvalidParameter("no primary surface points".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.point.len() != self.dim || e.normal.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: e.point.len().max(e.normal.len()),
                });
            }
            let n = DVector::from_column_slice(&e.normal).norm();
            if (n - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidParameter(format!(
                    "normal {i} has length {n}, expected a unit vector"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A constructed surface: the model `F` whose zero set passes through the
/// prescribed points, plus the data it came from.
#[derive(Debug, Clone)]
pub struct Surface {
    pub model: ExtensionModel,
    pub points: Vec<DVector<f64>>,
    pub normals: Vec<DVector<f64>>,
}

/// Builds `F` with `F = 0` and `grad F = normal` at each prescribed point.
/// The normals need not span the space; the projection variant handles flat
/// directions (a single point yields a halfspace boundary).
pub fn surface_from_normals(nd: &NormalData, opts: &ExtendOptions) -> Result<Surface> {
    nd.validate()?;
    let mut jets = Vec::new();
    let mut aux = Vec::new();
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for e in &nd.entries {
        let p = DVector::from_column_slice(&e.point);
        let n = DVector::from_column_slice(&e.normal);
        if e.auxiliary {
            aux.push(Jet::new(p, 0.0, n));
        } else {
            points.push(p.clone());
            normals.push(n.clone());
            jets.push(Jet::new(p, 0.0, n));
        }
    }
    let js = JetSet::new(nd.dim, jets, 0)?;
    let x = match &nd.x_basis {
        Some(rows) => {
            let vecs: Vec<DVector<f64>> =
                rows.iter().map(|r| DVector::from_column_slice(r)).collect();
            Some(Subspace::from_spanning(nd.dim, &vecs, 1e-9))
        }
        None => None,
    };
    let model = extend_with_projection(&js, x.as_ref(), &aux, opts)?;
    for (i, p) in points.iter().enumerate() {
        if model.gradient(p).norm() < 1e-6 {
            return Err(Error::ZeroGradient(i));
        }
    }
    Ok(Surface { model, points, normals })
}

/// Extracted zero level set: a polyline loop in 2D, a triangulated sphere
/// topology in 3D. Normals are `grad F` normalized at each vertex.
#[derive(Debug, Clone)]
pub struct LevelSetMesh {
    pub dim: usize,
    pub vertices: Vec<DVector<f64>>,
    pub normals: Vec<DVector<f64>>,
    pub segments: Vec<[usize; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub dropped_rays: usize,
    /// Largest `|F|` over the extracted vertices.
    pub max_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeshStats {
    pub vertex_count: usize,
    pub dropped_rays: usize,
    pub max_residual: f64,
}

impl LevelSetMesh {
    pub fn stats(&self) -> MeshStats {
        MeshStats {
            vertex_count: self.vertices.len(),
            dropped_rays: self.dropped_rays,
            max_residual: self.max_residual,
        }
    }

    /// 2D polyline as CSV rows `x,y,nx,ny`, in loop order.
    pub fn write_polyline_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y,nx,ny\n");
        for (v, n) in self.vertices.iter().zip(self.normals.iter()) {
            out.push_str(&format!("{:.12e},{:.12e},{:.12e},{:.12e}\n", v[0], v[1], n[0], n[1]));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// 3D mesh as OBJ with per-vertex normals.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for v in &self.vertices {
            writeln!(f, "v {:.12e} {:.12e} {:.12e}", v[0], v[1], v[2])?;
        }
        for n in &self.normals {
            writeln!(f, "vn {:.12e} {:.12e} {:.12e}", n[0], n[1], n[2])?;
        }
        for t in &self.triangles {
            writeln!(
                f,
                "f {}//{} {}//{} {}//{}",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            )?;
        }
        Ok(())
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.stats())?)?;
        Ok(())
    }
}

/// Axis-aligned search box.
#[derive(Debug, Clone)]
pub struct BoundingBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoundingBox {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        BoundingBox {
            lo: DVector::from_element(dim, -half_width),
            hi: DVector::from_element(dim, half_width),
        }
    }

    fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(&xi, (&lo, &hi))| xi >= lo - slack && xi <= hi + slack)
    }

    fn clamp(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn diameter(&self) -> f64 {
        (&self.hi - &self.lo).norm()
    }
}

/// Finds a point with `F < 0` in the box: coarse lattice argmin, then
/// box-clamped gradient descent with backtracking.
fn interior_point(model: &ExtensionModel, bbox: &BoundingBox) -> Result<DVector<f64>> {
    let n = model.dim;
    let per_axis = if n == 2 { 11 } else { 7 };
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut idx = vec![0usize; n];
    loop {
        let x = DVector::from_fn(n, |i, _| {
            bbox.lo[i] + (bbox.hi[i] - bbox.lo[i]) * idx[i] as f64 / (per_axis - 1) as f64
        });
        let v = model.value(&x);
        if best.as_ref().map(|(bv, _)| v < *bv).unwrap_or(true) {
            best = Some((v, x));
        }
        let mut carry = 0;
        while carry < n {
            idx[carry] += 1;
            if idx[carry] < per_axis {
                break;
            }
            idx[carry] = 0;
            carry += 1;
        }
        if carry == n {
            break;
        }
    }
    let (mut fv, mut x) = best.unwrap();
    let mut step = 0.25 * bbox.diameter();
    for _ in 0..200 {
        if fv < 0.0 {
            break;
        }
        let g = model.gradient(&x);
        let gn = g.norm();
        if gn < 1e-14 {
            break;
        }
        let mut trial = &x - &g * (step / gn);
        bbox.clamp(&mut trial);
        let tv = model.value(&trial);
        if tv < fv {
            fv = tv;
            x = trial;
        } else {
            step *= 0.5;
            if step < 1e-14 * bbox.diameter() {
                break;
            }
        }
    }
    if fv < 0.0 {
        Ok(x)
    } else {
        Err(Error::NoInteriorPoint)
    }
}

fn ray_directions_2d(resolution: usize) -> Vec<DVector<f64>> {
    let m = resolution.max(4);
    (0..m)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            DVector::from_column_slice(&[t.cos(), t.sin()])
        })
        .collect()
}

/// Icosphere: unit icosahedron vertices subdivided until the vertex count
/// reaches `resolution` (depth capped at 5), all vertices on the sphere.
fn icosphere(resolution: usize) -> (Vec<DVector<f64>>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw: [[f64; 3]; 12] = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut verts: Vec<DVector<f64>> = raw
        .iter()
        .map(|v| {
            let d = DVector::from_column_slice(v);
            let n = d.norm();
            d / n
        })
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut depth = 0;
    while verts.len() < resolution && depth < 5 {
        let mut cache: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<DVector<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            if let Some(&i) = cache.get(&key) {
                return i;
            }
            let m = (&verts[a] + &verts[b]) * 0.5;
            let n = m.norm();
            verts.push(m / n);
            cache.insert(key, verts.len() - 1);
            verts.len() - 1
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut verts);
            let bc = midpoint(f[1], f[2], &mut verts);
            let ca = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
        depth += 1;
    }
    (verts, faces)
}

/// Extracts the zero set of `F` inside `bbox` by casting rays from an
/// interior (negative-value) point. Convexity of the sublevel set gives at
/// most one crossing per ray; rays whose crossing lies outside the box are
/// dropped and counted.
pub fn level_set_extract(
    model: &ExtensionModel,
    bbox: &BoundingBox,
    resolution: usize,
) -> Result<LevelSetMesh> {
    let n = model.dim;
    if n != 2 && n != 3 {
        return Err(Error::InvalidParameter(format!(
            "level-set extraction supports dimensions 2 and 3, got {n}"
        )));
    }
    let x_int = interior_point(model, bbox)?;
    let (dirs, faces): (Vec<DVector<f64>>, Vec<[usize; 3]>) = if n == 2 {
        (ray_directions_2d(resolution), Vec::new())
    } else {
        icosphere(resolution)
    };
    let diam = bbox.diameter();
    let mut vertices = Vec::new();
    let mut normals = Vec::new();
    let mut kept: Vec<Option<usize>> = Vec::with_capacity(dirs.len());
    let mut dropped = 0usize;
    let mut max_residual = 0.0f64;
    for d in &dirs {
        // Bracket the crossing by doubling; stop when F >= 0 or the box ends.
        let mut t_lo = 0.0f64;
        let mut t_hi = 1e-3 * diam;
        let mut found = false;
        while t_hi <= 2.0 * diam {
            let p = &x_int + d * t_hi;
            if !bbox.contains(&p, 1e-12 * diam) {
                break;
            }
            if model.value(&p) >= 0.0 {
                found = true;
                break;
            }
            t_lo = t_hi;
            t_hi *= 2.0;
        }
        if !found {
            // One more try exactly at the box boundary.
            let mut t_exit = f64::INFINITY;
            for i in 0..n {
                if d[i] > 1e-15 {
                    t_exit = t_exit.min((bbox.hi[i] - x_int[i]) / d[i]);
                } else if d[i] < -1e-15 {
                    t_exit = t_exit.min((bbox.lo[i] - x_int[i]) / d[i]);
                }
            }
            if t_exit.is_finite() && model.value(&(&x_int + d * t_exit)) >= 0.0 {
                t_lo = t_lo.min(t_exit);
                t_hi = t_exit;
                found = true;
            }
        }
        if !found {
            dropped += 1;
            kept.push(None);
            continue;
        }
        for _ in 0..200 {
            if t_hi - t_lo <= 1e-8 * t_hi.max(1e-8) {
                break;
            }
            let mid = 0.5 * (t_lo + t_hi);
            if model.value(&(&x_int + d * mid)) >= 0.0 {
                t_hi = mid;
            } else {
                t_lo = mid;
            }
        }
        let p = &x_int + d * (0.5 * (t_lo + t_hi));
        let g = model.gradient(&p);
        let gn = g.norm();
        if gn < 1e-12 {
            dropped += 1;
            kept.push(None);
            continue;
        }
        max_residual = max_residual.max(model.value(&p).abs());
        kept.push(Some(vertices.len()));
        vertices.push(p);
        normals.push(g / gn);
    }
    let mut segments = Vec::new();
    let mut triangles = Vec::new();
    if n == 2 {
        let m = dirs.len();
        for i in 0..m {
            if let (Some(a), Some(b)) = (kept[i], kept[(i + 1) % m]) {
                segments.push([a, b]);
            }
        }
    } else {
        for f in &faces {
            if let (Some(a), Some(b), Some(c)) = (kept[f[0]], kept[f[1]], kept[f[2]]) {
                triangles.push([a, b, c]);
            }
        }
    }
    Ok(LevelSetMesh {
        dim: n,
        vertices,
        normals,
        segments,
        triangles,
        dropped_rays: dropped,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::Piece;
    use crate::extend::model_from_pieces;

    fn circle_data() -> NormalData {
        let pts = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        NormalData {
            dim: 2,
            entries: pts
                .iter()
                .map(|p| NormalEntry { point: p.to_vec(), normal: p.to_vec(), auxiliary: false })
                .collect(),
            x_basis: None,
        }
    }

    #[test]
    fn circle_surface_interpolates_points_and_normals() {
        let s = surface_from_normals(&circle_data(), &ExtendOptions::default()).unwrap();
        for (p, nrm) in s.points.iter().zip(s.normals.iter()) {
            let v = s.model.value(p);
            assert!(v.abs() < 1e-6, "value at surface point: {v}");
            let g = s.model.gradient(p);
            let angle = (g.dot(nrm) / g.norm()).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-2, "tangency angle {angle}");
        }
    }

    #[test]
    fn circle_extraction_passes_near_prescribed_points() {
        let s = surface_from_normals(&circle_data(), &ExtendOptions::default()).unwrap();
        let mesh =
            level_set_extract(&s.model, &BoundingBox::cube(2, 3.0), 128).unwrap();
        assert!(mesh.dropped_rays == 0);
        assert!(mesh.max_residual < 1e-6 * 3.0, "residual {}", mesh.max_residual);
        for p in &s.points {
            let d = mesh
                .vertices
                .iter()
                .map(|v| (v - p).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-3, "distance from prescribed point: {d}");
        }
        // Sublevel-set convexity proxy at segment midpoints.
        for seg in &mesh.segments {
            let mid = (&mesh.vertices[seg[0]] + &mesh.vertices[seg[1]]) * 0.5;
            assert!(s.model.value(&mid) <= 1e-6 * 3.0);
        }
        // Outward offset is strictly positive.
        for (v, nrm) in mesh.vertices.iter().zip(mesh.normals.iter()) {
            assert!(s.model.value(&(v + nrm * 1e-4)) > 0.0);
        }
    }

    #[test]
    fn single_point_halfspace() {
        let nd = NormalData {
            dim: 2,
            entries: vec![NormalEntry {
                point: vec![0.5, 0.0],
                normal: vec![1.0, 0.0],
                auxiliary: false,
            }],
            x_basis: None,
        };
        let s = surface_from_normals(&nd, &ExtendOptions::default()).unwrap();
        // F(x, y) = x - 1/2 up to the lift convention.
        let x = DVector::from_column_slice(&[2.0, 5.0]);
        assert!((s.model.value(&x) - 1.5).abs() < 1e-9);
        assert!(s.model.value(&s.points[0]).abs() < 1e-12);
    }

    #[test]
    fn antipodal_normals_at_same_point_rejected() {
        let nd = NormalData {
            dim: 2,
            entries: vec![
                NormalEntry { point: vec![1.0, 0.0], normal: vec![1.0, 0.0], auxiliary: false },
                NormalEntry { point: vec![1.0, 0.0], normal: vec![-1.0, 0.0], auxiliary: false },
            ],
            x_basis: None,
        };
        assert!(matches!(
            surface_from_normals(&nd, &ExtendOptions::default()),
            Err(crate::Error::DuplicatePoint(0, 1))
        ));
    }

    #[test]
    fn non_unit_normal_rejected() {
        let nd = NormalData {
            dim: 2,
            entries: vec![NormalEntry {
                point: vec![1.0, 0.0],
                normal: vec![2.0, 0.0],
                auxiliary: false,
            }],
            x_basis: None,
        };
        assert!(surface_from_normals(&nd, &ExtendOptions::default()).is_err());
    }

    #[test]
    fn paraboloid_extraction_recovers_unit_circle() {
        // F(x) = |x|^2 - 1 as a single paraboloid piece.
        let model = model_from_pieces(
            2,
            0.5,
            DVector::zeros(2),
            vec![Piece::Quadratic {
                y: DVector::zeros(2),
                tilt: DVector::zeros(2),
                offset: -1.0,
                curvature: 2.0,
            }],
        );
        let mesh = level_set_extract(&model, &BoundingBox::cube(2, 2.0), 64).unwrap();
        assert_eq!(mesh.dropped_rays, 0);
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() < 1e-6, "radius {}", v.norm());
        }
    }

    #[test]
    fn sphere_extraction_in_3d() {
        let model = model_from_pieces(
            3,
            0.5,
            DVector::zeros(3),
            vec![Piece::Quadratic {
                y: DVector::zeros(3),
                tilt: DVector::zeros(3),
                offset: -1.0,
                curvature: 2.0,
            }],
        );
        let mesh = level_set_extract(&model, &BoundingBox::cube(3, 2.0), 100).unwrap();
        assert!(mesh.vertices.len() >= 100);
        assert!(!mesh.triangles.is_empty());
        for v in &mesh.vertices {
            assert!((v.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_sublevel_set_reports_no_interior_point() {
        // F(x) = |x|^2 + 1 never reaches zero.
        let model = model_from_pieces(
            2,
            0.5,
            DVector::zeros(2),
            vec![Piece::Quadratic {
                y: DVector::zeros(2),
                tilt: DVector::zeros(2),
                offset: 1.0,
                curvature: 2.0,
            }],
        );
        assert!(matches!(
            level_set_extract(&model, &BoundingBox::cube(2, 2.0), 32),
            Err(crate::Error::NoInteriorPoint)
        ));
    }

    #[test]
    fn writers_produce_files() {
        let model = model_from_pieces(
            2,
            0.5,
            DVector::zeros(2),
            vec![Piece::Quadratic {
                y: DVector::zeros(2),
                tilt: DVector::zeros(2),
                offset: -1.0,
                curvature: 2.0,
            }],
        );
        let mesh = level_set_extract(&model, &BoundingBox::cube(2, 2.0), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loop.csv");
        let sidecar = dir.path().join("loop.json");
        mesh.write_polyline_csv(&csv).unwrap();
        mesh.write_sidecar(&sidecar).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("x,y,nx,ny\n"));
        assert_eq!(text.lines().count(), 17);
        let stats: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(stats["vertex_count"], 16);
    }
}
