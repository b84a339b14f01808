//! Structured 2-D triangulations of axis-aligned rectilinear polygons with
//! per-component Dirichlet boundary decomposition, plus discrete probes of
//! the boundary-measure (Ahlfors) and volume-density conditions.
//!
//! The mesher overlays a uniform grid on the bounding box, keeps the cells
//! whose center lies inside the polygon and splits each cell along the
//! lower-left/upper-right diagonal. Refinement by halving the pitch yields
//! nested P1 spaces. An optional interior slit along grid lines duplicates
//! the vertices on the cut.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point = [f64; 2];

/// Domain description: a simple axis-aligned rectilinear polygon
/// (counter-clockwise), optionally with an interior slit segment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Polygon vertices, counter-clockwise, axis-aligned edges.
    pub polygon: Vec<Point>,
    /// Optional axis-aligned interior slit; mesh vertices strictly inside
    /// the segment are duplicated so the two sides decouple.
    #[serde(default)]
    pub slit: Option<[Point; 2]>,
}

impl DomainSpec {
    pub fn unit_square() -> Self {
        Self {
            polygon: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            slit: None,
        }
    }

    /// L-shape `[0,2]^2` minus the upper-right quadrant `[1,2]^2`.
    pub fn l_shape() -> Self {
        Self {
            polygon: vec![
                [0.0, 0.0],
                [2.0, 0.0],
                [2.0, 1.0],
                [1.0, 1.0],
                [1.0, 2.0],
                [0.0, 2.0],
            ],
            slit: None,
        }
    }

    /// Polygon segments plus two labels for the slit sides, when present.
    pub fn segment_count(&self) -> usize {
        self.polygon.len() + if self.slit.is_some() { 2 } else { 0 }
    }

    /// Shoelace area; positive for counter-clockwise orientation.
    pub fn area(&self) -> f64 {
        let p = &self.polygon;
        let n = p.len();
        let mut a = 0.0;
        for i in 0..n {
            let q = p[(i + 1) % n];
            a += p[i][0] * q[1] - q[0] * p[i][1];
        }
        0.5 * a
    }

    fn validate(&self) -> Result<()> {
        let p = &self.polygon;
        if p.len() < 4 {
            return Err(Error::Geometry("polygon needs at least 4 vertices".into()));
        }
        let n = p.len();
        for i in 0..n {
            let a = p[i];
            let b = p[(i + 1) % n];
            let dx = (b[0] - a[0]).abs();
            let dy = (b[1] - a[1]).abs();
            if dx > 1e-14 && dy > 1e-14 {
                return Err(Error::Geometry(format!(
                    "edge {i} is not axis-aligned: {a:?} -> {b:?}"
                )));
            }
            if dx <= 1e-14 && dy <= 1e-14 {
                return Err(Error::Geometry(format!("degenerate edge {i}")));
            }
        }
        if self.area() <= 0.0 {
            return Err(Error::Geometry(
                "polygon must be counter-clockwise with positive area (empty domain?)".into(),
            ));
        }
        // Simplicity: no two non-adjacent edges may touch.
        for i in 0..n {
            for j in (i + 1)..n {
                if (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (a1, a2) = (p[i], p[(i + 1) % n]);
                let (b1, b2) = (p[j], p[(j + 1) % n]);
                if segments_intersect(a1, a2, b1, b2) {
                    return Err(Error::Geometry(format!(
                        "polygon is not simple: edges {i} and {j} intersect"
                    )));
                }
            }
        }
        if let Some([a, b]) = self.slit {
            let dx = (b[0] - a[0]).abs();
            let dy = (b[1] - a[1]).abs();
            if dx > 1e-14 && dy > 1e-14 {
                return Err(Error::Geometry("slit must be axis-aligned".into()));
            }
        }
        Ok(())
    }
}

fn segments_intersect(a1: Point, a2: Point, b1: Point, b2: Point) -> bool {
    fn orient(p: Point, q: Point, r: Point) -> f64 {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    }
    fn on_box(p: Point, q: Point, r: Point) -> bool {
        r[0] >= p[0].min(q[0]) - 1e-14
            && r[0] <= p[0].max(q[0]) + 1e-14
            && r[1] >= p[1].min(q[1]) - 1e-14
            && r[1] <= p[1].max(q[1]) + 1e-14
    }
    let d1 = orient(a1, a2, b1);
    let d2 = orient(a1, a2, b2);
    let d3 = orient(b1, b2, a1);
    let d4 = orient(b1, b2, a2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1.abs() < 1e-14 && on_box(a1, a2, b1))
        || (d2.abs() < 1e-14 && on_box(a1, a2, b2))
        || (d3.abs() < 1e-14 && on_box(b1, b2, a1))
        || (d4.abs() < 1e-14 && on_box(b1, b2, a2))
}

/// Boundary edge of the triangulation: vertex pair plus the domain segment
/// it lies on (`usize::MAX` when it matches no declared segment).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub segment: usize,
}

/// Conforming triangulation with per-component Dirichlet boundary parts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mesh2D {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Number of solution components sharing this mesh.
    pub num_components: usize,
    /// For each component, indices into `boundary_edges` forming its
    /// Dirichlet part.
    pub dirichlet_parts: Vec<Vec<usize>>,
    /// Number of vertices appended by a slit cut (internal bookkeeping).
    #[serde(default)]
    pub slit_duplicates: usize,
}

/// Per-component boundary assignment: which domain segments carry the
/// Dirichlet condition of each component.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcSpec {
    pub num_components: usize,
    /// `dirichlet_segments[i]` lists domain segment indices for component i.
    pub dirichlet_segments: Vec<Vec<usize>>,
}

impl BcSpec {
    pub fn full_dirichlet(num_components: usize, domain: &DomainSpec) -> Self {
        let all: Vec<usize> = (0..domain.polygon.len()).collect();
        Self { num_components, dirichlet_segments: vec![all; num_components] }
    }

    pub fn full_neumann(num_components: usize) -> Self {
        Self { num_components, dirichlet_segments: vec![Vec::new(); num_components] }
    }
}

impl Mesh2D {
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut h = 0.0f64;
        for t in &self.triangles {
            for k in 0..3 {
                let a = self.vertices[t[k]];
                let b = self.vertices[t[(k + 1) % 3]];
                h = h.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        h
    }

    /// Flags for vertices lying on the Dirichlet part of `component`.
    pub fn dirichlet_vertices(&self, component: usize) -> Vec<bool> {
        let mut on = vec![false; self.vertices.len()];
        for &e in &self.dirichlet_parts[component] {
            let be = self.boundary_edges[e];
            on[be.vertices[0]] = true;
            on[be.vertices[1]] = true;
        }
        on
    }

    /// Structural validation of the mesh invariants.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.triangles.len() {
            if self.signed_area(t) <= 0.0 {
                return Err(Error::Geometry(format!(
                    "triangle {t} has non-positive area {}",
                    self.signed_area(t)
                )));
            }
        }
        let mut counts: std::collections::BTreeMap<(usize, usize), usize> =
            std::collections::BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let a = t[k];
                let b = t[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        let mut boundary: std::collections::BTreeSet<(usize, usize)> =
            std::collections::BTreeSet::new();
        for (key, c) in &counts {
            match c {
                1 => {
                    boundary.insert(*key);
                }
                2 => {}
                _ => {
                    return Err(Error::Geometry(format!(
                        "edge {key:?} incident to {c} triangles (non-conforming)"
                    )))
                }
            }
        }
        let declared: std::collections::BTreeSet<(usize, usize)> = self
            .boundary_edges
            .iter()
            .map(|e| {
                let [a, b] = e.vertices;
                (a.min(b), a.max(b))
            })
            .collect();
        if declared != boundary {
            return Err(Error::Geometry(format!(
                "boundary edge list does not cover the topological boundary \
                 ({} declared vs {} actual)",
                declared.len(),
                boundary.len()
            )));
        }
        if self.dirichlet_parts.len() != self.num_components {
            return Err(Error::Geometry("dirichlet_parts length != num_components".into()));
        }
        for part in &self.dirichlet_parts {
            for &e in part {
                if e >= self.boundary_edges.len() {
                    return Err(Error::Geometry(format!(
                        "dirichlet edge index {e} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "vertices": self.vertices,
            "triangles": self.triangles,
            "boundary_edges": self.boundary_edges.iter().map(|e| {
                serde_json::json!({
                    "vertices": e.vertices,
                    "segment": if e.segment == usize::MAX {
                        serde_json::Value::Null
                    } else {
                        serde_json::json!(e.segment)
                    }
                })
            }).collect::<Vec<_>>(),
            "dirichlet_parts": self.dirichlet_parts,
        })
    }
}

/// Build a conforming mesh of `domain` with maximal edge length at most
/// `1.5 * h`, assigning Dirichlet labels per component from `bc`.
pub fn build_mesh(domain: &DomainSpec, h: f64, bc: &BcSpec) -> Result<Mesh2D> {
    domain.validate()?;
    if !(h > 0.0) {
        return Err(Error::Parameter(format!(
            "target edge length must be positive, got {h}"
        )));
    }
    if bc.dirichlet_segments.len() != bc.num_components {
        return Err(Error::Geometry(
            "bc_spec: dirichlet_segments length must equal num_components".into(),
        ));
    }
    let nseg = domain.segment_count();
    for (i, segs) in bc.dirichlet_segments.iter().enumerate() {
        for &s in segs {
            if s >= nseg {
                return Err(Error::Geometry(format!(
                    "bc_spec: component {i} references segment {s}, but only {nseg} exist"
                )));
            }
        }
    }

    let xs: Vec<f64> = domain.polygon.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = domain.polygon.iter().map(|p| p[1]).collect();
    let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let nx = ((x1 - x0) / h - 1e-12).ceil().max(1.0) as usize;
    let ny = ((y1 - y0) / h - 1e-12).ceil().max(1.0) as usize;
    let dx = (x1 - x0) / nx as f64;
    let dy = (y1 - y0) / ny as f64;

    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut keep_cell = vec![false; nx * ny];
    for cj in 0..ny {
        for ci in 0..nx {
            let cx = x0 + (ci as f64 + 0.5) * dx;
            let cy = y0 + (cj as f64 + 0.5) * dy;
            keep_cell[cj * nx + ci] = point_in_polygon([cx, cy], &domain.polygon);
        }
    }
    let mut used = vec![false; (nx + 1) * (ny + 1)];
    for cj in 0..ny {
        for ci in 0..nx {
            if keep_cell[cj * nx + ci] {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    used[vid(ci + di, cj + dj)] = true;
                }
            }
        }
    }
    let mut compact = vec![usize::MAX; (nx + 1) * (ny + 1)];
    let mut vertices: Vec<Point> = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            if used[vid(i, j)] {
                compact[vid(i, j)] = vertices.len();
                vertices.push([x0 + i as f64 * dx, y0 + j as f64 * dy]);
            }
        }
    }
    if vertices.is_empty() {
        return Err(Error::Geometry("empty domain: no grid cell center lies inside".into()));
    }

    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for cj in 0..ny {
        for ci in 0..nx {
            if !keep_cell[cj * nx + ci] {
                continue;
            }
            let v00 = compact[vid(ci, cj)];
            let v10 = compact[vid(ci + 1, cj)];
            let v01 = compact[vid(ci, cj + 1)];
            let v11 = compact[vid(ci + 1, cj + 1)];
            // Diagonal from lower-left to upper-right keeps refinements nested.
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }

    let mut mesh = Mesh2D {
        vertices,
        triangles,
        boundary_edges: Vec::new(),
        num_components: bc.num_components,
        dirichlet_parts: vec![Vec::new(); bc.num_components],
        slit_duplicates: 0,
    };

    if let Some(slit) = domain.slit {
        cut_slit(&mut mesh, slit, dx.min(dy))?;
    }

    // Boundary edges (incident to exactly one triangle), labeled by the
    // domain segment they lie on.
    let mut counts: std::collections::BTreeMap<(usize, usize), usize> =
        std::collections::BTreeMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let a = t[k];
            let b = t[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    let npoly = domain.polygon.len();
    let first_dup = mesh.vertices.len() - mesh.slit_duplicates;
    for (&(a, b), &c) in &counts {
        if c != 1 {
            continue;
        }
        let pa = mesh.vertices[a];
        let pb = mesh.vertices[b];
        let mut segment = usize::MAX;
        for s in 0..npoly {
            let q0 = domain.polygon[s];
            let q1 = domain.polygon[(s + 1) % npoly];
            if on_segment(pa, q0, q1) && on_segment(pb, q0, q1) {
                segment = s;
                break;
            }
        }
        if segment == usize::MAX {
            if let Some([s0, s1]) = domain.slit {
                if on_segment(pa, s0, s1) && on_segment(pb, s0, s1) {
                    // Lower/left copy gets label npoly, duplicated side npoly+1.
                    segment = if a >= first_dup || b >= first_dup { npoly + 1 } else { npoly };
                }
            }
        }
        mesh.boundary_edges.push(BoundaryEdge { vertices: [a, b], segment });
    }

    for (i, segs) in bc.dirichlet_segments.iter().enumerate() {
        for (e, edge) in mesh.boundary_edges.iter().enumerate() {
            if segs.contains(&edge.segment) {
                mesh.dirichlet_parts[i].push(e);
            }
        }
    }

    mesh.validate()?;
    Ok(mesh)
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    if cross.abs() > 1e-10 {
        return false;
    }
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let xint = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < xint {
                inside = !inside;
            }
        }
    }
    inside
}

fn cut_slit(mesh: &mut Mesh2D, slit: [Point; 2], pitch: f64) -> Result<()> {
    let [s0, s1] = slit;
    let horizontal = (s0[1] - s1[1]).abs() < 1e-14;
    let nv = mesh.vertices.len();
    let interior = |p: Point| -> bool {
        if !on_segment(p, s0, s1) {
            return false;
        }
        let d0 = ((p[0] - s0[0]).powi(2) + (p[1] - s0[1]).powi(2)).sqrt();
        let d1 = ((p[0] - s1[0]).powi(2) + (p[1] - s1[1]).powi(2)).sqrt();
        d0 > 0.25 * pitch && d1 > 0.25 * pitch
    };
    let mut dup: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for v in 0..nv {
        if interior(mesh.vertices[v]) {
            let copy = nv + dup.len();
            dup.insert(v, copy);
        }
    }
    if dup.is_empty() {
        return Err(Error::Geometry(
            "slit does not pass through interior mesh vertices (not on grid lines?)".into(),
        ));
    }
    for &orig in dup.keys() {
        let p = mesh.vertices[orig];
        mesh.vertices.push(p);
    }
    // Triangles on the positive side (above a horizontal slit, right of a
    // vertical one) switch to the duplicated vertices.
    let verts = mesh.vertices.clone();
    for t in mesh.triangles.iter_mut() {
        let cx = (verts[t[0]][0] + verts[t[1]][0] + verts[t[2]][0]) / 3.0;
        let cy = (verts[t[0]][1] + verts[t[1]][1] + verts[t[2]][1]) / 3.0;
        let positive = if horizontal { cy > s0[1] } else { cx > s0[0] };
        if positive {
            for v in t.iter_mut() {
                if let Some(&copy) = dup.get(v) {
                    *v = copy;
                }
            }
        }
    }
    mesh.slit_duplicates = dup.len();
    Ok(())
}

/// Discrete probe of the boundary-measure and volume-density ratios.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryReport {
    /// Per component: (min, max) over samples and radii of
    /// H_1(D_i cap B(x,r)) / r, or None when D_i is empty.
    pub ahlfors_ratio: Vec<Option<(f64, f64)>>,
    /// (min, max) over samples and radii of |Omega cap B(x,r)| / r^2.
    pub density_ratio: (f64, f64),
    pub sample_count: usize,
    /// Suspicious ratios produce warnings; the checks never gate.
    pub warnings: Vec<String>,
}

/// Sample the Ahlfors ratio on each Dirichlet part and the measure-density
/// ratio at boundary and interior points. Purely diagnostic.
pub fn check_geometry(mesh: &Mesh2D, radii: &[f64], samples: usize) -> Result<GeometryReport> {
    mesh.validate()?;
    if radii.is_empty() {
        return Err(Error::Parameter("radii must be nonempty".into()));
    }
    for &r in radii {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Parameter(format!("radius {r} outside (0,1)")));
        }
    }
    let mut warnings = Vec::new();
    let mut ahlfors = Vec::with_capacity(mesh.num_components);
    let mut sample_count = 0usize;

    for comp in 0..mesh.num_components {
        let part = &mesh.dirichlet_parts[comp];
        if part.is_empty() {
            ahlfors.push(None);
            continue;
        }
        let segs: Vec<(Point, Point)> = part
            .iter()
            .map(|&e| {
                let [a, b] = mesh.boundary_edges[e].vertices;
                (mesh.vertices[a], mesh.vertices[b])
            })
            .collect();
        let stride = (part.len() / samples.max(1)).max(1);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (k, &e) in part.iter().enumerate() {
            if k % stride != 0 {
                continue;
            }
            let [a, b] = mesh.boundary_edges[e].vertices;
            let mid = [
                0.5 * (mesh.vertices[a][0] + mesh.vertices[b][0]),
                0.5 * (mesh.vertices[a][1] + mesh.vertices[b][1]),
            ];
            sample_count += 1;
            for &r in radii {
                let mut len = 0.0;
                for &(p, q) in &segs {
                    len += segment_in_disk_length(p, q, mid, r);
                }
                let ratio = len / r;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
        }
        if lo <= 0.0 {
            warnings.push(format!(
                "component {comp}: Ahlfors ratio dropped to {lo:.3e} at some sample"
            ));
        }
        ahlfors.push(Some((lo, hi)));
    }

    // Density ratio at boundary-edge midpoints and triangle barycenters.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut density_points: Vec<Point> = Vec::new();
    for e in &mesh.boundary_edges {
        let [a, b] = e.vertices;
        density_points.push([
            0.5 * (mesh.vertices[a][0] + mesh.vertices[b][0]),
            0.5 * (mesh.vertices[a][1] + mesh.vertices[b][1]),
        ]);
    }
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangles[t];
        density_points.push([
            (mesh.vertices[a][0] + mesh.vertices[b][0] + mesh.vertices[c][0]) / 3.0,
            (mesh.vertices[a][1] + mesh.vertices[b][1] + mesh.vertices[c][1]) / 3.0,
        ]);
    }
    let stride = (density_points.len() / samples.max(1)).max(1);
    for (k, &x) in density_points.iter().enumerate() {
        if k % stride != 0 {
            continue;
        }
        sample_count += 1;
        for &r in radii {
            let mut area = 0.0;
            for t in 0..mesh.triangles.len() {
                let [a, b, c] = mesh.triangles[t];
                area += circle_polygon_area(
                    &[mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]],
                    x,
                    r,
                );
            }
            let ratio = area / (r * r);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    if lo < 0.1 {
        warnings.push(format!("density ratio dropped to {lo:.3e}; domain may be degenerate"));
    }

    Ok(GeometryReport {
        ahlfors_ratio: ahlfors,
        density_ratio: (lo, hi),
        sample_count,
        warnings,
    })
}

/// Length of segment [p,q] inside the disk B(center, r).
fn segment_in_disk_length(p: Point, q: Point, center: Point, r: f64) -> f64 {
    let d = [q[0] - p[0], q[1] - p[1]];
    let f = [p[0] - center[0], p[1] - center[1]];
    let a = d[0] * d[0] + d[1] * d[1];
    if a == 0.0 {
        return 0.0;
    }
    let b = 2.0 * (f[0] * d[0] + f[1] * d[1]);
    let c = f[0] * f[0] + f[1] * f[1] - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc <= 0.0 {
        return 0.0;
    }
    let sq = disc.sqrt();
    let t0 = ((-b - sq) / (2.0 * a)).clamp(0.0, 1.0);
    let t1 = ((-b + sq) / (2.0 * a)).clamp(0.0, 1.0);
    (t1 - t0).max(0.0) * a.sqrt()
}

/// Area of the intersection of a convex polygon (counter-clockwise) with a
/// disk, via signed circular wedges over the center.
pub fn circle_polygon_area(poly: &[Point], center: Point, r: f64) -> f64 {
    let n = poly.len();
    let mut area = 0.0;
    for i in 0..n {
        let a = [poly[i][0] - center[0], poly[i][1] - center[1]];
        let b = [poly[(i + 1) % n][0] - center[0], poly[(i + 1) % n][1] - center[1]];
        area += circle_triangle_area(a, b, r);
    }
    area
}

/// Signed area of the intersection of triangle (0, a, b) with the disk of
/// radius r centered at the origin.
fn circle_triangle_area(a: Point, b: Point, r: f64) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    if cross == 0.0 {
        return 0.0;
    }
    let ra = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let rb = (b[0] * b[0] + b[1] * b[1]).sqrt();
    let sector = |u: Point, v: Point| -> f64 {
        let dot = u[0] * v[0] + u[1] * v[1];
        let crs = u[0] * v[1] - u[1] * v[0];
        0.5 * r * r * crs.atan2(dot)
    };
    let inside_a = ra <= r + 1e-14;
    let inside_b = rb <= r + 1e-14;
    if inside_a && inside_b {
        return 0.5 * cross;
    }
    // Intersections of the segment a-b with the circle.
    let d = [b[0] - a[0], b[1] - a[1]];
    let aa = d[0] * d[0] + d[1] * d[1];
    let bb = 2.0 * (a[0] * d[0] + a[1] * d[1]);
    let cc = a[0] * a[0] + a[1] * a[1] - r * r;
    let disc = bb * bb - 4.0 * aa * cc;
    let mut ts: Vec<f64> = Vec::new();
    if disc > 0.0 {
        let sq = disc.sqrt();
        for t in [(-bb - sq) / (2.0 * aa), (-bb + sq) / (2.0 * aa)] {
            if t > 1e-12 && t < 1.0 - 1e-12 {
                ts.push(t);
            }
        }
    }
    let at = |t: f64| -> Point { [a[0] + t * d[0], a[1] + t * d[1]] };
    match (inside_a, inside_b, ts.len()) {
        (true, false, _) => {
            let p = at(*ts.first().unwrap_or(&1.0));
            0.5 * (a[0] * p[1] - a[1] * p[0]) + sector(p, b)
        }
        (false, true, _) => {
            let p = at(*ts.last().unwrap_or(&0.0));
            sector(a, p) + 0.5 * (p[0] * b[1] - p[1] * b[0])
        }
        (false, false, 2) => {
            let p = at(ts[0]);
            let q = at(ts[1]);
            sector(a, p) + 0.5 * (p[0] * q[1] - p[1] * q[0]) + sector(q, b)
        }
        (false, false, _) => sector(a, b),
        (true, true, _) => 0.5 * cross,
    }
}
