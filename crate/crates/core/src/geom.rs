//! Icosphere generation, subdivision and point location.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::binio::{self, Reader, Truncated, Writer};
use crate::error::Result;

pub type Vec3 = [f64; 3];

pub const MESH_MAGIC: &[u8; 8] = b"SRFMESH1";
const FORMAT_VERSION: u32 = 1;

/// Tolerance on the norm of query points.
pub const POINT_NORM_TOL: f64 = 1e-9;
/// A point is considered inside a face when every normalized edge-plane
/// distance is at least `-CONTAIN_TOL`.
pub const CONTAIN_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeomError {
    #[error("subdivision levels must be at least 1")]
    ZeroLevels,
    #[error("query point norm {norm} deviates from 1 by more than {POINT_NORM_TOL:e}")]
    PointNorm { norm: f64 },
    #[error("no face contains the query point")]
    Uncovered,
    #[error("face {face} references vertex {index} but the mesh has {vertices} vertices")]
    FaceIndex {
        face: usize,
        index: u32,
        vertices: usize,
    },
    #[error("face {face} is degenerate")]
    DegenerateFace { face: usize },
    #[error("vertex {vertex} has norm {norm}, not on the unit sphere")]
    VertexNorm { vertex: usize, norm: f64 },
    #[error("mesh with {vertices} vertices and {faces} faces is not an icosphere")]
    NotIcosphere { vertices: usize, faces: usize },
    #[error("bad mesh magic")]
    BadMagic,
    #[error("unsupported mesh format version {0}")]
    BadVersion(u32),
    #[error("truncated mesh file")]
    Truncated,
}

impl GeomError {
    pub fn code(&self) -> &'static str {
        match self {
            GeomError::ZeroLevels => "zero_levels",
            GeomError::PointNorm { .. } => "point_norm",
            GeomError::Uncovered => "uncovered",
            GeomError::FaceIndex { .. } => "face_index",
            GeomError::DegenerateFace { .. } => "degenerate_face",
            GeomError::VertexNorm { .. } => "vertex_norm",
            GeomError::NotIcosphere { .. } => "not_icosphere",
            GeomError::BadMagic => "bad_magic",
            GeomError::BadVersion(_) => "bad_version",
            GeomError::Truncated => "truncated",
        }
    }
}

impl From<Truncated> for GeomError {
    fn from(_: Truncated) -> Self {
        GeomError::Truncated
    }
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Triangle mesh: vertex positions plus counter-clockwise faces seen from
/// outside.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Undirected edges as sorted `(min, max)` pairs, ascending.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertex_count() as i64 - self.edge_count() as i64 + self.face_count() as i64
    }

    /// Vertex-to-vertex adjacency lists, each sorted ascending.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Faces incident to each vertex, ascending.
    pub fn vertex_faces(&self) -> Vec<Vec<u32>> {
        let mut inc = vec![Vec::new(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            for &v in face {
                inc[v as usize].push(f as u32);
            }
        }
        inc
    }

    pub fn face_corners(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|v| self.vertices[v as usize])
    }

    /// Checks index bounds and non-degeneracy of every face.
    pub fn validate(&self) -> Result<(), GeomError> {
        let n = self.vertices.len();
        for (f, face) in self.faces.iter().enumerate() {
            for &index in face {
                if index as usize >= n {
                    return Err(GeomError::FaceIndex {
                        face: f,
                        index,
                        vertices: n,
                    });
                }
            }
            let [a, b, c] = *face;
            if a == b || b == c || a == c {
                return Err(GeomError::DegenerateFace { face: f });
            }
        }
        Ok(())
    }

    /// Spherical-triangle area of each face (vertices assumed on the unit sphere).
    pub fn spherical_face_areas(&self) -> Vec<f64> {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.face_corners(f);
                // Van Oosterom-Strackee solid angle
                let num = dot(a, cross(b, c)).abs();
                let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
                2.0 * num.atan2(den)
            })
            .collect()
    }

    /// Quadrature weights per vertex: a third of each incident spherical face
    /// area. Sums to 4π on a closed unit-sphere mesh.
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.vertices.len()];
        for (face, area) in self.faces.iter().zip(self.spherical_face_areas()) {
            for &v in face {
                w[v as usize] += area / 3.0;
            }
        }
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MESH_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.vertices.len() as u64);
        w.u64(self.faces.len() as u64);
        for v in &self.vertices {
            for &x in v {
                w.f64(x);
            }
        }
        for f in &self.faces {
            for &i in f {
                w.u32(i);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeomError> {
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|_| GeomError::BadMagic)? != MESH_MAGIC {
            return Err(GeomError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GeomError::BadVersion(version));
        }
        let nv = usize::try_from(r.u64()?).map_err(|_| GeomError::Truncated)?;
        let nf = usize::try_from(r.u64()?).map_err(|_| GeomError::Truncated)?;
        r.ensure(nv, 24)?;
        let vertices = (0..nv)
            .map(|_| Ok([r.f64()?, r.f64()?, r.f64()?]))
            .collect::<Result<Vec<_>, Truncated>>()?;
        r.ensure(nf, 12)?;
        let faces = (0..nf)
            .map(|_| Ok([r.u32()?, r.u32()?, r.u32()?]))
            .collect::<Result<Vec<_>, Truncated>>()?;
        let mesh = TriMesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&binio::read_file(path)?)?)
    }
}

/// Icosphere of a given subdivision order.
#[derive(Debug, Clone, PartialEq)]
pub struct Icosphere {
    pub mesh: TriMesh,
    pub order: u32,
    /// For each face, its parent face at `order - 1`. Empty at order 0 and
    /// for meshes loaded without provenance.
    pub parent_face: Vec<u32>,
}

pub fn vertex_count_for_order(order: u32) -> usize {
    10 * 4usize.pow(order) + 2
}

pub fn face_count_for_order(order: u32) -> usize {
    20 * 4usize.pow(order)
}

pub fn edge_count_for_order(order: u32) -> usize {
    30 * 4usize.pow(order)
}

/// The order-0 icosahedron, vertices at `(0, ±1, ±φ)` and cyclic permutations,
/// normalized to the unit sphere.
pub fn base_icosahedron() -> Icosphere {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw: [Vec3; 12] = [
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
    let scale = (1.0 + phi * phi).sqrt();
    let vertices = raw.iter().map(|v| v.map(|x| x / scale)).collect();
    let faces = vec![
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
    Icosphere {
        mesh: TriMesh { vertices, faces },
        order: 0,
        parent_face: Vec::new(),
    }
}

fn subdivide_once(ico: &Icosphere) -> Icosphere {
    let mesh = &ico.mesh;
    let edges = mesh.edges();
    let base = mesh.vertices.len() as u32;
    let midpoint: HashMap<(u32, u32), u32> = edges
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, base + i as u32))
        .collect();
    let mut vertices = mesh.vertices.clone();
    vertices.reserve(edges.len());
    for &(a, b) in &edges {
        let (pa, pb) = (mesh.vertices[a as usize], mesh.vertices[b as usize]);
        vertices.push(normalize([
            0.5 * (pa[0] + pb[0]),
            0.5 * (pa[1] + pb[1]),
            0.5 * (pa[2] + pb[2]),
        ]));
    }
    let mid = |a: u32, b: u32| midpoint[&(a.min(b), a.max(b))];
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    let mut parent_face = Vec::with_capacity(mesh.faces.len() * 4);
    for (f, &[a, b, c]) in mesh.faces.iter().enumerate() {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        faces.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        parent_face.extend_from_slice(&[f as u32; 4]);
    }
    Icosphere {
        mesh: TriMesh { vertices, faces },
        order: ico.order + 1,
        parent_face,
    }
}

/// Subdivide `levels` times by edge-midpoint insertion and reprojection.
///
/// Parent vertices keep their indices; new midpoints follow in ascending
/// `(min, max)` edge order. `parent_face` refers to the last level.
pub fn subdivide(ico: &Icosphere, levels: u32) -> Result<Icosphere, GeomError> {
    if levels == 0 {
        return Err(GeomError::ZeroLevels);
    }
    let mut out = subdivide_once(ico);
    for _ in 1..levels {
        out = subdivide_once(&out);
    }
    Ok(out)
}

impl Icosphere {
    /// Canonical icosphere of the given order.
    pub fn new(order: u32) -> Self {
        let base = base_icosahedron();
        if order == 0 {
            base
        } else {
            subdivide(&base, order).expect("levels > 0")
        }
    }

    /// Wraps a loaded mesh, inferring the order from its counts. Vertices
    /// must lie on the unit sphere.
    pub fn from_mesh(mesh: TriMesh) -> Result<Self, GeomError> {
        mesh.validate()?;
        let (nv, nf) = (mesh.vertex_count(), mesh.face_count());
        let order = (0..=15)
            .find(|&n| vertex_count_for_order(n) == nv && face_count_for_order(n) == nf)
            .ok_or(GeomError::NotIcosphere {
                vertices: nv,
                faces: nf,
            })?;
        for (i, v) in mesh.vertices.iter().enumerate() {
            let n = norm(*v);
            if (n - 1.0).abs() > 1e-9 {
                return Err(GeomError::VertexNorm { vertex: i, norm: n });
            }
        }
        Ok(Self {
            mesh,
            order,
            parent_face: Vec::new(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn face_count(&self) -> usize {
        self.mesh.face_count()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.mesh.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.mesh.faces
    }

    pub fn locator(&self) -> FaceLocator<'_> {
        FaceLocator::new(&self.mesh)
    }
}

/// Result of point location: containing face and clamped barycentric weights
/// for its three corners in face order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub face: usize,
    pub weights: [f64; 3],
}

/// Normalized signed distances of `p` to the three edge planes of a face.
/// All non-negative means the ray through `p` crosses the face.
#[inline]
fn edge_distances(p: Vec3, n: &[Vec3; 3]) -> [f64; 3] {
    [dot(p, n[0]), dot(p, n[1]), dot(p, n[2])]
}

/// Outward normals of the planes through the origin and each face edge,
/// normalized; index `i` is the plane opposite corner `i`.
fn edge_planes(corners: [Vec3; 3]) -> [Vec3; 3] {
    let [a, b, c] = corners;
    [
        normalize(cross(b, c)),
        normalize(cross(c, a)),
        normalize(cross(a, b)),
    ]
}

fn weights_from(p: Vec3, corners: [Vec3; 3]) -> [f64; 3] {
    let [a, b, c] = corners;
    // barycentric coordinates of the ray-plane intersection are proportional
    // to the triple products against opposite edges
    let mut w = [dot(p, cross(b, c)), dot(p, cross(c, a)), dot(p, cross(a, b))];
    for x in &mut w {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s = w[0] + w[1] + w[2];
    w.map(|x| x / s)
}

fn check_norm(p: Vec3) -> Result<(), GeomError> {
    let n = norm(p);
    if (n - 1.0).abs() > POINT_NORM_TOL || !n.is_finite() {
        return Err(GeomError::PointNorm { norm: n });
    }
    Ok(())
}

fn contains(p: Vec3, planes: &[Vec3; 3]) -> bool {
    edge_distances(p, planes).iter().all(|&d| d >= -CONTAIN_TOL)
}

/// Reference point location by scanning every face. Returns the
/// lowest-index face whose gnomonic projection contains `p`.
pub fn locate_face(mesh: &TriMesh, p: Vec3) -> Result<Location, GeomError> {
    check_norm(p)?;
    for f in 0..mesh.faces.len() {
        let corners = mesh.face_corners(f);
        if contains(p, &edge_planes(corners)) {
            return Ok(Location {
                face: f,
                weights: weights_from(p, corners),
            });
        }
    }
    Err(GeomError::Uncovered)
}

/// All faces whose gnomonic projection contains `p`, ascending.
pub fn containing_faces(mesh: &TriMesh, p: Vec3) -> Vec<usize> {
    (0..mesh.faces.len())
        .filter(|&f| contains(p, &edge_planes(mesh.face_corners(f))))
        .collect()
}

/// Point location accelerated by a uniform grid over face bounding caps.
///
/// Gives the same answer as [`locate_face`]: every face whose spherical
/// triangle can contain the query is a candidate, and candidates are tested
/// in ascending index order.
#[derive(Debug, Clone)]
pub struct FaceLocator<'a> {
    mesh: &'a TriMesh,
    planes: Vec<[Vec3; 3]>,
    centers: Vec<Vec3>,
    radii: Vec<f64>,
    cell: f64,
    dims: usize,
    buckets: HashMap<(i32, i32, i32), Vec<u32>>,
}

const CAP_MARGIN: f64 = 1e-9;

impl<'a> FaceLocator<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let nf = mesh.faces.len();
        let mut planes = Vec::with_capacity(nf);
        let mut centers = Vec::with_capacity(nf);
        let mut radii = Vec::with_capacity(nf);
        for f in 0..nf {
            let corners = mesh.face_corners(f);
            planes.push(edge_planes(corners));
            let [a, b, c] = corners;
            let center = normalize([a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]]);
            let r = corners
                .iter()
                .map(|&v| norm(sub(v, center)))
                .fold(0.0, f64::max)
                + CAP_MARGIN;
            centers.push(center);
            radii.push(r);
        }
        let max_r = radii.iter().copied().fold(0.0, f64::max);
        let dims = ((2.0 / max_r).floor() as usize).clamp(1, 256);
        let cell = 2.0 / dims as f64;
        let mut buckets: HashMap<(i32, i32, i32), Vec<u32>> = HashMap::new();
        let mut locator = Self {
            mesh,
            planes,
            centers,
            radii,
            cell,
            dims,
            buckets: HashMap::new(),
        };
        for f in 0..nf {
            buckets
                .entry(locator.cell_of(locator.centers[f]))
                .or_default()
                .push(f as u32);
        }
        locator.buckets = buckets;
        locator
    }

    fn cell_of(&self, p: Vec3) -> (i32, i32, i32) {
        let idx = |x: f64| {
            (((x + 1.0) / self.cell).floor() as i64).clamp(0, self.dims as i64 - 1) as i32
        };
        (idx(p[0]), idx(p[1]), idx(p[2]))
    }

    /// Faces whose bounding cap contains `p`, ascending.
    fn candidates(&self, p: Vec3) -> Vec<u32> {
        let (i, j, k) = self.cell_of(p);
        let mut out = Vec::new();
        for di in -1..=1 {
            for dj in -1..=1 {
                for dk in -1..=1 {
                    if let Some(list) = self.buckets.get(&(i + di, j + dj, k + dk)) {
                        out.extend(list.iter().copied().filter(|&f| {
                            norm(sub(p, self.centers[f as usize])) <= self.radii[f as usize]
                        }));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn locate(&self, p: Vec3) -> Result<Location, GeomError> {
        check_norm(p)?;
        for f in self.candidates(p) {
            let f = f as usize;
            if contains(p, &self.planes[f]) {
                return Ok(Location {
                    face: f,
                    weights: weights_from(p, self.mesh.face_corners(f)),
                });
            }
        }
        Err(GeomError::Uncovered)
    }

    /// Every face containing `p` (edge and corner points hit several).
    pub fn containing(&self, p: Vec3) -> Vec<usize> {
        self.candidates(p)
            .into_iter()
            .map(|f| f as usize)
            .filter(|&f| contains(p, &self.planes[f]))
            .collect()
    }

    /// Clamped barycentric weights of `p` against face `f`, regardless of
    /// containment.
    pub fn weights(&self, face: usize, p: Vec3) -> [f64; 3] {
        weights_from(p, self.mesh.face_corners(face))
    }

    /// Unclamped barycentric weights of `p` against face `f`.
    pub fn raw_weights(&self, face: usize, p: Vec3) -> [f64; 3] {
        let [a, b, c] = self.mesh.face_corners(face);
        let w = [dot(p, cross(b, c)), dot(p, cross(c, a)), dot(p, cross(a, b))];
        let s = w[0] + w[1] + w[2];
        w.map(|x| x / s)
    }
}

/// Map from each undirected edge to the faces on either side; used by tests
/// and by the demo for outlines.
pub fn edge_faces(mesh: &TriMesh) -> BTreeMap<(u32, u32), Vec<u32>> {
    let mut map: BTreeMap<(u32, u32), Vec<u32>> = BTreeMap::new();
    for (f, &[a, b, c]) in mesh.faces.iter().enumerate() {
        for (x, y) in [(a, b), (b, c), (c, a)] {
            map.entry((x.min(y), x.max(y))).or_default().push(f as u32);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn random_unit(rng: &mut SeedStream) -> Vec3 {
        normalize([rng.normal(), rng.normal(), rng.normal()])
    }

    #[test]
    fn icosahedron_counts() {
        let ico = base_icosahedron();
        assert_eq!(ico.vertex_count(), 12);
        assert_eq!(ico.face_count(), 20);
        assert_eq!(ico.mesh.edge_count(), 30);
        assert_eq!(ico.mesh.euler_characteristic(), 2);
        for v in ico.vertices() {
            assert!((norm(*v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orientation_outward() {
        for order in 0..4 {
            let ico = Icosphere::new(order);
            for f in 0..ico.face_count() {
                let [a, b, c] = ico.mesh.face_corners(f);
                let n = cross(sub(b, a), sub(c, a));
                let centroid = [a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]];
                assert!(dot(n, centroid) > 0.0, "order {order} face {f}");
            }
        }
    }

    #[test]
    fn zero_levels_rejected() {
        assert_eq!(
            subdivide(&base_icosahedron(), 0).unwrap_err(),
            GeomError::ZeroLevels
        );
    }

    #[test]
    fn subdivision_keeps_parents_and_quadruples() {
        let ico2 = Icosphere::new(2);
        assert_eq!(ico2.vertex_count(), 162);
        assert_eq!(ico2.face_count(), 320);
        let ico3 = subdivide(&ico2, 1).unwrap();
        assert_eq!(ico3.face_count(), 4 * ico2.face_count());
        assert_eq!(&ico3.vertices()[..162], ico2.vertices());
        let mut counts = vec![0; ico2.face_count()];
        for &p in &ico3.parent_face {
            counts[p as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn midpoints_follow_sorted_edges() {
        let ico0 = base_icosahedron();
        let ico1 = Icosphere::new(1);
        for (i, (a, b)) in ico0.mesh.edges().into_iter().enumerate() {
            let (pa, pb) = (ico0.vertices()[a as usize], ico0.vertices()[b as usize]);
            let m = normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]);
            let got = ico1.vertices()[12 + i];
            assert!(norm(sub(m, got)) < 1e-15);
        }
    }

    #[test]
    fn locate_vertex_and_centroid() {
        let ico = Icosphere::new(2);
        let loc = ico.locator();
        for (v, &p) in ico.vertices().iter().enumerate() {
            let l = loc.locate(p).unwrap();
            let face = ico.faces()[l.face];
            let k = face.iter().position(|&x| x as usize == v).unwrap();
            for i in 0..3 {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((l.weights[i] - want).abs() < 1e-12);
            }
        }
        for f in 0..ico.face_count() {
            let [a, b, c] = ico.mesh.face_corners(f);
            let p = normalize([a[0] + b[0] + c[0], a[1] + b[1] + c[1], a[2] + b[2] + c[2]]);
            let l = loc.locate(p).unwrap();
            assert_eq!(l.face, f);
            for w in l.weights {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn locate_rejects_off_sphere() {
        let ico = Icosphere::new(1);
        assert!(matches!(
            locate_face(&ico.mesh, [1.1, 0.0, 0.0]),
            Err(GeomError::PointNorm { .. })
        ));
        assert!(matches!(
            ico.locator().locate([0.0, 0.0, 0.9]),
            Err(GeomError::PointNorm { .. })
        ));
    }

    #[test]
    fn accelerated_matches_brute_force() {
        let mut rng = SeedStream::new(42);
        for order in [0, 1, 3] {
            let ico = Icosphere::new(order);
            let loc = ico.locator();
            for _ in 0..2000 {
                let p = random_unit(&mut rng);
                assert_eq!(loc.locate(p).unwrap(), locate_face(&ico.mesh, p).unwrap());
            }
            // vertices and edge midpoints exercise the tie rule
            for &p in ico.vertices() {
                assert_eq!(loc.locate(p).unwrap(), locate_face(&ico.mesh, p).unwrap());
                assert_eq!(loc.containing(p), containing_faces(&ico.mesh, p));
            }
        }
    }

    #[test]
    fn random_points_reconstruct() {
        let ico = Icosphere::new(3);
        let loc = ico.locator();
        let mut rng = SeedStream::new(5);
        for _ in 0..10_000 {
            let p = random_unit(&mut rng);
            let l = loc.locate(p).unwrap();
            let c = ico.mesh.face_corners(l.face);
            let q = normalize(
                [0, 1, 2].map(|k| (0..3).map(|i| l.weights[i] * c[i][k]).sum::<f64>()),
            );
            assert!(norm(sub(p, q)) < 1e-9);
            assert!(l.weights.iter().all(|&w| w >= 0.0));
            assert!((l.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_points_tie_to_lowest_face() {
        let ico = Icosphere::new(1);
        for ((a, b), faces) in edge_faces(&ico.mesh) {
            let (pa, pb) = (ico.vertices()[a as usize], ico.vertices()[b as usize]);
            let p = normalize([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]);
            let got = ico.locator().locate(p).unwrap().face as u32;
            assert_eq!(got, *faces.iter().min().unwrap());
        }
    }

    #[test]
    fn mesh_bytes_round_trip_and_errors() {
        let ico = Icosphere::new(1);
        let bytes = ico.mesh.to_bytes();
        assert_eq!(TriMesh::from_bytes(&bytes).unwrap(), ico.mesh);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(TriMesh::from_bytes(&bad).unwrap_err(), GeomError::BadMagic);
        assert_eq!(
            TriMesh::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err(),
            GeomError::Truncated
        );
        let back = Icosphere::from_mesh(TriMesh::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.order, 1);
    }

    #[test]
    fn vertex_areas_cover_sphere() {
        let ico = Icosphere::new(3);
        let total: f64 = ico.mesh.vertex_areas().iter().sum();
        assert!((total - 4.0 * std::f64::consts::PI).abs() < 1e-9);
    }
}
