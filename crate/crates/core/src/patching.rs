//! Patch tables over a mesh and the flattened patch sequences built from them.

use std::path::Path;

use crate::binio::{self, Reader, Truncated, Writer};
use crate::error::Result;
use crate::geom::{GeomError, Icosphere};
use crate::resample::{ResampleError, SurfaceSignal};

pub const PATCH_MAGIC: &[u8; 8] = b"PTCHTBL1";
const FORMAT_VERSION: u32 = 1;

/// Vertex-0 coordinates of two grids from the same seed agree to this.
const SEED_TOL: f64 = 1e-12;
/// Largest accepted distance of a scaled barycentric coordinate from the
/// nearest lattice integer.
const LATTICE_TOL: f64 = 0.25;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PatchError {
    #[error("low-resolution order {low} is finer than high-resolution order {high}")]
    NotCoarser { high: u32, low: u32 },
    #[error("grids do not share a seed: vertex 0 differs")]
    SeedMismatch,
    #[error("face {face}: vertex {vertex} does not sit on the triangular lattice")]
    OffLattice { face: usize, vertex: usize },
    #[error("face {face}: lattice slot {slot} is {problem}")]
    LatticeSlot {
        face: usize,
        slot: usize,
        problem: &'static str,
    },
    #[error("patch {patch} references vertex {index} but the mesh has {vertices} vertices")]
    IndexRange {
        patch: usize,
        index: u32,
        vertices: usize,
    },
    #[error("patch {patch} repeats vertex {index}")]
    DuplicateIndex { patch: usize, index: u32 },
    #[error("vertex {0} belongs to no patch")]
    Uncovered(usize),
    #[error("table shape {patches}x{size} does not match {len} indices")]
    Shape {
        patches: usize,
        size: usize,
        len: usize,
    },
    #[error("signal has {got} vertices but the table expects {expected}")]
    VertexCount { expected: usize, got: usize },
    #[error("pairing is not a perfect matching: {0}")]
    Pairing(String),
    #[error("merged patch {pair} has {got} vertices, expected {expected}")]
    MergedSize {
        pair: usize,
        expected: usize,
        got: usize,
    },
    #[error("sequence disagrees at vertex {vertex} channel {channel}")]
    Inconsistent { vertex: usize, channel: usize },
    #[error("bad patch table magic")]
    BadMagic,
    #[error("unsupported patch table version {0}")]
    BadVersion(u32),
    #[error("truncated patch table")]
    Truncated,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Signal(#[from] ResampleError),
}

impl PatchError {
    pub fn code(&self) -> &'static str {
        match self {
            PatchError::NotCoarser { .. } => "not_coarser",
            PatchError::SeedMismatch => "seed_mismatch",
            PatchError::OffLattice { .. } => "off_lattice",
            PatchError::LatticeSlot { .. } => "lattice_slot",
            PatchError::IndexRange { .. } => "index_range",
            PatchError::DuplicateIndex { .. } => "duplicate_index",
            PatchError::Uncovered(_) => "uncovered",
            PatchError::Shape { .. } => "shape",
            PatchError::VertexCount { .. } => "vertex_count",
            PatchError::Pairing(_) => "pairing",
            PatchError::MergedSize { .. } => "merged_size",
            PatchError::Inconsistent { .. } => "inconsistent",
            PatchError::BadMagic => "bad_magic",
            PatchError::BadVersion(_) => "bad_version",
            PatchError::Truncated => "truncated",
            PatchError::Geom(e) => e.code(),
            PatchError::Signal(e) => e.code(),
        }
    }
}

impl From<Truncated> for PatchError {
    fn from(_: Truncated) -> Self {
        PatchError::Truncated
    }
}

/// `patch_count x patch_size` vertex indices into a mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchTable {
    patch_count: usize,
    patch_size: usize,
    mesh_vertex_count: usize,
    indices: Vec<u32>,
}

/// Number of lattice points in a triangle with `m` points per side.
pub fn triangular(m: usize) -> usize {
    m * (m + 1) / 2
}

impl PatchTable {
    pub fn new(
        patch_count: usize,
        patch_size: usize,
        mesh_vertex_count: usize,
        indices: Vec<u32>,
    ) -> Result<Self, PatchError> {
        let table = Self {
            patch_count,
            patch_size,
            mesh_vertex_count,
            indices,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        if self.indices.len() != self.patch_count * self.patch_size {
            return Err(PatchError::Shape {
                patches: self.patch_count,
                size: self.patch_size,
                len: self.indices.len(),
            });
        }
        let mut seen = vec![false; self.mesh_vertex_count];
        for p in 0..self.patch_count {
            let patch = self.patch(p);
            for (i, &index) in patch.iter().enumerate() {
                if index as usize >= self.mesh_vertex_count {
                    return Err(PatchError::IndexRange {
                        patch: p,
                        index,
                        vertices: self.mesh_vertex_count,
                    });
                }
                if patch[..i].contains(&index) {
                    return Err(PatchError::DuplicateIndex { patch: p, index });
                }
                seen[index as usize] = true;
            }
        }
        if let Some(v) = seen.iter().position(|&s| !s) {
            return Err(PatchError::Uncovered(v));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn mesh_vertex_count(&self) -> usize {
        self.mesh_vertex_count
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn patch(&self, p: usize) -> &[u32] {
        &self.indices[p * self.patch_size..(p + 1) * self.patch_size]
    }

    /// Number of patches each mesh vertex belongs to.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut m = vec![0; self.mesh_vertex_count];
        for &i in &self.indices {
            m[i as usize] += 1;
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PATCH_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.patch_count as u64);
        w.u64(self.patch_size as u64);
        w.u64(self.mesh_vertex_count as u64);
        for &i in &self.indices {
            w.u32(i);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PatchError> {
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|_| PatchError::BadMagic)? != PATCH_MAGIC {
            return Err(PatchError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PatchError::BadVersion(version));
        }
        let p = usize::try_from(r.u64()?).map_err(|_| PatchError::Truncated)?;
        let k = usize::try_from(r.u64()?).map_err(|_| PatchError::Truncated)?;
        let v = usize::try_from(r.u64()?).map_err(|_| PatchError::Truncated)?;
        let n = p.checked_mul(k).ok_or(PatchError::Truncated)?;
        r.ensure(n, 4)?;
        let indices = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        Self::new(p, k, v, indices)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&binio::read_file(path)?)?)
    }
}

/// Patch table with one patch per face of `low`, holding every vertex of
/// `high` that lies on that face. Vertices on low-face edges and corners
/// are replicated into every incident patch.
///
/// Within a patch, vertices follow triangular-lattice row-major order: the
/// face is rotated so its lowest-index corner comes first, rows run from
/// that corner toward the opposite edge, and each row runs from the second
/// corner's side to the third's.
pub fn build_ico_patch_table(high: &Icosphere, low: &Icosphere) -> Result<PatchTable, PatchError> {
    if low.order > high.order {
        return Err(PatchError::NotCoarser {
            high: high.order,
            low: low.order,
        });
    }
    let (h0, l0) = (high.vertices()[0], low.vertices()[0]);
    if (0..3).any(|k| (h0[k] - l0[k]).abs() > SEED_TOL) {
        return Err(PatchError::SeedMismatch);
    }
    let m = 1usize << (high.order - low.order);
    let k = triangular(m + 1);
    let nf = low.face_count();
    const EMPTY: u32 = u32::MAX;
    let mut indices = vec![EMPTY; nf * k];
    let locator = low.locator();

    // lowest-index corner first, cyclic order kept
    let rotated: Vec<[u32; 3]> = low
        .faces()
        .iter()
        .map(|&[a, b, c]| {
            if a < b && a < c {
                [a, b, c]
            } else if b < c {
                [b, c, a]
            } else {
                [c, a, b]
            }
        })
        .collect();
    let rotated_mesh = crate::geom::TriMesh {
        vertices: low.mesh.vertices.clone(),
        faces: rotated,
    };
    let rotated_locator = crate::geom::FaceLocator::new(&rotated_mesh);

    for (v, &p) in high.vertices().iter().enumerate() {
        for f in locator.containing(p) {
            let w = rotated_locator.raw_weights(f, p);
            let mf = m as f64;
            let row_f = mf * (1.0 - w[0]);
            let col_f = mf * w[2];
            let (row, col) = (row_f.round(), col_f.round());
            if (row_f - row).abs() > LATTICE_TOL || (col_f - col).abs() > LATTICE_TOL {
                return Err(PatchError::OffLattice { face: f, vertex: v });
            }
            let (row, col) = (row as usize, col as usize);
            if row > m || col > row {
                return Err(PatchError::OffLattice { face: f, vertex: v });
            }
            let slot = triangular(row) + col;
            let cell = &mut indices[f * k + slot];
            if *cell != EMPTY {
                return Err(PatchError::LatticeSlot {
                    face: f,
                    slot,
                    problem: "claimed twice",
                });
            }
            *cell = v as u32;
        }
    }
    if let Some(pos) = indices.iter().position(|&i| i == EMPTY) {
        return Err(PatchError::LatticeSlot {
            face: pos / k,
            slot: pos % k,
            problem: "empty",
        });
    }
    PatchTable::new(nf, k, high.vertex_count(), indices)
}

/// Flattened patch tokens, `patch_count x (patch_size * channels)`, with
/// each vertex's channels contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub tokens: Vec<f32>,
    pub patch_count: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn token_width(&self) -> usize {
        self.patch_size * self.channels
    }

    pub fn token(&self, p: usize) -> &[f32] {
        let w = self.token_width();
        &self.tokens[p * w..(p + 1) * w]
    }

    /// Tokens widened to `f64`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.tokens.iter().map(|&x| x as f64).collect()
    }
}

pub fn extract_sequence(signal: &SurfaceSignal, table: &PatchTable) -> Result<PatchSequence, PatchError> {
    if signal.vertex_count() != table.mesh_vertex_count() {
        return Err(PatchError::VertexCount {
            expected: table.mesh_vertex_count(),
            got: signal.vertex_count(),
        });
    }
    let c = signal.channel_count();
    let mut tokens = Vec::with_capacity(table.indices().len() * c);
    for &v in table.indices() {
        tokens.extend_from_slice(signal.row(v as usize));
    }
    Ok(PatchSequence {
        tokens,
        patch_count: table.patch_count(),
        patch_size: table.patch_size(),
        channels: c,
    })
}

/// Inverse of [`extract_sequence`]: writes every token entry back to its
/// vertex, requiring replicated entries to agree exactly.
pub fn scatter_sequence(
    seq: &PatchSequence,
    table: &PatchTable,
    channels: Vec<String>,
) -> Result<SurfaceSignal, PatchError> {
    let c = seq.channels;
    let mut data = vec![f32::NAN; table.mesh_vertex_count() * c];
    let mut written = vec![false; table.mesh_vertex_count()];
    for (slot, &v) in table.indices().iter().enumerate() {
        let v = v as usize;
        let src = &seq.tokens[slot * c..(slot + 1) * c];
        let dst = &mut data[v * c..(v + 1) * c];
        if written[v] {
            if let Some(ch) = (0..c).find(|&ch| dst[ch].to_bits() != src[ch].to_bits()) {
                return Err(PatchError::Inconsistent { vertex: v, channel: ch });
            }
        } else {
            dst.copy_from_slice(src);
            written[v] = true;
        }
    }
    Ok(SurfaceSignal::new(table.mesh_vertex_count(), channels, data)?)
}

/// Merge patches in pairs. Each merged patch lists the first patch's
/// vertices then the second's vertices not already present. All merged
/// patches must end up the same size.
pub fn merge_patches(table: &PatchTable, pairing: &[(usize, usize)]) -> Result<PatchTable, PatchError> {
    let p = table.patch_count();
    if !p.is_multiple_of(2) || pairing.len() * 2 != p {
        return Err(PatchError::Pairing(format!(
            "{} pairs cannot cover {} patches",
            pairing.len(),
            p
        )));
    }
    let mut used = vec![false; p];
    for &(a, b) in pairing {
        for x in [a, b] {
            if x >= p {
                return Err(PatchError::Pairing(format!("patch {x} out of range")));
            }
            if used[x] {
                return Err(PatchError::Pairing(format!("patch {x} used twice")));
            }
            used[x] = true;
        }
    }
    let merged: Vec<Vec<u32>> = pairing
        .iter()
        .map(|&(a, b)| {
            let mut m = table.patch(a).to_vec();
            for &v in table.patch(b) {
                if !m.contains(&v) {
                    m.push(v);
                }
            }
            m
        })
        .collect();
    let expected = merged[0].len();
    if let Some((pair, m)) = merged.iter().enumerate().find(|(_, m)| m.len() != expected) {
        return Err(PatchError::MergedSize {
            pair,
            expected,
            got: m.len(),
        });
    }
    PatchTable::new(
        pairing.len(),
        expected,
        table.mesh_vertex_count(),
        merged.concat(),
    )
}
