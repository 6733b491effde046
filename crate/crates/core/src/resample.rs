//! Barycentric resampling of per-vertex signals and sphere rotations.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Truncated, Writer};
use crate::error::Result;
use crate::geom::{GeomError, Icosphere, Vec3};
use crate::rng::SeedStream;

pub const SIGNAL_MAGIC: &[u8; 8] = b"SRFSIG01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ResampleError {
    #[error("signal has {got} vertices but the grid has {expected}")]
    VertexCount { expected: usize, got: usize },
    #[error("signal needs at least one channel")]
    NoChannels,
    #[error("duplicate channel name {0:?}")]
    DuplicateChannel(String),
    #[error("signal data length {got} does not match {vertices}x{channels}")]
    DataLength {
        vertices: usize,
        channels: usize,
        got: usize,
    },
    #[error("rotation angle {0} exceeds 360 degrees")]
    AngleRange(f64),
    #[error("bad rotation {0:?}, expected AXIS:DEGREES")]
    BadRotation(String),
    #[error("rotation policy is empty")]
    EmptyPolicy,
    #[error("bad signal magic")]
    BadMagic,
    #[error("unsupported signal format version {0}")]
    BadVersion(u32),
    #[error("truncated signal file")]
    Truncated,
    #[error("channel name is not UTF-8")]
    BadName,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

impl ResampleError {
    pub fn code(&self) -> &'static str {
        match self {
            ResampleError::VertexCount { .. } => "vertex_count",
            ResampleError::NoChannels => "no_channels",
            ResampleError::DuplicateChannel(_) => "duplicate_channel",
            ResampleError::DataLength { .. } => "data_length",
            ResampleError::AngleRange(_) => "angle_range",
            ResampleError::BadRotation(_) => "bad_rotation",
            ResampleError::EmptyPolicy => "empty_policy",
            ResampleError::BadMagic => "bad_magic",
            ResampleError::BadVersion(_) => "bad_version",
            ResampleError::Truncated => "truncated",
            ResampleError::BadName => "bad_name",
            ResampleError::Geom(e) => e.code(),
        }
    }
}

impl From<Truncated> for ResampleError {
    fn from(_: Truncated) -> Self {
        ResampleError::Truncated
    }
}

/// Per-vertex multi-channel signal, `vertex_count x channels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSignal {
    vertex_count: usize,
    channels: Vec<String>,
    data: Vec<f32>,
}

impl SurfaceSignal {
    pub fn new(vertex_count: usize, channels: Vec<String>, data: Vec<f32>) -> Result<Self, ResampleError> {
        if channels.is_empty() {
            return Err(ResampleError::NoChannels);
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].contains(c) {
                return Err(ResampleError::DuplicateChannel(c.clone()));
            }
        }
        if data.len() != vertex_count * channels.len() {
            return Err(ResampleError::DataLength {
                vertices: vertex_count,
                channels: channels.len(),
                got: data.len(),
            });
        }
        Ok(Self {
            vertex_count,
            channels,
            data,
        })
    }

    pub fn constant(vertex_count: usize, channels: Vec<String>, value: f32) -> Result<Self, ResampleError> {
        let n = vertex_count * channels.len();
        Self::new(vertex_count, channels, vec![value; n])
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, v: usize) -> &[f32] {
        let c = self.channels.len();
        &self.data[v * c..(v + 1) * c]
    }

    pub fn value(&self, v: usize, channel: usize) -> f32 {
        self.data[v * self.channels.len() + channel]
    }

    pub fn check_grid(&self, grid: &Icosphere) -> Result<(), ResampleError> {
        if self.vertex_count != grid.vertex_count() {
            return Err(ResampleError::VertexCount {
                expected: grid.vertex_count(),
                got: self.vertex_count,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(SIGNAL_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.vertex_count as u64);
        w.u32(self.channels.len() as u32);
        for name in &self.channels {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
        }
        for &x in &self.data {
            w.f32(x);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ResampleError> {
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(|_| ResampleError::BadMagic)? != SIGNAL_MAGIC {
            return Err(ResampleError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ResampleError::BadVersion(version));
        }
        let nv = usize::try_from(r.u64()?).map_err(|_| ResampleError::Truncated)?;
        let nc = r.u32()? as usize;
        let mut channels = Vec::with_capacity(nc.min(1024));
        for _ in 0..nc {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            channels.push(String::from_utf8(raw.to_vec()).map_err(|_| ResampleError::BadName)?);
        }
        let n = nv.checked_mul(nc).ok_or(ResampleError::Truncated)?;
        r.ensure(n, 4)?;
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        Self::new(nv, channels, data)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&binio::read_file(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

/// Rotation of the sphere about a coordinate axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub axis: Axis,
    pub angle_degrees: f64,
}

pub type Mat3 = [[f64; 3]; 3];

impl Rotation {
    pub fn new(axis: Axis, angle_degrees: f64) -> Result<Self, ResampleError> {
        if !(angle_degrees.abs() <= 360.0) {
            return Err(ResampleError::AngleRange(angle_degrees));
        }
        Ok(Self {
            axis,
            angle_degrees,
        })
    }

    /// Standard right-handed rotation matrix.
    pub fn matrix(&self) -> Mat3 {
        let (s, c) = self.angle_degrees.to_radians().sin_cos();
        match self.axis {
            Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
            Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            axis: self.axis,
            angle_degrees: -self.angle_degrees,
        }
    }

    fn key(&self) -> (Axis, u64) {
        (self.axis, self.angle_degrees.to_bits())
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = match self.axis {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        write!(f, "{axis}:{}", self.angle_degrees)
    }
}

impl FromStr for Rotation {
    type Err = ResampleError;

    /// Parses `AXIS:DEGREES`, e.g. `z:-15`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ResampleError::BadRotation(s.to_string());
        let (axis, deg) = s.split_once(':').ok_or_else(bad)?;
        let axis = match axis.trim().to_ascii_lowercase().as_str() {
            "x" => Axis::X,
            "y" => Axis::Y,
            "z" => Axis::Z,
            _ => return Err(bad()),
        };
        let deg: f64 = deg.trim().parse().map_err(|_| bad())?;
        Rotation::new(axis, deg)
    }
}

pub fn apply(m: &Mat3, p: Vec3) -> Vec3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// Precomputed interpolation stencil: for each query point, the three
/// source vertices of its enclosing face and their barycentric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    src_vertices: usize,
    stencil: Vec<([u32; 3], [f64; 3])>,
}

impl Resampler {
    pub fn new(src: &Icosphere, points: &[Vec3]) -> Result<Self, ResampleError> {
        let locator = src.locator();
        let stencil = points
            .iter()
            .map(|&p| {
                let loc = locator.locate(p)?;
                Ok((src.faces()[loc.face], loc.weights))
            })
            .collect::<Result<Vec<_>, GeomError>>()?;
        Ok(Self {
            src_vertices: src.vertex_count(),
            stencil,
        })
    }

    /// Stencil sampling `src` at `R⁻¹·p` for every vertex `p` of `grid`.
    pub fn rotation(grid: &Icosphere, rot: Rotation) -> Result<Self, ResampleError> {
        let inv = rot.inverse().matrix();
        let points: Vec<Vec3> = grid.vertices().iter().map(|&p| apply(&inv, p)).collect();
        Self::new(grid, &points)
    }

    pub fn point_count(&self) -> usize {
        self.stencil.len()
    }

    pub fn apply(&self, signal: &SurfaceSignal) -> Result<SurfaceSignal, ResampleError> {
        if signal.vertex_count() != self.src_vertices {
            return Err(ResampleError::VertexCount {
                expected: self.src_vertices,
                got: signal.vertex_count(),
            });
        }
        let c = signal.channel_count();
        let src = signal.data();
        let mut data = Vec::with_capacity(self.stencil.len() * c);
        for (idx, w) in &self.stencil {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for k in 0..3 {
                    acc += w[k] * src[idx[k] as usize * c + ch] as f64;
                }
                data.push(acc as f32);
            }
        }
        SurfaceSignal::new(self.stencil.len(), signal.channels().to_vec(), data)
    }
}

/// Resample a signal defined on `src` onto the vertices of `dst`.
pub fn resample_signal(
    signal: &SurfaceSignal,
    src: &Icosphere,
    dst: &Icosphere,
) -> Result<SurfaceSignal, ResampleError> {
    signal.check_grid(src)?;
    Resampler::new(src, dst.vertices())?.apply(signal)
}

/// Rotate a signal on its own grid: output at `p` samples the input at `R⁻¹·p`.
pub fn rotate_signal(
    signal: &SurfaceSignal,
    grid: &Icosphere,
    rot: Rotation,
) -> Result<SurfaceSignal, ResampleError> {
    signal.check_grid(grid)?;
    if rot.angle_degrees == 0.0 {
        return Ok(signal.clone());
    }
    Resampler::rotation(grid, rot)?.apply(signal)
}

/// Rotation stencils for one grid, built on first use.
#[derive(Debug, Clone)]
pub struct RotationCache {
    grid: Icosphere,
    stencils: HashMap<(Axis, u64), Resampler>,
}

impl RotationCache {
    pub fn new(grid: Icosphere) -> Self {
        Self {
            grid,
            stencils: HashMap::new(),
        }
    }

    pub fn grid(&self) -> &Icosphere {
        &self.grid
    }

    /// Build the stencils for every rotation in `policy` up front.
    pub fn warm(&mut self, policy: &[f64]) -> Result<(), ResampleError> {
        for axis in Axis::ALL {
            for &a in policy {
                for r in [Rotation::new(axis, a)?, Rotation::new(axis, -a)?] {
                    self.stencil(r)?;
                }
            }
        }
        Ok(())
    }

    fn stencil(&mut self, rot: Rotation) -> Result<&Resampler, ResampleError> {
        if !self.stencils.contains_key(&rot.key()) {
            let s = Resampler::rotation(&self.grid, rot)?;
            self.stencils.insert(rot.key(), s);
        }
        Ok(&self.stencils[&rot.key()])
    }

    /// Like [`rotate_signal`], reusing cached stencils.
    pub fn rotate(&mut self, signal: &SurfaceSignal, rot: Rotation) -> Result<SurfaceSignal, ResampleError> {
        signal.check_grid(&self.grid)?;
        if rot.angle_degrees == 0.0 {
            return Ok(signal.clone());
        }
        self.stencil(rot)?.apply(signal)
    }

    /// Read-only rotation; fails over to an uncached stencil when needed.
    pub fn rotate_cached(&self, signal: &SurfaceSignal, rot: Rotation) -> Result<SurfaceSignal, ResampleError> {
        signal.check_grid(&self.grid)?;
        if rot.angle_degrees == 0.0 {
            return Ok(signal.clone());
        }
        match self.stencils.get(&rot.key()) {
            Some(s) => s.apply(signal),
            None => Resampler::rotation(&self.grid, rot)?.apply(signal),
        }
    }
}

/// The default augmentation angles in degrees.
pub const DEFAULT_POLICY: [f64; 6] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

/// All outcomes of [`random_augmentation`] in draw order: no rotation first,
/// then `(axis, +angle)`, `(axis, -angle)` per axis and policy angle.
pub fn augmentation_outcomes(policy: &[f64]) -> Result<Vec<Option<Rotation>>, ResampleError> {
    if policy.is_empty() {
        return Err(ResampleError::EmptyPolicy);
    }
    let mut out = vec![None];
    for axis in Axis::ALL {
        for &a in policy {
            out.push(Some(Rotation::new(axis, a)?));
            out.push(Some(Rotation::new(axis, -a)?));
        }
    }
    Ok(out)
}

/// Draw uniformly from no rotation and every signed policy angle about each
/// axis.
pub fn random_augmentation(rng: &mut SeedStream, policy: &[f64]) -> Result<Option<Rotation>, ResampleError> {
    let outcomes = augmentation_outcomes(policy)?;
    Ok(outcomes[rng.index(outcomes.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn field(grid: &Icosphere, f: impl Fn(Vec3) -> f64) -> SurfaceSignal {
        let data = grid.vertices().iter().map(|&p| f(p) as f32).collect();
        SurfaceSignal::new(grid.vertex_count(), names(1), data).unwrap()
    }

    #[test]
    fn signal_validation() {
        assert_eq!(
            SurfaceSignal::new(2, vec![], vec![]).unwrap_err(),
            ResampleError::NoChannels
        );
        assert!(matches!(
            SurfaceSignal::new(2, vec!["a".into(), "a".into()], vec![0.0; 4]),
            Err(ResampleError::DuplicateChannel(_))
        ));
        assert!(matches!(
            SurfaceSignal::new(2, names(1), vec![0.0; 3]),
            Err(ResampleError::DataLength { .. })
        ));
    }

    #[test]
    fn constant_preserved_across_grids() {
        let (a, b) = (Icosphere::new(2), Icosphere::new(4));
        let s = SurfaceSignal::constant(a.vertex_count(), names(2), 3.25).unwrap();
        let up = resample_signal(&s, &a, &b).unwrap();
        assert!(up.data().iter().all(|&x| x == 3.25));
        let rot = rotate_signal(&up, &b, Rotation::new(Axis::Y, 17.0).unwrap()).unwrap();
        assert!(rot.data().iter().all(|&x| x == 3.25));
    }

    #[test]
    fn identity_grid() {
        let g = Icosphere::new(3);
        let s = field(&g, |p| p[0] * p[1] + p[2]);
        let out = resample_signal(&s, &g, &g).unwrap();
        for (a, b) in s.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= f32::EPSILON * a.abs().max(1.0));
        }
    }

    #[test]
    fn zero_rotation_is_bitwise_identity() {
        let g = Icosphere::new(2);
        let s = field(&g, |p| p[0].sin() + p[2]);
        let out = rotate_signal(&s, &g, Rotation::new(Axis::X, 0.0).unwrap()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn mismatched_vertex_count() {
        let (a, b) = (Icosphere::new(1), Icosphere::new(2));
        let s = SurfaceSignal::constant(b.vertex_count(), names(1), 1.0).unwrap();
        assert_eq!(
            resample_signal(&s, &a, &b).unwrap_err(),
            ResampleError::VertexCount {
                expected: 42,
                got: 162
            }
        );
    }

    #[test]
    fn rotation_parse_and_range() {
        let r: Rotation = "z:-15".parse().unwrap();
        assert_eq!(r, Rotation::new(Axis::Z, -15.0).unwrap());
        assert!("q:3".parse::<Rotation>().is_err());
        assert_eq!(
            Rotation::new(Axis::X, 400.0).unwrap_err(),
            ResampleError::AngleRange(400.0)
        );
    }

    #[test]
    fn rotation_matrix_turns_x_toward_y() {
        let m = Rotation::new(Axis::Z, 90.0).unwrap().matrix();
        let p = apply(&m, [1.0, 0.0, 0.0]);
        assert!((p[1] - 1.0).abs() < 1e-15 && p[0].abs() < 1e-15);
    }

    #[test]
    fn policy_support_and_determinism() {
        let outcomes = augmentation_outcomes(&DEFAULT_POLICY).unwrap();
        assert_eq!(outcomes.len(), 37);
        assert_eq!(
            random_augmentation(&mut SeedStream::new(0), &[]).unwrap_err(),
            ResampleError::EmptyPolicy
        );
        let mut a = SeedStream::new(123);
        let mut b = a.clone();
        for _ in 0..50 {
            assert_eq!(
                random_augmentation(&mut a, &DEFAULT_POLICY).unwrap(),
                random_augmentation(&mut b, &DEFAULT_POLICY).unwrap()
            );
        }
    }

    #[test]
    fn signal_bytes_round_trip() {
        let g = Icosphere::new(1);
        let s = SurfaceSignal::new(
            g.vertex_count(),
            vec!["sulc".into(), "thickness".into()],
            (0..84).map(|i| i as f32 * 0.5).collect(),
        )
        .unwrap();
        assert_eq!(SurfaceSignal::from_bytes(&s.to_bytes()).unwrap(), s);
        let mut bad = s.to_bytes();
        bad[3] = 0;
        assert_eq!(SurfaceSignal::from_bytes(&bad).unwrap_err(), ResampleError::BadMagic);
    }

    #[test]
    fn cache_matches_direct() {
        let g = Icosphere::new(2);
        let s = field(&g, |p| p[0] + 2.0 * p[1] * p[2]);
        let mut cache = RotationCache::new(g.clone());
        let r = Rotation::new(Axis::X, 25.0).unwrap();
        assert_eq!(cache.rotate(&s, r).unwrap(), rotate_signal(&s, &g, r).unwrap());
        assert_eq!(cache.rotate_cached(&s, r).unwrap(), rotate_signal(&s, &g, r).unwrap());
    }
}
