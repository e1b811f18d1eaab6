//! Versioned binary preprocessing caches: everything the network needs per
//! mesh (hierarchy levels, frames, patches, cross-level maps) keyed by a
//! content hash of the source mesh bytes.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::convops::{PatchData, PoolMap, MONOMIALS, RAW_CHANNELS};
use crate::frames::{Connection, FrameAtlas, RoSyField};
use crate::geom::Vec3;
use crate::hierarchy::Hierarchy;
use crate::mesh::{TangentBasis, TriMesh};
use crate::network::MeshContext;

pub const CACHE_MAGIC: &[u8; 4] = b"SFCV";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a preprocess cache (bad magic bytes)")]
    BadMagic,
    #[error("cache version {found} is newer than supported version {supported}")]
    NewerVersion { found: u32, supported: u32 },
    #[error("cache is corrupt: {0}")]
    Corrupt(String),
    #[error("mesh failed validation on load: {0}")]
    Mesh(#[from] crate::mesh::MeshError),
}

/// One cached hierarchy level.
#[derive(Debug, Clone)]
pub struct CachedLevel {
    pub mesh: TriMesh,
    pub basis: TangentBasis,
    pub conn: Connection,
    pub field: RoSyField,
    pub atlas: FrameAtlas,
    pub patches: PatchData,
}

#[derive(Debug, Clone)]
pub struct PreprocessCache {
    pub version: u32,
    pub n: usize,
    pub source_hash: [u8; 32],
    pub levels: Vec<CachedLevel>,
    pub parent_of: Vec<Vec<usize>>,
    pub group_offset: Vec<Vec<u8>>,
}

pub fn hash_bytes(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

impl PreprocessCache {
    pub fn from_hierarchy(
        hierarchy: Hierarchy,
        patches: Vec<PatchData>,
        source_hash: [u8; 32],
    ) -> Self {
        let Hierarchy {
            n,
            levels,
            parent_of,
            group_offset,
        } = hierarchy;
        let levels = levels
            .into_iter()
            .zip(patches)
            .map(|(l, p)| CachedLevel {
                mesh: l.mesh,
                basis: l.basis,
                conn: l.conn,
                field: l.field,
                atlas: l.atlas,
                patches: p,
            })
            .collect();
        PreprocessCache {
            version: CACHE_VERSION,
            n,
            source_hash,
            levels,
            parent_of,
            group_offset,
        }
    }

    /// Execution context for the network engine (clones the per-level
    /// patches and pool maps).
    pub fn context(&self) -> MeshContext {
        let patches = self.levels.iter().map(|l| l.patches.clone()).collect();
        let pools = (0..self.levels.len().saturating_sub(1))
            .map(|k| PoolMap {
                parent_of: self.parent_of[k].clone(),
                group_offset: self.group_offset[k].clone(),
                coarse_vertices: self.levels[k + 1].mesh.vertex_count(),
            })
            .collect();
        MeshContext { patches, pools }
    }

    /// Human-readable per-mesh quality report: level sizes, frame energy,
    /// singularity count and indices.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (k, level) in self.levels.iter().enumerate() {
            let singular: Vec<(usize, f64)> = level
                .atlas
                .face_index
                .iter()
                .enumerate()
                .filter(|(_, &ix)| ix != 0)
                .map(|(f, &ix)| (f, ix as f64 / self.n as f64))
                .collect();
            out.push_str(&format!(
                "level {}: {} vertices, {} faces, energy {:.6}, {} singular faces (index sum {}), first: {:?}\n",
                k,
                level.mesh.vertex_count(),
                level.mesh.triangles.len(),
                level.field.energy,
                singular.len(),
                level.atlas.index_sum(),
                &singular[..singular.len().min(8)],
            ));
        }
        out
    }
}

// ------------------------------------------------------------ raw encoding

struct Enc<W: Write>(W);

impl<W: Write> Enc<W> {
    fn u32(&mut self, x: u32) -> std::io::Result<()> {
        self.0.write_all(&x.to_le_bytes())
    }
    fn u64(&mut self, x: u64) -> std::io::Result<()> {
        self.0.write_all(&x.to_le_bytes())
    }
    fn f64s(&mut self, xs: &[f64]) -> std::io::Result<()> {
        self.u64(xs.len() as u64)?;
        for x in xs {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn u8s(&mut self, xs: &[u8]) -> std::io::Result<()> {
        self.u64(xs.len() as u64)?;
        self.0.write_all(xs)
    }
    fn usizes(&mut self, xs: &[usize]) -> std::io::Result<()> {
        self.u64(xs.len() as u64)?;
        for &x in xs {
            self.u64(x as u64)?;
        }
        Ok(())
    }
    fn i32s(&mut self, xs: &[i32]) -> std::io::Result<()> {
        self.u64(xs.len() as u64)?;
        for &x in xs {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn vec3s(&mut self, xs: &[Vec3]) -> std::io::Result<()> {
        self.u64(xs.len() as u64)?;
        for v in xs {
            for c in v {
                self.0.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }
    fn complexes(&mut self, xs: &[Complex64]) -> std::io::Result<()> {
        self.u64(xs.len() as u64)?;
        for c in xs {
            self.0.write_all(&c.re.to_le_bytes())?;
            self.0.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Dec<R: Read>(R);

impl<R: Read> Dec<R> {
    fn u32(&mut self) -> Result<u32, CacheError> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, CacheError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn len(&mut self) -> Result<usize, CacheError> {
        let n = self.u64()?;
        if n > (1 << 33) {
            return Err(CacheError::Corrupt(format!("implausible length {}", n)));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64, CacheError> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CacheError> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn u8s(&mut self) -> Result<Vec<u8>, CacheError> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn usizes(&mut self) -> Result<Vec<usize>, CacheError> {
        let n = self.len()?;
        (0..n).map(|_| self.u64().map(|x| x as usize)).collect()
    }
    fn i32s(&mut self) -> Result<Vec<i32>, CacheError> {
        let n = self.len()?;
        (0..n)
            .map(|_| {
                let mut b = [0u8; 4];
                self.0.read_exact(&mut b)?;
                Ok(i32::from_le_bytes(b))
            })
            .collect()
    }
    fn vec3s(&mut self) -> Result<Vec<Vec3>, CacheError> {
        let n = self.len()?;
        (0..n)
            .map(|_| Ok([self.f64()?, self.f64()?, self.f64()?]))
            .collect()
    }
    fn complexes(&mut self) -> Result<Vec<Complex64>, CacheError> {
        let n = self.len()?;
        (0..n)
            .map(|_| Ok(Complex64::new(self.f64()?, self.f64()?)))
            .collect()
    }
}

pub fn write_cache(cache: &PreprocessCache, path: &Path) -> Result<(), CacheError> {
    let file = std::fs::File::create(path)?;
    let mut e = Enc(std::io::BufWriter::new(file));
    e.0.write_all(CACHE_MAGIC)?;
    e.u32(CACHE_VERSION)?;
    e.u32(cache.n as u32)?;
    e.u32(cache.levels.len() as u32)?;
    e.0.write_all(&cache.source_hash)?;
    for level in &cache.levels {
        let m = &level.mesh;
        e.vec3s(&m.positions)?;
        e.usizes(&m.triangles.iter().flatten().copied().collect::<Vec<_>>())?;
        e.vec3s(&m.normals)?;
        e.f64s(&m.one_ring_area)?;
        e.f64s(&m.k_max)?;
        e.f64s(&m.k_min)?;
        e.vec3s(&m.dir_max)?;
        e.vec3s(&level.basis.e0)?;
        e.vec3s(&level.basis.e1)?;
        e.vec3s(&level.basis.n)?;
        e.f64s(&level.conn.angle)?;
        e.u32(level.field.n as u32)?;
        e.complexes(&level.field.values)?;
        e.0.write_all(&level.field.energy.to_le_bytes())?;
        e.f64s(&level.atlas.root_angle)?;
        e.u8s(&level.atlas.offsets)?;
        e.i32s(&level.atlas.face_index)?;
        let p = &level.patches;
        e.usizes(&p.start)?;
        e.usizes(&p.neighbor)?;
        e.f64s(&p.weight)?;
        e.f64s(&p.weight_sum)?;
        e.u8s(&p.offset)?;
        e.f64s(&p.monomials.iter().flatten().copied().collect::<Vec<_>>())?;
        e.f64s(&p.raw.iter().flatten().copied().collect::<Vec<_>>())?;
        e.f64s(&p.radius)?;
        e.usizes(&p.isolated)?;
    }
    for map in &cache.parent_of {
        e.usizes(map)?;
    }
    for map in &cache.group_offset {
        e.u8s(map)?;
    }
    e.0.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<PreprocessCache, CacheError> {
    let file = std::fs::File::open(path)?;
    let mut d = Dec(std::io::BufReader::new(file));
    let mut magic = [0u8; 4];
    d.0.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = d.u32()?;
    if version > CACHE_VERSION {
        return Err(CacheError::NewerVersion {
            found: version,
            supported: CACHE_VERSION,
        });
    }
    let n = d.u32()? as usize;
    let n_levels = d.u32()? as usize;
    let mut source_hash = [0u8; 32];
    d.0.read_exact(&mut source_hash)?;
    let mut levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let positions = d.vec3s()?;
        let flat_tris = d.usizes()?;
        if flat_tris.len() % 3 != 0 {
            return Err(CacheError::Corrupt("triangle array not a multiple of 3".into()));
        }
        let triangles: Vec<[usize; 3]> = flat_tris.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut mesh = TriMesh::new(positions, triangles);
        mesh.normals = d.vec3s()?;
        mesh.one_ring_area = d.f64s()?;
        mesh.k_max = d.f64s()?;
        mesh.k_min = d.f64s()?;
        mesh.dir_max = d.vec3s()?;
        let basis = TangentBasis {
            e0: d.vec3s()?,
            e1: d.vec3s()?,
            n: d.vec3s()?,
        };
        let conn = Connection { angle: d.f64s()? };
        let field_n = d.u32()? as usize;
        let values = d.complexes()?;
        let energy = d.f64()?;
        let field = RoSyField {
            n: field_n,
            values,
            energy,
        };
        let atlas = FrameAtlas {
            n: field_n,
            root_angle: d.f64s()?,
            offsets: d.u8s()?,
            face_index: d.i32s()?,
        };
        let start = d.usizes()?;
        let neighbor = d.usizes()?;
        let weight = d.f64s()?;
        let weight_sum = d.f64s()?;
        let offset = d.u8s()?;
        let flat_mono = d.f64s()?;
        let monomials: Vec<[f64; MONOMIALS]> = flat_mono
            .chunks_exact(MONOMIALS)
            .map(|c| {
                let mut a = [0.0; MONOMIALS];
                a.copy_from_slice(c);
                a
            })
            .collect();
        let flat_raw = d.f64s()?;
        let raw: Vec<[f64; RAW_CHANNELS]> = flat_raw
            .chunks_exact(RAW_CHANNELS)
            .map(|c| {
                let mut a = [0.0; RAW_CHANNELS];
                a.copy_from_slice(c);
                a
            })
            .collect();
        let radius = d.f64s()?;
        let isolated = d.usizes()?;
        let vertices = mesh.vertex_count();
        let patches = PatchData {
            n,
            vertices,
            start,
            neighbor,
            weight,
            weight_sum,
            offset,
            monomials,
            raw,
            radius,
            isolated,
        };
        if patches.start.len() != vertices + 1 {
            return Err(CacheError::Corrupt("patch offsets do not match vertex count".into()));
        }
        levels.push(CachedLevel {
            mesh,
            basis,
            conn,
            field,
            atlas,
            patches,
        });
    }
    let mut parent_of = Vec::with_capacity(n_levels.saturating_sub(1));
    for _ in 0..n_levels.saturating_sub(1) {
        parent_of.push(d.usizes()?);
    }
    let mut group_offset = Vec::with_capacity(n_levels.saturating_sub(1));
    for _ in 0..n_levels.saturating_sub(1) {
        group_offset.push(d.u8s()?);
    }
    Ok(PreprocessCache {
        version,
        n,
        source_hash,
        levels,
        parent_of,
        group_offset,
    })
}

/// Reads only the header and returns the stored source hash; used for
/// cheap up-to-date checks.
pub fn cached_source_hash(path: &Path) -> Result<[u8; 32], CacheError> {
    let file = std::fs::File::open(path)?;
    let mut d = Dec(std::io::BufReader::new(file));
    let mut magic = [0u8; 4];
    d.0.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = d.u32()?;
    if version > CACHE_VERSION {
        return Err(CacheError::NewerVersion {
            found: version,
            supported: CACHE_VERSION,
        });
    }
    let _n = d.u32()?;
    let _levels = d.u32()?;
    let mut hash = [0u8; 32];
    d.0.read_exact(&mut hash)?;
    Ok(hash)
}

/// End-to-end preprocessing: hierarchy, frames, and patches for one mesh.
pub fn preprocess_mesh(
    mesh: TriMesh,
    level_targets: &[usize],
    opts: &crate::frames::RosyOptions,
    source_hash: [u8; 32],
) -> Result<PreprocessCache, crate::hierarchy::HierarchyError> {
    let hierarchy = crate::hierarchy::build_hierarchy(mesh, level_targets, opts)?;
    let patches: Vec<PatchData> = hierarchy
        .levels
        .iter()
        .map(|l| crate::convops::build_patches(&l.mesh, &l.topo, &l.basis, &l.atlas))
        .collect();
    Ok(PreprocessCache::from_hierarchy(hierarchy, patches, source_hash))
}
