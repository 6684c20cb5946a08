//! STL meshes and the geometry features derived from them.
//!
//! Shared designs often arrive as several printable parts and only ever get a
//! single rendered preview, so the classifier also sees a part count and a set
//! of orthographic silhouettes taken from several directions.
//!
//! Binary STL: 80-byte header, `u32` LE facet count, then 50-byte records
//! (normal, three vertices, `u16` attribute count). The attribute field is
//! ignored on read and written as zero.

use std::collections::HashMap;

use thiserror::Error;

use crate::features::{FeatureVector, MESH_NS};

pub const DEFAULT_GRID: usize = 32;
pub const FEATURE_GRID: usize = 8;
/// Subsamples per cell edge used by the silhouette rasterizer.
pub const SUBSAMPLES: usize = 4;

/// Header written by [`serialize_stl`]. Deliberately does not start with `solid`.
pub const DEFAULT_HEADER: [u8; 80] = {
    let mut h = [0u8; 80];
    let tag = b"binary STL written by hitl3d";
    let mut i = 0;
    while i < tag.len() {
        h[i] = tag[i];
        i += 1;
    }
    h
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeshError {
    #[error("malformed STL: {0}")]
    MalformedStl(String),
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but only {count} exist")]
    IndexOutOfRange { triangle: usize, index: u32, count: usize },
    #[error("vertex {0} has a non-finite coordinate")]
    NonFiniteVertex(usize),
    #[error("at least 6 view directions are required, got {0}")]
    TooFewViews(usize),
    #[error("grid size must be positive")]
    EmptyGrid,
}

fn malformed(msg: impl Into<String>) -> MeshError {
    MeshError::MalformedStl(msg.into())
}

/// Indexed triangle mesh in millimetres. Facet normals are kept as read so a
/// parsed binary file can be written back unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<[f32; 3]>,
    triangles: Vec<[u32; 3]>,
    normals: Vec<[f32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f32; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        for (i, v) in vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(MeshError::NonFiniteVertex(i));
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i as usize >= vertices.len()) {
                return Err(MeshError::IndexOutOfRange { triangle: t, index, count: vertices.len() });
            }
        }
        let normals = triangles
            .iter()
            .map(|t| facet_normal([vertices[t[0] as usize], vertices[t[1] as usize], vertices[t[2] as usize]]))
            .collect();
        Ok(Self { vertices, triangles, normals })
    }

    /// Builds a mesh from triangle soup, welding vertices with identical bit patterns.
    pub fn from_facets(facets: &[[[f32; 3]; 3]]) -> Result<Self, MeshError> {
        let normals = facets.iter().map(|f| facet_normal(*f)).collect();
        Self::weld(facets, normals)
    }

    fn weld(facets: &[[[f32; 3]; 3]], normals: Vec<[f32; 3]>) -> Result<Self, MeshError> {
        let mut index: HashMap<[u32; 3], u32> = HashMap::new();
        let mut vertices = Vec::new();
        let mut triangles = Vec::with_capacity(facets.len());
        for facet in facets {
            let mut tri = [0u32; 3];
            for (slot, v) in tri.iter_mut().zip(facet) {
                if v.iter().any(|c| !c.is_finite()) {
                    return Err(MeshError::NonFiniteVertex(vertices.len()));
                }
                let key = v.map(f32::to_bits);
                *slot = *index.entry(key).or_insert_with(|| {
                    vertices.push(*v);
                    (vertices.len() - 1) as u32
                });
            }
            triangles.push(tri);
        }
        Ok(Self { vertices, triangles, normals })
    }

    /// Concatenates meshes into one, keeping each as its own set of parts.
    pub fn merge<'a>(meshes: impl IntoIterator<Item = &'a TriangleMesh>) -> TriangleMesh {
        let mut out = TriangleMesh { vertices: Vec::new(), triangles: Vec::new(), normals: Vec::new() };
        for m in meshes {
            let offset = out.vertices.len() as u32;
            out.vertices.extend_from_slice(&m.vertices);
            out.triangles.extend(m.triangles.iter().map(|t| t.map(|i| i + offset)));
            out.normals.extend_from_slice(&m.normals);
        }
        out
    }

    pub fn vertices(&self) -> &[[f32; 3]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn facet(&self, t: usize) -> [[f32; 3]; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn translated(&self, offset: [f32; 3]) -> TriangleMesh {
        let facets: Vec<_> = (0..self.triangle_count())
            .map(|t| self.facet(t).map(|v| [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]]))
            .collect();
        TriangleMesh::from_facets(&facets).expect("translation keeps coordinates finite")
    }

    /// Axis-aligned extents of the used vertices.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for tri in &self.triangles {
            for &i in tri {
                any = true;
                for a in 0..3 {
                    let c = self.vertices[i as usize][a] as f64;
                    lo[a] = lo[a].min(c);
                    hi[a] = hi[a].max(c);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

fn facet_normal(f: [[f32; 3]; 3]) -> [f32; 3] {
    let d = |a: [f32; 3], b: [f32; 3]| [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let (u, v) = (d(f[0], f[1]), d(f[0], f[2]));
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 && len.is_finite() {
        n.map(|c| c / len)
    } else {
        [0.0; 3]
    }
}

/// Parses binary or ASCII STL, picking the format from the byte length and prefix.
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    if is_binary_layout(bytes) {
        return parse_binary_stl(bytes).map(|(_, m)| m);
    }
    if bytes.trim_ascii_start().starts_with(b"solid") {
        return parse_ascii_stl(bytes);
    }
    if bytes.len() >= 84 {
        let declared = u32::from_le_bytes(bytes[80..84].try_into().unwrap());
        return Err(malformed(format!("declared {declared} facets but {} bytes follow the header", bytes.len() - 84)));
    }
    Err(malformed("file shorter than a binary STL header"))
}

fn is_binary_layout(bytes: &[u8]) -> bool {
    if bytes.len() < 84 {
        return false;
    }
    let declared = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as u64;
    84 + 50 * declared == bytes.len() as u64
}

/// Parses binary STL and also returns the 80-byte header.
pub fn parse_binary_stl(bytes: &[u8]) -> Result<([u8; 80], TriangleMesh), MeshError> {
    if bytes.len() < 84 {
        return Err(malformed("file shorter than a binary STL header"));
    }
    let header: [u8; 80] = bytes[..80].try_into().unwrap();
    let declared = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    let body = &bytes[84..];
    if body.len() != declared.saturating_mul(50) {
        return Err(malformed(format!(
            "declared {declared} facets, found {} bytes of records ({} complete)",
            body.len(),
            body.len() / 50
        )));
    }
    if declared == 0 {
        return Err(MeshError::EmptyMesh);
    }
    let read = |rec: &[u8], k: usize| -> [f32; 3] {
        let f = |j: usize| f32::from_le_bytes(rec[12 * k + 4 * j..12 * k + 4 * j + 4].try_into().unwrap());
        [f(0), f(1), f(2)]
    };
    let mut facets = Vec::with_capacity(declared);
    let mut normals = Vec::with_capacity(declared);
    for rec in body.chunks_exact(50) {
        normals.push(read(rec, 0));
        facets.push([read(rec, 1), read(rec, 2), read(rec, 3)]);
    }
    Ok((header, TriangleMesh::weld(&facets, normals)?))
}

fn parse_ascii_stl(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed("ASCII STL is not valid UTF-8"))?;
    let mut tokens = text.split_ascii_whitespace().peekable();
    if tokens.next() != Some("solid") {
        return Err(malformed("missing `solid`"));
    }
    // solid name may span several tokens
    while let Some(t) = tokens.peek() {
        if *t == "facet" || *t == "endsolid" {
            break;
        }
        tokens.next();
    }

    let expect = |tokens: &mut std::iter::Peekable<std::str::SplitAsciiWhitespace>, word: &str| match tokens.next() {
        Some(t) if t == word => Ok(()),
        Some(t) => Err(malformed(format!("expected `{word}`, found `{t}`"))),
        None => Err(malformed(format!("unexpected end of file, expected `{word}`"))),
    };
    let number = |tokens: &mut std::iter::Peekable<std::str::SplitAsciiWhitespace>| -> Result<f32, MeshError> {
        let t = tokens.next().ok_or_else(|| malformed("unexpected end of file in coordinates"))?;
        let v: f32 = t.parse().map_err(|_| malformed(format!("non-numeric field `{t}`")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(malformed(format!("non-finite field `{t}`")))
        }
    };
    let point = |tokens: &mut std::iter::Peekable<std::str::SplitAsciiWhitespace>| -> Result<[f32; 3], MeshError> {
        Ok([number(tokens)?, number(tokens)?, number(tokens)?])
    };

    let mut facets = Vec::new();
    let mut normals = Vec::new();
    loop {
        match tokens.next() {
            Some("facet") => {
                expect(&mut tokens, "normal")?;
                normals.push(point(&mut tokens)?);
                expect(&mut tokens, "outer")?;
                expect(&mut tokens, "loop")?;
                let mut f = [[0.0; 3]; 3];
                for v in &mut f {
                    expect(&mut tokens, "vertex")?;
                    *v = point(&mut tokens)?;
                }
                expect(&mut tokens, "endloop")?;
                expect(&mut tokens, "endfacet")?;
                facets.push(f);
            }
            Some("endsolid") => break,
            Some(t) => return Err(malformed(format!("unexpected token `{t}`"))),
            None => return Err(malformed("missing `endsolid`")),
        }
    }
    if facets.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    TriangleMesh::weld(&facets, normals)
}

/// Writes binary STL with [`DEFAULT_HEADER`].
pub fn serialize_stl(mesh: &TriangleMesh) -> Vec<u8> {
    write_binary_stl(mesh, &DEFAULT_HEADER)
}

pub fn write_binary_stl(mesh: &TriangleMesh, header: &[u8; 80]) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + 50 * mesh.triangle_count());
    out.extend_from_slice(header);
    out.extend_from_slice(&(mesh.triangle_count() as u32).to_le_bytes());
    for (t, normal) in mesh.normals.iter().enumerate() {
        for c in normal {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in mesh.facet(t) {
            for c in v {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn write_ascii_stl(mesh: &TriangleMesh, name: &str) -> String {
    let mut s = format!("solid {name}\n");
    for (t, n) in mesh.normals.iter().enumerate() {
        s += &format!("  facet normal {:e} {:e} {:e}\n    outer loop\n", n[0], n[1], n[2]);
        for v in mesh.facet(t) {
            s += &format!("      vertex {:e} {:e} {:e}\n", v[0], v[1], v[2]);
        }
        s += "    endloop\n  endfacet\n";
    }
    s += &format!("endsolid {name}\n");
    s
}

/// Per-triangle component labels, numbered in order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    pub count: usize,
}

struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Less => self.parent[ra as usize] = rb,
            std::cmp::Ordering::Greater => self.parent[rb as usize] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb as usize] = ra;
                self.rank[ra as usize] += 1;
            }
        }
    }
}

/// Groups triangles that share a (welded) vertex.
pub fn connected_components(mesh: &TriangleMesh) -> Result<Components, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let mut sets = DisjointSet::new(mesh.vertices.len());
    for t in &mesh.triangles {
        sets.union(t[0], t[1]);
        sets.union(t[1], t[2]);
    }
    let mut ids: HashMap<u32, u32> = HashMap::new();
    let labels = mesh
        .triangles
        .iter()
        .map(|t| {
            let root = sets.find(t[0]);
            let next = ids.len() as u32;
            *ids.entry(root).or_insert(next)
        })
        .collect();
    Ok(Components { labels, count: ids.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshStats {
    pub triangle_count: usize,
    pub component_count: usize,
    /// Bounding-box extents along x, y, z.
    pub bbox: [f64; 3],
    /// Middle and smallest extent divided by the largest, both in `[0, 1]`.
    pub aspect_ratios: [f64; 2],
}

pub fn mesh_stats(mesh: &TriangleMesh) -> Result<MeshStats, MeshError> {
    let components = connected_components(mesh)?;
    let (lo, hi) = mesh.bounds().ok_or(MeshError::EmptyMesh)?;
    let bbox = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut sorted = bbox;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let aspect_ratios = if sorted[0] > 0.0 { [sorted[1] / sorted[0], sorted[2] / sorted[0]] } else { [0.0, 0.0] };
    Ok(MeshStats { triangle_count: mesh.triangle_count(), component_count: components.count, bbox, aspect_ratios })
}

/// The six axis directions followed by the two opposite body diagonals.
pub fn default_view_directions() -> Vec<[f64; 3]> {
    let d = 1.0 / 3f64.sqrt();
    vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [d, d, d],
        [-d, -d, -d],
    ]
}

/// Half-width of the square view window. The normalized mesh sits inside the
/// unit cube centred at the origin, whose circumscribed sphere has this radius,
/// so no direction ever clips geometry.
pub const VIEW_HALF_WIDTH: f64 = 0.866_025_403_784_438_6;

/// Image-plane basis `(right, up)` for a view looking along `-dir`.
///
/// Opposite directions share `up` and have opposite `right`, which makes the
/// silhouettes of `d` and `-d` horizontal mirror images.
pub fn view_basis(dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let d = dir.map(|c| c / norm);
    let world_up = if d[0].abs() < 1e-9 && d[1].abs() < 1e-9 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let cross =
        |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let r = cross(world_up, d);
    let rn = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let right = r.map(|c| c / rn);
    let up = cross(d, right);
    (right, up)
}

/// Vertices recentred on the bounding-box centre and scaled so the largest extent is 1.
pub fn normalized_vertices(mesh: &TriangleMesh) -> Vec<[f64; 3]> {
    let Some((lo, hi)) = mesh.bounds() else {
        return Vec::new();
    };
    let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    mesh.vertices.iter().map(|v| [0, 1, 2].map(|a| (v[a] as f64 - center[a]) * scale)).collect()
}

/// One occupancy grid per view, cells stored row-major with row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSet {
    pub grid: usize,
    pub view_directions: Vec<[f64; 3]>,
    pub views: Vec<Vec<f64>>,
}

impl SilhouetteSet {
    pub fn cell(&self, view: usize, row: usize, col: usize) -> f64 {
        self.views[view][row * self.grid + col]
    }

    /// Mean coverage of a view, i.e. projected area over window area.
    pub fn occupancy(&self, view: usize) -> f64 {
        self.views[view].iter().sum::<f64>() / (self.grid * self.grid) as f64
    }

    /// Average-pools every view down to `target` cells per side.
    pub fn downsample(&self, target: usize) -> SilhouetteSet {
        assert!(target > 0 && self.grid.is_multiple_of(target), "grid must be a multiple of target");
        let f = self.grid / target;
        let views = self
            .views
            .iter()
            .map(|cells| {
                let mut out = vec![0.0; target * target];
                for r in 0..self.grid {
                    for c in 0..self.grid {
                        out[(r / f) * target + c / f] += cells[r * self.grid + c];
                    }
                }
                out.iter_mut().for_each(|v| *v /= (f * f) as f64);
                out
            })
            .collect();
        SilhouetteSet { grid: target, view_directions: self.view_directions.clone(), views }
    }
}

/// Orthographic silhouettes of the normalized mesh. Each cell holds the
/// fraction of its `SUBSAMPLES x SUBSAMPLES` sample points covered by any triangle.
pub fn render_silhouettes(
    mesh: &TriangleMesh,
    directions: &[[f64; 3]],
    grid: usize,
) -> Result<SilhouetteSet, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    if directions.len() < 6 {
        return Err(MeshError::TooFewViews(directions.len()));
    }
    if grid == 0 {
        return Err(MeshError::EmptyGrid);
    }
    let verts = normalized_vertices(mesh);
    let views = directions.iter().map(|&dir| rasterize_view(&verts, &mesh.triangles, dir, grid)).collect();
    Ok(SilhouetteSet { grid, view_directions: directions.to_vec(), views })
}

fn rasterize_view(verts: &[[f64; 3]], triangles: &[[u32; 3]], dir: [f64; 3], grid: usize) -> Vec<f64> {
    let (right, up) = view_basis(dir);
    let samples = grid * SUBSAMPLES;
    let step = 2.0 * VIEW_HALF_WIDTH / samples as f64;
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    // sample (i, j) sits at x = j, y = i in these coordinates
    let to_sample = |v: [f64; 3]| {
        let (u, w) = (dot(v, right), dot(v, up));
        ((u + VIEW_HALF_WIDTH) / step - 0.5, (VIEW_HALF_WIDTH - w) / step - 0.5)
    };

    let mut mask = vec![false; samples * samples];
    for tri in triangles {
        let p = tri.map(|i| to_sample(verts[i as usize]));
        let area = (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let sign = area.signum();
        let edge =
            |a: (f64, f64), b: (f64, f64), x: f64, y: f64| sign * ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0));
        let min_x = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_x = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor();
        let min_y = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_y = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor();
        if max_x < 0.0 || max_y < 0.0 {
            continue;
        }
        let max_x = max_x.min((samples - 1) as f64) as usize;
        let max_y = max_y.min((samples - 1) as f64) as usize;
        for y in min_y as usize..=max_y {
            for x in min_x as usize..=max_x {
                let (fx, fy) = (x as f64, y as f64);
                if edge(p[0], p[1], fx, fy) >= 0.0 && edge(p[1], p[2], fx, fy) >= 0.0 && edge(p[2], p[0], fx, fy) >= 0.0
                {
                    mask[y * samples + x] = true;
                }
            }
        }
    }

    let mut cells = vec![0.0; grid * grid];
    for y in 0..samples {
        for x in 0..samples {
            if mask[y * samples + x] {
                cells[(y / SUBSAMPLES) * grid + x / SUBSAMPLES] += 1.0;
            }
        }
    }
    let per_cell = (SUBSAMPLES * SUBSAMPLES) as f64;
    cells.iter_mut().for_each(|c| *c /= per_cell);
    cells
}

/// `mesh:` features: part count, log triangle count, aspect ratios and the
/// 8x8 silhouettes of the default views (zero cells omitted).
pub fn mesh_features(mesh: &TriangleMesh) -> Result<FeatureVector, MeshError> {
    let stats = mesh_stats(mesh)?;
    let sil = render_silhouettes(mesh, &default_view_directions(), DEFAULT_GRID)?.downsample(FEATURE_GRID);
    let mut fv = FeatureVector::new();
    let mut put = |id: String, v: f64| fv.add(id, v).expect("mesh features are finite");
    put(format!("{MESH_NS}components"), stats.component_count as f64);
    put(format!("{MESH_NS}log_triangles"), (1.0 + stats.triangle_count as f64).ln());
    put(format!("{MESH_NS}aspect_mid"), stats.aspect_ratios[0]);
    put(format!("{MESH_NS}aspect_min"), stats.aspect_ratios[1]);
    for (v, cells) in sil.views.iter().enumerate() {
        for (i, &c) in cells.iter().enumerate().filter(|(_, c)| **c > 0.0) {
            put(format!("{MESH_NS}sil/{v}/{}/{}", i / FEATURE_GRID, i % FEATURE_GRID), c);
        }
    }
    Ok(fv)
}

/// Axis-aligned box as 12 outward-facing triangles.
pub fn box_facets(min: [f32; 3], max: [f32; 3]) -> Vec<[[f32; 3]; 3]> {
    let c = |i: usize| {
        [
            if i & 1 == 0 { min[0] } else { max[0] },
            if i & 2 == 0 { min[1] } else { max[1] },
            if i & 4 == 0 { min[2] } else { max[2] },
        ]
    };
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    quads.iter().flat_map(|q| [[c(q[0]), c(q[1]), c(q[2])], [c(q[0]), c(q[2]), c(q[3])]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> TriangleMesh {
        TriangleMesh::from_facets(&box_facets([0.0; 3], [1.0; 3])).unwrap()
    }

    #[test]
    fn cube_binary_parse() {
        let bytes = serialize_stl(&unit_cube());
        assert_eq!(bytes.len(), 84 + 12 * 50);
        let m = parse_stl(&bytes).unwrap();
        assert_eq!(m.triangle_count(), 12);
        assert_eq!(m.vertices().len(), 8);
        assert_eq!(connected_components(&m).unwrap().count, 1);
    }

    #[test]
    fn ascii_single_facet() {
        let text = "solid tri\n facet normal 0 0 1\n  outer loop\n   vertex 0 0 0\n   vertex 1 0 0\n   vertex 0 1 0\n  endloop\n endfacet\nendsolid tri\n";
        let m = parse_stl(text.as_bytes()).unwrap();
        assert_eq!(m.triangle_count(), 1);
        assert_eq!(m.vertices().len(), 3);
    }

    #[test]
    fn ascii_errors() {
        let bad = "solid x\n facet normal 0 0 1\n outer loop\n vertex 0 zero 0\n";
        assert!(matches!(parse_stl(bad.as_bytes()), Err(MeshError::MalformedStl(_))));
        let truncated = "solid x\n facet normal 0 0 1\n outer loop\n vertex 0 0 0\n";
        assert!(matches!(parse_stl(truncated.as_bytes()), Err(MeshError::MalformedStl(_))));
        assert_eq!(parse_stl(b"solid empty\nendsolid empty\n"), Err(MeshError::EmptyMesh));
    }

    #[test]
    fn ascii_writer_round_trip() {
        let cube = unit_cube();
        let parsed = parse_stl(write_ascii_stl(&cube, "cube").as_bytes()).unwrap();
        assert_eq!(parsed, cube);
    }

    #[test]
    fn binary_truncation() {
        let mut bytes = serialize_stl(&TriangleMesh::from_facets(&box_facets([0.0; 3], [1.0; 3])[..3]).unwrap());
        bytes[80..84].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(parse_stl(&bytes), Err(MeshError::MalformedStl(_))));
        assert!(matches!(parse_binary_stl(&bytes), Err(MeshError::MalformedStl(_))));
        assert!(matches!(parse_stl(&bytes[..40]), Err(MeshError::MalformedStl(_))));
    }

    #[test]
    fn binary_zero_facets() {
        let mut bytes = DEFAULT_HEADER.to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(parse_stl(&bytes), Err(MeshError::EmptyMesh));
    }

    #[test]
    fn header_starting_with_solid_is_still_binary() {
        let mut header = [b' '; 80];
        header[..5].copy_from_slice(b"solid");
        let bytes = write_binary_stl(&unit_cube(), &header);
        let (h, m) = parse_binary_stl(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(parse_stl(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_bad_indices() {
        let err = TriangleMesh::new(vec![[0.0; 3]; 2], vec![[0, 1, 2]]).unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { index: 2, .. }));
        assert!(TriangleMesh::new(vec![[f32::NAN, 0.0, 0.0]], vec![]).is_err());
    }

    #[test]
    fn two_cubes_two_components() {
        let a = unit_cube();
        let b = a.translated([5.0, 0.0, 0.0]);
        let both = TriangleMesh::merge([&a, &b]);
        let comps = connected_components(&both).unwrap();
        assert_eq!(comps.count, 2);
        assert!(comps.labels[..12].iter().all(|&l| l == 0));
        assert!(comps.labels[12..].iter().all(|&l| l == 1));
        assert_eq!(connected_components(&TriangleMesh::merge([])), Err(MeshError::EmptyMesh));
    }

    #[test]
    fn stats_of_box() {
        let m = TriangleMesh::from_facets(&box_facets([0.0; 3], [4.0, 2.0, 1.0])).unwrap();
        let s = mesh_stats(&m).unwrap();
        assert_eq!(s.bbox, [4.0, 2.0, 1.0]);
        assert_eq!(s.aspect_ratios, [0.5, 0.25]);
        assert_eq!(s.component_count, 1);
    }

    #[test]
    fn cube_views_are_filled_squares() {
        let sil = render_silhouettes(&unit_cube(), &default_view_directions(), 16).unwrap();
        for v in 0..6 {
            // the projected square spans cells ~3.4..12.6, so 4..=11 are interior
            for r in 4..=11 {
                for c in 4..=11 {
                    assert_eq!(sil.cell(v, r, c), 1.0, "view {v} cell {r},{c}");
                }
            }
            for i in 0..16 {
                assert_eq!(sil.cell(v, 0, i), 0.0);
                assert_eq!(sil.cell(v, i, 15), 0.0);
            }
        }
    }

    #[test]
    fn edge_on_triangle_is_nearly_invisible() {
        let tri = TriangleMesh::from_facets(&[[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]).unwrap();
        let sil = render_silhouettes(&tri, &default_view_directions(), 16).unwrap();
        for v in 0..4 {
            let total: f64 = sil.views[v].iter().sum();
            assert!(total < 1.0, "view {v} total {total}");
        }
        assert!(sil.views[4].iter().sum::<f64>() > 1.0);
    }

    #[test]
    fn opposite_views_mirror() {
        let m = TriangleMesh::from_facets(&[
            [[0.0, 0.0, 0.0], [3.0, 0.2, 0.1], [0.5, 2.0, 1.5]],
            [[1.0, 1.0, 1.0], [2.0, 0.0, 3.0], [0.0, 0.0, 2.0]],
        ])
        .unwrap();
        let g = 16;
        let sil = render_silhouettes(&m, &default_view_directions(), g).unwrap();
        for (a, b) in [(0, 1), (2, 3), (4, 5), (6, 7)] {
            for r in 0..g {
                for c in 0..g {
                    assert_eq!(sil.cell(a, r, c), sil.cell(b, r, g - 1 - c), "views {a}/{b} at {r},{c}");
                }
            }
        }
    }

    #[test]
    fn rejects_few_views_and_empty() {
        let cube = unit_cube();
        assert_eq!(render_silhouettes(&cube, &default_view_directions()[..5], 8), Err(MeshError::TooFewViews(5)));
        assert_eq!(
            render_silhouettes(&TriangleMesh::merge([]), &default_view_directions(), 8),
            Err(MeshError::EmptyMesh)
        );
    }

    #[test]
    fn features_count_parts() {
        let cube = unit_cube();
        let fv = mesh_features(&cube).unwrap();
        assert_eq!(fv.get("mesh:components"), 1.0);
        assert_eq!(fv, mesh_features(&unit_cube()).unwrap());
        let parts: Vec<TriangleMesh> = (0..4).map(|i| cube.translated([3.0 * i as f32, 0.0, 0.0])).collect();
        let four = TriangleMesh::merge(parts.iter());
        assert_eq!(mesh_features(&four).unwrap().get("mesh:components"), 4.0);
        assert!(fv.iter().all(|(k, _)| k.starts_with(MESH_NS)));
    }
}
