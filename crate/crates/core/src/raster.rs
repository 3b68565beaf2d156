//! Z-buffered triangle rasterization with pixel-center sampling.
//!
//! Pixel `(i, j)` is sampled at image coordinates `(i, j)`, the same frame the
//! camera projects into. Coverage uses edge functions with a top-left rule so
//! a sample on an edge shared by two triangles is owned by exactly one of
//! them. Back faces are kept; faces with any vertex closer than
//! [`Z_MIN`](crate::camera::Z_MIN) are dropped.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{Camera, Intrinsics, Z_MIN};
use crate::model::{BodyParams, Mesh, ParamError, SmplModel};

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((u32, u32), (u32, u32)),
    #[error("bitmap has {found} pixels, expected {expected}")]
    BadLength { expected: usize, found: usize },
}

/// Binary foreground mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl SilhouetteMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(MaskError::BadLength {
                expected,
                found: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> Vec<(u32, u32)> {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .collect()
    }
}

/// Nearest depth and owning face per pixel; `depth` is `+∞` exactly where
/// `face` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    face: Vec<Option<u32>>,
}

impl DepthBuffer {
    fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; n],
            face: vec![None; n],
        }
    }

    pub fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn depth(&self, x: u32, y: u32) -> f64 {
        self.depth[(y * self.width + x) as usize]
    }

    pub fn face(&self, x: u32, y: u32) -> Option<u32> {
        self.face[(y * self.width + x) as usize]
    }

    pub fn mask(&self) -> SilhouetteMask {
        SilhouetteMask {
            width: self.width,
            height: self.height,
            bits: self.face.iter().map(Option::is_some).collect(),
        }
    }
}

/// A face in screen space: pixel coordinates and camera-frame depth.
#[derive(Debug, Clone, Copy)]
struct ScreenTri {
    xy: [[f64; 2]; 3],
    z: [f64; 3],
    area: f64,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

impl ScreenTri {
    fn new(cam: &Camera, verts: [Vector3<f64>; 3]) -> Option<Self> {
        let intr = &cam.intrinsics;
        let t = Vector3::from(cam.cam_t);
        let mut xy = [[0.0; 2]; 3];
        let mut z = [0.0; 3];
        for c in 0..3 {
            let p = verts[c] + t;
            if !(p.z > Z_MIN) {
                return None;
            }
            xy[c] = [
                intr.focal * p.x / p.z + intr.principal_point[0],
                intr.focal * p.y / p.z + intr.principal_point[1],
            ];
            z[c] = p.z;
        }
        let mut area = edge(xy[0], xy[1], xy[2]);
        if area == 0.0 || !area.is_finite() {
            return None;
        }
        if area < 0.0 {
            xy.swap(1, 2);
            z.swap(1, 2);
            area = -area;
        }
        Some(Self { xy, z, area })
    }

    /// Perspective-correct depth at `p` if the sample is covered.
    fn sample(&self, p: [f64; 2]) -> Option<f64> {
        let [a, b, c] = self.xy;
        let edges = [(b, c), (c, a), (a, b)];
        let mut lambda = [0.0; 3];
        for (i, &(e0, e1)) in edges.iter().enumerate() {
            let w = edge(e0, e1, p);
            if w < 0.0 || (w == 0.0 && !is_top_left(e0, e1)) {
                return None;
            }
            lambda[i] = w / self.area;
        }
        let inv_z: f64 = (0..3).map(|i| lambda[i] / self.z[i]).sum();
        Some(1.0 / inv_z)
    }

    fn pixel_bounds(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let xs = self.xy.map(|p| p[0]);
        let ys = self.xy.map(|p| p[1]);
        let min = |v: [f64; 3]| v[0].min(v[1]).min(v[2]);
        let max = |v: [f64; 3]| v[0].max(v[1]).max(v[2]);
        let x0 = min(xs).ceil().max(0.0);
        let y0 = min(ys).ceil().max(0.0);
        let x1 = max(xs).floor().min(width as f64 - 1.0);
        let y1 = max(ys).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
    }
}

/// Rasterize `mesh` as seen by `cam`. Depth ties go to the lower face index.
pub fn rasterize(mesh: &Mesh, cam: &Camera) -> (SilhouetteMask, DepthBuffer) {
    let (width, height) = cam.intrinsics.image_size;
    let mut buffer = DepthBuffer::new(width, height);
    let tris: Vec<(u32, ScreenTri)> = mesh
        .faces
        .iter()
        .enumerate()
        .filter_map(|(f, face)| {
            let verts = face.map(|v| Vector3::from(mesh.vertices[v as usize]));
            ScreenTri::new(cam, verts).map(|t| (f as u32, t))
        })
        .collect();

    // Bin faces by the rows they touch so scanlines can be filled independently.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); height as usize];
    let mut bounds = Vec::with_capacity(tris.len());
    for (i, (_, tri)) in tris.iter().enumerate() {
        let b = tri.pixel_bounds(width, height);
        if let Some((_, y0, _, y1)) = b {
            for row in &mut rows[y0 as usize..=y1 as usize] {
                row.push(i);
            }
        }
        bounds.push(b);
    }

    let w = width as usize;
    if w > 0 {
        buffer
            .depth
            .par_chunks_mut(w)
            .zip(buffer.face.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (depth_row, face_row))| {
                for &i in &rows[y] {
                    let (face, tri) = &tris[i];
                    let (x0, _, x1, _) = bounds[i].unwrap();
                    for x in x0..=x1 {
                        if let Some(d) = tri.sample([x as f64, y as f64]) {
                            if d < depth_row[x as usize] {
                                depth_row[x as usize] = d;
                                face_row[x as usize] = Some(*face);
                            }
                        }
                    }
                }
            });
    }
    (buffer.mask(), buffer)
}

/// Pose the model and rasterize it through a camera at `params.cam_t`.
pub fn render(
    model: &SmplModel,
    params: &BodyParams,
    intrinsics: &Intrinsics,
) -> Result<(SilhouetteMask, DepthBuffer), ParamError> {
    let mesh = model.skin(params)?;
    Ok(rasterize(&mesh, &Camera::new(*intrinsics, params.cam_t)))
}
