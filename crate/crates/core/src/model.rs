//! The SMPL body model: assets, parameters and the skinning function.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::canonicalize_all;
use crate::skinning::PoseState;
use crate::smf::{self, Chunk, ChunkData, SmfError};

pub const NUM_VERTICES: usize = 6890;
pub const NUM_FACES: usize = 13776;
pub const NUM_JOINTS: usize = 24;
/// 23 body joints × 3 axis-angle components.
pub const POSE_DIM: usize = 69;
/// 23 body joints × 9 rotation-matrix entries.
pub const POSE_FEATURE_DIM: usize = 207;
/// Parent sentinel stored for the root joint.
pub const ROOT_PARENT: u32 = u32::MAX;

pub const REQUIRED_CHUNKS: [&str; 11] = [
    "v_template",
    "shapedirs",
    "posedirs",
    "joint_regressor",
    "skin_weights",
    "parents",
    "faces",
    "shape_prior_mean",
    "shape_prior_cov",
    "pose_prior_mean",
    "pose_prior_cov",
];

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] SmfError),
    #[error("missing chunk `{0}`")]
    MissingChunk(String),
    #[error("chunk `{chunk}` must have dtype {expected}")]
    WrongDtype { chunk: String, expected: &'static str },
    #[error("chunk `{chunk}` has shape {found:?}, expected {expected}")]
    ShapeMismatch {
        chunk: String,
        expected: String,
        found: Vec<u64>,
    },
    #[error("chunk `{chunk}` contains non-finite values")]
    NonFinite { chunk: String },
    #[error("chunk `{chunk}` violates an invariant: {detail}")]
    InvariantViolation { chunk: String, detail: String },
    #[error("chunk `{chunk}` is not symmetric positive definite")]
    NotSpd { chunk: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("{field} has length {found}, expected {expected}")]
    Dimension {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{field} contains a non-finite value")]
    NonFinite { field: &'static str },
}

/// Multivariate normal prior with a cached Cholesky factor of its covariance.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianPrior {
    /// Returns `None` when `cov` is not symmetric positive definite.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Option<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return None;
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return None;
        }
        let chol = Cholesky::new(cov.clone())?;
        if chol.l_dirty().diagonal().iter().any(|&d| !(d > 0.0)) {
            return None;
        }
        Some(Self {
            mean: DVector::from_vec(mean),
            cov,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor `L` with `Σ = L Lᵀ`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `(x − μ)ᵀ Σ⁻¹ (x − μ)` and its gradient `2 Σ⁻¹ (x − μ)`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let solved = self.chol.solve(&diff);
        (diff.dot(&solved), (solved * 2.0).as_slice().to_vec())
    }
}

/// Parameters of one body instance plus its camera translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Body joint rotations, 23 axis-angle triples.
    pub theta: Vec<f64>,
    /// Shape coefficients.
    pub beta: Vec<f64>,
    /// Global (root) rotation, axis-angle.
    pub gamma: [f64; 3],
    /// Camera translation in meters.
    pub cam_t: [f64; 3],
}

impl BodyParams {
    pub fn zeros(num_betas: usize) -> Self {
        Self {
            theta: vec![0.0; POSE_DIM],
            beta: vec![0.0; num_betas],
            gamma: [0.0; 3],
            cam_t: [0.0; 3],
        }
    }

    pub fn with_beta(beta: Vec<f64>) -> Self {
        Self {
            beta,
            ..Self::zeros(0)
        }
    }

    pub fn validate(&self, num_betas: usize) -> Result<(), ParamError> {
        if self.theta.len() != POSE_DIM {
            return Err(ParamError::Dimension {
                field: "theta",
                expected: POSE_DIM,
                found: self.theta.len(),
            });
        }
        if self.beta.len() != num_betas {
            return Err(ParamError::Dimension {
                field: "beta",
                expected: num_betas,
                found: self.beta.len(),
            });
        }
        let fields: [(&'static str, &[f64]); 4] = [
            ("theta", &self.theta),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("cam_t", &self.cam_t),
        ];
        for (field, values) in fields {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ParamError::NonFinite { field });
            }
        }
        Ok(())
    }

    /// Wrap every axis-angle sub-vector into `[0, 2π)`.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        canonicalize_all(&mut out.theta);
        canonicalize_all(&mut out.gamma);
        out
    }

    /// Axis-angle of joint `k` (0 = root, i.e. `gamma`).
    pub fn joint_rotation(&self, k: usize) -> Vector3<f64> {
        if k == 0 {
            Vector3::from(self.gamma)
        } else {
            Vector3::from_column_slice(&self.theta[3 * (k - 1)..3 * k])
        }
    }
}

/// A posed vertex array sharing the model's face list.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Arc<[[u32; 3]]>,
}

impl Mesh {
    /// Uniformly scale every vertex about the origin.
    pub fn scaled(&self, s: f64) -> Self {
        Mesh {
            vertices: self.vertices.iter().map(|v| v.map(|c| c * s)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]])
                .collect(),
            faces: self.faces.clone(),
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joints3D {
    pub joints: [[f64; 3]; NUM_JOINTS],
}

/// Immutable model assets. All arrays are row-major.
#[derive(Debug, Clone)]
pub struct SmplModel {
    pub(crate) v_template: Vec<[f64; 3]>,
    /// `[V, 3, B]`
    pub(crate) shapedirs: Vec<f64>,
    /// `[V, 3, 207]`
    pub(crate) posedirs: Vec<f64>,
    /// `[24, V]`
    pub(crate) joint_regressor: Vec<f64>,
    /// `[V, 24]`
    pub(crate) skin_weights: Vec<f64>,
    pub(crate) parents: [Option<usize>; NUM_JOINTS],
    pub(crate) faces: Arc<[[u32; 3]]>,
    pub(crate) shape_prior: GaussianPrior,
    pub(crate) pose_prior: GaussianPrior,
    pub(crate) num_betas: usize,
    // Derived at construction.
    pub(crate) regressor_rows: Vec<Vec<(usize, f64)>>,
    pub(crate) vertex_weights: Vec<Vec<(usize, f64)>>,
    pub(crate) joint_template: [Vector3<f64>; NUM_JOINTS],
    /// `[24, 3, B]`, the regressor applied to each shape direction.
    pub(crate) joint_shapedirs: Vec<f64>,
}

/// Raw arrays used to assemble a model in memory. Validated by
/// [`SmplModel::from_parts`].
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub v_template: Vec<f64>,
    pub shapedirs: Vec<f64>,
    pub posedirs: Vec<f64>,
    pub joint_regressor: Vec<f64>,
    pub skin_weights: Vec<f64>,
    /// Root uses [`ROOT_PARENT`].
    pub parents: Vec<u32>,
    pub faces: Vec<u32>,
    pub shape_prior_mean: Vec<f64>,
    pub shape_prior_cov: Vec<f64>,
    pub pose_prior_mean: Vec<f64>,
    pub pose_prior_cov: Vec<f64>,
    pub num_betas: usize,
}

impl ModelParts {
    pub fn to_chunks(&self) -> Vec<Chunk> {
        let v = NUM_VERTICES;
        let b = self.num_betas;
        vec![
            Chunk::f64("v_template", &[v, 3], self.v_template.clone()),
            Chunk::f64("shapedirs", &[v, 3, b], self.shapedirs.clone()),
            Chunk::f64("posedirs", &[v, 3, POSE_FEATURE_DIM], self.posedirs.clone()),
            Chunk::f64("joint_regressor", &[NUM_JOINTS, v], self.joint_regressor.clone()),
            Chunk::f64("skin_weights", &[v, NUM_JOINTS], self.skin_weights.clone()),
            Chunk::u32("parents", &[NUM_JOINTS], self.parents.clone()),
            Chunk::u32("faces", &[self.faces.len() / 3, 3], self.faces.clone()),
            Chunk::f64("shape_prior_mean", &[b], self.shape_prior_mean.clone()),
            Chunk::f64("shape_prior_cov", &[b, b], self.shape_prior_cov.clone()),
            Chunk::f64("pose_prior_mean", &[POSE_DIM], self.pose_prior_mean.clone()),
            Chunk::f64("pose_prior_cov", &[POSE_DIM, POSE_DIM], self.pose_prior_cov.clone()),
        ]
    }

    pub fn to_smf_bytes(&self) -> Vec<u8> {
        smf::write_container(&self.to_chunks())
    }
}

fn f64_chunk(chunks: &BTreeMap<String, Chunk>, name: &str, shape: &[Option<usize>]) -> Result<Vec<f64>, LoadError> {
    let chunk = chunks
        .get(name)
        .ok_or_else(|| LoadError::MissingChunk(name.to_owned()))?;
    check_shape(chunk, shape)?;
    match &chunk.data {
        ChunkData::F64(v) => {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(LoadError::NonFinite { chunk: name.to_owned() });
            }
            Ok(v.clone())
        }
        ChunkData::U32(_) => Err(LoadError::WrongDtype {
            chunk: name.to_owned(),
            expected: "f64",
        }),
    }
}

fn u32_chunk(chunks: &BTreeMap<String, Chunk>, name: &str, shape: &[Option<usize>]) -> Result<Vec<u32>, LoadError> {
    let chunk = chunks
        .get(name)
        .ok_or_else(|| LoadError::MissingChunk(name.to_owned()))?;
    check_shape(chunk, shape)?;
    match &chunk.data {
        ChunkData::U32(v) => Ok(v.clone()),
        ChunkData::F64(_) => Err(LoadError::WrongDtype {
            chunk: name.to_owned(),
            expected: "u32",
        }),
    }
}

/// `None` entries accept any non-zero extent.
fn check_shape(chunk: &Chunk, shape: &[Option<usize>]) -> Result<(), LoadError> {
    let ok = chunk.dims.len() == shape.len()
        && chunk
            .dims
            .iter()
            .zip(shape)
            .all(|(&d, s)| match s {
                Some(s) => d == *s as u64,
                None => d > 0,
            });
    if ok {
        Ok(())
    } else {
        let expected = shape
            .iter()
            .map(|s| s.map_or("*".to_owned(), |s| s.to_string()))
            .collect::<Vec<_>>()
            .join("×");
        Err(LoadError::ShapeMismatch {
            chunk: chunk.name.clone(),
            expected,
            found: chunk.dims.clone(),
        })
    }
}

fn violation(chunk: &str, detail: String) -> LoadError {
    LoadError::InvariantViolation {
        chunk: chunk.to_owned(),
        detail,
    }
}

impl SmplModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        Self::load_with_warnings(path).map(|(m, _)| m)
    }

    /// Load a model and report non-fatal findings such as unknown chunks.
    pub fn load_with_warnings(path: impl AsRef<Path>) -> Result<(Self, Vec<String>), LoadError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_smf_bytes(&bytes)
    }

    pub fn from_smf_bytes(bytes: &[u8]) -> Result<(Self, Vec<String>), LoadError> {
        let chunks = smf::read_container(bytes)?;
        let warnings = chunks
            .keys()
            .filter(|k| !REQUIRED_CHUNKS.contains(&k.as_str()))
            .map(|k| format!("ignoring unknown chunk `{k}`"))
            .collect();
        let v = Some(NUM_VERTICES);
        let j = Some(NUM_JOINTS);
        let shapedirs = f64_chunk(&chunks, "shapedirs", &[v, Some(3), None])?;
        let num_betas = chunks["shapedirs"].dims[2] as usize;
        let b = Some(num_betas);
        let parts = ModelParts {
            v_template: f64_chunk(&chunks, "v_template", &[v, Some(3)])?,
            shapedirs,
            posedirs: f64_chunk(&chunks, "posedirs", &[v, Some(3), Some(POSE_FEATURE_DIM)])?,
            joint_regressor: f64_chunk(&chunks, "joint_regressor", &[j, v])?,
            skin_weights: f64_chunk(&chunks, "skin_weights", &[v, j])?,
            parents: u32_chunk(&chunks, "parents", &[j])?,
            faces: u32_chunk(&chunks, "faces", &[Some(NUM_FACES), Some(3)])?,
            shape_prior_mean: f64_chunk(&chunks, "shape_prior_mean", &[b])?,
            shape_prior_cov: f64_chunk(&chunks, "shape_prior_cov", &[b, b])?,
            pose_prior_mean: f64_chunk(&chunks, "pose_prior_mean", &[Some(POSE_DIM)])?,
            pose_prior_cov: f64_chunk(&chunks, "pose_prior_cov", &[Some(POSE_DIM), Some(POSE_DIM)])?,
            num_betas,
        };
        Ok((Self::from_parts(parts)?, warnings))
    }

    /// Validate raw arrays and build the model.
    pub fn from_parts(p: ModelParts) -> Result<Self, LoadError> {
        let nv = NUM_VERTICES;
        let nb = p.num_betas;
        let expect_len = |chunk: &str, found: usize, want: usize| {
            if found == want {
                Ok(())
            } else {
                Err(LoadError::ShapeMismatch {
                    chunk: chunk.to_owned(),
                    expected: format!("{want} elements"),
                    found: vec![found as u64],
                })
            }
        };
        expect_len("v_template", p.v_template.len(), nv * 3)?;
        expect_len("shapedirs", p.shapedirs.len(), nv * 3 * nb)?;
        expect_len("posedirs", p.posedirs.len(), nv * 3 * POSE_FEATURE_DIM)?;
        expect_len("joint_regressor", p.joint_regressor.len(), NUM_JOINTS * nv)?;
        expect_len("skin_weights", p.skin_weights.len(), nv * NUM_JOINTS)?;
        expect_len("parents", p.parents.len(), NUM_JOINTS)?;
        expect_len("faces", p.faces.len(), NUM_FACES * 3)?;
        expect_len("shape_prior_mean", p.shape_prior_mean.len(), nb)?;
        expect_len("shape_prior_cov", p.shape_prior_cov.len(), nb * nb)?;
        expect_len("pose_prior_mean", p.pose_prior_mean.len(), POSE_DIM)?;
        expect_len("pose_prior_cov", p.pose_prior_cov.len(), POSE_DIM * POSE_DIM)?;
        if nb == 0 {
            return Err(violation("shapedirs", "at least one shape direction is required".into()));
        }

        let mut vertex_weights = Vec::with_capacity(nv);
        for (v, row) in p.skin_weights.chunks_exact(NUM_JOINTS).enumerate() {
            if row.iter().any(|&w| w < 0.0) {
                return Err(violation("skin_weights", format!("row {v} has a negative weight")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(violation("skin_weights", format!("row {v} sums to {sum}")));
            }
            vertex_weights.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, &w)| w > 0.0)
                    .map(|(k, &w)| (k, w))
                    .collect(),
            );
        }

        let mut parents = [None; NUM_JOINTS];
        for (k, &par) in p.parents.iter().enumerate() {
            if k == 0 {
                if par != ROOT_PARENT {
                    return Err(violation("parents", format!("root parent must be the sentinel {ROOT_PARENT}")));
                }
            } else if (par as usize) >= k {
                return Err(violation("parents", format!("joint {k} has parent {par}, not topologically sorted")));
            } else {
                parents[k] = Some(par as usize);
            }
        }

        if let Some(bad) = p.faces.iter().position(|&f| f as usize >= nv) {
            return Err(violation("faces", format!("face {} references vertex {}", bad / 3, p.faces[bad])));
        }
        let faces: Arc<[[u32; 3]]> = p.faces.chunks_exact(3).map(|f| [f[0], f[1], f[2]]).collect();

        let mut regressor_rows = Vec::with_capacity(NUM_JOINTS);
        for (k, row) in p.joint_regressor.chunks_exact(nv).enumerate() {
            let entries: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(i, &w)| (i, w))
                .collect();
            if entries.is_empty() {
                return Err(violation("joint_regressor", format!("row {k} is all zero")));
            }
            regressor_rows.push(entries);
        }

        let shape_prior = GaussianPrior::new(
            p.shape_prior_mean.clone(),
            DMatrix::from_row_slice(nb, nb, &p.shape_prior_cov),
        )
        .ok_or_else(|| LoadError::NotSpd {
            chunk: "shape_prior_cov".into(),
        })?;
        let pose_prior = GaussianPrior::new(
            p.pose_prior_mean.clone(),
            DMatrix::from_row_slice(POSE_DIM, POSE_DIM, &p.pose_prior_cov),
        )
        .ok_or_else(|| LoadError::NotSpd {
            chunk: "pose_prior_cov".into(),
        })?;

        let v_template: Vec<[f64; 3]> = p.v_template.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();

        let mut joint_template = [Vector3::zeros(); NUM_JOINTS];
        let mut joint_shapedirs = vec![0.0; NUM_JOINTS * 3 * nb];
        for (k, row) in regressor_rows.iter().enumerate() {
            for &(i, w) in row {
                joint_template[k] += Vector3::from(v_template[i]) * w;
                for c in 0..3 {
                    let src = &p.shapedirs[(i * 3 + c) * nb..(i * 3 + c + 1) * nb];
                    let dst = &mut joint_shapedirs[(k * 3 + c) * nb..(k * 3 + c + 1) * nb];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }

        Ok(SmplModel {
            v_template,
            shapedirs: p.shapedirs,
            posedirs: p.posedirs,
            joint_regressor: p.joint_regressor,
            skin_weights: p.skin_weights,
            parents,
            faces,
            shape_prior,
            pose_prior,
            num_betas: nb,
            regressor_rows,
            vertex_weights,
            joint_template,
            joint_shapedirs,
        })
    }

    pub fn num_betas(&self) -> usize {
        self.num_betas
    }

    pub fn num_vertices(&self) -> usize {
        self.v_template.len()
    }

    pub fn faces(&self) -> &Arc<[[u32; 3]]> {
        &self.faces
    }

    pub fn template(&self) -> Mesh {
        Mesh {
            vertices: self.v_template.clone(),
            faces: self.faces.clone(),
        }
    }

    pub fn parents(&self) -> &[Option<usize>; NUM_JOINTS] {
        &self.parents
    }

    pub fn shape_prior(&self) -> &GaussianPrior {
        &self.shape_prior
    }

    pub fn pose_prior(&self) -> &GaussianPrior {
        &self.pose_prior
    }

    /// Shape direction `b` at vertex `v`, meters per unit coefficient.
    pub fn shape_direction(&self, v: usize, b: usize) -> [f64; 3] {
        let nb = self.num_betas;
        [0, 1, 2].map(|c| self.shapedirs[(v * 3 + c) * nb + b])
    }

    pub fn skin_weight(&self, v: usize, joint: usize) -> f64 {
        self.skin_weights[v * NUM_JOINTS + joint]
    }

    pub fn regressor_weight(&self, joint: usize, v: usize) -> f64 {
        self.joint_regressor[joint * NUM_VERTICES + v]
    }

    pub fn zero_params(&self) -> BodyParams {
        BodyParams::zeros(self.num_betas)
    }

    /// Evaluate the skinning function for every vertex.
    pub fn skin(&self, params: &BodyParams) -> Result<Mesh, ParamError> {
        params.validate(self.num_betas)?;
        let state = PoseState::new(self, params);
        let vertices = (0..self.num_vertices()).map(|v| state.vertex(self, v).into()).collect();
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    pub fn regress_joints(&self, mesh: &Mesh) -> Result<Joints3D, ParamError> {
        if mesh.vertices.len() != NUM_VERTICES {
            return Err(ParamError::Dimension {
                field: "vertices",
                expected: NUM_VERTICES,
                found: mesh.vertices.len(),
            });
        }
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        for (k, row) in self.regressor_rows.iter().enumerate() {
            for &(i, w) in row {
                for c in 0..3 {
                    joints[k][c] += w * mesh.vertices[i][c];
                }
            }
        }
        Ok(Joints3D { joints })
    }

    /// Mesh in the canonical zero pose with zero global rotation.
    pub fn tpose_mesh(&self, beta: &[f64]) -> Result<Mesh, ParamError> {
        self.skin(&BodyParams::with_beta(beta.to_vec()))
    }

    /// Rest-pose joint locations of the shaped mesh.
    pub fn rest_joints(&self, beta: &[f64]) -> Result<Joints3D, ParamError> {
        self.regress_joints(&self.tpose_mesh(beta)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    #[test]
    fn prior_rejects_indefinite_matrix() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianPrior::new(vec![0.0, 0.0], cov).is_none());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianPrior::new(vec![0.0, 0.0], asym).is_none());
    }

    #[test]
    fn mahalanobis_identity() {
        let prior = GaussianPrior::new(vec![0.0; 3], DMatrix::identity(3, 3)).unwrap();
        let (v, g) = prior.mahalanobis_sq(&[2.0, 0.0, 0.0]);
        assert_eq!(v, 4.0);
        assert_eq!(g, vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn params_validation() {
        let m = fixture::model();
        let mut p = m.zero_params();
        assert!(p.validate(m.num_betas()).is_ok());
        p.beta.pop();
        assert!(matches!(m.skin(&p), Err(ParamError::Dimension { field: "beta", .. })));
        let mut p = m.zero_params();
        p.gamma[1] = f64::NAN;
        assert_eq!(p.validate(m.num_betas()), Err(ParamError::NonFinite { field: "gamma" }));
    }

    #[test]
    fn regress_rejects_wrong_vertex_count() {
        let m = fixture::model();
        let mut mesh = m.template();
        mesh.vertices.pop();
        assert!(m.regress_joints(&mesh).is_err());
    }

    #[test]
    fn bad_skin_weights_rejected() {
        let mut parts = fixture::parts(fixture::DEFAULT_SEED);
        for w in &mut parts.skin_weights[..NUM_JOINTS] {
            *w *= 0.9;
        }
        let err = SmplModel::from_parts(parts).unwrap_err();
        assert!(matches!(err, LoadError::InvariantViolation { ref chunk, .. } if chunk == "skin_weights"));
    }

    #[test]
    fn unsorted_parents_rejected() {
        let mut parts = fixture::parts(fixture::DEFAULT_SEED);
        parts.parents[3] = 5;
        let err = SmplModel::from_parts(parts).unwrap_err();
        assert!(matches!(err, LoadError::InvariantViolation { ref chunk, .. } if chunk == "parents"));
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let mut parts = fixture::parts(fixture::DEFAULT_SEED);
        parts.shape_prior_cov[0] = -1.0;
        let err = SmplModel::from_parts(parts).unwrap_err();
        assert!(matches!(err, LoadError::NotSpd { ref chunk } if chunk == "shape_prior_cov"));
    }
}
