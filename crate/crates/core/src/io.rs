//! On-disk formats: parameter JSON, DCM correspondence text, keypoint JSON,
//! Wavefront OBJ, PGM masks, and synthetic scene directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::correspondence::{CorrespondenceRecord, DenseCorrespondenceMap, Keypoints2D};
use crate::model::{BodyParams, Mesh, NUM_JOINTS};
use crate::raster::SilhouetteMask;
use crate::synth::SynthScene;

/// A parse failure inside one document.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct FormatError {
    pub line: Option<usize>,
    pub message: String,
}

impl FormatError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn whole(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }

    fn from_json(e: serde_json::Error) -> Self {
        Self {
            line: (e.line() > 0).then_some(e.line()),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("empty output path")]
    EmptyPath,
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if path.as_os_str().is_empty() {
        return Err(IoError::EmptyPath);
    }
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

fn with_path<T>(path: &Path, r: Result<T, FormatError>) -> Result<T, IoError> {
    r.map_err(|source| IoError::Format {
        path: path.to_owned(),
        source,
    })
}

// ---------------------------------------------------------------- params

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: [f64; 3],
    pub cam_t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Value>,
}

impl ParamsFile {
    pub fn new(params: &BodyParams, meta: Option<Value>) -> Self {
        Self {
            theta: params.theta.clone(),
            beta: params.beta.clone(),
            gamma: params.gamma,
            cam_t: params.cam_t,
            meta,
        }
    }

    pub fn params(&self) -> BodyParams {
        BodyParams {
            theta: self.theta.clone(),
            beta: self.beta.clone(),
            gamma: self.gamma,
            cam_t: self.cam_t,
        }
    }
}

pub fn parse_params(text: &str) -> Result<ParamsFile, FormatError> {
    let file: ParamsFile = serde_json::from_str(text).map_err(FormatError::from_json)?;
    if file.theta.len() != crate::model::POSE_DIM {
        return Err(FormatError::whole(format!(
            "theta has {} entries, expected {}",
            file.theta.len(),
            crate::model::POSE_DIM
        )));
    }
    Ok(file)
}

pub fn format_params(file: &ParamsFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("params serialize");
    s.push('\n');
    s
}

pub fn read_params(path: impl AsRef<Path>) -> Result<ParamsFile, IoError> {
    let path = path.as_ref();
    with_path(path, parse_params(&read_text(path)?))
}

pub fn write_params(path: impl AsRef<Path>, file: &ParamsFile) -> Result<(), IoError> {
    write_bytes(path.as_ref(), format_params(file).as_bytes())
}

// ---------------------------------------------------------------- DCM

pub const DCM_MAGIC: &str = "DCM1";

/// Parse DCM text. Records are `u v face b0 b1 b2`; blank lines and `#`
/// comments are skipped. Structural checks against a model happen later.
pub fn parse_dcm(text: &str) -> Result<DenseCorrespondenceMap, FormatError> {
    parse_dcm_lines(text).map(|(map, _)| map)
}

/// Parse and validate against a model with `num_faces` faces; record-level
/// failures carry the line the record came from.
pub fn parse_dcm_for_model(text: &str, num_faces: usize) -> Result<DenseCorrespondenceMap, FormatError> {
    let (map, line_of) = parse_dcm_lines(text)?;
    if map.is_empty() {
        return Err(FormatError::whole("correspondence file has no records"));
    }
    if let Err(e) = map.validate(num_faces) {
        let line = e.record_index().and_then(|i| line_of.get(i).copied());
        return Err(FormatError {
            line,
            message: e.to_string(),
        });
    }
    Ok(map)
}

fn parse_dcm_lines(text: &str) -> Result<(DenseCorrespondenceMap, Vec<usize>), FormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (n, header) = lines.next().ok_or_else(|| FormatError::whole("missing DCM1 header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let size = match fields.as_slice() {
        [magic, w, h] if *magic == DCM_MAGIC => match (w.parse::<u32>(), h.parse::<u32>()) {
            (Ok(w), Ok(h)) if w > 0 && h > 0 => (w, h),
            _ => return Err(FormatError::at(n, "image size must be two positive integers")),
        },
        _ => return Err(FormatError::at(n, "expected header `DCM1 <W> <H>`")),
    };
    let mut records = Vec::new();
    let mut line_of = Vec::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(FormatError::at(n, format!("expected 6 fields, found {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, FormatError> {
            match fields[i].parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(FormatError::at(n, format!("bad number `{}`", fields[i]))),
            }
        };
        let face = fields[2]
            .parse::<u32>()
            .map_err(|_| FormatError::at(n, format!("bad face index `{}`", fields[2])))?;
        records.push(CorrespondenceRecord {
            pixel: [num(0)?, num(1)?],
            face,
            bary: [num(3)?, num(4)?, num(5)?],
        });
        line_of.push(n);
    }
    Ok((DenseCorrespondenceMap::new(size, records), line_of))
}

/// Serialize with shortest round-trip float formatting, so parsing the
/// output reproduces every value exactly.
pub fn format_dcm(map: &DenseCorrespondenceMap) -> String {
    let mut s = format!("{DCM_MAGIC} {} {}\n", map.image_size.0, map.image_size.1);
    for r in &map.records {
        let _ = writeln!(
            s,
            "{:?} {:?} {} {:?} {:?} {:?}",
            r.pixel[0], r.pixel[1], r.face, r.bary[0], r.bary[1], r.bary[2]
        );
    }
    s
}

pub fn read_dcm(path: impl AsRef<Path>) -> Result<DenseCorrespondenceMap, IoError> {
    let path = path.as_ref();
    with_path(path, parse_dcm(&read_text(path)?))
}

pub fn read_dcm_for_model(path: impl AsRef<Path>, num_faces: usize) -> Result<DenseCorrespondenceMap, IoError> {
    let path = path.as_ref();
    with_path(path, parse_dcm_for_model(&read_text(path)?, num_faces))
}

pub fn write_dcm(path: impl AsRef<Path>, map: &DenseCorrespondenceMap) -> Result<(), IoError> {
    write_bytes(path.as_ref(), format_dcm(map).as_bytes())
}

// ---------------------------------------------------------------- keypoints

const BUNDLED_BODY25_MAP: &str = include_str!("../data/body25_to_smpl.txt");
pub const BODY25_LEN: usize = 25;

/// For each SMPL joint, the BODY_25 index it is read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointMap(pub [Option<usize>; NUM_JOINTS]);

impl JointMap {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_BODY25_MAP).expect("bundled joint map is valid")
    }

    /// Lines of `smpl_joint body25_index`, `#` comments allowed.
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut map = [None; NUM_JOINTS];
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| FormatError::at(i + 1, "expected two non-negative integers"))?;
            match nums.as_slice() {
                [j, b] if *j < NUM_JOINTS && *b < BODY25_LEN => {
                    if map[*j].replace(*b).is_some() {
                        return Err(FormatError::at(i + 1, format!("joint {j} mapped twice")));
                    }
                }
                _ => return Err(FormatError::at(i + 1, "joint or BODY_25 index out of range")),
            }
        }
        Ok(Self(map))
    }

    pub fn remap(&self, body25: &[[f64; 3]; BODY25_LEN]) -> Keypoints2D {
        let mut kp = Keypoints2D::absent();
        for (j, src) in self.0.iter().enumerate() {
            if let Some(b) = src {
                kp.joints[j] = body25[*b];
            }
        }
        kp
    }
}

#[derive(Serialize, Deserialize)]
struct CanonicalKeypoints {
    joints: Vec<[f64; 3]>,
}

/// Parse either the canonical `{"joints": [[x, y, c]; 24]}` form or an
/// OpenPose BODY_25 document (first person only), remapped through `map`.
pub fn parse_keypoints_with(text: &str, map: &JointMap) -> Result<Keypoints2D, FormatError> {
    let doc: Value = serde_json::from_str(text).map_err(FormatError::from_json)?;
    let kp = if doc.get("joints").is_some() {
        let c: CanonicalKeypoints = serde_json::from_value(doc).map_err(FormatError::from_json)?;
        let joints: [[f64; 3]; NUM_JOINTS] = c
            .joints
            .try_into()
            .map_err(|v: Vec<_>| FormatError::whole(format!("expected {NUM_JOINTS} joints, found {}", v.len())))?;
        Keypoints2D { joints }
    } else if let Some(people) = doc.get("people").and_then(Value::as_array) {
        let person = people
            .first()
            .ok_or_else(|| FormatError::whole("OpenPose document lists no people"))?;
        let flat: Vec<f64> = person
            .get("pose_keypoints_2d")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(FormatError::from_json)?
            .ok_or_else(|| FormatError::whole("person has no pose_keypoints_2d"))?;
        if flat.len() != 3 * BODY25_LEN {
            return Err(FormatError::whole(format!(
                "pose_keypoints_2d has {} values, expected {}",
                flat.len(),
                3 * BODY25_LEN
            )));
        }
        let mut body = [[0.0; 3]; BODY25_LEN];
        for (i, c) in flat.chunks_exact(3).enumerate() {
            body[i] = [c[0], c[1], c[2]];
        }
        map.remap(&body)
    } else {
        return Err(FormatError::whole("expected a `joints` array or an OpenPose `people` array"));
    };
    kp.validate().map_err(|e| FormatError::whole(e.to_string()))?;
    Ok(kp)
}

pub fn parse_keypoints(text: &str) -> Result<Keypoints2D, FormatError> {
    parse_keypoints_with(text, &JointMap::bundled())
}

pub fn format_keypoints(kp: &Keypoints2D) -> String {
    let doc = CanonicalKeypoints {
        joints: kp.joints.to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("keypoints serialize");
    s.push('\n');
    s
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<Keypoints2D, IoError> {
    let path = path.as_ref();
    with_path(path, parse_keypoints(&read_text(path)?))
}

pub fn write_keypoints(path: impl AsRef<Path>, kp: &Keypoints2D) -> Result<(), IoError> {
    write_bytes(path.as_ref(), format_keypoints(kp).as_bytes())
}

// ---------------------------------------------------------------- OBJ

pub fn format_obj(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.faces.len() * 20);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in mesh.faces.iter() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Parse the `v` and triangular `f` lines of an OBJ file; other statements
/// are ignored. Face entries may carry `/vt/vn` suffixes.
pub fn parse_obj(text: &str) -> Result<Mesh, FormatError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| FormatError::at(n, "bad vertex coordinate"))?;
                if xyz.len() != 3 {
                    return Err(FormatError::at(n, "vertex needs three coordinates"));
                }
                vertices.push([xyz[0], xyz[1], xyz[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| FormatError::at(n, "bad face index"))?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(FormatError::at(n, "faces must be triangles with 1-based indices"));
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if let Some(bad) = faces.iter().flatten().find(|&&v| v as usize >= vertices.len()) {
        return Err(FormatError::whole(format!("face references missing vertex {}", bad + 1)));
    }
    Ok(Mesh {
        vertices,
        faces: Arc::from(faces),
    })
}

pub fn export_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), IoError> {
    write_bytes(path.as_ref(), format_obj(mesh).as_bytes())
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh, IoError> {
    let path = path.as_ref();
    with_path(path, parse_obj(&read_text(path)?))
}

// ---------------------------------------------------------------- PGM

/// Binary 8-bit PGM, foreground 255.
pub fn format_pgm(mask: &SilhouetteMask) -> Vec<u8> {
    let (w, h) = mask.size();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.bits().iter().map(|b| if *b { 255u8 } else { 0 }));
    out
}

/// Plain-text PGM, foreground 1.
pub fn format_pgm_plain(mask: &SilhouetteMask) -> String {
    let (w, h) = mask.size();
    let mut s = format!("P2\n{w} {h}\n1\n");
    for row in mask.bits().chunks(w.max(1) as usize) {
        let line: Vec<&str> = row.iter().map(|b| if *b { "1" } else { "0" }).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Parse P5 (8- or 16-bit) or P2; any nonzero sample is foreground.
pub fn parse_pgm(bytes: &[u8]) -> Result<SilhouetteMask, FormatError> {
    let mut pos = 0usize;
    let mut token = || -> Option<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    let magic = token().ok_or_else(|| FormatError::whole("empty PGM"))?.to_vec();
    let mut header = [0u32; 3];
    for h in &mut header {
        *h = token()
            .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
            .ok_or_else(|| FormatError::whole("bad PGM header"))?;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(FormatError::whole("PGM maxval must be in 1..=65535"));
    }
    let n = w as usize * h as usize;
    let bits = match magic.as_slice() {
        b"P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            let width = if maxval > 255 { 2 } else { 1 };
            if data.len() < n * width {
                return Err(FormatError::whole(format!("PGM raster truncated: {} of {} bytes", data.len(), n * width)));
            }
            data[..n * width].chunks(width).map(|c| c.iter().any(|b| *b != 0)).collect()
        }
        b"P2" => {
            let mut bits = Vec::with_capacity(n);
            for _ in 0..n {
                let v: u32 = token()
                    .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
                    .ok_or_else(|| FormatError::whole("PGM raster truncated or malformed"))?;
                bits.push(v != 0);
            }
            bits
        }
        _ => return Err(FormatError::whole("not a P5 or P2 PGM file")),
    };
    SilhouetteMask::from_bits(w, h, bits).map_err(|e| FormatError::whole(e.to_string()))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<SilhouetteMask, IoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })?;
    with_path(path, parse_pgm(&bytes))
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &SilhouetteMask) -> Result<(), IoError> {
    write_bytes(path.as_ref(), &format_pgm(mask))
}

// ---------------------------------------------------------------- scenes

pub const SCENE_FILES: [&str; 5] = ["params.json", "corr.dcm", "keypoints.json", "mask.pgm", "manifest.json"];

/// Write a scene directory. `extra` is merged into the manifest next to the
/// scene spec (callers use it to echo their invocation).
pub fn write_scene(scene: &SynthScene, dir: impl AsRef<Path>, extra: Option<Value>) -> Result<(), IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_owned(),
        source,
    })?;
    write_params(dir.join("params.json"), &ParamsFile::new(&scene.gt_params, None))?;
    write_dcm(dir.join("corr.dcm"), &scene.corr)?;
    write_keypoints(dir.join("keypoints.json"), &scene.keypoints)?;
    write_pgm(dir.join("mask.pgm"), &scene.mask)?;
    let mut manifest = serde_json::json!({
        "seed": scene.spec.seed,
        "spec": scene.spec,
        "files": SCENE_FILES,
    });
    if let Some(extra) = extra {
        manifest["invocation"] = extra;
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialize");
    text.push('\n');
    write_bytes(&dir.join("manifest.json"), text.as_bytes())
}
